// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "cmer/tensor.h"

namespace cmer {

/// Seeded 64-bit Mersenne Twister with the draws the project needs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0);
    double normal(double mean = 0.0, double stddev = 1.0);
    /// Normal draw redrawn until it lies within two standard deviations.
    double truncated_normal(double stddev);
    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    Tensor truncated_normal_tensor(Shape shape, double stddev, bool requires_grad = false);
    Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);
    Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false);

    std::string state() const;
    void set_state(const std::string& state);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Mixes several integers into one seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace cmer
