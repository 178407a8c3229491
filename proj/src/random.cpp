// SPDX-License-Identifier: Apache-2.0
#include "cmer/random.h"

#include <cmath>
#include <sstream>

#include "cmer/errors.h"

namespace cmer {

double Rng::uniform(double lo, double hi) {
    // 53 random mantissa bits; independent of the standard library's distribution code.
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

double Rng::normal(double mean, double stddev) {
    // Box-Muller on our own uniforms so draws are identical across standard libraries.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::truncated_normal(double stddev) {
    for (;;) {
        const double z = normal();
        if (std::abs(z) <= 2.0) return z * stddev;
    }
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    for (;;) {
        const std::uint64_t r = engine_();
        if (r < limit) return r % n;
    }
}

Tensor Rng::truncated_normal_tensor(Shape shape, double stddev, bool requires_grad) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = truncated_normal(stddev);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Rng::normal_tensor(Shape shape, double stddev, bool requires_grad) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi, bool requires_grad) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw ParseError("invalid RNG state");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(a) ^ b) ^ c);
}

}  // namespace cmer
