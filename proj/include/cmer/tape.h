// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmer/tensor.h"

namespace cmer {

/// One recorded differentiable op.
///
/// saved_bytes counts every array the backward closure of this entry reads:
/// exactly the activations (and operands) retained between forward and
/// backward. input_ids holds a node handle for each input that requires grad
/// and nullopt for constants.
struct TapeEntry {
    std::string op_name;
    std::vector<std::optional<std::size_t>> input_ids;
    std::size_t output_id = 0;
    std::size_t saved_bytes = 0;
    std::string scope;
};

/// Receives the output gradient and writes (accumulates) input gradients.
/// input_grads[k] is empty when input k needs no gradient.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const std::span<double>> input_grads)>;

/// Ordered record of executed differentiable ops.
///
/// A tape is created at the start of a training step, made active with a
/// TapeScope, consumed by exactly one backward() and then dropped.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    const std::vector<TapeEntry>& entries() const { return entries_; }
    std::size_t total_saved_bytes() const { return total_saved_bytes_; }
    bool consumed() const { return consumed_; }

    /// Records an op. `inputs` may contain constants; the output requires grad.
    Tensor record(std::string op_name, std::span<const Tensor* const> inputs, Shape out_shape,
                  std::vector<double> out_data, std::size_t saved_bytes, BackwardFn backward);

    /// Seeds d(loss)/d(loss) = 1 and runs every entry in reverse order.
    void backward(const Tensor& loss);

private:
    std::size_t node_for(const Tensor& t);

    struct Node {
        std::shared_ptr<TensorImpl> leaf;  // null for op outputs
        std::size_t size = 0;
    };

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::unordered_map<const TensorImpl*, std::size_t> leaf_nodes_;
    std::vector<TapeEntry> entries_;
    std::vector<BackwardFn> backward_fns_;
    std::size_t total_saved_bytes_ = 0;
    bool consumed_ = false;
};

/// Makes a tape the thread's active tape for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

/// Tags entries recorded inside it with a dotted module path ("vision.block").
class ModuleScope {
public:
    explicit ModuleScope(std::string name);
    ~ModuleScope();
    ModuleScope(const ModuleScope&) = delete;
    ModuleScope& operator=(const ModuleScope&) = delete;
};

std::string current_module_scope();

void backward(const Tensor& loss, Tape& tape);

struct MemoryReport {
    std::size_t total_saved_bytes = 0;
    std::size_t entry_count = 0;
    std::map<std::string, std::size_t> bytes_by_op;
    std::map<std::string, std::size_t> bytes_by_scope;
    std::map<std::string, std::size_t> entries_by_scope;
};

MemoryReport tape_report(const Tape& tape);

/// Number of entries whose scope equals `prefix` or starts with `prefix + "."`.
std::size_t count_entries_in_scope(const Tape& tape, const std::string& prefix);

}  // namespace cmer
