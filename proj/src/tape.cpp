// SPDX-License-Identifier: Apache-2.0
#include "cmer/tape.h"

#include <atomic>

#include "cmer/errors.h"

namespace cmer {

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};
thread_local Tape* t_active_tape = nullptr;
thread_local std::vector<std::string> t_scope_stack;

bool scope_matches(const std::string& scope, const std::string& prefix) {
    if (scope.size() < prefix.size() || scope.compare(0, prefix.size(), prefix) != 0) return false;
    return scope.size() == prefix.size() || scope[prefix.size()] == '.';
}

}  // namespace

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

Tape::~Tape() {
    if (t_active_tape == this) t_active_tape = nullptr;
}

std::size_t Tape::node_for(const Tensor& t) {
    const auto& node = t.node();
    if (node) {
        if (node->tape_id != id_) throw StateError("tensor belongs to a different tape");
        return node->index;
    }
    auto [it, inserted] = leaf_nodes_.try_emplace(t.impl().get(), nodes_.size());
    if (inserted) nodes_.push_back({t.impl(), t.numel()});
    return it->second;
}

Tensor Tape::record(std::string op_name, std::span<const Tensor* const> inputs, Shape out_shape,
                    std::vector<double> out_data, std::size_t saved_bytes, BackwardFn backward) {
    if (consumed_) throw StateError("cannot record on a consumed tape");
    TapeEntry entry;
    entry.op_name = std::move(op_name);
    entry.saved_bytes = saved_bytes;
    entry.scope = current_module_scope();
    entry.input_ids.reserve(inputs.size());
    for (const Tensor* in : inputs) {
        if (in->requires_grad()) {
            entry.input_ids.emplace_back(node_for(*in));
        } else {
            entry.input_ids.emplace_back(std::nullopt);
        }
    }

    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(out_shape);
    impl->data = std::make_shared<std::vector<double>>(std::move(out_data));
    impl->requires_grad = true;
    impl->node = NodeRef{id_, nodes_.size()};
    nodes_.push_back({nullptr, impl->data->size()});

    entry.output_id = impl->node->index;
    total_saved_bytes_ += saved_bytes;
    entries_.push_back(std::move(entry));
    backward_fns_.push_back(std::move(backward));
    return Tensor::from_impl(std::move(impl));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("tape already consumed by a previous backward");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.node() || loss.node()->tape_id != id_) throw ContractError("loss is not on this tape");
    consumed_ = true;

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node()->index].assign(1, 1.0);

    std::vector<std::span<double>> input_grads;
    for (std::size_t e = entries_.size(); e-- > 0;) {
        const TapeEntry& entry = entries_[e];
        auto& gout = grads[entry.output_id];
        if (gout.empty()) continue;  // not reachable from loss
        input_grads.clear();
        for (const auto& id : entry.input_ids) {
            if (!id) {
                input_grads.emplace_back();
                continue;
            }
            auto& g = grads[*id];
            if (g.empty()) g.assign(nodes_[*id].size, 0.0);
            input_grads.emplace_back(g);
        }
        backward_fns_[e](gout, input_grads);
        std::vector<double>().swap(gout);
        backward_fns_[e] = nullptr;
    }

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].leaf && !grads[i].empty()) {
            Tensor::from_impl(nodes_[i].leaf).accumulate_grad(grads[i]);
        }
    }
    backward_fns_.clear();
    backward_fns_.shrink_to_fit();
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }

TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() { return t_active_tape; }

ModuleScope::ModuleScope(std::string name) { t_scope_stack.push_back(std::move(name)); }

ModuleScope::~ModuleScope() { t_scope_stack.pop_back(); }

std::string current_module_scope() {
    std::string out;
    for (const auto& s : t_scope_stack) {
        if (!out.empty()) out += '.';
        out += s;
    }
    return out;
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

MemoryReport tape_report(const Tape& tape) {
    MemoryReport report;
    for (const TapeEntry& e : tape.entries()) {
        report.total_saved_bytes += e.saved_bytes;
        report.bytes_by_op[e.op_name] += e.saved_bytes;
        const std::string scope = e.scope.empty() ? "(root)" : e.scope;
        report.bytes_by_scope[scope] += e.saved_bytes;
        report.entries_by_scope[scope] += 1;
    }
    report.entry_count = tape.entries().size();
    return report;
}

std::size_t count_entries_in_scope(const Tape& tape, const std::string& prefix) {
    std::size_t n = 0;
    for (const TapeEntry& e : tape.entries()) {
        if (scope_matches(e.scope, prefix)) ++n;
    }
    return n;
}

}  // namespace cmer
