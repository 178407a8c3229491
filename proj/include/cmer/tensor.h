// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cmer {

/// Dimension sizes, outermost first. An empty shape denotes a scalar.
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Handle to a node on a specific tape.
struct NodeRef {
    std::uint64_t tape_id = 0;
    std::size_t index = 0;
};

struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;
    std::optional<NodeRef> node;
};

/// Dense row-major array of doubles.
///
/// Tensor is a cheap handle: copies share storage. Leaves (parameters, inputs)
/// are created by the factories below; every other tensor is produced by an
/// op in ops.h. An op output carries a NodeRef only when it was recorded on an
/// active tape, which in turn only happens when some input requires grad.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    std::size_t bytes() const { return numel() * sizeof(double); }

    std::span<const double> data() const;
    /// Writable view for leaves only; taped outputs are immutable.
    std::span<double> mutable_data();
    std::shared_ptr<const std::vector<double>> storage() const;

    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    /// Only valid on leaves.
    void set_requires_grad(bool value);

    const std::optional<std::vector<double>>& grad() const;
    void zero_grad();
    void clear_grad();
    void accumulate_grad(std::span<const double> g);

    const std::optional<NodeRef>& node() const;

    /// Same data, no grad, no tape membership.
    Tensor detach() const;
    /// Deep copy of data; inherits requires_grad only for leaves.
    Tensor clone() const;

    bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

    /// Internal: wraps an op result already registered on a tape.
    static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

private:
    std::shared_ptr<TensorImpl> impl_;
};

}  // namespace cmer
