// SPDX-License-Identifier: Apache-2.0
#include "cmer/tensor.h"

#include <sstream>

#include "cmer/errors.h"

namespace cmer {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

const TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
    if (!impl) throw StateError("use of undefined tensor");
    return *impl;
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (cmer::numel(shape) != data.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " elements");
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::make_shared<std::vector<double>>(std::move(data));
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(cmer::numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).data->size(); }

std::span<const double> Tensor::data() const { return *checked(impl_).data; }

std::span<double> Tensor::mutable_data() {
    checked(impl_);
    if (impl_->node) throw StateError("taped tensors are immutable");
    return *impl_->data;
}

std::shared_ptr<const std::vector<double>> Tensor::storage() const { return checked(impl_).data; }

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return (*impl_->data)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank mismatch for shape " + shape_str(s));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= s[axis]) throw DimensionError("index out of range for shape " + shape_str(s));
        flat = flat * s[axis] + i;
        ++axis;
    }
    return (*impl_->data)[flat];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

void Tensor::set_requires_grad(bool value) {
    checked(impl_);
    if (impl_->node) throw StateError("requires_grad can only be changed on leaves");
    impl_->requires_grad = value;
    if (!value) impl_->grad.reset();
}

const std::optional<std::vector<double>>& Tensor::grad() const { return checked(impl_).grad; }

void Tensor::zero_grad() {
    checked(impl_);
    impl_->grad = std::vector<double>(impl_->data->size(), 0.0);
}

void Tensor::clear_grad() {
    checked(impl_);
    impl_->grad.reset();
}

void Tensor::accumulate_grad(std::span<const double> g) {
    checked(impl_);
    if (g.size() != impl_->data->size()) throw DimensionError("gradient size mismatch");
    if (!impl_->grad) impl_->grad = std::vector<double>(g.size(), 0.0);
    auto& dst = *impl_->grad;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

const std::optional<NodeRef>& Tensor::node() const { return checked(impl_).node; }

Tensor Tensor::detach() const {
    checked(impl_);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return from_impl(std::move(impl));
}

Tensor Tensor::clone() const {
    checked(impl_);
    return Tensor(impl_->shape, *impl_->data, impl_->node ? false : impl_->requires_grad);
}

}  // namespace cmer
