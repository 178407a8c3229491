// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives.
//
// Every primitive computes its forward result eagerly. When a tape is active
// and at least one input requires grad, it pushes one TapeEntry whose
// saved_bytes is the size of everything its backward rule reads. The policy
// per primitive:
//
//   matmul          a if b requires grad, b if a requires grad
//   add, sub        nothing
//   mul             a if b requires grad, b if a requires grad
//   scalar_mul      nothing
//   exp             output
//   log             input
//   gelu            input
//   softmax         output
//   layer_norm      input, per-row mean and inverse std (if x or gamma needs
//                   grad), plus gamma if x needs grad
//   concat, slice, reshape, transpose, sum   nothing (shape metadata only)
//   embedding_lookup  the index list (8 bytes per index)
//   l2_normalize    output and per-slice norms
//   clamp_min       output
//
// Ops whose inputs all have requires_grad false push no entry at all.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmer/tensor.h"

namespace cmer::ops {

/// [.., m, k] x [k, n] -> [.., m, n], or batched [b.., m, k] x [b.., k, n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise; `b` may broadcast when its shape (ignoring leading 1s) is a
/// trailing suffix of `a`'s shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scalar_mul(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& a);
Tensor softmax(const Tensor& a, std::size_t axis);
/// Normalizes over the last axis; gamma and beta have shape [last].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);
/// Swaps two axes (default: the last two).
Tensor transpose(const Tensor& a);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
/// Gathers rows of a [V, d] table. Rows flagged in `frozen_rows` never
/// receive gradient.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids,
                        const std::vector<bool>& frozen_rows = {});
Tensor l2_normalize(const Tensor& a, std::size_t axis);
/// max(x, 0).
Tensor clamp_min(const Tensor& a);
/// Sum of all elements, shape [].
Tensor sum(const Tensor& a);

// Composites built from the primitives above.
Tensor mean(const Tensor& a);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);

}  // namespace cmer::ops
