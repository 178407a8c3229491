// SPDX-License-Identifier: Apache-2.0
#include "cmer/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "cmer/errors.h"
#include "cmer/tape.h"

namespace cmer::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Storage = std::shared_ptr<const std::vector<double>>;

constexpr std::size_t kF64 = sizeof(double);

bool grad_needed(std::initializer_list<const Tensor*> inputs) {
    if (active_tape() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor record(const char* name, std::initializer_list<const Tensor*> inputs, Shape shape,
              std::vector<double> data, std::size_t saved_bytes, BackwardFn fn) {
    std::vector<const Tensor*> in(inputs);
    return active_tape()->record(name, in, std::move(shape), std::move(data), saved_bytes, std::move(fn));
}

Tensor constant(Shape shape, std::vector<double> data) { return Tensor(std::move(shape), std::move(data)); }

// C (+)= op(A) * op(B) where A is m x k and B is k x n after the optional transposes.
void gemm(const double* a, const double* b, double* c, Eigen::Index m, Eigen::Index k, Eigen::Index n,
          bool trans_a, bool trans_b) {
    Eigen::Map<RowMat> out(c, m, n);
    if (!trans_a && !trans_b) {
        out.noalias() += Eigen::Map<const RowMat>(a, m, k) * Eigen::Map<const RowMat>(b, k, n);
    } else if (!trans_a && trans_b) {
        out.noalias() += Eigen::Map<const RowMat>(a, m, k) * Eigen::Map<const RowMat>(b, n, k).transpose();
    } else if (trans_a && !trans_b) {
        out.noalias() += Eigen::Map<const RowMat>(a, k, m).transpose() * Eigen::Map<const RowMat>(b, k, n);
    } else {
        out.noalias() +=
            Eigen::Map<const RowMat>(a, k, m).transpose() * Eigen::Map<const RowMat>(b, n, k).transpose();
    }
}

// Number of times `b` repeats inside `a` under suffix broadcasting.
std::size_t broadcast_reps(const Shape& a, const Shape& b, const char* op) {
    std::size_t lead = 0;
    while (lead < b.size() && b[lead] == 1) ++lead;
    const std::size_t tail = b.size() - lead;
    bool ok = tail <= a.size();
    for (std::size_t i = 0; ok && i < tail; ++i) {
        ok = a[a.size() - tail + i] == b[lead + i];
    }
    if (!ok) {
        throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
    }
    return numel(a) / numel(b);
}

struct AxisLayout {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

AxisLayout axis_layout(const Shape& s, std::size_t axis, const char* op) {
    if (axis >= s.size()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                             shape_str(s));
    }
    AxisLayout l;
    for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
    l.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
    return l;
}

template <class Fwd, class Dfdx>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, bool save_output, Dfdx dfdx) {
    const auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    if (!grad_needed({&a})) return constant(a.shape(), std::move(y));
    // dfdx(x, y) -> derivative; only the chosen side is retained.
    if (save_output) {
        auto saved = std::make_shared<std::vector<double>>(y);
        return record(name, {&a}, a.shape(), std::move(y), saved->size() * kF64,
                      [saved, dfdx](std::span<const double> g, std::span<const std::span<double>> gin) {
                          const auto& yy = *saved;
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * dfdx(0.0, yy[i]);
                      });
    }
    Storage saved = a.storage();
    return record(name, {&a}, a.shape(), std::move(y), saved->size() * kF64,
                  [saved, dfdx](std::span<const double> g, std::span<const std::span<double>> gin) {
                      const auto& xx = *saved;
                      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * dfdx(xx[i], 0.0);
                  });
}

// Generic two-axis swap on a row-major array.
std::vector<double> swap_axes(std::span<const double> src, const Shape& shape, std::size_t ax0, std::size_t ax1) {
    const std::size_t rank = shape.size();
    Shape out_shape = shape;
    std::swap(out_shape[ax0], out_shape[ax1]);
    std::vector<std::size_t> out_strides(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    // Stride in the output for a unit step along each input axis.
    std::vector<std::size_t> step(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t oi = i == ax0 ? ax1 : (i == ax1 ? ax0 : i);
        step[i] = out_strides[oi];
    }
    std::vector<double> out(src.size());
    std::vector<std::size_t> idx(rank, 0);
    std::size_t pos = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
        out[pos] = src[flat];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            pos += step[d];
            if (idx[d] < shape[d]) break;
            pos -= step[d] * shape[d];
            idx[d] = 0;
        }
    }
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto mismatch = [&]() {
        return DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    };
    if (sa.size() < 2 || sb.size() < 2) throw mismatch();
    const std::size_t k = sa.back();
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t n = sb.back();
    if (sb[sb.size() - 2] != k) throw mismatch();

    std::size_t batch = 1;
    bool shared_rhs = sb.size() == 2;
    if (!shared_rhs) {
        if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
        batch = numel(sa) / (m * k);
    }
    const std::size_t rows = shared_rhs ? numel(sa) / k : m;

    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(numel(out_shape), 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < batch; ++i) {
        gemm(pa + i * m * k, pb + (shared_rhs ? 0 : i * k * n), out.data() + i * rows * n,
             static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n), false,
             false);
    }
    if (!grad_needed({&a, &b})) return constant(std::move(out_shape), std::move(out));

    // dA = dC B^T needs B; dB = A^T dC needs A.
    Storage saved_a = b.requires_grad() ? a.storage() : nullptr;
    Storage saved_b = a.requires_grad() ? b.storage() : nullptr;
    const std::size_t saved = (saved_a ? saved_a->size() : 0) + (saved_b ? saved_b->size() : 0);
    return record("matmul", {&a, &b}, std::move(out_shape), std::move(out), saved * kF64,
                  [saved_a, saved_b, batch, rows, k, n, shared_rhs](std::span<const double> g,
                                                                    std::span<const std::span<double>> gin) {
                      const auto R = static_cast<Eigen::Index>(rows);
                      const auto K = static_cast<Eigen::Index>(k);
                      const auto N = static_cast<Eigen::Index>(n);
                      for (std::size_t i = 0; i < batch; ++i) {
                          const double* gi = g.data() + i * rows * n;
                          const std::size_t b_off = shared_rhs ? 0 : i * k * n;
                          if (!gin[0].empty()) {
                              gemm(gi, saved_b->data() + b_off, gin[0].data() + i * rows * k, R, N, K, false, true);
                          }
                          if (!gin[1].empty()) {
                              gemm(saved_a->data() + i * rows * k, gi, gin[1].data() + b_off, K, R, N, true, false);
                          }
                      }
                  });
}

Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t reps = broadcast_reps(a.shape(), b.shape(), "add");
    const auto x = a.data();
    const auto y = b.data();
    const std::size_t nb = y.size();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] = x[r * nb + j] + y[j];
    if (!grad_needed({&a, &b})) return constant(a.shape(), std::move(out));
    return record("add", {&a, &b}, a.shape(), std::move(out), 0,
                  [reps, nb](std::span<const double> g, std::span<const std::span<double>> gin) {
                      if (!gin[0].empty())
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      if (!gin[1].empty())
                          for (std::size_t r = 0; r < reps; ++r)
                              for (std::size_t j = 0; j < nb; ++j) gin[1][j] += g[r * nb + j];
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const std::size_t reps = broadcast_reps(a.shape(), b.shape(), "sub");
    const auto x = a.data();
    const auto y = b.data();
    const std::size_t nb = y.size();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] = x[r * nb + j] - y[j];
    if (!grad_needed({&a, &b})) return constant(a.shape(), std::move(out));
    return record("sub", {&a, &b}, a.shape(), std::move(out), 0,
                  [reps, nb](std::span<const double> g, std::span<const std::span<double>> gin) {
                      if (!gin[0].empty())
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      if (!gin[1].empty())
                          for (std::size_t r = 0; r < reps; ++r)
                              for (std::size_t j = 0; j < nb; ++j) gin[1][j] -= g[r * nb + j];
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t reps = broadcast_reps(a.shape(), b.shape(), "mul");
    const auto x = a.data();
    const auto y = b.data();
    const std::size_t nb = y.size();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] = x[r * nb + j] * y[j];
    if (!grad_needed({&a, &b})) return constant(a.shape(), std::move(out));
    Storage saved_a = b.requires_grad() ? a.storage() : nullptr;
    Storage saved_b = a.requires_grad() ? b.storage() : nullptr;
    const std::size_t saved = (saved_a ? saved_a->size() : 0) + (saved_b ? saved_b->size() : 0);
    return record("mul", {&a, &b}, a.shape(), std::move(out), saved * kF64,
                  [saved_a, saved_b, reps, nb](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (std::size_t r = 0; r < reps; ++r) {
                          for (std::size_t j = 0; j < nb; ++j) {
                              const std::size_t i = r * nb + j;
                              if (!gin[0].empty()) gin[0][i] += g[i] * (*saved_b)[j];
                              if (!gin[1].empty()) gin[1][j] += g[i] * (*saved_a)[i];
                          }
                      }
                  });
}

Tensor scalar_mul(const Tensor& a, double c) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
    if (!grad_needed({&a})) return constant(a.shape(), std::move(out));
    return record("scalar_mul", {&a}, a.shape(), std::move(out), 0,
                  [c](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += c * g[i];
                  });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, true, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(
        "log", a, [](double x) { return std::log(x); }, false, [](double x, double) { return 1.0 / x; });
}

Tensor gelu(const Tensor& a) {
    return unary(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }, false,
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            return cdf + x * pdf;
        });
}

Tensor clamp_min(const Tensor& a) {
    return unary(
        "clamp_min", a, [](double x) { return x > 0.0 ? x : 0.0; }, true,
        [](double, double y) { return y > 0.0 ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    const AxisLayout l = axis_layout(a.shape(), axis, "softmax");
    const auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t j = 0; j < l.inner; ++j) {
            const std::size_t base = o * l.n * l.inner + j;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < l.n; ++i) mx = std::max(mx, x[base + i * l.inner]);
            double total = 0.0;
            for (std::size_t i = 0; i < l.n; ++i) {
                const double e = std::exp(x[base + i * l.inner] - mx);
                y[base + i * l.inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < l.n; ++i) y[base + i * l.inner] /= total;
        }
    }
    if (!grad_needed({&a})) return constant(a.shape(), std::move(y));
    auto saved = std::make_shared<std::vector<double>>(y);
    return record("softmax", {&a}, a.shape(), std::move(y), saved->size() * kF64,
                  [saved, l](std::span<const double> g, std::span<const std::span<double>> gin) {
                      const auto& yy = *saved;
                      for (std::size_t o = 0; o < l.outer; ++o) {
                          for (std::size_t j = 0; j < l.inner; ++j) {
                              const std::size_t base = o * l.n * l.inner + j;
                              double dot = 0.0;
                              for (std::size_t i = 0; i < l.n; ++i) {
                                  const std::size_t p = base + i * l.inner;
                                  dot += g[p] * yy[p];
                              }
                              for (std::size_t i = 0; i < l.n; ++i) {
                                  const std::size_t p = base + i * l.inner;
                                  gin[0][p] += yy[p] * (g[p] - dot);
                              }
                          }
                      }
                  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                             " do not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto xs = x.data();
    const auto gs = gamma.data();
    const auto bs = beta.data();
    std::vector<double> y(xs.size());
    std::vector<double> mean(rows), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xs.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += row[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        for (std::size_t i = 0; i < d; ++i) y[r * d + i] = (row[i] - mu) * is * gs[i] + bs[i];
    }
    if (!grad_needed({&x, &gamma, &beta})) return constant(x.shape(), std::move(y));

    const bool need_xhat = x.requires_grad() || gamma.requires_grad();
    Storage saved_x = need_xhat ? x.storage() : nullptr;
    auto saved_stats = need_xhat ? std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(
                                       std::move(mean), std::move(inv_std))
                                 : nullptr;
    Storage saved_gamma = x.requires_grad() ? gamma.storage() : nullptr;
    std::size_t saved = 0;
    if (need_xhat) saved += xs.size() + 2 * rows;
    if (saved_gamma) saved += d;
    return record("layer_norm", {&x, &gamma, &beta}, x.shape(), std::move(y), saved * kF64,
                  [saved_x, saved_stats, saved_gamma, rows, d](std::span<const double> g,
                                                               std::span<const std::span<double>> gin) {
                      std::vector<double> xhat(d), gg(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                          const double* gr = g.data() + r * d;
                          if (!gin[2].empty())
                              for (std::size_t i = 0; i < d; ++i) gin[2][i] += gr[i];
                          if (!saved_x) continue;
                          const double mu = saved_stats->first[r];
                          const double is = saved_stats->second[r];
                          for (std::size_t i = 0; i < d; ++i) xhat[i] = ((*saved_x)[r * d + i] - mu) * is;
                          if (!gin[1].empty())
                              for (std::size_t i = 0; i < d; ++i) gin[1][i] += gr[i] * xhat[i];
                          if (gin[0].empty()) continue;
                          double mean_gg = 0.0, mean_gg_xhat = 0.0;
                          for (std::size_t i = 0; i < d; ++i) {
                              gg[i] = gr[i] * (*saved_gamma)[i];
                              mean_gg += gg[i];
                              mean_gg_xhat += gg[i] * xhat[i];
                          }
                          mean_gg /= static_cast<double>(d);
                          mean_gg_xhat /= static_cast<double>(d);
                          for (std::size_t i = 0; i < d; ++i)
                              gin[0][r * d + i] += is * (gg[i] - mean_gg - xhat[i] * mean_gg_xhat);
                      }
                  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
        if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0));
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    for (const Tensor& p : parts) widths.push_back(p.shape()[axis] * inner);
    const std::size_t row = out_shape[axis] * inner;

    std::vector<double> out(numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.data() + o * widths[k], widths[k], out.data() + o * row + offset);
        offset += widths[k];
    }

    if (active_tape() == nullptr ||
        std::none_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); })) {
        return constant(std::move(out_shape), std::move(out));
    }
    std::vector<const Tensor*> inputs;
    for (const Tensor& p : parts) inputs.push_back(&p);
    return active_tape()->record(
        "concat", inputs, std::move(out_shape), std::move(out), 0,
        [widths, outer, row](std::span<const double> g, std::span<const std::span<double>> gin) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < widths.size(); ++k) {
                if (!gin[k].empty()) {
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < widths[k]; ++i)
                            gin[k][o * widths[k] + i] += g[o * row + off + i];
                }
                off += widths[k];
            }
        });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    std::vector<Tensor> v(parts);
    return concat(std::span<const Tensor>(v), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    const AxisLayout l = axis_layout(a.shape(), axis, "slice");
    if (length == 0 || start + length > l.n) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of bounds for axis of size " + std::to_string(l.n));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    const auto x = a.data();
    std::vector<double> out(numel(out_shape));
    const std::size_t chunk = length * l.inner;
    for (std::size_t o = 0; o < l.outer; ++o)
        std::copy_n(x.data() + o * l.n * l.inner + start * l.inner, chunk, out.data() + o * chunk);
    if (!grad_needed({&a})) return constant(std::move(out_shape), std::move(out));
    return record("slice", {&a}, std::move(out_shape), std::move(out), 0,
                  [l, start, chunk](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (std::size_t o = 0; o < l.outer; ++o)
                          for (std::size_t i = 0; i < chunk; ++i)
                              gin[0][o * l.n * l.inner + start * l.inner + i] += g[o * chunk + i];
                  });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    if (!grad_needed({&a})) return constant(std::move(shape), std::move(out));
    return record("reshape", {&a}, std::move(shape), std::move(out), 0,
                  [](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                  });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(a.shape()));
    return transpose(a, a.rank() - 2, a.rank() - 1);
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
    const Shape& s = a.shape();
    if (axis0 >= s.size() || axis1 >= s.size()) {
        throw DimensionError("transpose: axes out of range for " + shape_str(s));
    }
    Shape out_shape = s;
    std::swap(out_shape[axis0], out_shape[axis1]);
    std::vector<double> out = swap_axes(a.data(), s, axis0, axis1);
    if (!grad_needed({&a})) return constant(std::move(out_shape), std::move(out));
    Shape grad_shape = out_shape;
    return record("transpose", {&a}, std::move(out_shape), std::move(out), 0,
                  [grad_shape, axis0, axis1](std::span<const double> g, std::span<const std::span<double>> gin) {
                      const std::vector<double> back = swap_axes(g, grad_shape, axis0, axis1);
                      for (std::size_t i = 0; i < back.size(); ++i) gin[0][i] += back[i];
                  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids, const std::vector<bool>& frozen_rows) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
    if (ids.empty()) throw DimensionError("embedding_lookup: empty index list");
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    if (!frozen_rows.empty() && frozen_rows.size() != vocab) {
        throw DimensionError("embedding_lookup: frozen row mask has wrong length");
    }
    const auto t = table.data();
    std::vector<double> out(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= vocab) {
            throw DimensionError("embedding_lookup: index " + std::to_string(ids[r]) + " out of range for " +
                                 shape_str(table.shape()));
        }
        std::copy_n(t.data() + ids[r] * d, d, out.data() + r * d);
    }
    Shape out_shape{ids.size(), d};
    if (!grad_needed({&table})) return constant(std::move(out_shape), std::move(out));
    auto saved_ids = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
    auto frozen = std::make_shared<std::vector<bool>>(frozen_rows.begin(), frozen_rows.end());
    return record("embedding_lookup", {&table}, std::move(out_shape), std::move(out),
                  saved_ids->size() * sizeof(std::int64_t),
                  [saved_ids, frozen, d](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (std::size_t r = 0; r < saved_ids->size(); ++r) {
                          const std::size_t id = (*saved_ids)[r];
                          if (!frozen->empty() && (*frozen)[id]) continue;
                          for (std::size_t i = 0; i < d; ++i) gin[0][id * d + i] += g[r * d + i];
                      }
                  });
}

Tensor l2_normalize(const Tensor& a, std::size_t axis) {
    constexpr double kMinNorm = 1e-12;
    const AxisLayout l = axis_layout(a.shape(), axis, "l2_normalize");
    const auto x = a.data();
    std::vector<double> y(x.size());
    std::vector<double> norms(l.outer * l.inner);
    for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t j = 0; j < l.inner; ++j) {
            const std::size_t base = o * l.n * l.inner + j;
            double ss = 0.0;
            for (std::size_t i = 0; i < l.n; ++i) ss += x[base + i * l.inner] * x[base + i * l.inner];
            const double nrm = std::max(std::sqrt(ss), kMinNorm);
            norms[o * l.inner + j] = nrm;
            for (std::size_t i = 0; i < l.n; ++i) y[base + i * l.inner] = x[base + i * l.inner] / nrm;
        }
    }
    if (!grad_needed({&a})) return constant(a.shape(), std::move(y));
    auto saved = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(y, std::move(norms));
    const std::size_t saved_bytes = (saved->first.size() + saved->second.size()) * kF64;
    return record("l2_normalize", {&a}, a.shape(), std::move(y), saved_bytes,
                  [saved, l](std::span<const double> g, std::span<const std::span<double>> gin) {
                      const auto& yy = saved->first;
                      for (std::size_t o = 0; o < l.outer; ++o) {
                          for (std::size_t j = 0; j < l.inner; ++j) {
                              const std::size_t base = o * l.n * l.inner + j;
                              const double nrm = saved->second[o * l.inner + j];
                              double dot = 0.0;
                              for (std::size_t i = 0; i < l.n; ++i) dot += yy[base + i * l.inner] * g[base + i * l.inner];
                              for (std::size_t i = 0; i < l.n; ++i) {
                                  const std::size_t p = base + i * l.inner;
                                  gin[0][p] += (g[p] - yy[p] * dot) / nrm;
                              }
                          }
                      }
                  });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    if (!grad_needed({&a})) return Tensor::scalar(total);
    return record("sum", {&a}, Shape{}, {total}, 0,
                  [](std::span<const double> g, std::span<const std::span<double>> gin) {
                      for (double& v : gin[0]) v += g[0];
                  });
}

Tensor mean(const Tensor& a) { return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

}  // namespace cmer::ops
