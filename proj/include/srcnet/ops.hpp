/*
 * Copyright (c) 2026 The srcnet Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "srcnet/tensor.hpp"

namespace srcnet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + " input, got " + shape_str(s));
  }
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

inline Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast plan;
  plan.out.assign(rank, 1);
  plan.a_stride.assign(rank, 0);
  plan.b_stride.assign(rank, 0);
  std::size_t sa = 1;
  std::size_t sb = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    const std::size_t axis = rank - 1 - r;
    const std::size_t ea = r < a.size() ? a[a.size() - 1 - r] : 1;
    const std::size_t eb = r < b.size() ? b[b.size() - 1 - r] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " +
                           shape_str(a) + " with " + shape_str(b) +
                           " at axis " + std::to_string(axis));
    }
    plan.out[axis] = std::max(ea, eb);
    plan.a_stride[axis] = ea == 1 ? 0 : sa;
    plan.b_stride[axis] = eb == 1 ? 0 : sb;
    sa *= ea;
    sb *= eb;
  }
  return plan;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output. Adjacent
// axes that are laid out contiguously in both operands are walked as one.
template <typename F>
void for_each_broadcast(const Broadcast& plan, F&& fn) {
  const std::size_t total = shape_numel(plan.out);
  if (total == 0) return;
  if (plan.out.empty()) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  Shape out{plan.out[0]};
  std::vector<std::size_t> astr{plan.a_stride[0]};
  std::vector<std::size_t> bstr{plan.b_stride[0]};
  for (std::size_t axis = 1; axis < plan.out.size(); ++axis) {
    const std::size_t e = plan.out[axis], as = plan.a_stride[axis], bs = plan.b_stride[axis];
    if (e == 1) continue;
    if (out.back() == 1 || (astr.back() == as * e && bstr.back() == bs * e)) {
      out.back() *= e;
      astr.back() = as;
      bstr.back() = bs;
    } else {
      out.push_back(e);
      astr.push_back(as);
      bstr.push_back(bs);
    }
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t as = astr[rank - 1];
  const std::size_t bs = bstr[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(o + j, ia + j * as, ib + j * bs);
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      ++counter[axis];
      ia += astr[axis];
      ib += bstr[axis];
      if (counter[axis] < out[axis]) break;
      ia -= counter[axis] * astr[axis];
      ib -= counter[axis] * bstr[axis];
      counter[axis] = 0;
    }
  }
}

// f(a, b) -> value; df(a, b) -> pair of partial derivatives.
template <typename T, typename F, typename DF>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f,
                 DF df) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    Buffer<T> out(n);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    return make_result<T>(a.shape(), std::move(out), {a, b},
                          [a, b, df](std::span<const T> g) {
                            auto ga = grad_sink(a);
                            auto gb = grad_sink(b);
                            const auto av = a.data();
                            const auto bv = b.data();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const auto [da, db] = df(av[i], bv[i]);
                              if (!ga.empty()) ga[i] += g[i] * da;
                              if (!gb.empty()) gb[i] += g[i] * db;
                            }
                          });
  }
  auto plan = plan_broadcast(op, a.shape(), b.shape());
  Buffer<T> out(shape_numel(plan.out));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = f(av[ia], bv[ib]);
  });
  Shape out_shape = plan.out;
  return make_result<T>(std::move(out_shape), std::move(out), {a, b},
                        [a, b, df, plan](std::span<const T> g) {
                          auto ga = grad_sink(a);
                          auto gb = grad_sink(b);
                          const auto av = a.data();
                          const auto bv = b.data();
                          for_each_broadcast(plan, [&](std::size_t o,
                                                       std::size_t ia,
                                                       std::size_t ib) {
                            const auto [da, db] = df(av[ia], bv[ib]);
                            if (!ga.empty()) ga[ia] += g[o] * da;
                            if (!gb.empty()) gb[ib] += g[o] * db;
                          });
                        });
}

// f(x) -> value; df(x) -> derivative.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const std::size_t n = x.numel();
  Buffer<T> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x},
                        [x, df](std::span<const T> g) {
                          auto gx = grad_sink(x);
                          const auto xv = x.data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            gx[i] += g[i] * df(xv[i]);
                          }
                        });
}

// Splits a shape around `axis` into (outer, extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(
    const Shape& s, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting).

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<T, T>{T{1}, T{1}}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<T, T>{T{1}, T{-1}}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y) { return std::pair<T, T>{y, x}; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y) { return std::pair<T, T>{T{1} / y, -x / (y * y)}; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

/// scale * x + shift
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  return detail::unary<T>(
      x, [=](T v) { return scale * v + shift; }, [=](T) { return scale; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return affine(x, factor, T{0});
}

/// 1 - x
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return affine(x, T{-1}, T{1});
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::sqrt(v); },
      [](T v) { return T{0.5} / std::sqrt(v); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v * v; }, [](T v) { return T{2} * v; });
}

/// x^p for a constant exponent; the derivative is taken as 0 when p == 0.
template <typename T>
Tensor<T> pow(const Tensor<T>& x, T p) {
  return detail::unary<T>(
      x, [=](T v) { return p == T{0} ? T{1} : std::pow(v, p); },
      [=](T v) { return p == T{0} ? T{0} : p * std::pow(v, p - T{1}); });
}

/// max(x, lo); the gradient is zero where the clamp is active.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return detail::unary<T>(
      x, [=](T v) { return v < lo ? lo : v; },
      [=](T v) { return v < lo ? T{0} : T{1}; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto s = [](T v) {
    if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
    const T e = std::exp(v);
    return e / (T{1} + e);
  };
  return detail::unary<T>(x, s, [s](T v) {
    const T y = s(v);
    return y * (T{1} - y);
  });
}

/// Exact (erf-based) Gaussian error linear unit.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Vec> xv(x.data().data(), n);
  // Phi(x) is kept for the backward pass; erf dominates the cost.
  auto phi = std::make_shared<Buffer<T>>(x.numel());
  Eigen::Map<Vec> ph(phi->data(), n);
  ph = T{0.5} * (T{1} + (xv * inv_sqrt2).erf());
  Buffer<T> out(x.numel());
  Eigen::Map<Vec>(out.data(), n) = xv * ph;
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x, phi, n, k = inv_sqrt2pi](std::span<const T> g) {
    Eigen::Map<Vec> gx(detail::grad_sink(x).data(), n);
    Eigen::Map<const Vec> xv(x.data().data(), n);
    Eigen::Map<const Vec> gv(g.data(), n);
    Eigen::Map<const Vec> ph(phi->data(), n);
    gx += gv * (ph + xv * k * (T{-0.5} * xv.square()).exp());
  });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  return detail::make_result<T>(Shape{1}, {total}, {x},
                                [x](std::span<const T> g) {
                                  auto gx = detail::grad_sink(x);
                                  for (auto& v : gx) v += g[0];
                                });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Sum along one axis; the axis is kept with extent 1.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw DimensionError("sum_axis: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
  }
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  Buffer<T> out(outer * inner, T{0});
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += xv[(o * n + k) * inner + i];
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [x, outer, n, inner](std::span<const T> g) {
        auto gx = detail::grad_sink(x);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i)
              gx[(o * n + k) * inner + i] += g[o * inner + i];
      });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  return scale(sum_axis(x, axis), T{1} / static_cast<T>(x.size(axis)));
}

/// Euclidean norm of all elements.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  return sqrt(sum(square(x)));
}

/// Root mean square of all elements; the subgradient at an all-zero input
/// is taken as zero.
template <typename T>
Tensor<T> rms(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v * v;
  const T value = std::sqrt(acc / static_cast<T>(x.numel()));
  return detail::make_result<T>(Shape{1}, {value}, {x}, [x, value](std::span<const T> g) {
    if (value == T{0}) return;
    auto gx = detail::grad_sink(x);
    const auto xv = x.data();
    const T factor = g[0] / (static_cast<T>(x.numel()) * value);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * xv[i];
  });
}

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
  }
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Arr>;
  using CMap = Eigen::Map<const Arr>;
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  if (inner == 1) {
    // Rows are contiguous: one outer x n block, normalized along rows.
    CMap in(xv.data(), outer, n);
    Map y(out.data(), outer, n);
    y = (in.colwise() - in.rowwise().maxCoeff()).exp();
    y.colwise() /= y.rowwise().sum();
  }
  // Otherwise each outer slice is an n x inner block; normalize its columns.
  for (std::size_t o = 0; inner != 1 && o < outer; ++o) {
    CMap in(xv.data() + o * n * inner, n, inner);
    Map y(out.data() + o * n * inner, n, inner);
    y = (in.rowwise() - in.colwise().maxCoeff()).exp();
    y.rowwise() /= y.colwise().sum();
  }
  auto cache = std::make_shared<Buffer<T>>(out);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [x, cache, outer = outer, n = n, inner = inner](std::span<const T> g) {
        auto gx = detail::grad_sink(x);
        if (inner == 1) {
          CMap y(cache->data(), outer, n);
          CMap go(g.data(), outer, n);
          Map(gx.data(), outer, n) += y * (go.colwise() - (go * y).rowwise().sum());
          return;
        }
        for (std::size_t o = 0; o < outer; ++o) {
          CMap y(cache->data() + o * n * inner, n, inner);
          CMap go(g.data() + o * n * inner, n, inner);
          Map dx(gx.data() + o * n * inner, n, inner);
          dx += y * (go.rowwise() - (go * y).colwise().sum());
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  Buffer<T> data(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(data), {x},
                                [x](std::span<const T> g) {
                                  auto gx = detail::grad_sink(x);
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    gx[i] += g[i];
                                });
}

/// Reorders axes: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.dim();
  if (perm.size() != rank) {
    throw DimensionError("permute: permutation of length " +
                         std::to_string(perm.size()) + " for " +
                         shape_str(x.shape()));
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t a = rank; a-- > 1;) in_stride[a - 1] = in_stride[a] * x.size(a);
  Shape out_shape(rank);
  std::vector<bool> used(rank, false);
  detail::Broadcast plan;  // reused as (out shape, source stride) walker
  plan.a_stride.resize(rank);
  plan.b_stride.assign(rank, 0);
  for (std::size_t i = 0; i < rank; ++i) {
    if (perm[i] >= rank || used[perm[i]]) {
      throw DimensionError("permute: invalid permutation");
    }
    used[perm[i]] = true;
    out_shape[i] = x.size(perm[i]);
    plan.a_stride[i] = in_stride[perm[i]];
  }
  plan.out = out_shape;
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia,
                                       std::size_t) { out[o] = xv[ia]; });
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x},
                                [x, plan](std::span<const T> g) {
                                  auto gx = detail::grad_sink(x);
                                  detail::for_each_broadcast(
                                      plan, [&](std::size_t o, std::size_t ia,
                                                std::size_t) { gx[ia] += g[o]; });
                                });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end) {
  if (axis >= x.dim() || begin > end || end > x.size(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Buffer<T> out(outer * len * inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * n + begin) * inner, len * inner,
                out.begin() + o * len * inner);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [x, outer, n, inner, begin, len](std::span<const T> g) {
        auto gx = detail::grad_sink(x);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < len * inner; ++j)
            gx[(o * n + begin) * inner + j] += g[o * len * inner + j];
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t a = 0; ok && a < s.size(); ++a) ok = a == axis || s[a] == ref[a];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " does not match " +
                           shape_str(ref) + " off axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const auto [outer, unused, inner] = detail::split_axis(ref, axis);
  (void)unused;
  Buffer<T> out(outer * total * inner);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.size(axis);
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len * inner, len * inner,
                  out.begin() + (o * total + offset) * inner);
    offset += len;
  }
  return detail::make_result_n<T>(
      std::move(out_shape), std::move(out), parts,
      [parts, axis, outer = outer, inner = inner, total](std::span<const T> g) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t len = p.size(axis);
          auto gp = detail::grad_sink(p);
          if (!gp.empty()) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < len * inner; ++j)
                gp[o * len * inner + j] += g[(o * total + offset) * inner + j];
          }
          offset += len;
        }
      });
}

// ---------------------------------------------------------------------------
// Dense algebra.

/// (n x k) * (k x m)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t n = a.size(0);
  const std::size_t k = a.size(1);
  const std::size_t m = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner extents differ (axis 1 of " +
                         shape_str(a.shape()) + " vs axis 0 of " +
                         shape_str(b.shape()) + ")");
  }
  Buffer<T> out(n * m);
  detail::MapMat<T>(out.data(), n, m).noalias() =
      detail::CMapMat<T>(a.data().data(), n, k) *
      detail::CMapMat<T>(b.data().data(), k, m);
  return detail::make_result<T>(
      Shape{n, m}, std::move(out), {a, b}, [a, b, n, k, m](std::span<const T> g) {
        detail::CMapMat<T> G(g.data(), n, m);
        if (auto ga = detail::grad_sink(a); !ga.empty())
          detail::MapMat<T>(ga.data(), n, k).noalias() +=
              G * detail::CMapMat<T>(b.data().data(), k, m).transpose();
        if (auto gb = detail::grad_sink(b); !gb.empty())
          detail::MapMat<T>(gb.data(), k, m).noalias() +=
              detail::CMapMat<T>(a.data().data(), n, k).transpose() * G;
      });
}

/// Rows of x (n x in) mapped by weight (out x in) plus bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::require_rank("linear", x.shape(), 2);
  detail::require_rank("linear", weight.shape(), 2);
  const std::size_t n = x.size(0);
  const std::size_t in = x.size(1);
  const std::size_t out_f = weight.size(0);
  if (weight.size(1) != in || bias.numel() != out_f) {
    throw DimensionError("linear: input " + shape_str(x.shape()) +
                         ", weight " + shape_str(weight.shape()) + ", bias " +
                         shape_str(bias.shape()) + " do not conform");
  }
  Buffer<T> out(n * out_f);
  detail::MapMat<T> Y(out.data(), n, out_f);
  Y.noalias() = detail::CMapMat<T>(x.data().data(), n, in) *
                detail::CMapMat<T>(weight.data().data(), out_f, in).transpose();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < out_f; ++c) Y(r, c) += bv[c];
  return detail::make_result<T>(
      Shape{n, out_f}, std::move(out), {x, weight, bias},
      [x, weight, bias, n, in, out_f](std::span<const T> g) {
        detail::CMapMat<T> G(g.data(), n, out_f);
        if (auto gx = detail::grad_sink(x); !gx.empty())
          detail::MapMat<T>(gx.data(), n, in).noalias() +=
              G * detail::CMapMat<T>(weight.data().data(), out_f, in);
        if (auto gw = detail::grad_sink(weight); !gw.empty())
          detail::MapMat<T>(gw.data(), out_f, in).noalias() +=
              G.transpose() * detail::CMapMat<T>(x.data().data(), n, in);
        if (auto gb = detail::grad_sink(bias); !gb.empty())
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < out_f; ++c) gb[c] += G(r, c);
      });
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW, zero padding).

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;   // per group for channels
  std::size_t kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;
};

// Output columns [lo, hi) whose input column ox * stride + j - padding lies
// inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  const long P = static_cast<long>(g.padding), S = static_cast<long>(g.stride);
  const long J = static_cast<long>(j), W = static_cast<long>(g.width);
  const long lo = P > J ? (P - J + S - 1) / S : 0;
  long hi = W - 1 + P - J >= 0 ? (W - 1 + P - J) / S + 1 : 0;
  hi = std::clamp(hi, lo, static_cast<long>(g.out_w));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols[(c*kh + i)*kw + j][oy*ow + ox] = img[c][oy*s - p + i][ox*s - p + j]
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t S = g.stride;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        T* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * plane;
        const auto [lo, hi] = valid_columns(g, j);
        const long off = static_cast<long>(j) - static_cast<long>(g.padding);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + oy * g.out_w;
          const long y = static_cast<long>(oy * S + i) - static_cast<long>(g.padding);
          if (y < 0 || y >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          std::fill(dst, dst + lo, T{0});
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[static_cast<long>(ox * S) + off];
          std::fill(dst + hi, dst + g.out_w, T{0});
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t S = g.stride;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const T* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * plane;
        const auto [lo, hi] = valid_columns(g, j);
        const long off = static_cast<long>(j) - static_cast<long>(g.padding);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * S + i) - static_cast<long>(g.padding);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox * S) + off] += src[ox];
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

// Copies one H x W plane into a zero-bordered (H + 2P) x (W + 2P) buffer.
template <typename T>
void pad_plane(const T* src, std::size_t H, std::size_t W, std::size_t P, T* dst) {
  const std::size_t PW = W + 2 * P;
  std::fill(dst, dst + (H + 2 * P) * PW, T{0});
  for (std::size_t y = 0; y < H; ++y) std::copy_n(src + y * W, W, dst + (y + P) * PW + P);
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, const ConvGeometry& g,
                           std::size_t batch) {
  const std::size_t C = x.size(1);
  const std::size_t H = g.height, W = g.width, OH = g.out_h, OW = g.out_w;
  const std::size_t KH = g.kernel_h, KW = g.kernel_w, S = g.stride, P = g.padding;
  const std::size_t PW = W + 2 * P;
  Buffer<T> out(batch * C * OH * OW);
  Buffer<T> padded((H + 2 * P) * PW);
  const auto xv = x.data();
  const auto wv = weight.data();
  const bool has_bias = bias.defined();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      pad_plane(xv.data() + (n * C + c) * H * W, H, W, P, padded.data());
      const T* k = wv.data() + c * KH * KW;
      T* dst = out.data() + (n * C + c) * OH * OW;
      std::fill(dst, dst + OH * OW, has_bias ? bias.data()[c] : T{0});
      for (std::size_t i = 0; i < KH; ++i)
        for (std::size_t j = 0; j < KW; ++j) {
          const T kv = k[i * KW + j];
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const T* srow = padded.data() + (oy * S + i) * PW + j;
            T* drow = dst + oy * OW;
            if (S == 1) {
              for (std::size_t ox = 0; ox < OW; ++ox) drow[ox] += kv * srow[ox];
            } else {
              for (std::size_t ox = 0; ox < OW; ++ox) drow[ox] += kv * srow[ox * S];
            }
          }
        }
    }
  }
  return make_result<T>(
      Shape{batch, C, OH, OW}, std::move(out), {x, weight, bias},
      [x, weight, bias, g, batch, C](std::span<const T> gout) {
        auto gx = grad_sink(x);
        auto gw = grad_sink(weight);
        auto gb = grad_sink(bias);
        const std::size_t H = g.height, W = g.width, OH = g.out_h, OW = g.out_w;
        const std::size_t KH = g.kernel_h, KW = g.kernel_w, S = g.stride, P = g.padding;
        const std::size_t PW = W + 2 * P;
        Buffer<T> padded((H + 2 * P) * PW);
        Buffer<T> gpad((H + 2 * P) * PW);
        Buffer<T> lane(OW);
        const auto xv = x.data();
        const auto wv = weight.data();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* k = wv.data() + c * KH * KW;
            const T* go = gout.data() + (n * C + c) * OH * OW;
            if (!gb.empty()) {
              T acc{0};
              for (std::size_t q = 0; q < OH * OW; ++q) acc += go[q];
              gb[c] += acc;
            }
            if (!gw.empty()) {
              pad_plane(xv.data() + (n * C + c) * H * W, H, W, P, padded.data());
              for (std::size_t i = 0; i < KH; ++i)
                for (std::size_t j = 0; j < KW; ++j) {
                  // Column-wise partial sums keep the inner loop vectorizable.
                  std::fill(lane.begin(), lane.end(), T{0});
                  for (std::size_t oy = 0; oy < OH; ++oy) {
                    const T* srow = padded.data() + (oy * S + i) * PW + j;
                    const T* grow = go + oy * OW;
                    if (S == 1) {
                      for (std::size_t ox = 0; ox < OW; ++ox) lane[ox] += grow[ox] * srow[ox];
                    } else {
                      for (std::size_t ox = 0; ox < OW; ++ox) lane[ox] += grow[ox] * srow[ox * S];
                    }
                  }
                  T acc{0};
                  for (std::size_t ox = 0; ox < OW; ++ox) acc += lane[ox];
                  gw[c * KH * KW + i * KW + j] += acc;
                }
            }
            if (!gx.empty()) {
              std::fill(gpad.begin(), gpad.end(), T{0});
              for (std::size_t i = 0; i < KH; ++i)
                for (std::size_t j = 0; j < KW; ++j) {
                  const T kv = k[i * KW + j];
                  for (std::size_t oy = 0; oy < OH; ++oy) {
                    T* prow = gpad.data() + (oy * S + i) * PW + j;
                    const T* grow = go + oy * OW;
                    if (S == 1) {
                      for (std::size_t ox = 0; ox < OW; ++ox) prow[ox] += kv * grow[ox];
                    } else {
                      for (std::size_t ox = 0; ox < OW; ++ox) prow[ox * S] += kv * grow[ox];
                    }
                  }
                }
              T* dst = gx.data() + (n * C + c) * H * W;
              for (std::size_t y = 0; y < H; ++y) {
                const T* prow = gpad.data() + (y + P) * PW + P;
                for (std::size_t xx = 0; xx < W; ++xx) dst[y * W + xx] += prow[xx];
              }
            }
          }
        }
      });
}

}  // namespace detail

/// 2-D convolution. x: N x C x H x W, weight: O x (C/groups) x KH x KW,
/// bias: O (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dOptions opt = {}) {
  detail::require_rank("conv2d", x.shape(), 4);
  detail::require_rank("conv2d", weight.shape(), 4);
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t O = weight.size(0), KH = weight.size(2), KW = weight.size(3);
  const std::size_t G = opt.groups;
  if (G == 0 || C % G != 0 || O % G != 0 || weight.size(1) != C / G) {
    throw DimensionError("conv2d: input channels " + std::to_string(C) +
                         " (axis 1 of " + shape_str(x.shape()) +
                         ") incompatible with weight " +
                         shape_str(weight.shape()) + " and groups " +
                         std::to_string(G));
  }
  if (bias.defined() && bias.numel() != O) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(O) +
                         " output channels");
  }
  if (opt.stride == 0 || H + 2 * opt.padding < KH || W + 2 * opt.padding < KW) {
    throw DimensionError("conv2d: kernel " + std::to_string(KH) + "x" +
                         std::to_string(KW) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  detail::ConvGeometry g{C / G, H, W, KH, KW, opt.stride, opt.padding,
                         (H + 2 * opt.padding - KH) / opt.stride + 1,
                         (W + 2 * opt.padding - KW) / opt.stride + 1};
  if (G == C && O == C) return detail::depthwise_conv2d(x, weight, bias, g, N);

  const std::size_t Cg = C / G, Og = O / G;
  const std::size_t K = Cg * KH * KW;
  const std::size_t P = g.out_h * g.out_w;
  const bool pointwise = detail::is_pointwise(g);
  Buffer<T> out(N * O * P);
  Buffer<T> cols(pointwise ? 0 : K * P);
  const auto xv = x.data();
  const auto wv = weight.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t gi = 0; gi < G; ++gi) {
      const T* img = xv.data() + (n * C + gi * Cg) * H * W;
      const T* colp = img;
      if (!pointwise) {
        detail::im2col(img, g, cols.data());
        colp = cols.data();
      }
      detail::MapMat<T>(out.data() + (n * O + gi * Og) * P, Og, P).noalias() =
          detail::CMapMat<T>(wv.data() + gi * Og * K, Og, K) *
          detail::CMapMat<T>(colp, K, P);
    }
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t o = 0; o < O; ++o) {
        T* dst = out.data() + (n * O + o) * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] += bv[o];
      }
    }
  }
  return detail::make_result<T>(
      Shape{N, O, g.out_h, g.out_w}, std::move(out), {x, weight, bias},
      [x, weight, bias, g, N, C, O, G, pointwise](std::span<const T> gout) {
        const std::size_t Cg = C / G, Og = O / G;
        const std::size_t K = Cg * g.kernel_h * g.kernel_w;
        const std::size_t P = g.out_h * g.out_w;
        const std::size_t plane = g.height * g.width;
        auto gx = detail::grad_sink(x);
        auto gw = detail::grad_sink(weight);
        auto gb = detail::grad_sink(bias);
        const auto xv = x.data();
        const auto wv = weight.data();
        Buffer<T> cols(pointwise ? 0 : K * P);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t gi = 0; gi < G; ++gi) {
            detail::CMapMat<T> GO(gout.data() + (n * O + gi * Og) * P, Og, P);
            if (!gw.empty()) {
              const T* img = xv.data() + (n * C + gi * Cg) * plane;
              const T* colp = img;
              if (!pointwise) {
                detail::im2col(img, g, cols.data());
                colp = cols.data();
              }
              detail::MapMat<T>(gw.data() + gi * Og * K, Og, K).noalias() +=
                  GO * detail::CMapMat<T>(colp, K, P).transpose();
            }
            if (!gx.empty()) {
              detail::CMapMat<T> Wg(wv.data() + gi * Og * K, Og, K);
              T* gimg = gx.data() + (n * C + gi * Cg) * plane;
              if (pointwise) {
                detail::MapMat<T>(gimg, K, P).noalias() += Wg.transpose() * GO;
              } else {
                detail::MapMat<T>(cols.data(), K, P).noalias() = Wg.transpose() * GO;
                detail::col2im(cols.data(), g, gimg);
              }
            }
          }
          if (!gb.empty()) {
            for (std::size_t o = 0; o < O; ++o) {
              const T* go = gout.data() + (n * O + o) * P;
              T acc{0};
              for (std::size_t p = 0; p < P; ++p) acc += go[p];
              gb[o] += acc;
            }
          }
        }
      });
}

/// 2-D transposed convolution without padding. x: N x C x H x W,
/// weight: C x O x KH x KW, bias: O (may be undefined).
/// Output extent is (H - 1) * stride + KH.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t stride) {
  detail::require_rank("conv_transpose2d", x.shape(), 4);
  detail::require_rank("conv_transpose2d", weight.shape(), 4);
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t O = weight.size(1), KH = weight.size(2), KW = weight.size(3);
  if (weight.size(0) != C) {
    throw DimensionError("conv_transpose2d: input channels " +
                         std::to_string(C) + " (axis 1 of " +
                         shape_str(x.shape()) + ") vs axis 0 of weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != O) {
    throw DimensionError("conv_transpose2d: bias does not match output channels");
  }
  if (stride == 0) throw DimensionError("conv_transpose2d: zero stride");
  const std::size_t OH = (H - 1) * stride + KH;
  const std::size_t OW = (W - 1) * stride + KW;
  // Output geometry seen as the input of the adjoint convolution.
  detail::ConvGeometry g{O, OH, OW, KH, KW, stride, 0, H, W};
  const std::size_t K = O * KH * KW;
  const std::size_t P = H * W;
  Buffer<T> out(N * O * OH * OW, T{0});
  Buffer<T> cols(K * P);
  const auto xv = x.data();
  const auto wv = weight.data();
  detail::CMapMat<T> Wm(wv.data(), C, K);
  for (std::size_t n = 0; n < N; ++n) {
    detail::MapMat<T>(cols.data(), K, P).noalias() =
        Wm.transpose() * detail::CMapMat<T>(xv.data() + n * C * P, C, P);
    T* dst = out.data() + n * O * OH * OW;
    detail::col2im(cols.data(), g, dst);
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < OH * OW; ++p) dst[o * OH * OW + p] += bv[o];
    }
  }
  return detail::make_result<T>(
      Shape{N, O, OH, OW}, std::move(out), {x, weight, bias},
      [x, weight, bias, g, N, C, O](std::span<const T> gout) {
        const std::size_t K = O * g.kernel_h * g.kernel_w;
        const std::size_t P = g.out_h * g.out_w;
        const std::size_t plane = g.height * g.width;
        auto gx = detail::grad_sink(x);
        auto gw = detail::grad_sink(weight);
        auto gb = detail::grad_sink(bias);
        const auto xv = x.data();
        detail::CMapMat<T> Wm(weight.data().data(), C, K);
        Buffer<T> cols(K * P);
        for (std::size_t n = 0; n < N; ++n) {
          const T* go = gout.data() + n * O * plane;
          detail::im2col(go, g, cols.data());
          detail::CMapMat<T> Cm(cols.data(), K, P);
          if (!gx.empty())
            detail::MapMat<T>(gx.data() + n * C * P, C, P).noalias() += Wm * Cm;
          if (!gw.empty())
            detail::MapMat<T>(gw.data(), C, K).noalias() +=
                detail::CMapMat<T>(xv.data() + n * C * P, C, P) * Cm.transpose();
          if (!gb.empty()) {
            for (std::size_t o = 0; o < O; ++o) {
              T acc{0};
              for (std::size_t p = 0; p < plane; ++p) acc += go[o * plane + p];
              gb[o] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization.

/// Batch normalization over (N, H, W) per channel. In training mode batch
/// statistics are used and the running estimates (when given) are updated
/// in place with the unbiased variance.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T> running_mean,
                     Tensor<T> running_var, bool training, T momentum = T{0.1},
                     T eps = T{1e-5}) {
  detail::require_rank("batch_norm", x.shape(), 4);
  const std::size_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("batch_norm: affine parameters do not match " +
                         std::to_string(C) + " channels");
  }
  const std::size_t M = N * HW;
  Buffer<T> mu(C, T{0});
  Buffer<T> inv_std(C);
  const auto xv = x.data();
  if (training) {
    Buffer<T> var(C, T{0});
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      mu[c] = s / static_cast<T>(M);
      T v{0};
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - mu[c]) * (p[i] - mu[c]);
      }
      var[c] = v / static_cast<T>(M);
      inv_std[c] = T{1} / std::sqrt(var[c] + eps);
    }
    if (running_mean.defined() && running_var.defined()) {
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const T unbias = M > 1 ? static_cast<T>(M) / static_cast<T>(M - 1) : T{1};
      for (std::size_t c = 0; c < C; ++c) {
        rm[c] = (T{1} - momentum) * rm[c] + momentum * mu[c];
        rv[c] = (T{1} - momentum) * rv[c] + momentum * var[c] * unbias;
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = T{1} / std::sqrt(running_var.data()[c] + eps);
    }
  }
  auto xhat = std::make_shared<Buffer<T>>(x.numel());
  Buffer<T> out(x.numel());
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        (*xhat)[idx] = (xv[idx] - mu[c]) * inv_std[c];
        out[idx] = gv[c] * (*xhat)[idx] + bv[c];
      }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, training, N, C, HW](std::span<const T> g) {
        auto gx = detail::grad_sink(x);
        auto gg = detail::grad_sink(gamma);
        auto gb = detail::grad_sink(beta);
        const auto gv = gamma.data();
        const T M = static_cast<T>(N * HW);
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g{0};
          T sum_gx{0};
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              sum_g += g[idx];
              sum_gx += g[idx] * (*xhat)[idx];
            }
          if (!gg.empty()) gg[c] += sum_gx;
          if (!gb.empty()) gb[c] += sum_g;
          if (gx.empty()) continue;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              if (training) {
                gx[idx] += gv[c] * inv_std[c] *
                           (g[idx] - sum_g / M - (*xhat)[idx] * sum_gx / M);
              } else {
                gx[idx] += gv[c] * inv_std[c] * g[idx];
              }
            }
        }
      });
}

/// Layer normalization across channels at every (n, y, x) of an NCHW tensor,
/// with per-channel affine parameters.
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, T eps = T{1e-6}) {
  detail::require_rank("layer_norm_channels", x.shape(), 4);
  const std::size_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("layer_norm_channels: affine parameters do not match " +
                         std::to_string(C) + " channels");
  }
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<Buffer<T>>(x.numel());
  auto inv_std = std::make_shared<Buffer<T>>(N * HW);
  Buffer<T> out(x.numel());
  Buffer<T> mu(HW);
  Buffer<T> var(HW);
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = xv.data() + n * C * HW;
    std::fill(mu.begin(), mu.end(), T{0});
    std::fill(var.begin(), var.end(), T{0});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) mu[i] += base[c * HW + i];
    for (std::size_t i = 0; i < HW; ++i) mu[i] /= static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const T d = base[c * HW + i] - mu[i];
        var[i] += d * d;
      }
    for (std::size_t i = 0; i < HW; ++i)
      (*inv_std)[n * HW + i] = T{1} / std::sqrt(var[i] / static_cast<T>(C) + eps);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        (*xhat)[idx] = (base[c * HW + i] - mu[i]) * (*inv_std)[n * HW + i];
        out[idx] = gv[c] * (*xhat)[idx] + bv[c];
      }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, N, C, HW](std::span<const T> g) {
        auto gx = detail::grad_sink(x);
        auto gg = detail::grad_sink(gamma);
        auto gb = detail::grad_sink(beta);
        const auto gv = gamma.data();
        Buffer<T> sum_d(HW);
        Buffer<T> sum_dx(HW);
        for (std::size_t n = 0; n < N; ++n) {
          std::fill(sum_d.begin(), sum_d.end(), T{0});
          std::fill(sum_dx.begin(), sum_dx.end(), T{0});
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              const T d = g[idx] * gv[c];
              sum_d[i] += d;
              sum_dx[i] += d * (*xhat)[idx];
              if (!gg.empty()) gg[c] += g[idx] * (*xhat)[idx];
              if (!gb.empty()) gb[c] += g[idx];
            }
          if (gx.empty()) continue;
          const T invC = T{1} / static_cast<T>(C);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              const T d = g[idx] * gv[c];
              gx[idx] += (*inv_std)[n * HW + i] *
                         (d - sum_d[i] * invC - (*xhat)[idx] * sum_dx[i] * invC);
            }
        }
      });
}

/// Global response normalization on NCHW: per-channel spatial L2 norm,
/// divided by its mean over channels, applied as
/// y = gamma * (x * nx) + beta + x with per-channel gamma, beta.
/// y = gamma * x * N + beta + x with N = G / (mean_c G + eps) and G the
/// per-channel spatial L2 norm.
template <typename T>
Tensor<T> global_response_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                               const Tensor<T>& beta, T eps = T{1e-6}) {
  detail::require_rank("global_response_norm", x.shape(), 4);
  const std::size_t N = x.size(0), C = x.size(1), P = x.size(2) * x.size(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("global_response_norm: affine parameters do not match " +
                         std::to_string(C) + " channels");
  }
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto norms = std::make_shared<Buffer<T>>(N * C);  // G
  auto denom = std::make_shared<Buffer<T>>(N);      // mean_c G + eps
  Buffer<T> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    T total{0};
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.data() + (n * C + c) * P;
      T acc{0};
      for (std::size_t p = 0; p < P; ++p) acc += src[p] * src[p];
      (*norms)[n * C + c] = std::sqrt(acc);
      total += (*norms)[n * C + c];
    }
    (*denom)[n] = total / static_cast<T>(C) + eps;
    for (std::size_t c = 0; c < C; ++c) {
      const T scale = T{1} + gv[c] * (*norms)[n * C + c] / (*denom)[n];
      const T* src = xv.data() + (n * C + c) * P;
      T* dst = out.data() + (n * C + c) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = scale * src[p] + bv[c];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, norms, denom, N, C, P](std::span<const T> g) {
        auto gx = detail::grad_sink(x);
        auto ggamma = detail::grad_sink(gamma);
        auto gbeta = detail::grad_sink(beta);
        const auto xv = x.data();
        const auto gv = gamma.data();
        Buffer<T> a(C);  // dL/dN per channel of one sample
        for (std::size_t n = 0; n < N; ++n) {
          const T D = (*denom)[n];
          T dD{0};
          for (std::size_t c = 0; c < C; ++c) {
            const T* src = xv.data() + (n * C + c) * P;
            const T* go = g.data() + (n * C + c) * P;
            T gxdot{0}, gsum{0};
            for (std::size_t p = 0; p < P; ++p) {
              gxdot += go[p] * src[p];
              gsum += go[p];
            }
            const T Nc = (*norms)[n * C + c] / D;
            if (!gbeta.empty()) gbeta[c] += gsum;
            if (!ggamma.empty()) ggamma[c] += gxdot * Nc;
            a[c] = gv[c] * gxdot;
            dD -= a[c] * (*norms)[n * C + c] / (D * D);
          }
          if (gx.empty()) continue;
          for (std::size_t c = 0; c < C; ++c) {
            const T G = (*norms)[n * C + c];
            const T dG = a[c] / D + dD / static_cast<T>(C);
            const T direct = T{1} + gv[c] * G / D;
            const T via_norm = G > T{0} ? dG / G : T{0};
            const T* src = xv.data() + (n * C + c) * P;
            const T* go = g.data() + (n * C + c) * P;
            T* dst = gx.data() + (n * C + c) * P;
            for (std::size_t p = 0; p < P; ++p) dst[p] += direct * go[p] + via_norm * src[p];
          }
        }
      });
}

}  // namespace srcnet
