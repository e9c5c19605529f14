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

// Patch-mode fusion of a bi-temporal feature pair.
//
// Every d-deep pixel vector is split into k mini-patches of length l = d/k.
// For each pair of mini-patches (F1, F2):
//   M = softmax(Linear(l, m)((F1 + F2) / 2))          mode probabilities
//   H_j = Linear_j(l, l)(alpha_j * F1 + beta_j * F2)    one head per mode
//   R = sum_j M_j * H_j
// and the R vectors are put back in place of the mini-patches.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "srcnet/nn.hpp"
#include "srcnet/pim.hpp"

namespace srcnet {

struct FusionConfig {
  std::size_t depth = 256;
  std::size_t k = 16;
  std::size_t m = 4;
  // Combination coefficients, one (alpha, beta) pair per mode.
  std::vector<double> alphas{1.0, 0.0, 0.5, 1.0};
  std::vector<double> betas{0.0, 1.0, 0.5, -1.0};
  bool learnable_coefficients = false;

  std::size_t mini_length() const { return depth / k; }

  void validate() const {
    if (k == 0 || depth % k != 0) {
      throw ConfigError("fusion: depth " + std::to_string(depth) +
                        " is not divisible by k = " + std::to_string(k));
    }
    if (m < 2) throw ConfigError("fusion: need at least 2 modes, got " + std::to_string(m));
    if (alphas.size() != m || betas.size() != m) {
      throw ConfigError("fusion: " + std::to_string(m) + " modes but " +
                        std::to_string(alphas.size()) + " alphas and " +
                        std::to_string(betas.size()) + " betas");
    }
  }

  /// Default coefficients for m modes: t1 view, t2 view, mean, difference,
  /// then repeating the cycle with alternating sign for m > 4.
  static FusionConfig with_defaults(std::size_t depth, std::size_t k, std::size_t m) {
    FusionConfig cfg;
    cfg.depth = depth;
    cfg.k = k;
    cfg.m = m;
    static constexpr double base_a[] = {1.0, 0.0, 0.5, 1.0};
    static constexpr double base_b[] = {0.0, 1.0, 0.5, -1.0};
    cfg.alphas.clear();
    cfg.betas.clear();
    for (std::size_t j = 0; j < m; ++j) {
      const double sign = (j / 4) % 2 == 0 ? 1.0 : -1.0;
      cfg.alphas.push_back(base_a[j % 4]);
      cfg.betas.push_back(sign * base_b[j % 4]);
    }
    return cfg;
  }
};

template <typename T>
class ModeHeads {
 public:
  ModeHeads() = default;
  // Gaussian weights with std 1/sqrt(l); zero biases.
  ModeHeads(const FusionConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t l = cfg.mini_length();
    const double stddev = 1.0 / std::sqrt(static_cast<double>(l));
    perception = Linear<T>(l, cfg.m, rng, stddev);
    for (std::size_t j = 0; j < cfg.m; ++j) heads.emplace_back(l, l, rng, stddev);
    Buffer<T> a(cfg.alphas.begin(), cfg.alphas.end());
    Buffer<T> b(cfg.betas.begin(), cfg.betas.end());
    alphas = Tensor<T>({cfg.m}, std::move(a), cfg.learnable_coefficients);
    betas = Tensor<T>({cfg.m}, std::move(b), cfg.learnable_coefficients);
  }

  std::size_t modes() const { return heads.size(); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    perception.collect(join_name(prefix, "perception"), out);
    for (std::size_t j = 0; j < heads.size(); ++j)
      heads[j].collect(join_name(prefix, "head" + std::to_string(j)), out);
    if (alphas.requires_grad()) {
      out.push_back({join_name(prefix, "alphas"), alphas});
      out.push_back({join_name(prefix, "betas"), betas});
    }
  }

  Linear<T> perception;
  std::vector<Linear<T>> heads;
  Tensor<T> alphas;
  Tensor<T> betas;
};

/// B x d x h x w -> B x (h*w*k) x l. Row (y*w + x)*k + i holds channels
/// [i*l, (i+1)*l) of pixel (y, x).
template <typename T>
Tensor<T> slice_minipatches(const Tensor<T>& feat, std::size_t k) {
  detail::require_rank("slice_minipatches", feat.shape(), 4);
  const std::size_t B = feat.size(0), d = feat.size(1), h = feat.size(2), w = feat.size(3);
  if (k == 0 || d % k != 0) {
    throw ConfigError("slice_minipatches: depth " + std::to_string(d) +
                      " is not divisible by k = " + std::to_string(k));
  }
  const std::size_t l = d / k;
  auto t = permute(reshape(feat, Shape{B, k, l, h, w}), {0, 3, 4, 1, 2});
  return reshape(t, Shape{B, h * w * k, l});
}

/// Inverse of slice_minipatches.
template <typename T>
Tensor<T> unslice_minipatches(const Tensor<T>& mini, std::size_t h, std::size_t w,
                              std::size_t k) {
  detail::require_rank("unslice_minipatches", mini.shape(), 3);
  const std::size_t B = mini.size(0), l = mini.size(2);
  if (mini.size(1) != h * w * k) {
    throw DimensionError("unslice_minipatches: " + std::to_string(mini.size(1)) +
                         " rows cannot form a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid with k = " + std::to_string(k));
  }
  auto t = permute(reshape(mini, Shape{B, h, w, k, l}), {0, 3, 4, 1, 2});
  return reshape(t, Shape{B, k * l, h, w});
}

/// Rows of f1, f2 (n x l) -> mode probabilities (n x m).
template <typename T>
Tensor<T> mode_perception(const Tensor<T>& f1, const Tensor<T>& f2,
                          const ModeHeads<T>& heads) {
  auto baseline = scale(add(f1, f2), T{0.5});
  return softmax(heads.perception.forward(baseline), 1);
}

/// Rows of f1, f2 (n x l) -> per-mode fusion results (n x l x m); column j
/// is head j applied to alpha_j * f1 + beta_j * f2.
template <typename T>
Tensor<T> multi_head_fuse(const Tensor<T>& f1, const Tensor<T>& f2,
                          const ModeHeads<T>& heads) {
  detail::require_rank("multi_head_fuse", f1.shape(), 2);
  if (f1.shape() != f2.shape()) {
    throw DimensionError("multi_head_fuse: sub-feature shapes " + shape_str(f1.shape()) +
                         " and " + shape_str(f2.shape()) + " differ");
  }
  const std::size_t n = f1.size(0), l = f1.size(1), m = heads.modes();
  if (heads.heads.empty() || heads.heads[0].weight.size(1) != l) {
    throw DimensionError("multi_head_fuse: sub-feature length " + std::to_string(l) +
                         " does not match the heads");
  }
  using Mat = detail::RowMat<T>;
  const auto N = static_cast<Eigen::Index>(n), L = static_cast<Eigen::Index>(l);
  detail::CMapMat<T> F1(f1.data().data(), N, L), F2(f2.data().data(), N, L);
  const auto av = heads.alphas.data();
  const auto bv = heads.betas.data();
  Buffer<T> out(n * l * m);
  Mat combo(N, L), head(N, L);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& lin = heads.heads[j];
    combo.noalias() = av[j] * F1 + bv[j] * F2;
    head.noalias() = combo * detail::CMapMat<T>(lin.weight.data().data(), L, L).transpose();
    head.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(lin.bias.data().data(), L);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < l; ++i) out[(r * l + i) * m + j] = head(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i));
  }
  std::vector<Tensor<T>> inputs{f1, f2, heads.alphas, heads.betas};
  for (const auto& h : heads.heads) {
    inputs.push_back(h.weight);
    inputs.push_back(h.bias);
  }
  return detail::make_result_n<T>(
      Shape{n, l, m}, std::move(out), inputs, [inputs, n, l, m](std::span<const T> g) {
        const auto N = static_cast<Eigen::Index>(n), L = static_cast<Eigen::Index>(l);
        const auto& f1 = inputs[0];
        const auto& f2 = inputs[1];
        detail::CMapMat<T> F1(f1.data().data(), N, L), F2(f2.data().data(), N, L);
        auto g1 = detail::grad_sink(f1);
        auto g2 = detail::grad_sink(f2);
        auto ga = detail::grad_sink(inputs[2]);
        auto gb = detail::grad_sink(inputs[3]);
        const auto av = inputs[2].data();
        const auto bv = inputs[3].data();
        Mat G(N, L), combo(N, L), dcombo(N, L);
        for (std::size_t j = 0; j < m; ++j) {
          const auto& w = inputs[4 + 2 * j];
          const auto& b = inputs[5 + 2 * j];
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < l; ++i) G(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = g[(r * l + i) * m + j];
          detail::CMapMat<T> Wj(w.data().data(), L, L);
          if (auto gw = detail::grad_sink(w); !gw.empty()) {
            combo.noalias() = av[j] * F1 + bv[j] * F2;
            detail::MapMat<T>(gw.data(), L, L).noalias() += G.transpose() * combo;
          }
          if (auto gbias = detail::grad_sink(b); !gbias.empty()) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gbias.data(), L) += G.colwise().sum();
          }
          if (g1.empty() && g2.empty() && ga.empty() && gb.empty()) continue;
          dcombo.noalias() = G * Wj;
          if (!g1.empty()) detail::MapMat<T>(g1.data(), N, L) += av[j] * dcombo;
          if (!g2.empty()) detail::MapMat<T>(g2.data(), N, L) += bv[j] * dcombo;
          if (!ga.empty()) ga[j] += dcombo.cwiseProduct(F1).sum();
          if (!gb.empty()) gb[j] += dcombo.cwiseProduct(F2).sum();
        }
      });
}

/// Expectation of the head outputs under the mode probabilities:
/// (n x l x m) and (n x m) -> n x l.
template <typename T>
Tensor<T> mode_expectation(const Tensor<T>& fused, const Tensor<T>& modes) {
  detail::require_rank("mode_expectation", fused.shape(), 3);
  const std::size_t n = fused.size(0), l = fused.size(1), m = fused.size(2);
  if (modes.shape() != Shape{n, m}) {
    throw DimensionError("mode_expectation: mode probabilities " + shape_str(modes.shape()) +
                         " do not match fused results " + shape_str(fused.shape()));
  }
  const auto fv = fused.data();
  const auto mv = modes.data();
  Buffer<T> out(n * l);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < l; ++i) {
      T acc{0};
      for (std::size_t j = 0; j < m; ++j) acc += fv[(r * l + i) * m + j] * mv[r * m + j];
      out[r * l + i] = acc;
    }
  return detail::make_result<T>(Shape{n, l}, std::move(out), {fused, modes},
                                [fused, modes, n, l, m](std::span<const T> g) {
                                  auto gf = detail::grad_sink(fused);
                                  auto gm = detail::grad_sink(modes);
                                  const auto fv = fused.data();
                                  const auto mv = modes.data();
                                  for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t i = 0; i < l; ++i) {
                                      const T gi = g[r * l + i];
                                      for (std::size_t j = 0; j < m; ++j) {
                                        if (!gf.empty()) gf[(r * l + i) * m + j] += gi * mv[r * m + j];
                                        if (!gm.empty()) gm[r * m + j] += gi * fv[(r * l + i) * m + j];
                                      }
                                    }
                                });
}

template <typename T>
Tensor<T> pmffm_forward(const FeaturePair<T>& pair, const ModeHeads<T>& heads,
                        const FusionConfig& cfg) {
  detail::require_rank("pmffm_forward", pair.t1.shape(), 4);
  if (pair.t1.shape() != pair.t2.shape()) {
    throw DimensionError("pmffm_forward: branch shapes " + shape_str(pair.t1.shape()) +
                         " and " + shape_str(pair.t2.shape()) + " differ");
  }
  if (pair.t1.size(1) != cfg.depth) {
    throw DimensionError("pmffm_forward: feature depth " + std::to_string(pair.t1.size(1)) +
                         " differs from configured depth " + std::to_string(cfg.depth));
  }
  const std::size_t B = pair.t1.size(0), h = pair.t1.size(2), w = pair.t1.size(3);
  const std::size_t l = cfg.mini_length();
  const std::size_t rows = B * h * w * cfg.k;
  auto f1 = reshape(slice_minipatches(pair.t1, cfg.k), Shape{rows, l});
  auto f2 = reshape(slice_minipatches(pair.t2, cfg.k), Shape{rows, l});
  auto modes = mode_perception(f1, f2, heads);
  auto fused = multi_head_fuse(f1, f2, heads);
  auto r = mode_expectation(fused, modes);
  return unslice_minipatches(reshape(r, Shape{B, h * w * cfg.k, l}), h, w, cfg.k);
}

template <typename T>
class PatchModeFusion {
 public:
  PatchModeFusion() = default;
  PatchModeFusion(FusionConfig cfg, Rng& rng) : config(std::move(cfg)), heads(config, rng) {}

  Tensor<T> forward(const FeaturePair<T>& pair) const { return pmffm_forward(pair, heads, config); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    heads.collect(prefix, out);
  }

  FusionConfig config;
  ModeHeads<T> heads;
};

}  // namespace srcnet
