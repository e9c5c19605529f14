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

#include <cmath>
#include <string>
#include <vector>

#include "srcnet/nn.hpp"
#include "srcnet/pim.hpp"

namespace srcnet {

// Class probabilities are B x 2 x H x W with channel 0 = unchanged and
// channel 1 = changed. Ground truth is B x H x W with values in {0, 1}.

inline constexpr double kProbabilityFloor = 1e-12;

/// Learnable log-variances s_i = log(sigma_i^2) of the focal, dice and edge
/// terms, plus the fixed hyperparameters of those terms.
template <typename T>
struct LossWeights {
  Tensor<T> log_var = Tensor<T>::zeros({3}, true);
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double edge_lambda = 4.0;
  std::size_t edge_radius = 2;

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "log_var"), log_var});
  }
};

namespace detail {

inline void check_probs_gt(const char* op, const Shape& probs, const Shape& gt) {
  if (probs.size() != 4 || probs[1] != 2 || gt.size() != 3 || gt[0] != probs[0] ||
      gt[1] != probs[2] || gt[2] != probs[3]) {
    throw DimensionError(std::string(op) + ": probabilities " + shape_str(probs) +
                         " and ground truth " + shape_str(gt) +
                         " do not conform to B x 2 x H x W and B x H x W");
  }
}

}  // namespace detail

/// Probability assigned to the true class at every pixel: B x H x W.
template <typename T>
Tensor<T> true_class_probability(const Tensor<T>& probs, const Tensor<T>& gt) {
  detail::check_probs_gt("true_class_probability", probs.shape(), gt.shape());
  const Shape s{probs.size(0), probs.size(2), probs.size(3)};
  auto p0 = reshape(slice(probs, 1, 0, 1), s);
  auto p1 = reshape(slice(probs, 1, 1, 2), s);
  return add(mul(p1, gt), mul(p0, one_minus(gt)));
}

/// mean of -alpha * (1 - p_t)^gamma * log p_t, with p_t clamped at 1e-12.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& probs, const Tensor<T>& gt, double gamma,
                     double alpha) {
  auto pt = true_class_probability(probs, gt);
  auto logp = log(clamp_min(pt, static_cast<T>(kProbabilityFloor)));
  auto modulating = pow(one_minus(pt), static_cast<T>(gamma));
  return scale(mean(mul(modulating, logp)), static_cast<T>(-alpha));
}

/// 1 - (2 * sum(p * y) + 1) / (sum(p) + sum(y) + 1) on the change channel.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& gt) {
  detail::check_probs_gt("dice_loss", probs.shape(), gt.shape());
  const Shape s{probs.size(0), probs.size(2), probs.size(3)};
  auto p1 = reshape(slice(probs, 1, 1, 2), s);
  auto inter = sum(mul(p1, gt));
  auto denom = add(sum(p1), sum(gt));
  return one_minus(div(affine(inter, T{2}, T{1}), affine(denom, T{1}, T{1})));
}

/// Per-pixel edge weights 1 + lambda * [within `radius` (Chebyshev) of a
/// boundary pixel]; a boundary pixel has a 4-neighbor of the other class.
template <typename T>
std::vector<T> edge_weight_map(const Tensor<T>& gt, double lambda, std::size_t radius) {
  detail::require_rank("edge_weight_map", gt.shape(), 3);
  const std::size_t B = gt.size(0), H = gt.size(1), W = gt.size(2);
  const auto g = gt.data();
  std::vector<T> weights(gt.numel(), T{1});
  std::vector<char> boundary(H * W);
  std::vector<char> near_rows(H * W);
  const long r = static_cast<long>(radius);
  for (std::size_t b = 0; b < B; ++b) {
    const T* m = g.data() + b * H * W;
    auto cls = [&](std::size_t y, std::size_t x) { return m[y * W + x] > T{0.5}; };
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const bool c = cls(y, x);
        boundary[y * W + x] = (y > 0 && cls(y - 1, x) != c) || (y + 1 < H && cls(y + 1, x) != c) ||
                              (x > 0 && cls(y, x - 1) != c) || (x + 1 < W && cls(y, x + 1) != c);
      }
    // Separable square dilation: rows, then columns.
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        char hit = 0;
        for (long dx = -r; dx <= r && !hit; ++dx) {
          const long xx = static_cast<long>(x) + dx;
          if (xx >= 0 && xx < static_cast<long>(W)) hit = boundary[y * W + xx];
        }
        near_rows[y * W + x] = hit;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        char hit = 0;
        for (long dy = -r; dy <= r && !hit; ++dy) {
          const long yy = static_cast<long>(y) + dy;
          if (yy >= 0 && yy < static_cast<long>(H)) hit = near_rows[yy * W + x];
        }
        if (hit) weights[b * H * W + y * W + x] = static_cast<T>(1.0 + lambda);
      }
  }
  return weights;
}

/// mean of -w_edge * log p_t.
template <typename T>
Tensor<T> edge_loss(const Tensor<T>& probs, const Tensor<T>& gt, double lambda,
                    std::size_t radius) {
  auto pt = true_class_probability(probs, gt);
  Tensor<T> w(gt.shape(), edge_weight_map(gt, lambda, radius));
  auto logp = log(clamp_min(pt, static_cast<T>(kProbabilityFloor)));
  return scale(mean(mul(w, logp)), T{-1});
}

template <typename T>
struct HybridTerms {
  Tensor<T> total;
  Tensor<T> focal;
  Tensor<T> dice;
  Tensor<T> edge;
};

/// exp(-s1) focal + exp(-s2) dice + exp(-s3) edge + (s1 + s2 + s3) / 2.
template <typename T>
HybridTerms<T> hybrid_loss(const Tensor<T>& probs, const Tensor<T>& gt,
                           const LossWeights<T>& w) {
  HybridTerms<T> terms;
  terms.focal = focal_loss(probs, gt, w.focal_gamma, w.focal_alpha);
  terms.dice = dice_loss(probs, gt);
  terms.edge = edge_loss(probs, gt, w.edge_lambda, w.edge_radius);
  auto stacked = concat(std::vector<Tensor<T>>{terms.focal, terms.dice, terms.edge}, 0);
  auto weighted = sum(mul(exp(scale(w.log_var, T{-1})), stacked));
  terms.total = add(weighted, scale(sum(w.log_var), T{0.5}));
  return terms;
}

/// Mean over both module outputs of their RMS distance to the clean input.
template <typename T>
Tensor<T> loss1(const FeaturePair<T>& outputs, const Tensor<T>& s_ori) {
  if (outputs.t1.shape() != s_ori.shape() || outputs.t2.shape() != s_ori.shape()) {
    throw DimensionError("loss1: output shapes do not match reference " +
                         shape_str(s_ori.shape()));
  }
  return scale(add(rms(sub(outputs.t1, s_ori)), rms(sub(outputs.t2, s_ori))), T{0.5});
}

/// Per-branch land-cover posterior: transposed convolution back to pixel
/// resolution, softmax over the L classes.
template <typename T>
class LandCoverHead {
 public:
  LandCoverHead() = default;
  LandCoverHead(std::size_t channels, std::size_t classes, std::size_t patch, Rng& rng)
      : up(channels, classes, patch, patch, rng) {
    if (classes < 2) {
      throw ConfigError("land-cover head needs at least 2 classes, got " + std::to_string(classes));
    }
  }

  Tensor<T> forward(const Tensor<T>& feat) const { return softmax(up.forward(feat), 1); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    up.collect(join_name(prefix, "up"), out);
  }

  ConvTranspose2d<T> up;
};

/// P(change) = 1 - sum_c q1(c) q2(c) under independent branch posteriors
/// q1, q2 (B x L x H x W). Returns B x 2 x H x W as (1 - P, P).
template <typename T>
Tensor<T> change_probability(const Tensor<T>& q1, const Tensor<T>& q2) {
  detail::require_rank("change_probability", q1.shape(), 4);
  if (q1.shape() != q2.shape()) {
    throw DimensionError("change_probability: posteriors " + shape_str(q1.shape()) +
                         " and " + shape_str(q2.shape()) + " differ");
  }
  if (q1.size(1) < 2) {
    throw ConfigError("change_probability: need at least 2 land-cover classes");
  }
  auto agree = sum_axis(mul(q1, q2), 1);  // B x 1 x H x W
  return concat(std::vector<Tensor<T>>{agree, one_minus(agree)}, 1);
}

/// Hybrid loss of the change probability implied by the extraction-stage
/// features of both branches.
template <typename T>
HybridTerms<T> loss2_change_prob(const FeaturePair<T>& features, const LandCoverHead<T>& head,
                                 const Tensor<T>& gt, const LossWeights<T>& w) {
  return hybrid_loss(change_probability(head.forward(features.t1), head.forward(features.t2)),
                     gt, w);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l1, const Tensor<T>& l2, const Tensor<T>& l3) {
  return add(add(l1, l2), l3);
}

}  // namespace srcnet
