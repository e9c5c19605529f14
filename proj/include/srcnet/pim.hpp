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

// Perception and interaction between the two siamese branches.
//
// Each branch gets a credibility map P in (0,1) (probability that its
// feature is reliable). The corrected feature of branch 1 is the
// expectation over three cases: branch 1 reliable (keep t1), branch 1
// unreliable but branch 2 reliable (take t2), both unreliable (take the
// mean):
//
//   t1' = t1*P1 + t2*(1-P1)*P2 + (t1+t2)/2*(1-P1)*(1-P2)
//
// and symmetrically for t2'. All products are elementwise.

#pragma once

#include <cmath>
#include <string>

#include "srcnet/nn.hpp"

namespace srcnet {

template <typename T>
struct FeaturePair {
  Tensor<T> t1;
  Tensor<T> t2;
};

/// Weights of t1 and t2 in the corrected t1'. Their sum is 1 for any
/// credibilities; swapping the arguments yields the weights of t2'.
struct PimCoefficients {
  double own;
  double other;
};

inline PimCoefficients pim_coefficients(double p_own, double p_other) {
  const double both_unreliable = (1.0 - p_own) * (1.0 - p_other);
  return {p_own + 0.5 * both_unreliable, (1.0 - p_own) * p_other + 0.5 * both_unreliable};
}

/// Linear(C, C) followed by a sigmoid, applied across channels at every
/// spatial location independently.
template <typename T>
class CredibilityParams {
 public:
  CredibilityParams() = default;
  // weight ~ N(0, 1/C), bias = 0: initial credibilities sit near 0.5.
  CredibilityParams(std::size_t channels, Rng& rng)
      : weight(rng.normal_tensor<T>({channels, channels},
                                    1.0 / std::sqrt(static_cast<double>(channels)), true)),
        bias(Tensor<T>::zeros({channels}, true)) {}

  std::size_t channels() const { return bias.numel(); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }

  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
Tensor<T> credibility(const Tensor<T>& t, const CredibilityParams<T>& params) {
  detail::require_rank("credibility", t.shape(), 4);
  const std::size_t C = params.channels();
  if (t.size(1) != C) {
    throw DimensionError("credibility: feature has " + std::to_string(t.size(1)) +
                         " channels (axis 1 of " + shape_str(t.shape()) +
                         "), parameters expect " + std::to_string(C));
  }
  return sigmoid(conv2d(t, reshape(params.weight, Shape{C, C, 1, 1}), params.bias));
}

/// Corrected pair given explicit credibility maps.
template <typename T>
FeaturePair<T> pim_combine(const Tensor<T>& t1, const Tensor<T>& t2,
                           const Tensor<T>& p1, const Tensor<T>& p2) {
  if (t1.shape() != t2.shape() || p1.shape() != t1.shape() || p2.shape() != t1.shape()) {
    throw DimensionError("pim_combine: shapes " + shape_str(t1.shape()) + ", " +
                         shape_str(t2.shape()) + ", " + shape_str(p1.shape()) + ", " +
                         shape_str(p2.shape()) + " differ");
  }
  auto q1 = one_minus(p1);
  auto q2 = one_minus(p2);
  auto mean_term = mul(scale(add(t1, t2), T{0.5}), mul(q1, q2));
  auto out1 = add(add(mul(t1, p1), mul(t2, mul(q1, p2))), mean_term);
  auto out2 = add(add(mul(t2, p2), mul(t1, mul(q2, p1))), mean_term);
  return {out1, out2};
}

template <typename T>
FeaturePair<T> pim_forward(const FeaturePair<T>& pair, const CredibilityParams<T>& params1,
                           const CredibilityParams<T>& params2) {
  if (pair.t1.shape() != pair.t2.shape()) {
    throw DimensionError("pim_forward: branch shapes " + shape_str(pair.t1.shape()) +
                         " and " + shape_str(pair.t2.shape()) + " differ");
  }
  return pim_combine(pair.t1, pair.t2, credibility(pair.t1, params1),
                     credibility(pair.t2, params2));
}

template <typename T>
FeaturePair<T> pim_forward(const FeaturePair<T>& pair, const CredibilityParams<T>& params) {
  return pim_forward(pair, params, params);
}

/// Outputs of the module on a (clean, noisy) pair, plus the clean reference.
template <typename T>
struct PimTap {
  FeaturePair<T> outputs;
  Tensor<T> reference;
};

/// Adds zero-mean Gaussian noise with standard deviation
/// noise_sigma * std(s) to every element.
template <typename T>
Tensor<T> add_relative_noise(const Tensor<T>& s, double noise_sigma, Rng& rng) {
  if (noise_sigma < 0.0) throw ContractError("noise_sigma must be non-negative");
  const auto v = s.data();
  double m = 0.0;
  for (T x : v) m += static_cast<double>(x);
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (T x : v) var += (static_cast<double>(x) - m) * (static_cast<double>(x) - m);
  const double stddev = noise_sigma * std::sqrt(var / static_cast<double>(v.size()));
  Buffer<T> noisy(v.begin(), v.end());
  if (stddev > 0.0)
    for (auto& x : noisy) x += static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(s.shape(), std::move(noisy), false);
}

/// Feeds one temporal instance and a noisy copy of it through the module.
/// The clean instance goes to branch 1.
template <typename T>
PimTap<T> pim_noise_pass(const Tensor<T>& s_ori, double noise_sigma,
                         const CredibilityParams<T>& params1,
                         const CredibilityParams<T>& params2, Rng& rng) {
  auto noisy = add_relative_noise(s_ori, noise_sigma, rng);
  return {pim_forward(FeaturePair<T>{s_ori, noisy}, params1, params2), s_ori};
}

template <typename T>
PimTap<T> pim_noise_pass(const Tensor<T>& s_ori, double noise_sigma,
                         const CredibilityParams<T>& params, Rng& rng) {
  return pim_noise_pass(s_ori, noise_sigma, params, params, rng);
}

/// One perception-and-interaction module with either one shared
/// credibility network or one per branch.
template <typename T>
class PerceptionInteraction {
 public:
  PerceptionInteraction() = default;
  PerceptionInteraction(std::size_t channels, bool shared, Rng& rng)
      : shared_(shared), cred1_(channels, rng) {
    if (!shared_) cred2_ = CredibilityParams<T>(channels, rng);
  }

  bool shared() const { return shared_; }
  const CredibilityParams<T>& credibility1() const { return cred1_; }
  const CredibilityParams<T>& credibility2() const { return shared_ ? cred1_ : cred2_; }
  CredibilityParams<T>& credibility1() { return cred1_; }
  CredibilityParams<T>& credibility2() { return shared_ ? cred1_ : cred2_; }

  FeaturePair<T> forward(const FeaturePair<T>& pair) const {
    return pim_forward(pair, credibility1(), credibility2());
  }

  PimTap<T> noise_pass(const Tensor<T>& s_ori, double noise_sigma, Rng& rng) const {
    return pim_noise_pass(s_ori, noise_sigma, credibility1(), credibility2(), rng);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    if (shared_) {
      cred1_.collect(join_name(prefix, "cred"), out);
    } else {
      cred1_.collect(join_name(prefix, "cred1"), out);
      cred2_.collect(join_name(prefix, "cred2"), out);
    }
  }

 private:
  bool shared_ = true;
  CredibilityParams<T> cred1_;
  CredibilityParams<T> cred2_;
};

}  // namespace srcnet
