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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "srcnet/srcnet.hpp"

using namespace srcnet;
using T = Tensor<double>;

namespace {

CredibilityParams<double> constant_params(std::size_t C, double diag, double bias) {
  CredibilityParams<double> p;
  std::vector<double> w(C * C, 0.0);
  for (std::size_t c = 0; c < C; ++c) w[c * C + c] = diag;
  p.weight = T({C, C}, w, true);
  p.bias = T::full({C}, bias, true);
  return p;
}

}  // namespace

TEST(Credibility, ZeroParametersGiveOneHalf) {
  Rng rng(1);
  auto t = rng.normal_tensor<double>({2, 3, 4, 4}, 5.0);
  auto p = credibility(t, constant_params(3, 0.0, 0.0));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Credibility, LargeDiagonalSaturatesTowardOne) {
  auto t = T::full({1, 2, 2, 2}, 5.0);
  auto p = credibility(t, constant_params(2, 20.0, 0.0));
  for (double v : p.data()) EXPECT_GT(v, 1.0 - 1e-12);
}

TEST(Credibility, OutputStrictlyInsideUnitInterval) {
  Rng rng(2);
  CredibilityParams<double> params(6, rng);
  auto p = credibility(rng.normal_tensor<double>({2, 6, 3, 3}, 3.0), params);
  for (double v : p.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Credibility, ActsPerPixelAcrossChannelsOnly) {
  // Changing one pixel's features must not move any other pixel's credibility.
  Rng rng(3);
  CredibilityParams<double> params(4, rng);
  auto t = rng.normal_tensor<double>({1, 4, 3, 3}, 1.0);
  auto base = credibility(t, params);
  auto moved = t.detach();
  for (std::size_t c = 0; c < 4; ++c) moved.mutable_data()[c * 9 + 4] += 1.0;  // pixel (1, 1)
  auto after = credibility(moved, params);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 9; ++i) {
      if (i != 4) {
        EXPECT_EQ(after[c * 9 + i], base[c * 9 + i]);
      }
    }
  }
}

TEST(Credibility, ChannelMismatchIsADimensionError) {
  Rng rng(4);
  CredibilityParams<double> params(3, rng);
  EXPECT_THROW(credibility(rng.normal_tensor<double>({1, 4, 2, 2}, 1.0), params), DimensionError);
}

TEST(Credibility, InitialCredibilitiesAreNearNeutral) {
  Rng rng(5);
  CredibilityParams<double> params(64, rng);
  auto p = credibility(rng.normal_tensor<double>({2, 64, 4, 4}, 1.0), params);
  double mean = 0.0;
  for (double v : p.data()) mean += v;
  EXPECT_NEAR(mean / static_cast<double>(p.numel()), 0.5, 0.02);
}

TEST(PimCombine, ScalarCaseMatchesHandSubstitution) {
  auto out = pim_combine(T({1}, {2.0}), T({1}, {4.0}), T({1}, {0.5}), T({1}, {0.5}));
  EXPECT_DOUBLE_EQ(out.t1[0], 2.75);
  EXPECT_DOUBLE_EQ(oracle::pim_scalar(2, 4, 0.5, 0.5), 2.75);
  // t2' = 4 * 0.5 + 2 * 0.25 + 3 * 0.25
  EXPECT_DOUBLE_EQ(out.t2[0], 3.25);
}

TEST(PimCombine, ReliableBranchPassesThrough) {
  Rng rng(6);
  auto t1 = rng.normal_tensor<double>({2, 3, 2, 2}, 1.0);
  auto t2 = rng.normal_tensor<double>({2, 3, 2, 2}, 1.0);
  auto p2 = rng.uniform_tensor<double>({2, 3, 2, 2}, 0.0, 1.0);
  auto out = pim_combine(t1, t2, T::full(t1.shape(), 1.0), p2);
  for (std::size_t i = 0; i < t1.numel(); ++i) EXPECT_EQ(out.t1[i], t1[i]);
}

TEST(PimCombine, MatchesElementwiseOracle) {
  Rng rng(7);
  const Shape s{2, 3, 3, 2};
  auto t1 = rng.normal_tensor<double>(s, 1.0), t2 = rng.normal_tensor<double>(s, 1.0);
  auto p1 = rng.uniform_tensor<double>(s, 0.0, 1.0), p2 = rng.uniform_tensor<double>(s, 0.0, 1.0);
  auto out = pim_combine(t1, t2, p1, p2);
  for (std::size_t i = 0; i < t1.numel(); ++i) {
    EXPECT_NEAR(out.t1[i], oracle::pim_scalar(t1[i], t2[i], p1[i], p2[i]), 1e-14);
    EXPECT_NEAR(out.t2[i], oracle::pim_scalar(t2[i], t1[i], p2[i], p1[i]), 1e-14);
  }
}

TEST(PimProperties, CoefficientsSumToOneAndOutputIsAConvexCombination) {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.normal(0, 3), b = rng.normal(0, 3);
    const double p = rng.uniform(), q = rng.uniform();
    const auto c = pim_coefficients(p, q);
    EXPECT_NEAR(c.own + c.other, 1.0, 1e-12);
    EXPECT_GE(c.own, 0.0);
    EXPECT_GE(c.other, 0.0);
    const double out = oracle::pim_scalar(a, b, p, q);
    EXPECT_GE(out, std::min(a, b) - 1e-12);
    EXPECT_LE(out, std::max(a, b) + 1e-12);
  }
}

TEST(PimProperties, SwappingBranchesSwapsOutputs) {
  Rng rng(9);
  const Shape s{1, 4, 3, 3};
  auto t1 = rng.normal_tensor<double>(s, 1.0), t2 = rng.normal_tensor<double>(s, 1.0);
  CredibilityParams<double> a(4, rng), b(4, rng);
  auto fwd = pim_forward(FeaturePair<double>{t1, t2}, a, b);
  auto rev = pim_forward(FeaturePair<double>{t2, t1}, b, a);
  for (std::size_t i = 0; i < t1.numel(); ++i) {
    EXPECT_EQ(fwd.t1[i], rev.t2[i]);
    EXPECT_EQ(fwd.t2[i], rev.t1[i]);
  }
}

TEST(PimProperties, IdenticalInputsAreAFixedPoint) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = rng.normal_tensor<double>({2, 5, 3, 3}, 2.0);
    CredibilityParams<double> a(5, rng), b(5, rng);
    auto out = pim_forward(FeaturePair<double>{x, x}, a, b);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      EXPECT_NEAR(out.t1[i], x[i], 1e-12 * (1 + std::abs(x[i])));
      EXPECT_NEAR(out.t2[i], x[i], 1e-12 * (1 + std::abs(x[i])));
    }
  }
}

TEST(PimProperties, ShapeIsPreservedAndMismatchRejected) {
  Rng rng(11);
  CredibilityParams<double> params(3, rng);
  auto t = rng.normal_tensor<double>({2, 3, 4, 5}, 1.0);
  auto out = pim_forward(FeaturePair<double>{t, t}, params);
  EXPECT_EQ(out.t1.shape(), t.shape());
  EXPECT_THROW(pim_forward(FeaturePair<double>{t, rng.normal_tensor<double>({2, 3, 4, 4}, 1.0)}, params),
               DimensionError);
}

TEST(PimGradients, CredibilityAndForwardPassGradcheck) {
  Rng rng(12);
  auto t1 = rng.normal_tensor<double>({2, 4, 3, 3}, 1.0, true);
  auto t2 = rng.normal_tensor<double>({2, 4, 3, 3}, 1.0, true);
  CredibilityParams<double> p(4, rng);
  EXPECT_LT(gradcheck([&] { return sum(credibility(t1, p)); }, {t1, p.weight, p.bias}).max_rel_error, 1e-4);
  auto r = rng.normal_tensor<double>(t1.shape(), 1.0);
  auto rep = gradcheck(
      [&] {
        auto out = pim_forward(FeaturePair<double>{t1, t2}, p);
        return add(sum(mul(out.t1, r)), sum(out.t2));
      },
      {t1, t2, p.weight, p.bias});
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(NoisePass, ZeroNoiseReturnsTheReference) {
  Rng rng(13);
  CredibilityParams<double> params(4, rng);
  auto s = rng.normal_tensor<double>({2, 4, 3, 3}, 1.0);
  Rng noise(1);
  auto tap = pim_noise_pass(s, 0.0, params, noise);
  for (std::size_t i = 0; i < s.numel(); ++i) {
    EXPECT_NEAR(tap.outputs.t1[i], s[i], 1e-12);
    EXPECT_NEAR(tap.outputs.t2[i], s[i], 1e-12);
  }
  EXPECT_NEAR(loss1(tap.outputs, tap.reference).item(), 0.0, 1e-12);
}

TEST(NoisePass, ReliableCleanBranchKeepsTheReference) {
  Rng rng(14);
  auto s = rng.normal_tensor<double>({1, 3, 4, 4}, 1.0);
  Rng noise(2);
  // Clean branch credibility forced to 1, noisy branch arbitrary.
  auto tap = pim_noise_pass(s, 0.5, constant_params(3, 0.0, 60.0), constant_params(3, 0.0, -1.0), noise);
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(tap.outputs.t1[i], s[i], 1e-12);
}

TEST(NoisePass, NoiseScaleFollowsTheSignalSpread) {
  auto s = Rng(15).normal_tensor<double>({4, 8, 8, 8}, 3.0);
  Rng noise(3);
  auto noisy = add_relative_noise(s, 0.1, noise);
  double var = 0.0;
  for (std::size_t i = 0; i < s.numel(); ++i) var += (noisy[i] - s[i]) * (noisy[i] - s[i]);
  const double observed = std::sqrt(var / static_cast<double>(s.numel()));
  EXPECT_NEAR(observed, 0.3, 0.02);
  EXPECT_THROW(add_relative_noise(s, -0.1, noise), ContractError);
}

TEST(NoisePass, LossMatchesStraightLineReevaluation) {
  Rng rng(16);
  const std::size_t C = 3;
  CredibilityParams<double> params(C, rng);
  auto s = rng.normal_tensor<double>({1, C, 2, 2}, 1.0);
  Rng noise(4);
  auto tap = pim_noise_pass(s, 0.1, params, noise);

  // Rebuild the noisy copy with the same generator, then apply the
  // interaction formula and the RMS distance element by element.
  Rng again(4);
  auto noisy = add_relative_noise(s, 0.1, again);
  const auto W = params.weight.data();
  const auto b = params.bias.data();
  const std::size_t P = 4;
  auto cred = [&](const T& x, std::size_t c, std::size_t i) {
    double z = b[c];
    for (std::size_t k = 0; k < C; ++k) z += W[c * C + k] * x[k * P + i];
    return 1.0 / (1.0 + std::exp(-z));
  };
  double e1 = 0.0, e2 = 0.0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) {
      const double a = s[c * P + i], n = noisy[c * P + i];
      const double pa = cred(s, c, i), pn = cred(noisy, c, i);
      e1 += std::pow(oracle::pim_scalar(a, n, pa, pn) - a, 2);
      e2 += std::pow(oracle::pim_scalar(n, a, pn, pa) - a, 2);
    }
  const double expected = 0.5 * (std::sqrt(e1 / 12.0) + std::sqrt(e2 / 12.0));
  EXPECT_NEAR(loss1(tap.outputs, tap.reference).item(), expected, 1e-12);
}

TEST(Loss1, KnownValues) {
  Rng rng(17);
  auto s = rng.normal_tensor<double>({1, 2, 3, 3}, 1.0);
  EXPECT_EQ(loss1(FeaturePair<double>{s, s}, s).item(), 0.0);
  auto shifted = affine(s, 1.0, -0.3);
  EXPECT_NEAR(loss1(FeaturePair<double>{shifted, shifted}, s).item(), 0.3, 1e-12);
}

TEST(PerceptionInteraction, SharedAndSeparateParameterNaming) {
  Rng rng(18);
  PerceptionInteraction<double> shared(4, true, rng), separate(4, false, rng);
  ParameterList<double> a, b;
  shared.collect("pim", a);
  separate.collect("pim", b);
  EXPECT_EQ(a.size(), 2u);
  EXPECT_EQ(b.size(), 4u);
  EXPECT_EQ(a[0].name, "pim.cred.weight");
  EXPECT_EQ(b[2].name, "pim.cred2.weight");
}
