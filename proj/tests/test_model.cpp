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

#include <cmath>
#include <set>
#include <thread>

#include "srcnet/srcnet.hpp"

using namespace srcnet;
using T = Tensor<double>;

namespace {

// Closed-form parameter counts, written out layer by layer.
std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k, std::size_t groups = 1) {
  return out * (in / groups) * k * k + out;
}

std::size_t block_count(std::size_t c) {
  return conv_count(c, c, 1, c) + conv_count(c, c, 3, c) + conv_count(c, c, 5, c) + 2 * c +
         conv_count(c, 4 * c, 1) + 2 * 4 * c + conv_count(4 * c, c, 1);
}

std::size_t model_count(const ModelConfig& cfg) {
  const std::size_t c = cfg.c, p = cfg.p, l = c / cfg.k;
  std::size_t n = conv_count(cfg.in_channels, c / 4, 4) + 2 * (c / 4) + conv_count(c / 4, c, p / 4);
  n += (cfg.n1 + cfg.n2) * block_count(c);
  if (has_interaction(cfg.variant)) n += cfg.n1 * (cfg.shared_credibility ? 1 : 2) * (c * c + c);
  if (has_mode_fusion(cfg.variant)) n += (l * cfg.m + cfg.m) + cfg.m * (l * l + l);
  n += c * 32 * p * p + 32 + 2 * 32 + 32 * cfg.out_ch + cfg.out_ch;  // patch combining
  n += c * cfg.land_cover_classes * p * p + cfg.land_cover_classes;   // land-cover head
  n += 2 * 3;                                                          // loss log-variances
  return n;
}

Batch<double> synthetic_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
  SynthSpec spec;
  spec.image_size = size;
  spec.seed = seed;
  spec.min_extent = 3;
  spec.max_extent = static_cast<double>(size) / 2;
  static std::vector<SamplePair> keep;
  keep = generate_synthetic(spec, n);
  std::vector<const SamplePair*> ptrs;
  for (const auto& s : keep) ptrs.push_back(&s);
  return collate<double>(ptrs);
}

}  // namespace

TEST(PatchEmbed, StrideArithmeticAtFullScale) {
  Rng rng(1);
  PatchEmbed<double> embed(3, 256, 8, rng);
  auto out = embed.forward(T::zeros({1, 3, 256, 256}), false);
  EXPECT_EQ(out.shape(), (Shape{1, 256, 32, 32}));
}

TEST(PatchEmbed, PatchFourUsesAOneByOneSecondConvolution) {
  Rng rng(2);
  PatchEmbed<double> embed(3, 32, 4, rng);
  EXPECT_EQ(embed.gen_patch.weight.shape(), (Shape{8, 3, 4, 4}));
  EXPECT_EQ(embed.gen_patch2.weight.shape(), (Shape{32, 8, 1, 1}));
  for (std::size_t p : {4u, 8u, 12u, 16u}) {
    PatchEmbed<double> e(3, 16, p, rng);
    auto out = e.forward(rng.uniform_tensor<double>({1, 3, 2 * p, 3 * p}, 0, 1), true);
    EXPECT_EQ(out.shape(), (Shape{1, 16, 2, 3})) << "p=" << p;
  }
}

TEST(PatchEmbed, IndivisibleExtentNamesAxes) {
  Rng rng(3);
  PatchEmbed<double> embed(3, 16, 8, rng);
  try {
    embed.forward(T::zeros({1, 3, 20, 16}), false);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axes 2, 3"), std::string::npos) << e.what();
  }
}

TEST(SrcBlock, ZeroWeightsGiveTheResidualIdentity) {
  Rng rng(4);
  SrcBlock<double> block(8, rng);
  ParameterList<double> list;
  block.collect("b", list);
  for (const auto& p : list) {
    // Layer-norm scale keeps its default of one.
    if (p.name == "b.norm.weight") continue;
    auto t = p.tensor;  // handle shares storage with the block
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  auto x = rng.normal_tensor<double>({2, 8, 5, 4}, 1.0);
  auto y = block.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(SrcBlock, ParameterCountMatchesClosedForm) {
  Rng rng(5);
  for (std::size_t c : {8u, 32u, 256u}) {
    SrcBlock<double> block(c, rng);
    ParameterList<double> list;
    block.collect("b", list);
    EXPECT_EQ(count_parameters(list), 8 * c * c + 53 * c);
    EXPECT_EQ(count_parameters(list), block_count(c));
  }
  EXPECT_EQ(block_count(256), 537856u);  // about 0.54M per block
}

TEST(SrcBlock, DepthwiseLayersKeepChannelsAndExpansionIsFour) {
  Rng rng(6);
  SrcBlock<double> block(16, rng);
  EXPECT_EQ(block.dw3.weight.shape(), (Shape{16, 1, 3, 3}));
  EXPECT_EQ(block.dw5.weight.shape(), (Shape{16, 1, 5, 5}));
  EXPECT_EQ(block.pw1.weight.shape(), (Shape{64, 16, 1, 1}));
  EXPECT_EQ(block.pw2.weight.shape(), (Shape{16, 64, 1, 1}));
  auto x = rng.normal_tensor<double>({1, 16, 7, 3}, 1.0);
  EXPECT_EQ(block.forward(x).shape(), x.shape());
}

TEST(PatchCombine, UpsamplesByThePatchSize) {
  Rng rng(7);
  for (std::size_t p : {4u, 8u}) {
    PatchCombine<double> combine(16, p, 2, rng);
    auto out = combine.forward(rng.normal_tensor<double>({2, 16, 3, 5}, 1.0), true);
    EXPECT_EQ(out.shape(), (Shape{2, 2, 3 * p, 5 * p}));
  }
}

TEST(SrcNetForward, OutputMatchesInputExtentForEveryVariant) {
  for (Variant v : {Variant::full, Variant::alpha, Variant::beta, Variant::gamma}) {
    auto cfg = ModelConfig::tiny();
    cfg.variant = v;
    SrcNet<double> model(cfg, 1);
    Rng rng(8);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {12, 16}, {4, 20}}) {
      auto a = rng.uniform_tensor<double>({2, 3, h, w}, 0, 1), b = rng.uniform_tensor<double>({2, 3, h, w}, 0, 1);
      auto out = model.forward(a, b);
      EXPECT_EQ(out.logits.shape(), (Shape{2, 2, h, w})) << to_string(v);
      EXPECT_EQ(out.fused.shape(), (Shape{2, 8, h / 4, w / 4}));
    }
  }
}

TEST(SrcNetForward, ShapeMismatchAndChannelErrors) {
  SrcNet<double> model(ModelConfig::tiny(), 1);
  EXPECT_THROW(model.forward(T::zeros({1, 3, 8, 8}), T::zeros({1, 3, 8, 12})), DimensionError);
  EXPECT_THROW(model.forward(T::zeros({1, 4, 8, 8}), T::zeros({1, 4, 8, 8})), DimensionError);
}

TEST(SrcNetForward, SubtractionCollapsesOnIdenticalInputsButModeFusionDoesNot) {
  Rng rng(9);
  auto img = rng.uniform_tensor<double>({1, 3, 16, 16}, 0, 1);
  auto alpha_cfg = ModelConfig::desk();
  alpha_cfg.variant = Variant::alpha;
  SrcNet<double> alpha(alpha_cfg, 3), full(ModelConfig::desk(), 3);
  auto fa = alpha.forward(img, img).fused;
  auto ff = full.forward(img, img).fused;
  double amax = 0.0, fmax = 0.0;
  for (std::size_t i = 0; i < fa.numel(); ++i) {
    amax = std::max(amax, std::abs(fa[i]));
    fmax = std::max(fmax, std::abs(ff[i]));
  }
  EXPECT_EQ(amax, 0.0);
  EXPECT_GT(fmax, 1e-3);
}

TEST(SrcNetForward, VariantsWireTheRightModules) {
  for (Variant v : {Variant::full, Variant::alpha, Variant::beta, Variant::gamma}) {
    auto cfg = ModelConfig::tiny();
    cfg.variant = v;
    SrcNet<double> model(cfg, 0);
    EXPECT_EQ(model.interactions().size(), has_interaction(v) ? cfg.n1 : 0u);
    EXPECT_EQ(model.fusion().has_value(), has_mode_fusion(v));
  }
  EXPECT_EQ(parse_variant("gamma"), Variant::gamma);
  EXPECT_THROW(parse_variant("delta"), ConfigError);
}

TEST(SrcNetForward, NoiseTapOnlyWithInteraction) {
  Rng rng(10);
  auto img = rng.uniform_tensor<double>({1, 3, 8, 8}, 0, 1);
  ForwardOptions<double> opt;
  opt.noise_tap = true;
  SrcNet<double> full(ModelConfig::tiny(), 0);
  auto out = full.forward(img, img, opt);
  ASSERT_TRUE(out.tap.has_value());
  EXPECT_EQ(out.tap->reference.shape(), (Shape{1, 8, 2, 2}));
  auto cfg = ModelConfig::tiny();
  cfg.variant = Variant::gamma;
  EXPECT_FALSE(SrcNet<double>(cfg, 0).forward(img, img, opt).tap.has_value());
}

TEST(SrcNetParameters, CountsMatchClosedForm) {
  EXPECT_EQ(count_parameters(SrcNet<double>(ModelConfig::desk(), 0)), model_count(ModelConfig::desk()));
  EXPECT_EQ(model_count(ModelConfig::desk()), 63052u);
  for (Variant v : {Variant::alpha, Variant::beta, Variant::gamma}) {
    auto cfg = ModelConfig::desk();
    cfg.variant = v;
    EXPECT_EQ(count_parameters(SrcNet<double>(cfg, 0)), model_count(cfg)) << to_string(v);
  }
  auto separate = ModelConfig::desk();
  separate.shared_credibility = false;
  EXPECT_EQ(count_parameters(SrcNet<double>(separate, 0)), model_count(separate));
}

TEST(SrcNetParameters, PaperScaleCountIsWithinTolerance) {
  const auto cfg = ModelConfig::paper_scale();
  const std::size_t n = count_parameters(SrcNet<float>(cfg, 0));
  EXPECT_EQ(n, model_count(cfg));
  EXPECT_EQ(n, 5291764u);
  EXPECT_GE(n, 3600000u);
  EXPECT_LE(n, 6700000u);
}

TEST(SrcNetParameters, SmallCases) {
  EXPECT_EQ(count_parameters(ParameterList<double>{}), 0u);
  Rng rng(11);
  Linear<double> head(16, 16, rng, 0.25);
  ParameterList<double> list;
  head.collect("h", list);
  EXPECT_EQ(count_parameters(list), 272u);
}

TEST(SrcNetParameters, NamesAreUniqueAndBreakdownSumsToTotal) {
  SrcNet<double> model(ModelConfig::desk(), 0);
  std::set<std::string> names;
  for (const auto& p : model.named_tensors()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  std::size_t sum = 0;
  for (const auto& [k, v] : parameter_breakdown(model.named_tensors())) sum += v;
  EXPECT_EQ(sum, count_parameters(model));
  const auto summary = model_summary(model);
  EXPECT_NE(summary.find("total_parameters\t63052"), std::string::npos);
  EXPECT_NE(summary.find("buffer"), std::string::npos);  // batch-norm running statistics
}

TEST(SrcNetParameters, SiameseBranchesShareOneBlock) {
  SrcNet<double> model(ModelConfig::desk(), 0);
  for (std::size_t i = 0; i < model.config().n1; ++i) {
    EXPECT_EQ(&model.extraction_block(i, 0), &model.extraction_block(i, 1));
    EXPECT_EQ(model.extraction_block(i, 0).pw1.weight.data().data(),
              model.extraction_block(i, 1).pw1.weight.data().data());
  }
}

TEST(SrcNetConfig, ValidationRejectsBadValues) {
  auto bad = [](auto edit) {
    auto cfg = ModelConfig::desk();
    edit(cfg);
    return cfg;
  };
  EXPECT_THROW(SrcNet<double>(bad([](ModelConfig& c) { c.p = 6; }), 0), ConfigError);
  EXPECT_THROW(SrcNet<double>(bad([](ModelConfig& c) { c.c = 30; }), 0), ConfigError);
  EXPECT_THROW(SrcNet<double>(bad([](ModelConfig& c) { c.k = 5; }), 0), ConfigError);
  EXPECT_THROW(SrcNet<double>(bad([](ModelConfig& c) { c.land_cover_classes = 1; }), 0), ConfigError);
  EXPECT_THROW(SrcNet<double>(bad([](ModelConfig& c) { c.loss1_block = 2; }), 0), ConfigError);
  EXPECT_THROW(SrcNet<double>(bad([](ModelConfig& c) { c.alphas.pop_back(); }), 0), ConfigError);
}

TEST(SrcNetConfig, KeyValueRoundTripAndDiff) {
  auto cfg = ModelConfig::paper_scale();
  cfg.variant = Variant::beta;
  cfg.noise_sigma = 0.25;
  const auto back = ModelConfig::from_kv(KeyValueConfig::parse(cfg.to_kv().to_text()));
  EXPECT_TRUE(back == cfg);
  const auto d = ModelConfig::diff(ModelConfig::desk(), cfg);
  std::string joined;
  for (const auto& s : d) joined += s + "\n";
  EXPECT_NE(joined.find("c"), std::string::npos);
  EXPECT_NE(joined.find("variant"), std::string::npos);
  EXPECT_NE(joined.find("noise_sigma"), std::string::npos);
  EXPECT_EQ(d.size(), 6u) << joined;  // c, p, n1, n2, variant, noise_sigma
}

TEST(SrcNetDeterminism, SameSeedSameOutputs) {
  Rng rng(12);
  auto a = rng.uniform_tensor<double>({2, 3, 16, 16}, 0, 1), b = rng.uniform_tensor<double>({2, 3, 16, 16}, 0, 1);
  SrcNet<double> m1(ModelConfig::desk(), 5), m2(ModelConfig::desk(), 5);
  m1.eval();
  m2.eval();
  auto o1 = m1.forward(a, b).logits, o2 = m1.forward(a, b).logits, o3 = m2.forward(a, b).logits;
  for (std::size_t i = 0; i < o1.numel(); ++i) {
    EXPECT_EQ(o1[i], o2[i]);
    EXPECT_EQ(o1[i], o3[i]);
  }
}

TEST(SrcNetGradients, NoDeadParameters) {
  // Every trainable tensor must receive gradient from the joint objective,
  // and (with weight decay off) move under a few optimizer steps.
  auto batch = synthetic_batch(2, 16, 3);
  SrcNet<double> model(ModelConfig::desk(), 4);
  auto terms = compute_objective(model, batch, 9);
  backward(terms.total);
  for (const auto& p : model.parameters()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    double g = 0.0;
    for (double v : p.tensor.grad()) g = std::max(g, std::abs(v));
    EXPECT_GT(g, 0.0) << p.name;
  }
  model.zero_grad();

  TrainConfig tc;
  tc.weight_decay = 0.0;
  tc.seed = 4;
  Trainer<double> trainer(ModelConfig::desk(), tc);
  std::vector<std::vector<double>> before;
  for (const auto& p : trainer.model().parameters()) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  for (int s = 0; s < 10; ++s) trainer.step(batch, 1e-3);
  const auto after = trainer.model().parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    const auto v = after[i].tensor.data();
    EXPECT_FALSE(std::equal(v.begin(), v.end(), before[i].begin())) << after[i].name;
  }
}

TEST(SrcNetConcurrency, ReadOnlyInferenceFromSeveralThreads) {
  SrcNet<double> model(ModelConfig::desk(), 6);
  model.eval();
  Rng rng(13);
  std::vector<T> inputs;
  for (int i = 0; i < 8; ++i) inputs.push_back(rng.uniform_tensor<double>({1, 3, 16, 16}, 0, 1));
  std::vector<std::vector<double>> serial;
  {
    NoGradGuard guard;
    for (const auto& x : inputs) {
      auto p = model.predict_probs(x, inputs[0]);
      serial.emplace_back(p.data().begin(), p.data().end());
    }
  }
  std::vector<std::vector<double>> parallel(inputs.size());
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      NoGradGuard guard;
      for (std::size_t i = t; i < inputs.size(); i += 4) {
        auto p = model.predict_probs(inputs[i], inputs[0]);
        parallel[i].assign(p.data().begin(), p.data().end());
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(serial, parallel);
}
