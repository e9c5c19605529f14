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
#include <filesystem>
#include <limits>

#include "srcnet/srcnet.hpp"

using namespace srcnet;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / ("srcnet_" + std::string(info->test_suite_name()) + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string str(const std::string& leaf = "") const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

std::vector<SamplePair> small_synth(std::size_t n, std::size_t size, std::uint64_t seed) {
  SynthSpec spec;
  spec.image_size = size;
  spec.seed = seed;
  spec.min_extent = static_cast<double>(size) / 8;
  spec.max_extent = static_cast<double>(size) / 3;
  return generate_synthetic(spec, n);
}

Batch<double> batch_of(const std::vector<SamplePair>& s) {
  std::vector<const SamplePair*> p;
  for (const auto& x : s) p.push_back(&x);
  return collate<double>(p);
}

std::vector<std::vector<double>> snapshot(const ParameterList<double>& list) {
  std::vector<std::vector<double>> out;
  for (const auto& p : list) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

ModelConfig small_model() {
  auto cfg = ModelConfig::desk();
  cfg.c = 16;
  cfg.n1 = cfg.n2 = 1;
  cfg.k = 4;
  return cfg;
}

}  // namespace

TEST(Schedule, StepDecay) {
  TrainConfig cfg;
  EXPECT_EQ(lr_schedule(0, cfg), 2e-3);
  EXPECT_EQ(lr_schedule(19, cfg), 2e-3);
  EXPECT_NEAR(lr_schedule(20, cfg), 1.6e-3, 1e-18);
  EXPECT_NEAR(lr_schedule(45, cfg), 2e-3 * 0.64, 1e-18);
}

TEST(TrainConfigTest, ValidationAndRoundTrip) {
  auto bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.decay_factor = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.precision = "f16"; }).validate(), ConfigError);
  TrainConfig c;
  c.lr = 5e-4;
  c.epochs = 7;
  c.augment = true;
  const auto back = TrainConfig::from_kv(KeyValueConfig::parse(c.to_kv().to_text()));
  EXPECT_EQ(back.lr, 5e-4);
  EXPECT_EQ(back.epochs, 7u);
  EXPECT_TRUE(back.augment);
}

TEST(AdamWTest, ThreeStepsMatchTheHandRecurrence) {
  // f(w) = 0.5 * a * (w - c)^2, gradient a * (w - c).
  const double a = 3.0, c = 0.7, lr = 0.05, wd = 0.1;
  T w({1}, {2.0}, true);
  AdamW<double> opt(ParameterList<double>{{"w", w}}, wd);
  double ref = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    backward(scale(square(affine(w, 1.0, -c)), 0.5 * a));
    opt.step(lr);
    opt.zero_grad();
    const double g = a * (ref - c);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1 - std::pow(0.9, t)), vhat = v / (1 - std::pow(0.999, t));
    ref = ref - lr * wd * ref - lr * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(w[0], ref, 1e-15) << "step " << t;
  }
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(AdamWTest, LogVariancesAreNotDecayed) {
  T s({1}, {1.0}, true), x({1}, {1.0}, true);
  AdamW<double> opt(ParameterList<double>{{"objective.loss2.log_var", s}, {"x", x}}, 0.5);
  backward(add(scale(s, 0.0), scale(x, 0.0)));  // zero gradients, decay only
  opt.step(0.1);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_NEAR(x[0], 1.0 - 0.1 * 0.5, 1e-15);
}

TEST(TrainerStep, ZeroLearningRateFreezesParameters) {
  const auto data = small_synth(2, 16, 1);
  Trainer<double> trainer(small_model(), TrainConfig{});
  const auto before = snapshot(trainer.model().parameters());
  for (int i = 0; i < 3; ++i) trainer.step(batch_of(data), 0.0);
  EXPECT_EQ(snapshot(trainer.model().parameters()), before);
}

TEST(TrainerStep, SingleSampleOverfitDecreasesAcrossEveryWindow) {
  const auto data = small_synth(1, 32, 2);
  TrainConfig tc;
  tc.seed = 2;
  Trainer<double> trainer(ModelConfig::desk(), tc);
  const auto batch = batch_of(data);
  std::vector<double> loss;
  for (int i = 0; i < 200; ++i) loss.push_back(trainer.step(batch, 2e-3).total.item());
  for (std::size_t t = 0; t + 50 < loss.size(); ++t)
    EXPECT_LT(loss[t + 50], loss[t]) << "window starting at step " << t;
}

TEST(TrainerStep, NonFiniteLossAbortsWithLastGoodCheckpoint) {
  TempDir tmp;
  const auto data = small_synth(2, 16, 3);
  Trainer<double> trainer(small_model(), TrainConfig{});
  trainer.step(batch_of(data), 1e-3);
  trainer.save_state(tmp.str("state.ckpt"));
  auto w = trainer.model().combine().final.bias;
  w.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    trainer.step(batch_of(data), 1e-3);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_NE(std::string(e.what()).find(tmp.str("state.ckpt")), std::string::npos) << e.what();
  }
}

TEST(TrainerStep, EveryParameterOfEachVariantGetsGradient) {
  const auto data = small_synth(2, 16, 4);
  const auto batch = batch_of(data);
  for (Variant v : {Variant::full, Variant::alpha, Variant::beta, Variant::gamma}) {
    auto cfg = small_model();
    cfg.variant = v;
    SrcNet<double> model(cfg, 5);
    AdamW<double> opt(model.parameters(), 0.01);
    const auto params = model.parameters();
    std::vector<bool> seen(params.size(), false);
    for (int s = 0; s < 10; ++s) {
      backward(compute_objective(model, batch, static_cast<std::uint64_t>(s)).total);
      for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].tensor.has_grad())
          for (double g : params[i].tensor.grad()) seen[i] = seen[i] || g != 0.0;
      opt.step(1e-3);
      opt.zero_grad();
    }
    for (std::size_t i = 0; i < params.size(); ++i) EXPECT_TRUE(seen[i]) << to_string(v) << " " << params[i].name;
  }
}

TEST(TrainerEpochs, OrderIsADeterministicPermutation) {
  TrainConfig tc;
  tc.seed = 9;
  Trainer<double> a(small_model(), tc), b(small_model(), tc);
  auto o1 = a.epoch_order(30, 4);
  EXPECT_EQ(o1, b.epoch_order(30, 4));
  EXPECT_NE(o1, a.epoch_order(30, 5));
  std::sort(o1.begin(), o1.end());
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(o1[i], i);
}

TEST(Checkpoint, EvaluationIsBitExactAfterReload) {
  TempDir tmp;
  const auto data = small_synth(6, 16, 6);
  TrainConfig tc;
  tc.batch_size = 3;
  Trainer<double> trainer(small_model(), tc);
  trainer.train_epoch(data);
  save_model(tmp.str("m.ckpt"), trainer.model());
  auto loaded = load_model<double>(tmp.str("m.ckpt"));
  const auto r1 = evaluate(trainer.model(), data, 3);
  const auto r2 = evaluate(loaded, data, 3);
  EXPECT_EQ(r1.stats, r2.stats);
  EXPECT_EQ(r1.metrics.f1, r2.metrics.f1);
  loaded.eval();
  trainer.model().eval();
  const auto batch = batch_of(data);
  NoGradGuard guard;
  auto p1 = trainer.model().predict_probs(batch.img1, batch.img2);
  auto p2 = loaded.predict_probs(batch.img1, batch.img2);
  for (std::size_t i = 0; i < p1.numel(); ++i) ASSERT_EQ(p1[i], p2[i]);
}

TEST(Checkpoint, ConfigMismatchListsEveryDifferingField) {
  TempDir tmp;
  save_model(tmp.str("m.ckpt"), SrcNet<double>(small_model(), 0));
  auto other = small_model();
  other.c = 32;
  other.variant = Variant::gamma;
  SrcNet<double> model(other, 0);
  try {
    load_weights(read_checkpoint(tmp.str("m.ckpt")), model);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("model.c"), std::string::npos) << msg;
    EXPECT_NE(msg.find("model.variant"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  TempDir tmp;
  {
    std::ofstream out(tmp.str("junk.ckpt"), std::ios::binary);
    out << "not a checkpoint";
  }
  EXPECT_THROW(read_checkpoint(tmp.str("junk.ckpt")), CheckpointError);
  EXPECT_THROW(read_checkpoint(tmp.str("missing.ckpt")), CheckpointError);
}

TEST(Resume, SplitRunEqualsStraightRun) {
  TempDir tmp;
  const auto train = small_synth(8, 16, 7), val = small_synth(4, 16, 8);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = 3;
  tc.epochs = 4;
  tc.augment = true;
  Trainer<double> straight(small_model(), tc);
  straight.fit(train, val);

  tc.epochs = 2;
  tc.out_dir = tmp.str("run");
  Trainer<double> first(small_model(), tc);
  first.fit(train, val);

  tc.epochs = 4;
  Trainer<double> second(small_model(), tc);
  second.load_state(tmp.str("run/state.ckpt"));
  EXPECT_EQ(second.epoch(), 2u);
  second.fit(train, val);

  EXPECT_EQ(snapshot(second.model().parameters()), snapshot(straight.model().parameters()));
  for (const auto& p : second.model().named_tensors()) {
    if (p.role != TensorRole::buffer) continue;
    for (const auto& q : straight.model().named_tensors()) {
      if (q.name == p.name) {
        EXPECT_TRUE(std::equal(p.tensor.data().begin(), p.tensor.data().end(), q.tensor.data().begin())) << p.name;
      }
    }
  }
  ASSERT_EQ(second.history().size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(second.history()[e].loss, straight.history()[e].loss);
    EXPECT_EQ(second.history()[e].val_f1, straight.history()[e].val_f1);
  }
  EXPECT_TRUE(fs::exists(tmp.str("run/train_log.csv")));
  EXPECT_TRUE(fs::exists(tmp.str("run/best.ckpt")));
}

TEST(Evaluate, TrainingSetScoresAtLeastTheHeldOutSet) {
  SynthSpec spec;
  spec.image_size = 32;
  spec.min_extent = 4;
  spec.max_extent = 12;
  const auto all = generate_synthetic(spec, 48);
  const std::vector<SamplePair> train(all.begin(), all.begin() + 32), val(all.begin() + 32, all.end());
  TrainConfig tc;
  tc.epochs = 15;
  Trainer<double> trainer(ModelConfig::desk(), tc);
  trainer.fit(train, val);
  const double train_f1 = evaluate(trainer.model(), train).metrics.f1;
  const double val_f1 = evaluate(trainer.model(), val).metrics.f1;
  EXPECT_GE(train_f1, val_f1);
  EXPECT_GT(train_f1, 0.5);
  std::ofstream(fs::temp_directory_path() / "srcnet_train_vs_val.txt") << train_f1 << " " << val_f1 << "\n";
}

TEST(Evaluate, AllBackgroundPredictorHasZeroRecallAndUndefinedPrecision) {
  const auto data = small_synth(6, 16, 10);
  SrcNet<double> model(small_model(), 0);
  auto w = model.combine().final.weight;
  for (auto& v : w.mutable_data()) v = 0.0;
  auto b = model.combine().final.bias;
  b.mutable_data()[0] = 10.0;
  b.mutable_data()[1] = -10.0;
  const auto r = evaluate(model, data);
  ASSERT_GT(r.stats.tp + r.stats.fn, 0u);
  EXPECT_EQ(r.metrics.recall, 0.0);
  EXPECT_TRUE(r.metrics.precision_undefined);
  ConfusionStats merged;
  for (const auto& s : r.per_sample) merged += s;
  EXPECT_EQ(merged, r.stats);
}

TEST(TrainLog, HeaderAndRow) {
  EXPECT_EQ(train_log_header(), "epoch,lr,loss,loss1,loss2,loss3,f1");
  EpochRecord r{3, 0.002, 1.5, 0.25, 0.5, 0.75, 0.9};
  EXPECT_EQ(train_log_row(r), "3,0.002,1.5,0.25,0.5,0.75,0.9");
}
