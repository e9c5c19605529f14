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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "srcnet/checkpoint.hpp"
#include "srcnet/data.hpp"
#include "srcnet/losses.hpp"
#include "srcnet/metrics.hpp"
#include "srcnet/model.hpp"

namespace srcnet {

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 2e-3;
  double decay_factor = 0.8;
  std::size_t decay_every_epochs = 20;
  std::size_t batch_size = 8;
  std::size_t epochs = 60;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  bool augment = false;
  std::string data_dir;
  std::string out_dir;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay_factor must be in (0, 1]");
    if (decay_every_epochs == 0) throw ConfigError("decay_every_epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("train.lr", lr);
    kv.set("train.decay_factor", decay_factor);
    kv.set("train.decay_every_epochs", static_cast<long long>(decay_every_epochs));
    kv.set("train.batch_size", static_cast<long long>(batch_size));
    kv.set("train.epochs", static_cast<long long>(epochs));
    kv.set("train.weight_decay", weight_decay);
    kv.set("train.seed", static_cast<long long>(seed));
    kv.set("train.precision", precision);
    kv.set("train.augment", augment);
    return kv;
  }

  static TrainConfig from_kv(const KeyValueConfig& kv) { return from_kv(kv, TrainConfig{}); }
  static TrainConfig from_kv(const KeyValueConfig& kv, TrainConfig base) {
    base.lr = kv.get_double("train.lr", base.lr);
    base.decay_factor = kv.get_double("train.decay_factor", base.decay_factor);
    base.decay_every_epochs = static_cast<std::size_t>(
        kv.get_int("train.decay_every_epochs", static_cast<long long>(base.decay_every_epochs)));
    base.batch_size = static_cast<std::size_t>(kv.get_int("train.batch_size", static_cast<long long>(base.batch_size)));
    base.epochs = static_cast<std::size_t>(kv.get_int("train.epochs", static_cast<long long>(base.epochs)));
    base.weight_decay = kv.get_double("train.weight_decay", base.weight_decay);
    base.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long long>(base.seed)));
    base.precision = kv.get("train.precision", base.precision);
    base.augment = kv.get_bool("train.augment", base.augment);
    base.data_dir = kv.get("train.data", base.data_dir);
    base.out_dir = kv.get("train.out", base.out_dir);
    return base;
  }
};

/// lr0 * factor^floor(epoch / period).
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every_epochs));
}

/// Adam with decoupled weight decay. Decay is multiplied by the step's
/// learning rate, so lr = 0 freezes every parameter.
template <typename T>
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  AdamW() = default;
  AdamW(ParameterList<T> params, double wd) : weight_decay(wd), params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
      // Loss log-variances sit in a regularized objective of their own.
      decay_.push_back(p.name.find("log_var") == std::string::npos);
    }
  }

  void step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      const auto g = t.grad();
      auto w = t.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      const double decay = decay_[i] ? lr * weight_decay : 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
        double wj = static_cast<double>(w[j]);
        wj -= decay * wj;
        wj -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        w[j] = static_cast<T>(wj);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::uint64_t steps() const { return steps_; }
  const ParameterList<T>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

 private:
  ParameterList<T> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<bool> decay_;
  std::uint64_t steps_ = 0;
};

template <typename T>
struct ObjectiveTerms {
  Tensor<T> total;
  Tensor<T> loss1;  // zero when the variant has no interaction module
  Tensor<T> loss2;
  Tensor<T> loss3;
  Tensor<T> logits;
};

/// Loss = Loss1 + Loss2 + Loss3 for one collated batch.
template <typename T>
ObjectiveTerms<T> compute_objective(const SrcNet<T>& model, const Batch<T>& batch,
                                    std::uint64_t noise_seed) {
  ForwardOptions<T> opt;
  opt.noise_tap = has_interaction(model.config().variant);
  opt.noise_seed = noise_seed;
  auto out = model.forward(batch.img1, batch.img2, opt);
  ObjectiveTerms<T> terms;
  terms.logits = out.logits;
  terms.loss1 = out.tap ? loss1(out.tap->outputs, out.tap->reference) : Tensor<T>::scalar(T{0});
  terms.loss2 = loss2_change_prob(out.features, model.land_cover(), batch.gt, model.loss2_weights()).total;
  terms.loss3 = hybrid_loss(softmax(out.logits, 1), batch.gt, model.loss3_weights()).total;
  terms.total = total_loss(terms.loss1, terms.loss2, terms.loss3);
  return terms;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss1 = 0.0;
  double loss2 = 0.0;
  double loss3 = 0.0;
  double val_f1 = 0.0;
};

inline std::string train_log_header() { return "epoch,lr,loss,loss1,loss2,loss3,f1"; }

inline std::string train_log_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + ',' + format_double(r.lr) + ',' + format_double(r.loss) + ',' +
         format_double(r.loss1) + ',' + format_double(r.loss2) + ',' + format_double(r.loss3) + ',' +
         format_double(r.val_f1);
}

struct EvalResult {
  ConfusionStats stats;
  Metrics metrics;
  std::vector<ConfusionStats> per_sample;
};

/// Scores `samples` in eval mode; per-sample statistics are merged by
/// addition. Overlays go to <overlay_dir>/<id>.png over the second image.
template <typename T>
EvalResult evaluate(SrcNet<T>& model, const std::vector<SamplePair>& samples, std::size_t batch_size = 8,
                    const std::string& overlay_dir = "") {
  const bool was_training = model.training();
  model.eval();
  NoGradGuard no_grad;
  EvalResult res;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const SamplePair*> chunk;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) chunk.push_back(&samples[i]);
    const auto batch = collate<T>(chunk);
    const auto masks = probs_to_masks(model.predict_probs(batch.img1, batch.img2));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto s = confusion(masks[i].values, chunk[i]->mask.values);
      res.per_sample.push_back(s);
      res.stats += s;
      if (!overlay_dir.empty()) {
        write_png((std::filesystem::path(overlay_dir) / (chunk[i]->id + ".png")).string(),
                  render_overlay(masks[i], chunk[i]->mask, chunk[i]->img2));
      }
    }
  }
  res.metrics = compute_metrics(res.stats);
  if (was_training) model.train();
  return res;
}

template <typename T>
class Trainer {
 public:
  Trainer(ModelConfig model_cfg, TrainConfig cfg)
      : cfg_(std::move(cfg)), model_(std::move(model_cfg), cfg_.seed), opt_(model_.parameters(), cfg_.weight_decay) {
    cfg_.validate();
  }

  SrcNet<T>& model() { return model_; }
  const SrcNet<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t epoch() const { return epoch_; }
  double best_f1() const { return best_f1_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const std::string& last_good_checkpoint() const { return last_good_; }

  /// One optimizer update. Returns the objective terms evaluated before it.
  ObjectiveTerms<T> step(const Batch<T>& batch, double lr) {
    model_.train();
    const std::uint64_t noise_seed = mix64(cfg_.seed ^ mix64(opt_.steps() + 0x5eed));
    auto terms = compute_objective(model_, batch, noise_seed);
    const double loss = static_cast<double>(terms.total.item());
    if (!std::isfinite(loss)) {
      throw TrainingAborted("non-finite loss at optimizer step " + std::to_string(opt_.steps()) +
                            "; last good checkpoint: " + (last_good_.empty() ? "(none)" : last_good_));
    }
    backward(terms.total);
    opt_.step(lr);
    opt_.zero_grad();
    return terms;
  }

  /// Deterministic per-epoch order: depends only on (seed, epoch).
  std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch) const {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(cfg_.seed).split("shuffle").split(static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng.engine());
    return order;
  }

  EpochRecord train_epoch(const std::vector<SamplePair>& train) {
    EpochRecord rec;
    rec.epoch = epoch_;
    rec.lr = lr_schedule(epoch_, cfg_);
    const auto order = epoch_order(train.size(), epoch_);
    Rng aug = Rng(cfg_.seed).split("augment").split(static_cast<std::uint64_t>(epoch_));
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      std::vector<SamplePair> augmented;
      std::vector<const SamplePair*> chunk;
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      if (cfg_.augment) {
        augmented.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) augmented.push_back(augment(train[order[i]], aug));
        for (const auto& s : augmented) chunk.push_back(&s);
      } else {
        for (std::size_t i = start; i < end; ++i) chunk.push_back(&train[order[i]]);
      }
      const auto terms = step(collate<T>(chunk), rec.lr);
      rec.loss += static_cast<double>(terms.total.item());
      rec.loss1 += static_cast<double>(terms.loss1.item());
      rec.loss2 += static_cast<double>(terms.loss2.item());
      rec.loss3 += static_cast<double>(terms.loss3.item());
      ++batches;
    }
    if (batches) {
      rec.loss /= static_cast<double>(batches);
      rec.loss1 /= static_cast<double>(batches);
      rec.loss2 /= static_cast<double>(batches);
      rec.loss3 /= static_cast<double>(batches);
    }
    ++epoch_;
    return rec;
  }

  using EpochCallback = std::function<void(const EpochRecord&)>;

  /// Trains until cfg.epochs have run in total (so a resumed trainer picks
  /// up where it stopped). With an out_dir, writes train_log.csv, best.ckpt,
  /// last.ckpt and state.ckpt.
  void fit(const std::vector<SamplePair>& train, const std::vector<SamplePair>& val,
           const EpochCallback& on_epoch = {}) {
    namespace fs = std::filesystem;
    const bool persist = !cfg_.out_dir.empty();
    if (persist) fs::create_directories(cfg_.out_dir);
    const auto path = [&](const char* name) { return (fs::path(cfg_.out_dir) / name).string(); };
    while (epoch_ < cfg_.epochs) {
      EpochRecord rec = train_epoch(train);
      rec.val_f1 = val.empty() ? 0.0 : evaluate(model_, val, cfg_.batch_size).metrics.f1;
      history_.push_back(rec);
      const bool improved = rec.val_f1 > best_f1_ || history_.size() == 1;
      if (improved) best_f1_ = std::max(best_f1_, rec.val_f1);
      if (persist) {
        if (improved) save_model(path("best.ckpt"), model_);
        save_model(path("last.ckpt"), model_);
        save_state(path("state.ckpt"));
        write_log(path("train_log.csv"));
      }
      if (on_epoch) on_epoch(rec);
    }
  }

  void write_log(const std::string& path) const {
    std::ofstream out(path);
    out << train_log_header() << '\n';
    for (const auto& r : history_) out << train_log_row(r) << '\n';
  }

  /// Everything needed for a bit-exact resume: weights, buffers, optimizer
  /// moments, step and epoch counters, best F1 and the epoch log.
  void save_state(const std::string& path) {
    Checkpoint ck;
    ck.kind = CheckpointKind::training_state;
    KeyValueConfig kv = model_.config().to_kv();
    kv.merge(cfg_.to_kv());
    kv.set("state.epoch", static_cast<long long>(epoch_));
    kv.set("state.steps", static_cast<long long>(opt_.steps()));
    kv.set("state.best_f1", best_f1_);
    ck.config_text = kv.to_text();
    for (const auto& p : model_.named_tensors()) ck.records.push_back(make_record(p.name, p.tensor, p.role));
    const auto& params = opt_.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.records.push_back({"adam.m." + params[i].name, DType::f64, TensorRole::buffer, {opt_.first_moments()[i].size()},
                            opt_.first_moments()[i]});
      ck.records.push_back({"adam.v." + params[i].name, DType::f64, TensorRole::buffer, {opt_.second_moments()[i].size()},
                            opt_.second_moments()[i]});
    }
    for (std::size_t i = 0; i < history_.size(); ++i) {
      const auto& r = history_[i];
      ck.records.push_back({"log." + std::to_string(i), DType::f64, TensorRole::buffer, {7},
                            {static_cast<double>(r.epoch), r.lr, r.loss, r.loss1, r.loss2, r.loss3, r.val_f1}});
    }
    write_checkpoint(path, ck);
    last_good_ = path;
  }

  void load_state(const std::string& path) {
    const auto ck = read_checkpoint(path);
    if (ck.kind != CheckpointKind::training_state) throw CheckpointError(path + " is not a training-state checkpoint");
    load_weights(ck, model_);
    const auto kv = KeyValueConfig::parse(ck.config_text);
    epoch_ = static_cast<std::size_t>(kv.get_int("state.epoch", 0));
    opt_.set_steps(static_cast<std::uint64_t>(kv.get_int("state.steps", 0)));
    best_f1_ = kv.get_double("state.best_f1", 0.0);
    const auto& params = opt_.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto* m = ck.find("adam.m." + params[i].name);
      const auto* v = ck.find("adam.v." + params[i].name);
      if (!m || !v) throw CheckpointError(path + ": missing optimizer moments for " + params[i].name);
      opt_.first_moments()[i] = m->values;
      opt_.second_moments()[i] = v->values;
    }
    history_.clear();
    for (std::size_t i = 0;; ++i) {
      const auto* r = ck.find("log." + std::to_string(i));
      if (!r) break;
      const auto& x = r->values;
      history_.push_back({static_cast<std::size_t>(x[0]), x[1], x[2], x[3], x[4], x[5], x[6]});
    }
    last_good_ = path;
  }

 private:
  TrainConfig cfg_;
  SrcNet<T> model_;
  AdamW<T> opt_;
  std::size_t epoch_ = 0;
  double best_f1_ = 0.0;
  std::vector<EpochRecord> history_;
  std::string last_good_;
};

}  // namespace srcnet
