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

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "srcnet/config.hpp"
#include "srcnet/losses.hpp"
#include "srcnet/nn.hpp"
#include "srcnet/pim.hpp"
#include "srcnet/pmffm.hpp"

namespace srcnet {

/// Ablation wiring. full: interaction + patch-mode fusion; beta: fusion by
/// subtraction; gamma: no interaction; alpha: neither.
enum class Variant { full, alpha, beta, gamma };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::alpha: return "alpha";
    case Variant::beta: return "beta";
    case Variant::gamma: return "gamma";
  }
  return "full";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "alpha") return Variant::alpha;
  if (s == "beta") return Variant::beta;
  if (s == "gamma") return Variant::gamma;
  throw ConfigError("unknown variant '" + s + "' (expected full, alpha, beta or gamma)");
}

inline bool has_interaction(Variant v) { return v == Variant::full || v == Variant::beta; }
inline bool has_mode_fusion(Variant v) { return v == Variant::full || v == Variant::gamma; }

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t c = 32;
  std::size_t p = 4;
  std::size_t n1 = 2;
  std::size_t n2 = 2;
  std::size_t k = 16;
  std::size_t m = 4;
  std::size_t land_cover_classes = 8;
  std::size_t out_ch = 2;
  Variant variant = Variant::full;
  bool shared_credibility = true;
  std::vector<double> alphas{1.0, 0.0, 0.5, 1.0};
  std::vector<double> betas{0.0, 1.0, 0.5, -1.0};
  bool learnable_coefficients = false;
  // Relative noise level of the interaction-module self-supervision.
  double noise_sigma = 0.1;
  // Extraction block whose interaction module receives the noise pass;
  // -1 selects the deepest one.
  long loss1_block = -1;

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper_scale() {
    ModelConfig cfg;
    cfg.c = 256;
    cfg.p = 8;
    cfg.n1 = 4;
    cfg.n2 = 4;
    return cfg;
  }

  static ModelConfig tiny() {
    ModelConfig cfg;
    cfg.c = 8;
    cfg.p = 4;
    cfg.n1 = 1;
    cfg.n2 = 1;
    cfg.k = 2;
    cfg.m = 2;
    cfg.land_cover_classes = 3;
    cfg.alphas = {1.0, 0.0};
    cfg.betas = {0.0, 1.0};
    return cfg;
  }

  /// Sets m and resets the coefficients to the defaults for m modes.
  void set_modes(std::size_t modes) {
    m = modes;
    auto f = FusionConfig::with_defaults(c, k, m);
    alphas = f.alphas;
    betas = f.betas;
  }

  FusionConfig fusion() const {
    FusionConfig f;
    f.depth = c;
    f.k = k;
    f.m = m;
    f.alphas = alphas;
    f.betas = betas;
    f.learnable_coefficients = learnable_coefficients;
    return f;
  }

  std::size_t loss1_site() const {
    return loss1_block < 0 ? n1 - 1 : static_cast<std::size_t>(loss1_block);
  }

  void validate() const {
    if (c == 0 || c % 4 != 0) throw ConfigError("c must be a positive multiple of 4");
    if (p == 0 || p % 4 != 0) throw ConfigError("patch size p must be a positive multiple of 4");
    if (n1 == 0) throw ConfigError("n1 must be at least 1");
    if (in_channels == 0 || out_ch == 0) throw ConfigError("channel counts must be positive");
    if (land_cover_classes < 2) throw ConfigError("land_cover_classes must be at least 2");
    if (loss1_block >= static_cast<long>(n1)) {
      throw ConfigError("loss1_block " + std::to_string(loss1_block) + " exceeds n1 - 1");
    }
    if (has_mode_fusion(variant)) fusion().validate();
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("model.in_channels", in_channels);
    kv.set("model.c", c);
    kv.set("model.p", p);
    kv.set("model.n1", n1);
    kv.set("model.n2", n2);
    kv.set("model.k", k);
    kv.set("model.m", m);
    kv.set("model.land_cover_classes", land_cover_classes);
    kv.set("model.out_ch", out_ch);
    kv.set("model.variant", to_string(variant));
    kv.set("model.shared_credibility", shared_credibility);
    kv.set("model.alphas", alphas);
    kv.set("model.betas", betas);
    kv.set("model.learnable_coefficients", learnable_coefficients);
    kv.set("model.noise_sigma", noise_sigma);
    kv.set("model.loss1_block", static_cast<long long>(loss1_block));
    return kv;
  }

  /// Reads `model.*` keys over a base configuration.
  static ModelConfig from_kv(const KeyValueConfig& kv);
  static ModelConfig from_kv(const KeyValueConfig& kv, ModelConfig base) {
    ModelConfig cfg = base;
    auto sz = [&](const char* key, std::size_t fallback) {
      const long long v = kv.get_int(key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    cfg.in_channels = sz("model.in_channels", cfg.in_channels);
    cfg.c = sz("model.c", cfg.c);
    cfg.p = sz("model.p", cfg.p);
    cfg.n1 = sz("model.n1", cfg.n1);
    cfg.n2 = sz("model.n2", cfg.n2);
    cfg.k = sz("model.k", cfg.k);
    const std::size_t m = sz("model.m", cfg.m);
    if (m != cfg.m && !kv.has("model.alphas")) cfg.set_modes(m);
    cfg.m = m;
    cfg.land_cover_classes = sz("model.land_cover_classes", cfg.land_cover_classes);
    cfg.out_ch = sz("model.out_ch", cfg.out_ch);
    cfg.variant = parse_variant(kv.get("model.variant", to_string(cfg.variant)));
    cfg.shared_credibility = kv.get_bool("model.shared_credibility", cfg.shared_credibility);
    cfg.alphas = kv.get_doubles("model.alphas", cfg.alphas);
    cfg.betas = kv.get_doubles("model.betas", cfg.betas);
    cfg.learnable_coefficients = kv.get_bool("model.learnable_coefficients", cfg.learnable_coefficients);
    cfg.noise_sigma = kv.get_double("model.noise_sigma", cfg.noise_sigma);
    cfg.loss1_block = kv.get_int("model.loss1_block", cfg.loss1_block);
    return cfg;
  }

  /// Fields that differ, formatted as "key: a != b".
  static std::vector<std::string> diff(const ModelConfig& a, const ModelConfig& b) {
    std::vector<std::string> out;
    const auto ea = a.to_kv().entries();
    const auto eb = b.to_kv().entries();
    for (const auto& [key, va] : ea) {
      const auto it = eb.find(key);
      const std::string vb = it == eb.end() ? "<missing>" : it->second;
      if (va != vb) out.push_back(key + ": " + va + " != " + vb);
    }
    return out;
  }
};

inline ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) { return from_kv(kv, ModelConfig{}); }

inline bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return ModelConfig::diff(a, b).empty();
}

/// Two strided convolutions with batch normalization in between:
/// c_in -> c/4 (kernel 4, stride 4), then c/4 -> c (kernel p/4, stride p/4).
template <typename T>
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(std::size_t in, std::size_t c, std::size_t p, Rng& rng)
      : patch(p),
        gen_patch(in, c / 4, 4, {4, 0, 1}, rng),
        bn(c / 4),
        gen_patch2(c / 4, c, p / 4, {p / 4, 0, 1}, rng) {}

  Tensor<T> forward(const Tensor<T>& img, bool training) const {
    detail::require_rank("patch_embed", img.shape(), 4);
    if (img.size(2) % patch != 0 || img.size(3) % patch != 0) {
      throw DimensionError("patch_embed: spatial extent " + std::to_string(img.size(2)) + "x" +
                           std::to_string(img.size(3)) + " (axes 2, 3 of " +
                           shape_str(img.shape()) + ") not divisible by patch size " +
                           std::to_string(patch));
    }
    return gen_patch2.forward(bn.forward(gen_patch.forward(img), training));
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    gen_patch.collect(join_name(prefix, "gen_patch"), out);
    bn.collect(join_name(prefix, "bn"), out);
    gen_patch2.collect(join_name(prefix, "gen_patch2"), out);
  }

  std::size_t patch = 4;
  Conv2d<T> gen_patch;
  BatchNorm2d<T> bn;
  Conv2d<T> gen_patch2;
};

/// y = x + PW2(GRN(GELU(PW1(LN(DW1(x) + DW3(x) + DW5(x))))))
template <typename T>
class SrcBlock {
 public:
  SrcBlock() = default;
  SrcBlock(std::size_t c, Rng& rng)
      : dw1(c, c, 1, {1, 0, c}, rng),
        dw3(c, c, 3, {1, 1, c}, rng),
        dw5(c, c, 5, {1, 2, c}, rng),
        norm(c),
        pw1(c, 4 * c, 1, {1, 0, 1}, rng),
        grn(4 * c),
        pw2(4 * c, c, 1, {1, 0, 1}, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    auto local = add(add(dw1.forward(x), dw3.forward(x)), dw5.forward(x));
    auto h = pw2.forward(grn.forward(gelu(pw1.forward(norm.forward(local)))));
    return add(x, h);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    dw1.collect(join_name(prefix, "dw1"), out);
    dw3.collect(join_name(prefix, "dw3"), out);
    dw5.collect(join_name(prefix, "dw5"), out);
    norm.collect(join_name(prefix, "norm"), out);
    pw1.collect(join_name(prefix, "pw1"), out);
    grn.collect(join_name(prefix, "grn"), out);
    pw2.collect(join_name(prefix, "pw2"), out);
  }

  Conv2d<T> dw1, dw3, dw5;
  LayerNorm2d<T> norm;
  Conv2d<T> pw1;
  GlobalResponseNorm<T> grn;
  Conv2d<T> pw2;
};

/// Final(GELU(BN(PatchUp(y)))): transposed convolution c -> 32 with kernel
/// and stride p, then a 1x1 convolution 32 -> out_ch.
template <typename T>
class PatchCombine {
 public:
  static constexpr std::size_t kHidden = 32;

  PatchCombine() = default;
  PatchCombine(std::size_t c, std::size_t p, std::size_t out_ch, Rng& rng)
      : patch_up(c, kHidden, p, p, rng), bn(kHidden), final(kHidden, out_ch, 1, {1, 0, 1}, rng) {}

  Tensor<T> forward(const Tensor<T>& y, bool training) const {
    return final.forward(gelu(bn.forward(patch_up.forward(y), training)));
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    patch_up.collect(join_name(prefix, "patch_up"), out);
    bn.collect(join_name(prefix, "bn"), out);
    final.collect(join_name(prefix, "final"), out);
  }

  ConvTranspose2d<T> patch_up;
  BatchNorm2d<T> bn;
  Conv2d<T> final;
};

template <typename T>
struct ForwardOptions {
  // Run the noise self-supervision pass of one interaction module.
  bool noise_tap = false;
  std::uint64_t noise_seed = 0;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                 // B x out_ch x H x W
  FeaturePair<T> features;          // extraction-stage output, per branch
  Tensor<T> fused;                  // fusion-stage output
  std::optional<PimTap<T>> tap;     // present when requested and available
};

template <typename T>
class SrcNet {
 public:
  SrcNet(ModelConfig cfg, std::uint64_t seed) : config_(std::move(cfg)) {
    config_.validate();
    Rng root(seed);
    Rng init = root.split("init");
    embed_ = PatchEmbed<T>(config_.in_channels, config_.c, config_.p, init);
    for (std::size_t i = 0; i < config_.n1; ++i) {
      extract_.emplace_back(config_.c, init);
      if (has_interaction(config_.variant))
        pims_.emplace_back(config_.c, config_.shared_credibility, init);
    }
    if (has_mode_fusion(config_.variant)) fusion_ = PatchModeFusion<T>(config_.fusion(), init);
    for (std::size_t i = 0; i < config_.n2; ++i) predict_.emplace_back(config_.c, init);
    combine_ = PatchCombine<T>(config_.c, config_.p, config_.out_ch, init);
    land_cover_ = LandCoverHead<T>(config_.c, config_.land_cover_classes, config_.p, init);
  }

  const ModelConfig& config() const { return config_; }

  void train() { training_ = true; }
  void eval() { training_ = false; }
  bool training() const { return training_; }

  ForwardResult<T> forward(const Tensor<T>& img1, const Tensor<T>& img2,
                           const ForwardOptions<T>& opt = {}) const {
    if (img1.shape() != img2.shape()) {
      throw DimensionError("forward: images " + shape_str(img1.shape()) + " and " +
                           shape_str(img2.shape()) + " differ");
    }
    detail::require_rank("forward", img1.shape(), 4);
    if (img1.size(1) != config_.in_channels) {
      throw DimensionError("forward: expected " + std::to_string(config_.in_channels) +
                           " input channels, got " + shape_str(img1.shape()));
    }
    ForwardResult<T> out;
    FeaturePair<T> x{embed_.forward(img1, training_), embed_.forward(img2, training_)};
    for (std::size_t i = 0; i < config_.n1; ++i) {
      x = {extract_[i].forward(x.t1), extract_[i].forward(x.t2)};
      if (!pims_.empty()) {
        if (opt.noise_tap && i == config_.loss1_site()) {
          Rng noise(opt.noise_seed);
          out.tap = pims_[i].noise_pass(x.t1.detach(), config_.noise_sigma, noise);
        }
        x = pims_[i].forward(x);
      }
    }
    out.features = x;
    Tensor<T> fused = fusion_ ? fusion_->forward(x) : sub(x.t1, x.t2);
    out.fused = fused;
    for (const auto& block : predict_) fused = block.forward(fused);
    out.logits = combine_.forward(fused, training_);
    return out;
  }

  /// Change-class probabilities (softmax over output channels).
  Tensor<T> predict_probs(const Tensor<T>& img1, const Tensor<T>& img2) const {
    return softmax(forward(img1, img2).logits, 1);
  }

  ParameterList<T> named_tensors() const {
    ParameterList<T> out;
    embed_.collect("embed", out);
    for (std::size_t i = 0; i < extract_.size(); ++i) {
      const std::string prefix = "extract.block" + std::to_string(i);
      extract_[i].collect(join_name(prefix, "src"), out);
      if (!pims_.empty()) pims_[i].collect(join_name(prefix, "pim"), out);
    }
    if (fusion_) fusion_->collect("fusion", out);
    for (std::size_t i = 0; i < predict_.size(); ++i)
      predict_[i].collect("predict.block" + std::to_string(i), out);
    combine_.collect("combine", out);
    land_cover_.collect("land_cover", out);
    loss2_weights_.collect("objective.loss2", out);
    loss3_weights_.collect("objective.loss3", out);
    return out;
  }

  /// Trainable entries only.
  ParameterList<T> parameters() const {
    ParameterList<T> out;
    for (auto& p : named_tensors())
      if (p.role == TensorRole::parameter) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto& p : named_tensors()) p.tensor.zero_grad();
  }

  const PatchEmbed<T>& embed() const { return embed_; }
  /// Extraction block i as applied to `branch` (0 or 1). Both branches use
  /// the same object.
  const SrcBlock<T>& extraction_block(std::size_t i, int branch) const {
    (void)branch;
    return extract_.at(i);
  }
  const std::vector<PerceptionInteraction<T>>& interactions() const { return pims_; }
  std::vector<PerceptionInteraction<T>>& interactions() { return pims_; }
  const std::optional<PatchModeFusion<T>>& fusion() const { return fusion_; }
  const std::vector<SrcBlock<T>>& prediction_blocks() const { return predict_; }
  const PatchCombine<T>& combine() const { return combine_; }
  const LandCoverHead<T>& land_cover() const { return land_cover_; }
  const LossWeights<T>& loss2_weights() const { return loss2_weights_; }
  const LossWeights<T>& loss3_weights() const { return loss3_weights_; }
  LossWeights<T>& loss2_weights() { return loss2_weights_; }
  LossWeights<T>& loss3_weights() { return loss3_weights_; }

 private:
  ModelConfig config_;
  bool training_ = true;
  PatchEmbed<T> embed_;
  std::vector<SrcBlock<T>> extract_;
  std::vector<PerceptionInteraction<T>> pims_;
  std::optional<PatchModeFusion<T>> fusion_;
  std::vector<SrcBlock<T>> predict_;
  PatchCombine<T> combine_;
  LandCoverHead<T> land_cover_;
  LossWeights<T> loss2_weights_;
  LossWeights<T> loss3_weights_;
};

template <typename T>
std::size_t count_parameters(const SrcNet<T>& model) {
  return count_parameters(model.named_tensors());
}

/// Trainable element counts grouped by the first two name components
/// (e.g. "extract.block0", "fusion.head1" -> "fusion.head1").
template <typename T>
std::map<std::string, std::size_t> parameter_breakdown(const ParameterList<T>& list) {
  std::map<std::string, std::size_t> out;
  for (const auto& p : list) {
    if (p.role != TensorRole::parameter) continue;
    const auto first = p.name.find('.');
    const auto second = first == std::string::npos ? first : p.name.find('.', first + 1);
    out[p.name.substr(0, second)] += p.tensor.numel();
  }
  return out;
}

/// One line per tensor: name, shape, element count, role.
template <typename T>
std::string model_summary(const SrcNet<T>& model) {
  std::ostringstream oss;
  const auto list = model.named_tensors();
  for (const auto& p : list) {
    oss << p.name << '\t' << shape_str(p.tensor.shape()) << '\t' << p.tensor.numel()
        << (p.role == TensorRole::buffer ? "\tbuffer" : "") << '\n';
  }
  oss << "total_parameters\t" << count_parameters(list) << '\n';
  return oss.str();
}

}  // namespace srcnet
