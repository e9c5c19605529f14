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

#include <cstdio>
#include <string>
#include <vector>

#include "srcnet/gradcheck.hpp"
#include "srcnet/train.hpp"

namespace srcnet {

struct GradcheckRow {
  std::string name;
  GradcheckReport report;
  double tolerance = 0.0;
};

inline constexpr double kModuleGradTolerance = 1e-4;
inline constexpr double kModelGradTolerance = 1e-3;

namespace detail {

inline std::vector<Tensor<double>> tensors_of(const ParameterList<double>& list) {
  std::vector<Tensor<double>> out;
  for (const auto& p : list)
    if (p.role == TensorRole::parameter) out.push_back(p.tensor);
  return out;
}

inline Tensor<double> random_mask(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return Tensor<double>(shape, std::move(v));
}

// The training objective stops gradient at the noise tap's clean reference,
// so the function whose gradient backward() computes has the reference and
// its noisy copy frozen at the current parameters. This rebuilds that
// function explicitly for finite differencing.
struct FrozenTapObjective {
  const SrcNet<double>& model;
  const Batch<double>& batch;
  Tensor<double> reference;
  Tensor<double> noisy;

  FrozenTapObjective(const SrcNet<double>& m, const Batch<double>& b, std::uint64_t noise_seed)
      : model(m), batch(b) {
    if (!has_interaction(m.config().variant)) return;
    NoGradGuard guard;
    ForwardOptions<double> opt;
    opt.noise_tap = true;
    opt.noise_seed = noise_seed;
    reference = m.forward(b.img1, b.img2, opt).tap->reference;
    Rng rng(noise_seed);
    noisy = add_relative_noise(reference, m.config().noise_sigma, rng);
  }

  Tensor<double> operator()() const {
    auto out = model.forward(batch.img1, batch.img2);
    auto l2 = loss2_change_prob(out.features, model.land_cover(), batch.gt, model.loss2_weights()).total;
    auto l3 = hybrid_loss(softmax(out.logits, 1), batch.gt, model.loss3_weights()).total;
    auto l1 = Tensor<double>::scalar(0.0);
    if (reference.defined()) {
      const auto& pim = model.interactions()[model.config().loss1_site()];
      l1 = loss1(pim.forward(FeaturePair<double>{reference, noisy}), reference);
    }
    return total_loss(l1, l2, l3);
  }
};

// Reverse-mode gradients of two scalar functions over the same inputs,
// compared element by element on the gradcheck error scale.
inline GradcheckReport compare_gradients(const std::function<Tensor<double>()>& f,
                                         const std::function<Tensor<double>()>& g,
                                         std::vector<Tensor<double>> inputs, double tolerance,
                                         double scale_floor) {
  auto grads = [&](const std::function<Tensor<double>()>& fn) {
    for (auto& in : inputs) in.zero_grad();
    backward(fn());
    std::vector<std::vector<double>> out;
    for (auto& in : inputs)
      out.push_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                  : std::vector<double>(in.numel(), 0.0));
    return out;
  };
  const auto a = grads(f);
  const auto b = grads(g);
  GradcheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      const double abs_err = std::abs(a[t][i] - b[t][i]);
      const double rel = abs_err / std::max({std::abs(a[t][i]), std::abs(b[t][i]), scale_floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = t;
        report.worst_index = i;
      }
      ++report.checked;
    }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace detail

/// Module-by-module central-difference checks at the tiny configuration in
/// 64-bit precision.
inline std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed = 1) {
  std::vector<GradcheckRow> rows;
  Rng rng(seed);
  GradcheckOptions opt;
  opt.tolerance = kModuleGradTolerance;
  auto check = [&](const std::string& name, const std::function<Tensor<double>()>& f,
                   std::vector<Tensor<double>> inputs, const GradcheckOptions& o) {
    rows.push_back({name, gradcheck(f, std::move(inputs), o), o.tolerance});
  };

  // Batch statistics make some weights nearly scale-free, leaving a small
  // gradient on a curved function; a shorter step keeps truncation error
  // well below the tolerance.
  GradcheckOptions bn_opt = opt;
  bn_opt.step = 1e-6;

  const std::size_t C = 4;
  {
    auto t = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    CredibilityParams<double> params(C, rng);
    Rng dir = rng.split("cred");
    auto r = dir.normal_tensor<double>({2, C, 3, 3}, 1.0);
    check("credibility", [&] { return sum(mul(credibility(t, params), r)); },
          {t, params.weight, params.bias}, opt);
  }
  {
    auto t1 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    auto t2 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    CredibilityParams<double> p1(C, rng), p2(C, rng);
    auto r1 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0);
    auto r2 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0);
    check("pim_forward",
          [&] {
            auto out = pim_forward(FeaturePair<double>{t1, t2}, p1, p2);
            return add(sum(mul(out.t1, r1)), sum(mul(out.t2, r2)));
          },
          {t1, t2, p1.weight, p1.bias, p2.weight, p2.bias}, opt);
  }
  FusionConfig fcfg = FusionConfig::with_defaults(8, 2, 4);
  fcfg.learnable_coefficients = true;
  ModeHeads<double> heads(fcfg, rng);
  const std::size_t l = fcfg.mini_length();
  {
    auto f1 = rng.normal_tensor<double>({6, l}, 1.0, true);
    auto f2 = rng.normal_tensor<double>({6, l}, 1.0, true);
    auto r = rng.normal_tensor<double>({6, fcfg.m}, 1.0);
    check("mode_perception", [&] { return sum(mul(mode_perception(f1, f2, heads), r)); },
          {f1, f2, heads.perception.weight, heads.perception.bias}, opt);
    auto rf = rng.normal_tensor<double>({6, l, fcfg.m}, 1.0);
    std::vector<Tensor<double>> inputs{f1, f2, heads.alphas, heads.betas};
    for (const auto& h : heads.heads) {
      inputs.push_back(h.weight);
      inputs.push_back(h.bias);
    }
    check("multi_head_fuse", [&] { return sum(mul(multi_head_fuse(f1, f2, heads), rf)); }, inputs, opt);
    auto fused = rng.normal_tensor<double>({6, l, fcfg.m}, 1.0, true);
    auto modes = softmax(rng.normal_tensor<double>({6, fcfg.m}, 1.0), 1).detach();
    modes.set_requires_grad(true);
    auto re = rng.normal_tensor<double>({6, l}, 1.0);
    check("mode_expectation", [&] { return sum(mul(mode_expectation(fused, modes), re)); }, {fused, modes}, opt);
  }
  {
    auto a = rng.normal_tensor<double>({2, 8, 2, 2}, 1.0, true);
    auto b = rng.normal_tensor<double>({2, 8, 2, 2}, 1.0, true);
    ParameterList<double> list;
    heads.collect("", list);
    std::vector<Tensor<double>> inputs{a, b};
    for (auto& t : detail::tensors_of(list)) inputs.push_back(t);
    auto r = rng.normal_tensor<double>({2, 8, 2, 2}, 1.0);
    check("pmffm_forward",
          [&] { return sum(mul(pmffm_forward(FeaturePair<double>{a, b}, heads, fcfg), r)); }, inputs, opt);
  }
  {
    GlobalResponseNorm<double> grn(C);
    for (std::size_t c = 0; c < C; ++c) {
      grn.gamma.mutable_data()[c] = rng.normal(0.0, 0.5);
      grn.beta.mutable_data()[c] = rng.normal(0.0, 0.5);
    }
    auto x = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    auto r = rng.normal_tensor<double>({2, C, 3, 3}, 1.0);
    check("global_response_norm", [&] { return sum(mul(grn.forward(x), r)); }, {x, grn.gamma, grn.beta}, opt);
  }
  {
    SrcBlock<double> block(8, rng);
    // Non-zero GRN parameters so their paths carry gradient.
    for (std::size_t c = 0; c < 32; ++c) {
      block.grn.gamma.mutable_data()[c] = rng.normal(0.0, 0.5);
      block.grn.beta.mutable_data()[c] = rng.normal(0.0, 0.5);
    }
    auto x = rng.normal_tensor<double>({2, 8, 4, 4}, 1.0, true);
    ParameterList<double> list;
    block.collect("", list);
    std::vector<Tensor<double>> inputs{x};
    for (auto& t : detail::tensors_of(list)) inputs.push_back(t);
    auto r = rng.normal_tensor<double>({2, 8, 4, 4}, 1.0);
    check("src_block", [&] { return sum(mul(block.forward(x), r)); }, inputs, opt);
  }
  {
    PatchEmbed<double> embed(3, 8, 4, rng);
    auto img = rng.uniform_tensor<double>({2, 3, 8, 8}, 0.0, 1.0, true);
    ParameterList<double> list;
    embed.collect("", list);
    std::vector<Tensor<double>> inputs{img};
    for (auto& t : detail::tensors_of(list)) inputs.push_back(t);
    auto r = rng.normal_tensor<double>({2, 8, 2, 2}, 1.0);
    check("patch_embed", [&] { return sum(mul(embed.forward(img, true), r)); }, inputs, bn_opt);
  }
  {
    PatchCombine<double> combine(8, 4, 2, rng);
    auto y = rng.normal_tensor<double>({2, 8, 2, 2}, 1.0, true);
    ParameterList<double> list;
    combine.collect("", list);
    std::vector<Tensor<double>> inputs{y};
    for (auto& t : detail::tensors_of(list)) inputs.push_back(t);
    auto r = rng.normal_tensor<double>({2, 2, 8, 8}, 1.0);
    check("patch_combine", [&] { return sum(mul(combine.forward(y, true), r)); }, inputs, bn_opt);
  }
  // Outputs are projected onto fixed random directions so every element
  // contributes. Loss terms are differentiated through a softmax so the probabilities stay valid.
  {
    const Shape ps{2, 2, 6, 6};
    auto logits = rng.normal_tensor<double>(ps, 1.0, true);
    auto gt = detail::random_mask({2, 6, 6}, rng);
    LossWeights<double> w;
    for (std::size_t i = 0; i < 3; ++i) w.log_var.mutable_data()[i] = rng.normal(0.0, 0.5);
    auto probs = [&] { return softmax(logits, 1); };
    check("focal_loss", [&] { return focal_loss(probs(), gt, 2.0, 0.25); }, {logits}, opt);
    check("dice_loss", [&] { return dice_loss(probs(), gt); }, {logits}, opt);
    check("edge_loss", [&] { return edge_loss(probs(), gt, 4.0, 1); }, {logits}, opt);
    check("hybrid_loss", [&] { return hybrid_loss(probs(), gt, w).total; }, {logits, w.log_var}, opt);

    auto out1 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    auto out2 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    auto ref = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    check("loss1", [&] { return loss1(FeaturePair<double>{out1, out2}, ref); }, {out1, out2, ref}, opt);

    LandCoverHead<double> head(C, 4, 2, rng);
    auto f1 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    auto f2 = rng.normal_tensor<double>({2, C, 3, 3}, 1.0, true);
    check("loss2_change_prob",
          [&] { return loss2_change_prob(FeaturePair<double>{f1, f2}, head, gt, w).total; },
          {f1, f2, head.up.weight, head.up.bias, w.log_var}, opt);
    check("total_loss",
          [&] {
            return total_loss(loss1(FeaturePair<double>{out1, out2}, ref),
                              loss2_change_prob(FeaturePair<double>{f1, f2}, head, gt, w).total,
                              hybrid_loss(probs(), gt, w).total);
          },
          {out1, out2, ref, f1, f2, logits, w.log_var}, opt);
  }
  {
    ModelConfig cfg = ModelConfig::tiny();
    SrcNet<double> model(cfg, seed);
    // Nudge zero-initialized parameters off their symmetric start.
    for (auto& p : model.parameters())
      if (p.name.find("grn") != std::string::npos || p.name.find("log_var") != std::string::npos) {
        for (auto& v : p.tensor.mutable_data()) v = rng.normal(0.0, 0.3);
      }
    SynthSpec spec;
    spec.image_size = 8;
    spec.min_extent = 2;
    spec.max_extent = 5;
    spec.seed = seed;
    auto samples = generate_synthetic(spec, 2);
    auto batch = collate<double>({&samples[0], &samples[1]});
    GradcheckOptions mopt = bn_opt;
    mopt.tolerance = kModelGradTolerance;
    const std::uint64_t noise_seed = 99;
    const detail::FrozenTapObjective frozen(model, batch, noise_seed);
    const auto params = detail::tensors_of(model.named_tensors());
    check("full_model_tiny", [&] { return frozen(); }, params, mopt);
    rows.push_back({"full_model_tap_route",
                    detail::compare_gradients([&] { return compute_objective(model, batch, noise_seed).total; },
                                              [&] { return frozen(); }, params, 1e-10, opt.scale_floor),
                    1e-10});
  }
  return rows;
}

/// One line per row; returns true when every row passed.
inline bool print_gradcheck_table(const std::vector<GradcheckRow>& rows, std::FILE* out = stdout) {
  bool ok = true;
  std::fprintf(out, "%-22s %8s %12s %10s  %s\n", "check", "elements", "max_rel_err", "tolerance", "result");
  for (const auto& r : rows) {
    ok = ok && r.report.passed;
    std::fprintf(out, "%-22s %8zu %12.3e %10.1e  %s%s%s\n", r.name.c_str(), r.report.checked,
                 r.report.max_rel_error, r.tolerance, r.report.passed ? "PASS" : "FAIL",
                 r.report.diagnostic.empty() ? "" : "  ", r.report.diagnostic.c_str());
  }
  return ok;
}

}  // namespace srcnet
