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
#include <functional>
#include <string>
#include <vector>

#include "srcnet/tensor.hpp"

namespace srcnet {

struct GradcheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
  // Empty unless a NaN/inf was met; names the input and element.
  std::string diagnostic;
  // Location of the worst element.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Gradient magnitudes below this are compared on an absolute scale, so
  // that finite-difference noise on near-zero components does not dominate.
  double scale_floor = 1e-3;
  // Check at most this many elements per input (evenly strided); 0 = all.
  std::size_t max_elements_per_input = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `inputs` must be leaf tensors with requires_grad set; their
/// values are perturbed in place and restored. The error of an element is
/// |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
inline GradcheckReport gradcheck(
    const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
    const GradcheckOptions& opt = {}) {
  GradcheckReport report;
  for (auto& in : inputs) {
    if (!in.requires_grad()) throw ContractError("gradcheck: input without requires_grad");
    in.zero_grad();
  }
  {
    Tensor<double> y = f();
    if (y.numel() != 1) throw ContractError("gradcheck: function must return a scalar");
    if (y.requires_grad()) backward(y);
  }
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    const std::vector<double> analytic =
        in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                      : std::vector<double>(in.numel(), 0.0);
    auto values = in.mutable_data();
    std::size_t stride = 1;
    if (opt.max_elements_per_input && in.numel() > opt.max_elements_per_input) {
      stride = (in.numel() + opt.max_elements_per_input - 1) / opt.max_elements_per_input;
    }
    for (std::size_t i = 0; i < in.numel(); i += stride) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + opt.step;
        plus = f().item();
        values[i] = saved - opt.step;
        minus = f().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * opt.step);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        report.diagnostic = "non-finite gradient at input " + std::to_string(t) +
                            " element " + std::to_string(i) + " (analytic " +
                            std::to_string(analytic[i]) + ", numeric " +
                            std::to_string(numeric) + ")";
        report.passed = false;
        return report;
      }
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), opt.scale_floor});
      const double rel = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = t;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

/// Single-input convenience form: f maps x to a scalar.
inline GradcheckReport gradcheck(
    const std::function<Tensor<double>(const Tensor<double>&)>& f,
    Tensor<double> x, double step, double tolerance) {
  GradcheckOptions opt;
  opt.step = step;
  opt.tolerance = tolerance;
  return gradcheck([&] { return f(x); }, {x}, opt);
}

}  // namespace srcnet
