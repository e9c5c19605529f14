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
#include <cstdint>
#include <string>
#include <vector>

#include "srcnet/ops.hpp"
#include "srcnet/random.hpp"

namespace srcnet {

enum class TensorRole : std::uint8_t { parameter = 0, buffer = 1 };

/// A named model tensor. Parameters are trained; buffers (running
/// statistics) are only persisted.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  TensorRole role = TensorRole::parameter;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev)
      : weight(rng.normal_tensor<T>({out, in}, stddev, true)),
        bias(Tensor<T>::zeros({out}, true)) {}

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }

  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opt,
         Rng& rng)
      : options(opt) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in / opt.groups * kernel * kernel));
    weight = rng.uniform_tensor<T>({out, in / opt.groups, kernel, kernel}, -bound, bound, true);
    bias = rng.uniform_tensor<T>({out}, -bound, bound, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, options); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }

  Tensor<T> weight;
  Tensor<T> bias;
  Conv2dOptions options;
};

template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel,
                  std::size_t stride_, Rng& rng)
      : stride(stride_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(out * kernel * kernel));
    weight = rng.uniform_tensor<T>({in, out, kernel, kernel}, -bound, bound, true);
    bias = rng.uniform_tensor<T>({out}, -bound, bound, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv_transpose2d(x, weight, bias, stride);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }

  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T{1}, true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T{1})) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), gamma});
    out.push_back({join_name(prefix, "bias"), beta});
    out.push_back({join_name(prefix, "running_mean"), running_mean, TensorRole::buffer});
    out.push_back({join_name(prefix, "running_var"), running_var, TensorRole::buffer});
  }

  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
class LayerNorm2d {
 public:
  LayerNorm2d() = default;
  explicit LayerNorm2d(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T{1}, true)),
        beta(Tensor<T>::zeros({channels}, true)) {}

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm_channels(x, gamma, beta); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), gamma});
    out.push_back({join_name(prefix, "bias"), beta});
  }

  Tensor<T> gamma;
  Tensor<T> beta;
};

// Starts as the identity map (gamma = beta = 0).
template <typename T>
class GlobalResponseNorm {
 public:
  GlobalResponseNorm() = default;
  explicit GlobalResponseNorm(std::size_t channels)
      : gamma(Tensor<T>::zeros({channels}, true)),
        beta(Tensor<T>::zeros({channels}, true)) {}

  Tensor<T> forward(const Tensor<T>& x) const { return global_response_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({join_name(prefix, "gamma"), gamma});
    out.push_back({join_name(prefix, "beta"), beta});
  }

  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Sum of element counts over trainable entries.
template <typename T>
std::size_t count_parameters(const ParameterList<T>& list) {
  std::size_t total = 0;
  for (const auto& p : list)
    if (p.role == TensorRole::parameter) total += p.tensor.numel();
  return total;
}

}  // namespace srcnet
