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

#include <cstdint>
#include <random>
#include <string_view>

#include "srcnet/tensor.hpp"

namespace srcnet {

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seeded generator. Independent streams are derived with split(), so every
/// consumer (initializer, shuffler, noise source) draws from a stream that
/// depends only on the root seed and its own tag.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::string_view tag) const { return Rng(mix64(fnv1a(tag, seed_))); }
  Rng split(std::uint64_t index) const { return Rng(mix64(seed_ ^ mix64(index + 1))); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Integer in [lo, hi].
  long uniform_int(long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev, bool requires_grad = false) {
    Buffer<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(normal(0.0, stddev));
    return Tensor<T>(std::move(shape), std::move(data), requires_grad);
  }

  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi,
                           bool requires_grad = false) {
    Buffer<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(uniform(lo, hi));
    return Tensor<T>(std::move(shape), std::move(data), requires_grad);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace srcnet
