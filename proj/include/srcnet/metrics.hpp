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
#include <span>
#include <sstream>
#include <string>

#include "srcnet/config.hpp"
#include "srcnet/tensor.hpp"

namespace srcnet {

/// Pixel counts of a binary change map against ground truth. Merging is
/// plain addition, so per-tile statistics combine in any order.
struct ConfusionStats {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }

  ConfusionStats& operator+=(const ConfusionStats& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend ConfusionStats operator+(ConfusionStats a, const ConfusionStats& b) { return a += b; }
  friend bool operator==(const ConfusionStats&, const ConfusionStats&) = default;
};

/// Non-zero entries count as "changed".
inline ConfusionStats confusion(std::span<const std::uint8_t> pred,
                                std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("confusion: prediction has " + std::to_string(pred.size()) +
                         " pixels, ground truth " + std::to_string(gt.size()));
  }
  ConfusionStats s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    if (p && g) ++s.tp;
    else if (p) ++s.fp;
    else if (g) ++s.fn;
    else ++s.tn;
  }
  return s;
}

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double oa = 0.0;
  double iou = 0.0;
  // Set when the ratio had a zero denominator and was reported as 0.
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool f1_undefined = false;
  bool iou_undefined = false;

  bool any_undefined() const {
    return precision_undefined || recall_undefined || f1_undefined || iou_undefined;
  }
};

inline double f1_score(double precision, double recall) {
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

/// Binary-mask identity IoU = F1 / (2 - F1).
inline double iou_from_f1(double f1) { return f1 / (2.0 - f1); }

inline Metrics compute_metrics(const ConfusionStats& s) {
  Metrics m;
  const auto ratio = [](std::uint64_t num, std::uint64_t den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(s.tp, s.tp + s.fp, m.precision_undefined);
  m.recall = ratio(s.tp, s.tp + s.fn, m.recall_undefined);
  // F1 from counts (2tp / (2tp + fp + fn)) equals 2PR/(P+R) when defined.
  m.f1 = ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn, m.f1_undefined);
  bool oa_undefined = false;
  m.oa = ratio(s.tp + s.tn, s.total(), oa_undefined);
  m.iou = ratio(s.tp, s.tp + s.fp + s.fn, m.iou_undefined);
  return m;
}

inline Metrics compute_metrics(std::span<const std::uint8_t> pred,
                               std::span<const std::uint8_t> gt) {
  return compute_metrics(confusion(pred, gt));
}

inline std::string metrics_csv_header() { return "model,dataset,precision,recall,f1,oa,iou,params"; }

/// One row in the column order model, dataset, P, R, F1, OA, IoU, params.
inline std::string metrics_csv_row(const std::string& model, const std::string& dataset,
                                   const Metrics& m, std::size_t params) {
  std::ostringstream oss;
  oss << model << ',' << dataset << ',' << format_double(m.precision) << ','
      << format_double(m.recall) << ',' << format_double(m.f1) << ',' << format_double(m.oa)
      << ',' << format_double(m.iou) << ',' << params;
  return oss.str();
}

}  // namespace srcnet
