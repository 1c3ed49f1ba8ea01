/*
 * Copyright 2026 The fedids Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "fedids/common.hpp"
#include "fedids/dataset.hpp"
#include "fedids/gbdt.hpp"

namespace fedids {

/// Binary confusion counts; class 1 is positive.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fn + fp + tn; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double log_loss = 0.0;
  double roc_auc = 0.0;
  ConfusionMatrix confusion;
  std::size_t sample_count = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline constexpr double kLogLossEpsilon = 1e-15;

inline ConfusionMatrix confusion(std::span<const std::uint8_t> y_true, std::span<const std::uint8_t> y_pred) {
  if (y_true.size() != y_pred.size()) throw ArgumentError("confusion: length mismatch");
  if (y_true.empty()) throw ArgumentError("confusion: empty input");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i]) {
      y_pred[i] ? ++cm.tp : ++cm.fn;
    } else {
      y_pred[i] ? ++cm.fp : ++cm.tn;
    }
  }
  return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  return n == 0 ? 0.0 : static_cast<double>(cm.tp + cm.tn) / static_cast<double>(n);
}

// Zero denominators yield 0.
inline double recall(const ConfusionMatrix& cm) {
  const auto d = cm.tp + cm.fn;
  return d == 0 ? 0.0 : static_cast<double>(cm.tp) / static_cast<double>(d);
}

inline double precision(const ConfusionMatrix& cm) {
  const auto d = cm.tp + cm.fp;
  return d == 0 ? 0.0 : static_cast<double>(cm.tp) / static_cast<double>(d);
}

inline double f1(double precision, double recall) {
  const double s = precision + recall;
  return s == 0.0 ? 0.0 : 2.0 * precision * recall / s;
}

/// Mean binary cross-entropy; probabilities are clamped to [eps, 1 - eps].
inline double log_loss(std::span<const std::uint8_t> y_true, std::span<const double> p) {
  if (y_true.size() != p.size()) throw ArgumentError("log_loss: length mismatch");
  if (y_true.empty()) throw ArgumentError("log_loss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kLogLossEpsilon, 1.0 - kLogLossEpsilon);
    total += y_true[i] ? std::log(q) : std::log(1.0 - q);
  }
  return -total / static_cast<double>(p.size());
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half. Computed exactly: the pair count is accumulated in
/// half-units as an integer before the single final division.
inline double roc_auc(std::span<const std::uint8_t> y_true, std::span<const double> scores) {
  if (y_true.size() != scores.size()) throw ArgumentError("roc_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  std::uint64_t n_pos = 0, n_neg = 0;
  std::uint64_t half_wins = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      y_true[order[j]] ? ++pos_here : ++neg_here;
      ++j;
    }
    half_wins += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    n_pos += pos_here;
    n_neg += neg_here;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw ArgumentError("roc_auc: both classes must be present");
  return static_cast<double>(half_wins) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline MetricsReport make_report(std::span<const std::uint8_t> y_true, std::span<const double> proba) {
  std::vector<std::uint8_t> y_pred(proba.size());
  for (std::size_t i = 0; i < proba.size(); ++i) y_pred[i] = label_from_proba(proba[i]);
  MetricsReport r;
  r.confusion = confusion(y_true, y_pred);
  r.sample_count = y_true.size();
  r.accuracy = accuracy(r.confusion);
  r.precision = precision(r.confusion);
  r.recall = recall(r.confusion);
  r.f1 = f1(r.precision, r.recall);
  r.log_loss = log_loss(y_true, proba);
  r.roc_auc = roc_auc(y_true, proba);
  return r;
}

/// Scores `model` on `test` at threshold 0.5. The test set must be
/// non-empty and contain both classes.
inline MetricsReport evaluate(const Ensemble& model, const FeatureMatrix& test) {
  std::vector<double> proba(test.rows());
  for (std::size_t i = 0; i < test.rows(); ++i) proba[i] = predict_proba(model, test.row(i));
  return make_report(test.labels, proba);
}

}  // namespace fedids
