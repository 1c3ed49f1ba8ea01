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

// Shapley attributions for tree ensembles in margin (log-odds) space.
//
// Missing features are handled path-dependently: at a split on a feature
// outside the coalition, both children are averaged with weights
// proportional to their training cover. Two routes are provided:
//
//   shap_brute  enumerates every coalition (exponential; the oracle)
//   shap_exact  polynomial path-tracking recursion over each tree
//
// Both satisfy base_value + sum(contributions) == margin.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedids/common.hpp"
#include "fedids/dataset.hpp"
#include "fedids/gbdt.hpp"

namespace fedids {

struct ShapVector {
  double base_value = 0.0;
  std::vector<double> contributions;
  double explained_margin = 0.0;

  double additivity_error() const {
    double s = base_value;
    for (double c : contributions) s += c;
    return s - explained_margin;
  }
};

/// Client marker for server-side (global) explanations.
using ClientId = std::optional<std::uint32_t>;
inline constexpr ClientId kGlobal = std::nullopt;

struct ShapRecord {
  std::size_t prediction_id = 0;
  std::uint8_t true_label = 0;
  std::uint8_t pred_label = 0;
  double pred_probability = 0.0;
  ClientId client_id;
  std::uint32_t round = 0;
  ShapVector shap;
};

/// Membership bit per feature.
using FeatureSubset = std::vector<bool>;

// ---------------------------------------------------------------------------
// Brute-force route
// ---------------------------------------------------------------------------

/// Cover-weighted conditional expectation of one tree given the features in
/// `subset` are known.
inline double expvalue(const Tree& tree, std::span<const double> row, const FeatureSubset& subset,
                       std::size_t node = 0) {
  const TreeNode& n = tree.nodes[node];
  if (n.is_leaf) return n.value;
  if (subset[n.feature]) {
    return expvalue(tree, row, subset, row[n.feature] < n.threshold ? n.left : n.right);
  }
  const TreeNode& l = tree.nodes[n.left];
  const TreeNode& r = tree.nodes[n.right];
  return (l.cover * expvalue(tree, row, subset, n.left) + r.cover * expvalue(tree, row, subset, n.right)) /
         n.cover;
}

inline constexpr std::size_t kBruteMaxFeatures = 12;

/// Exact Shapley values by enumerating all 2^|F| coalitions.
inline ShapVector shap_brute(const Ensemble& model, std::span<const double> row) {
  const std::size_t d = model.n_features;
  if (d > kBruteMaxFeatures) {
    throw ArgumentError("shap_brute supports at most " + std::to_string(kBruteMaxFeatures) + " features, got " +
                        std::to_string(d));
  }
  if (row.size() != d) throw ArgumentError("row length does not match the model");

  const std::size_t n_subsets = std::size_t{1} << d;
  std::vector<double> ex(n_subsets);
  FeatureSubset subset(d);
  for (std::size_t mask = 0; mask < n_subsets; ++mask) {
    for (std::size_t j = 0; j < d; ++j) subset[j] = (mask >> j) & 1U;
    double v = model.base_margin;
    for (const auto& t : model.trees) v += expvalue(t, row, subset);
    ex[mask] = v;
  }

  // weight[s] = s! (d - s - 1)! / d!
  std::vector<double> weight(d, 0.0);
  for (std::size_t s = 0; s < d; ++s) {
    double w = 1.0 / static_cast<double>(d);
    // s!(d-s-1)!/d! = 1 / (d * C(d-1, s))
    double binom = 1.0;
    for (std::size_t k = 1; k <= s; ++k) binom = binom * static_cast<double>(d - 1 - s + k) / static_cast<double>(k);
    weight[s] = w / binom;
  }

  ShapVector out;
  out.contributions.assign(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double phi = 0.0;
    for (std::size_t mask = 0; mask < n_subsets; ++mask) {
      if (mask & bit) continue;
      const auto s = static_cast<std::size_t>(std::popcount(mask));
      phi += weight[s] * (ex[mask | bit] - ex[mask]);
    }
    out.contributions[i] = phi;
  }
  out.base_value = ex[0];
  out.explained_margin = predict_margin(model, row);
  return out;
}

// ---------------------------------------------------------------------------
// Polynomial route
// ---------------------------------------------------------------------------

namespace detail {

struct PathElement {
  std::int64_t feature = -1;
  double zero_fraction = 0.0;  // share of the path's cover flowing here when the feature is unknown
  double one_fraction = 0.0;   // 1 if the row itself follows this path, else 0
  double weight = 0.0;         // permutation weight for subsets of this size
};

// Adds a feature to the path, updating the subset-size weights.
inline void extend_path(std::vector<PathElement>& path, std::size_t depth, double zero, double one,
                        std::int64_t feature) {
  path[depth] = {feature, zero, one, depth == 0 ? 1.0 : 0.0};
  const double denom = static_cast<double>(depth + 1);
  for (std::size_t k = depth; k-- > 0;) {
    path[k + 1].weight += one * path[k].weight * static_cast<double>(k + 1) / denom;
    path[k].weight = zero * path[k].weight * static_cast<double>(depth - k) / denom;
  }
}

// Inverse of extend_path for the element at `index`.
inline void unwind_path(std::vector<PathElement>& path, std::size_t depth, std::size_t index) {
  const double one = path[index].one_fraction;
  const double zero = path[index].zero_fraction;
  const double denom = static_cast<double>(depth + 1);
  double next = path[depth].weight;
  for (std::size_t k = depth; k-- > 0;) {
    if (one != 0.0) {
      const double tmp = path[k].weight;
      path[k].weight = next * denom / (static_cast<double>(k + 1) * one);
      next = tmp - path[k].weight * zero * static_cast<double>(depth - k) / denom;
    } else {
      path[k].weight = path[k].weight * denom / (zero * static_cast<double>(depth - k));
    }
  }
  for (std::size_t k = index; k < depth; ++k) {
    path[k].feature = path[k + 1].feature;
    path[k].zero_fraction = path[k + 1].zero_fraction;
    path[k].one_fraction = path[k + 1].one_fraction;
  }
}

// Total weight the path would have with the element at `index` removed.
inline double unwound_path_sum(const std::vector<PathElement>& path, std::size_t depth, std::size_t index) {
  const double one = path[index].one_fraction;
  const double zero = path[index].zero_fraction;
  const double denom = static_cast<double>(depth + 1);
  double next = path[depth].weight;
  double total = 0.0;
  for (std::size_t k = depth; k-- > 0;) {
    if (one != 0.0) {
      const double tmp = next * denom / (static_cast<double>(k + 1) * one);
      total += tmp;
      next = path[k].weight - tmp * zero * static_cast<double>(depth - k) / denom;
    } else if (zero != 0.0) {
      total += path[k].weight * denom / (zero * static_cast<double>(depth - k));
    }
  }
  return total;
}

inline void tree_shap_recurse(const Tree& tree, std::span<const double> row, std::vector<double>& phi,
                              std::size_t node, std::vector<PathElement> path, std::size_t depth, double zero,
                              double one, std::int64_t feature) {
  if (path.size() < depth + 1) path.resize(depth + 1);
  extend_path(path, depth, zero, one, feature);
  const TreeNode& n = tree.nodes[node];
  if (n.is_leaf) {
    for (std::size_t k = 1; k <= depth; ++k) {
      const double w = unwound_path_sum(path, depth, k);
      phi[static_cast<std::size_t>(path[k].feature)] +=
          w * (path[k].one_fraction - path[k].zero_fraction) * n.value;
    }
    return;
  }

  const bool go_left = row[n.feature] < n.threshold;
  const std::size_t hot = go_left ? n.left : n.right;
  const std::size_t cold = go_left ? n.right : n.left;

  double incoming_zero = 1.0, incoming_one = 1.0;
  for (std::size_t k = 1; k <= depth; ++k) {
    if (path[k].feature == static_cast<std::int64_t>(n.feature)) {
      incoming_zero = path[k].zero_fraction;
      incoming_one = path[k].one_fraction;
      unwind_path(path, depth, k);
      --depth;
      break;
    }
  }

  const double hot_zero = tree.nodes[hot].cover / n.cover;
  const double cold_zero = tree.nodes[cold].cover / n.cover;
  tree_shap_recurse(tree, row, phi, hot, path, depth + 1, hot_zero * incoming_zero, incoming_one, n.feature);
  tree_shap_recurse(tree, row, phi, cold, std::move(path), depth + 1, cold_zero * incoming_zero, 0.0,
                    n.feature);
}

inline double tree_expected_value(const Tree& tree, std::size_t node = 0) {
  const TreeNode& n = tree.nodes[node];
  if (n.is_leaf) return n.value;
  return (tree.nodes[n.left].cover * tree_expected_value(tree, n.left) +
          tree.nodes[n.right].cover * tree_expected_value(tree, n.right)) /
         n.cover;
}

}  // namespace detail

/// Per-tree contributions of one tree, accumulated into `phi`.
inline void tree_shap(const Tree& tree, std::span<const double> row, std::vector<double>& phi) {
  std::vector<detail::PathElement> path;
  path.reserve(16);
  detail::tree_shap_recurse(tree, row, phi, 0, std::move(path), 0, 1.0, 1.0, -1);
}

/// Exact Shapley values in time polynomial in tree size and depth.
inline ShapVector shap_exact(const Ensemble& model, std::span<const double> row) {
  if (row.size() != model.n_features) throw ArgumentError("row length does not match the model");
  ShapVector out;
  out.contributions.assign(model.n_features, 0.0);
  out.base_value = model.base_margin;
  for (const auto& t : model.trees) {
    out.base_value += detail::tree_expected_value(t);
    tree_shap(t, row, out.contributions);
  }
  out.explained_margin = predict_margin(model, row);
  return out;
}

/// One record per row, prediction ids from 0.
inline std::vector<ShapRecord> explain_batch(const Ensemble& model, const FeatureMatrix& rows, ClientId client_id,
                                             std::uint32_t round) {
  if (!rows.empty() && rows.cols() != model.n_features) {
    throw ArgumentError("matrix has " + std::to_string(rows.cols()) + " features, model expects " +
                        std::to_string(model.n_features));
  }
  std::vector<ShapRecord> out;
  out.reserve(rows.rows());
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    ShapRecord rec;
    rec.prediction_id = i;
    rec.true_label = rows.labels[i];
    rec.shap = shap_exact(model, rows.row(i));
    rec.pred_probability = sigmoid(rec.shap.explained_margin);
    rec.pred_label = label_from_proba(rec.pred_probability);
    rec.client_id = client_id;
    rec.round = round;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Archive format: one JSON object per line, fields in fixed order.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const ShapRecord& rec, std::span<const std::string> feature_names) {
  nlohmann::ordered_json j;
  j["prediction_id"] = rec.prediction_id;
  j["true_label"] = rec.true_label;
  j["pred_label"] = rec.pred_label;
  j["pred_probability"] = rec.pred_probability;
  if (rec.client_id) {
    j["client_id"] = *rec.client_id;
  } else {
    j["client_id"] = "global";
  }
  j["round"] = rec.round;
  j["base_value"] = rec.shap.base_value;
  for (std::size_t f = 0; f < feature_names.size(); ++f) {
    j["phi_" + feature_names[f]] = rec.shap.contributions.at(f);
  }
  return j;
}

inline void write_shap_archive(std::ostream& out, std::span<const ShapRecord> records,
                               std::span<const std::string> feature_names) {
  for (const auto& rec : records) out << to_json(rec, feature_names).dump() << '\n';
}

inline void write_shap_archive(const std::filesystem::path& path, std::span<const ShapRecord> records,
                               std::span<const std::string> feature_names) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_shap_archive(out, records, feature_names);
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

/// Reads an archive back. The explained margin is not stored, so it is
/// reconstructed as base_value + sum(phi).
inline std::vector<ShapRecord> read_shap_archive(std::istream& in, std::span<const std::string> feature_names) {
  std::vector<ShapRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ShapRecord rec;
      rec.prediction_id = j.at("prediction_id").get<std::size_t>();
      rec.true_label = j.at("true_label").get<std::uint8_t>();
      rec.pred_label = j.at("pred_label").get<std::uint8_t>();
      rec.pred_probability = j.at("pred_probability").get<double>();
      const auto& cid = j.at("client_id");
      if (cid.is_string()) {
        if (cid.get<std::string>() != "global") throw FormatError("bad client_id");
        rec.client_id = kGlobal;
      } else {
        rec.client_id = cid.get<std::uint32_t>();
      }
      rec.round = j.at("round").get<std::uint32_t>();
      rec.shap.base_value = j.at("base_value").get<double>();
      double sum = rec.shap.base_value;
      for (const auto& name : feature_names) {
        const double phi = j.at("phi_" + name).get<double>();
        rec.shap.contributions.push_back(phi);
        sum += phi;
      }
      rec.shap.explained_margin = sum;
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("archive line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fedids
