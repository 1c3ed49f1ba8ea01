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

// Second-order gradient-boosted trees for binary classification with a
// weighted logistic loss. Models grow one tree per boost_round() call and
// are exchanged as a versioned little-endian byte format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedids/common.hpp"
#include "fedids/dataset.hpp"

namespace fedids {

struct TrainConfig {
  double lambda = 1.0;           // L2 regularization on leaf values
  double gamma = 0.0;            // minimum split gain
  double eta = 0.3;              // learning rate
  std::uint32_t max_depth = 6;
  double min_child_cover = 1.0;  // minimum hessian sum per child

  void validate() const {
    if (!(lambda >= 0.0)) throw ArgumentError("lambda must be >= 0");
    if (!(gamma >= 0.0)) throw ArgumentError("gamma must be >= 0");
    if (!(eta > 0.0 && eta <= 1.0)) throw ArgumentError("eta must lie in (0, 1]");
    if (max_depth < 1) throw ArgumentError("max_depth must be >= 1");
    if (!(min_child_cover >= 0.0)) throw ArgumentError("min_child_cover must be >= 0");
  }
};

/// A tree node. Trees are stored as flat pre-order node arrays with the root
/// at index 0; `left`/`right` index into the same array.
struct TreeNode {
  bool is_leaf = true;
  std::uint32_t feature = 0;
  double threshold = 0.0;
  double value = 0.0;  // leaf margin contribution
  double cover = 0.0;  // sum of hessians routed here
  std::uint32_t left = 0;
  std::uint32_t right = 0;

  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct Tree {
  std::vector<TreeNode> nodes;

  const TreeNode& root() const { return nodes.front(); }

  /// Index of the leaf `row` routes to. Left iff value < threshold.
  std::size_t leaf_index(std::span<const double> row) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf) {
      const auto& n = nodes[i];
      i = row[n.feature] < n.threshold ? n.left : n.right;
    }
    return i;
  }

  double predict(std::span<const double> row) const { return nodes[leaf_index(row)].value; }

  std::size_t depth() const { return depth_from(0); }

  friend bool operator==(const Tree&, const Tree&) = default;

 private:
  std::size_t depth_from(std::size_t i) const {
    if (nodes[i].is_leaf) return 0;
    return 1 + std::max(depth_from(nodes[i].left), depth_from(nodes[i].right));
  }
};

struct Ensemble {
  double base_margin = 0.0;
  std::vector<Tree> trees;
  std::uint32_t n_features = 0;
  double lambda = 1.0;
  double gamma = 0.0;
  double eta = 0.3;
  std::uint32_t max_depth = 6;

  friend bool operator==(const Ensemble&, const Ensemble&) = default;
};

// ---------------------------------------------------------------------------
// Loss helpers
// ---------------------------------------------------------------------------

/// Logistic link, stable for large |margin|.
inline double sigmoid(double margin) {
  if (margin >= 0.0) return 1.0 / (1.0 + std::exp(-margin));
  const double e = std::exp(margin);
  return e / (1.0 + e);
}

/// Positive-class weight #neg / #pos.
inline double compute_pos_weight(std::span<const std::uint8_t> labels) {
  std::size_t pos = 0;
  for (auto y : labels) pos += y ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    throw DataError("scale_pos_weight needs both classes (got " + std::to_string(neg) + " negative, " +
                    std::to_string(pos) + " positive)");
  }
  return static_cast<double>(neg) / static_cast<double>(pos);
}

struct GradHess {
  double g;
  double h;
};

inline GradHess grad_hess(std::uint8_t label, double probability, double pos_weight) {
  const double w = label ? pos_weight : 1.0;
  const double y = label ? 1.0 : 0.0;
  return {w * (probability - y), w * probability * (1.0 - probability)};
}

// ---------------------------------------------------------------------------
// Tree growing
// ---------------------------------------------------------------------------

/// Read-only view over a row-major matrix.
struct MatrixView {
  std::span<const double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;

  MatrixView() = default;
  MatrixView(std::span<const double> v, std::size_t r, std::size_t c) : values(v), rows(r), cols(c) {}
  MatrixView(const FeatureMatrix& m) : values(m.values), rows(m.rows()), cols(m.cols()) {}  // NOLINT

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return values.subspan(r * cols, cols); }
};

/// Gain of splitting (G, H) into (GL, HL) | (GR, HR).
inline double split_gain(double gl, double hl, double gr, double hr, double lambda, double gamma) {
  const double g = gl + gr;
  const double h = hl + hr;
  return 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)) - gamma;
}

inline double leaf_weight(double g, double h, double lambda, double eta) {
  if (g == 0.0) return 0.0;
  return -eta * g / (h + lambda);
}

/// Midpoint of two consecutive distinct values, nudged so that `lo` routes
/// left and `hi` routes right under the strict less-than rule.
inline double split_threshold(double lo, double hi) {
  double t = lo + (hi - lo) / 2.0;
  if (!(t > lo)) t = hi;
  return t;
}

namespace detail {

struct SplitCandidate {
  bool found = false;
  double gain = 0.0;
  std::uint32_t feature = 0;
  double threshold = 0.0;
};

class TreeGrower {
 public:
  TreeGrower(MatrixView x, std::span<const double> g, std::span<const double> h, const TrainConfig& cfg)
      : x_(x), g_(g), h_(h), cfg_(cfg) {}

  Tree grow() {
    std::vector<std::size_t> rows(x_.rows);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Tree tree;
    build(tree, rows, 0);
    return tree;
  }

 private:
  std::uint32_t build(Tree& tree, std::vector<std::size_t>& rows, std::uint32_t depth) {
    double g_sum = 0.0, h_sum = 0.0;
    for (std::size_t r : rows) {
      g_sum += g_[r];
      h_sum += h_[r];
    }
    const auto self = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{});
    tree.nodes[self].cover = h_sum;

    SplitCandidate best;
    if (depth < cfg_.max_depth && rows.size() > 1) best = find_split(rows, g_sum, h_sum);
    if (!best.found || !(best.gain > 0.0)) {
      tree.nodes[self].is_leaf = true;
      tree.nodes[self].value = leaf_weight(g_sum, h_sum, cfg_.lambda, cfg_.eta);
      return self;
    }

    std::vector<std::size_t> left_rows, right_rows;
    for (std::size_t r : rows) {
      (x_.at(r, best.feature) < best.threshold ? left_rows : right_rows).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();

    tree.nodes[self].is_leaf = false;
    tree.nodes[self].feature = best.feature;
    tree.nodes[self].threshold = best.threshold;
    const auto l = build(tree, left_rows, depth + 1);
    const auto r = build(tree, right_rows, depth + 1);
    tree.nodes[self].left = l;
    tree.nodes[self].right = r;
    return self;
  }

  // Exact greedy search. Features ascending, thresholds ascending, strict
  // improvement only: ties resolve to the lower feature, then lower threshold.
  SplitCandidate find_split(const std::vector<std::size_t>& rows, double g_sum, double h_sum) const {
    SplitCandidate best;
    std::vector<std::size_t> order(rows);
    for (std::uint32_t f = 0; f < x_.cols; ++f) {
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return x_.at(a, f) < x_.at(b, f); });
      double gl = 0.0, hl = 0.0;
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        gl += g_[order[i]];
        hl += h_[order[i]];
        const double lo = x_.at(order[i], f);
        const double hi = x_.at(order[i + 1], f);
        if (!(lo < hi)) continue;
        const double gr = g_sum - gl;
        const double hr = h_sum - hl;
        if (hl < cfg_.min_child_cover || hr < cfg_.min_child_cover) continue;
        if (!(hl + cfg_.lambda > 0.0) || !(hr + cfg_.lambda > 0.0)) continue;
        const double gain = split_gain(gl, hl, gr, hr, cfg_.lambda, cfg_.gamma);
        if (!best.found || gain > best.gain) {
          best = {true, gain, f, split_threshold(lo, hi)};
        }
      }
      std::sort(order.begin(), order.end());
    }
    return best;
  }

  MatrixView x_;
  std::span<const double> g_;
  std::span<const double> h_;
  const TrainConfig& cfg_;
};

}  // namespace detail

inline Tree grow_tree(MatrixView x, std::span<const double> g, std::span<const double> h,
                      const TrainConfig& cfg) {
  if (g.size() != x.rows || h.size() != x.rows) throw ArgumentError("gradient/hessian length mismatch");
  if (x.rows == 0) throw ArgumentError("cannot grow a tree on zero rows");
  return detail::TreeGrower(x, g, h, cfg).grow();
}

// ---------------------------------------------------------------------------
// Prediction and boosting
// ---------------------------------------------------------------------------

inline double predict_margin(const Ensemble& model, std::span<const double> row) {
  if (row.size() != model.n_features) {
    throw ArgumentError("row has " + std::to_string(row.size()) + " features, model expects " +
                        std::to_string(model.n_features));
  }
  double m = model.base_margin;
  for (const auto& t : model.trees) m += t.predict(row);
  return m;
}

inline double predict_proba(const Ensemble& model, std::span<const double> row) {
  return sigmoid(predict_margin(model, row));
}

inline std::uint8_t label_from_proba(double p) { return p >= 0.5 ? 1 : 0; }

inline std::uint8_t predict_label(const Ensemble& model, std::span<const double> row) {
  return label_from_proba(predict_proba(model, row));
}

/// Appends exactly one tree fitted to the current gradients. A missing model
/// starts from base margin 0. Existing trees are copied unchanged.
inline Ensemble boost_round(const std::optional<Ensemble>& model, const FeatureMatrix& train,
                            const TrainConfig& cfg, double pos_weight) {
  cfg.validate();
  Ensemble out;
  if (model) {
    if (model->n_features != train.cols()) {
      throw ArgumentError("model has " + std::to_string(model->n_features) + " features, training data has " +
                          std::to_string(train.cols()));
    }
    out = *model;
  } else {
    out.n_features = static_cast<std::uint32_t>(train.cols());
  }
  out.lambda = cfg.lambda;
  out.gamma = cfg.gamma;
  out.eta = cfg.eta;
  out.max_depth = cfg.max_depth;

  const std::size_t n = train.rows();
  std::vector<double> g(n), h(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double p = sigmoid(predict_margin(out, train.row(r)));
    const auto gh = grad_hess(train.labels[r], p, pos_weight);
    g[r] = gh.g;
    h[r] = gh.h;
  }
  out.trees.push_back(grow_tree(MatrixView(train), g, h, cfg));
  return out;
}

/// Weighted logistic loss of `model` on `data`, averaged over total weight.
inline double weighted_log_loss(const Ensemble& model, const FeatureMatrix& data, double pos_weight) {
  double total = 0.0, weight = 0.0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const double m = predict_margin(model, data.row(r));
    const double w = data.labels[r] ? pos_weight : 1.0;
    // log(1 + e^-m) for positives, log(1 + e^m) for negatives.
    const double z = data.labels[r] ? -m : m;
    const double loss = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    total += w * loss;
    weight += w;
  }
  return weight > 0 ? total / weight : 0.0;
}

// ---------------------------------------------------------------------------
// Validation and serialization
// ---------------------------------------------------------------------------

/// Checks structural invariants: pre-order layout, feature bounds, positive
/// covers, and internal cover = left + right (1e-9 relative).
inline void validate_tree(const Tree& tree, std::uint32_t n_features) {
  const auto& nodes = tree.nodes;
  if (nodes.empty()) throw FormatError("tree has no nodes");
  std::vector<std::uint8_t> seen(nodes.size(), 0);
  // Pre-order: walking from the root visits indices 0, 1, 2, ... in order.
  std::size_t expected = 0;
  std::vector<std::size_t> stack{0};
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    if (i != expected) throw FormatError("tree nodes are not in pre-order");
    ++expected;
    seen[i] = 1;
    const auto& n = nodes[i];
    if (!(n.cover > 0.0) || !std::isfinite(n.cover)) throw FormatError("node cover must be positive");
    if (n.is_leaf) {
      if (!std::isfinite(n.value)) throw FormatError("leaf value is not finite");
      continue;
    }
    if (n.feature >= n_features) throw FormatError("split feature index out of range");
    if (!std::isfinite(n.threshold)) throw FormatError("split threshold is not finite");
    if (n.left >= nodes.size() || n.right >= nodes.size() || n.left != i + 1 || n.right <= n.left) {
      throw FormatError("child index out of range");
    }
    const double sum = nodes[n.left].cover + nodes[n.right].cover;
    if (std::abs(sum - n.cover) > 1e-9 * std::max(std::abs(n.cover), 1e-300)) {
      throw FormatError("internal cover differs from the sum of its children");
    }
    stack.push_back(n.right);
    stack.push_back(n.left);
  }
  if (expected != nodes.size()) throw FormatError("tree contains unreachable nodes");
}

inline void validate_ensemble(const Ensemble& model) {
  if (!std::isfinite(model.base_margin)) throw FormatError("base margin is not finite");
  for (const auto& t : model.trees) validate_tree(t, model.n_features);
}

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("model payload truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint8_t kModelMagic[4] = {'F', 'G', 'B', 'T'};
inline constexpr std::uint16_t kModelVersion = 1;
inline constexpr std::size_t kModelHeaderSize = 4 + 2 + 4 + 8 + 8 * 3 + 2 + 4;
inline constexpr std::size_t kNodeRecordSize = 1 + 4 + 8 + 8 + 8 + 4 + 4;

/// Layout (little-endian): "FGBT", u16 version, u32 n_features, f64
/// base_margin, f64 lambda, f64 gamma, f64 eta, u16 max_depth, u32
/// tree_count; per tree u32 node_count then pre-order nodes {u8 kind (0 leaf,
/// 1 split), u32 feature, f64 threshold, f64 value, f64 cover, u32 left,
/// u32 right}. Fields unused by a node kind are zero.
inline std::vector<std::uint8_t> serialize(const Ensemble& model) {
  std::vector<std::uint8_t> out;
  std::size_t size = kModelHeaderSize;
  for (const auto& t : model.trees) size += 4 + kNodeRecordSize * t.nodes.size();
  out.reserve(size);
  detail::ByteWriter w(out);
  for (std::uint8_t b : kModelMagic) w.uint(b);
  w.uint<std::uint16_t>(kModelVersion);
  w.uint<std::uint32_t>(model.n_features);
  w.f64(model.base_margin);
  w.f64(model.lambda);
  w.f64(model.gamma);
  w.f64(model.eta);
  w.uint<std::uint16_t>(static_cast<std::uint16_t>(model.max_depth));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(model.trees.size()));
  for (const auto& t : model.trees) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& n : t.nodes) {
      w.uint<std::uint8_t>(n.is_leaf ? 0 : 1);
      w.uint<std::uint32_t>(n.is_leaf ? 0 : n.feature);
      w.f64(n.is_leaf ? 0.0 : n.threshold);
      w.f64(n.is_leaf ? n.value : 0.0);
      w.f64(n.cover);
      w.uint<std::uint32_t>(n.is_leaf ? 0 : n.left);
      w.uint<std::uint32_t>(n.is_leaf ? 0 : n.right);
    }
  }
  return out;
}

inline Ensemble deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, std::begin(kModelMagic))) {
    throw FormatError("bad magic: not a model payload");
  }
  detail::ByteReader r(bytes.subspan(4));
  const auto version = r.uint<std::uint16_t>();
  if (version != kModelVersion) throw FormatError("unsupported model version " + std::to_string(version));
  Ensemble m;
  m.n_features = r.uint<std::uint32_t>();
  m.base_margin = r.f64();
  m.lambda = r.f64();
  m.gamma = r.f64();
  m.eta = r.f64();
  m.max_depth = r.uint<std::uint16_t>();
  const auto tree_count = r.uint<std::uint32_t>();
  // Each tree needs at least a count and one node; reject absurd counts early.
  if (static_cast<std::uint64_t>(tree_count) * (4 + kNodeRecordSize) > r.remaining()) {
    throw FormatError("model payload truncated");
  }
  m.trees.resize(tree_count);
  for (auto& t : m.trees) {
    const auto node_count = r.uint<std::uint32_t>();
    if (static_cast<std::uint64_t>(node_count) * kNodeRecordSize > r.remaining()) {
      throw FormatError("model payload truncated");
    }
    t.nodes.resize(node_count);
    for (auto& n : t.nodes) {
      const auto kind = r.uint<std::uint8_t>();
      if (kind > 1) throw FormatError("unknown node kind " + std::to_string(kind));
      n.is_leaf = kind == 0;
      n.feature = r.uint<std::uint32_t>();
      n.threshold = r.f64();
      n.value = r.f64();
      n.cover = r.f64();
      n.left = r.uint<std::uint32_t>();
      n.right = r.uint<std::uint32_t>();
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after model payload");
  validate_ensemble(m);
  return m;
}

}  // namespace fedids
