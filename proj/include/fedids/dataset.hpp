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

// Tabular ingestion and preparation: CSV loading, cleaning, categorical
// encoding, per-class mode imputation, min-max normalization, stratified
// splitting and class-balanced client partitioning.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedids/common.hpp"

namespace fedids {

// ---------------------------------------------------------------------------
// Raw tables
// ---------------------------------------------------------------------------

enum class ColumnKind { numeric, categorical };

/// One typed column. Numeric missing cells are NaN; categorical missing
/// cells are nullopt.
struct Column {
  ColumnKind kind = ColumnKind::numeric;
  std::vector<double> numbers;
  std::vector<std::optional<std::string>> texts;

  static Column numeric(std::vector<double> values) {
    Column c;
    c.kind = ColumnKind::numeric;
    c.numbers = std::move(values);
    return c;
  }

  static Column categorical(std::vector<std::optional<std::string>> values) {
    Column c;
    c.kind = ColumnKind::categorical;
    c.texts = std::move(values);
    return c;
  }

  std::size_t size() const {
    return kind == ColumnKind::numeric ? numbers.size() : texts.size();
  }

  bool missing_at(std::size_t i) const {
    return kind == ColumnKind::numeric ? is_missing(numbers[i]) : !texts[i].has_value();
  }
};

struct RawTable {
  std::vector<std::string> column_names;
  std::vector<Column> columns;
  std::size_t row_count = 0;

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < column_names.size(); ++i) {
      if (column_names[i] == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw DataError("unknown column '" + std::string(name) + "'");
  }

  void validate() const {
    if (column_names.size() != columns.size()) {
      throw DataError("column name count does not match column count");
    }
    std::set<std::string_view> seen;
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (!seen.insert(column_names[i]).second) {
        throw DataError("duplicate column name '" + column_names[i] + "'");
      }
      if (columns[i].size() != row_count) {
        throw DataError("column '" + column_names[i] + "' has " +
                        std::to_string(columns[i].size()) + " cells, expected " +
                        std::to_string(row_count));
      }
    }
  }
};

/// Per categorical column, category texts in code order (code = position).
struct EncodingMap {
  std::map<std::string, std::vector<std::string>> categories;

  bool empty() const { return categories.empty(); }

  std::optional<std::int64_t> code(const std::string& column, std::string_view text) const {
    auto it = categories.find(column);
    if (it == categories.end()) return std::nullopt;
    auto pos = std::lower_bound(it->second.begin(), it->second.end(), text);
    if (pos == it->second.end() || *pos != text) return std::nullopt;
    return static_cast<std::int64_t>(pos - it->second.begin());
  }

  const std::string& decode(const std::string& column, std::int64_t code) const {
    auto it = categories.find(column);
    if (it == categories.end()) throw DataError("column '" + column + "' is not encoded");
    if (code < 0 || static_cast<std::size_t>(code) >= it->second.size()) {
      throw DataError("code " + std::to_string(code) + " out of range for '" + column + "'");
    }
    return it->second[static_cast<std::size_t>(code)];
  }
};

// ---------------------------------------------------------------------------
// Feature matrices
// ---------------------------------------------------------------------------

/// Dense row-major features with binary labels (0 benign, 1 attack).
struct FeatureMatrix {
  std::vector<std::string> feature_names;
  std::vector<double> values;
  std::vector<std::uint8_t> labels;

  std::size_t rows() const { return labels.size(); }
  std::size_t cols() const { return feature_names.size(); }
  bool empty() const { return labels.empty(); }

  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * cols(), cols()};
  }

  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  }

  void validate() const {
    if (values.size() != rows() * cols()) {
      throw DataError("feature matrix has " + std::to_string(values.size()) +
                      " values for " + std::to_string(rows()) + "x" + std::to_string(cols()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw DataError("feature matrix contains a non-finite value");
    }
    for (auto y : labels) {
      if (y > 1) throw DataError("feature matrix label outside {0,1}");
    }
  }

  FeatureMatrix subset(std::span<const std::size_t> indices) const {
    FeatureMatrix out;
    out.feature_names = feature_names;
    out.values.reserve(indices.size() * cols());
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
      if (i >= rows()) throw ArgumentError("row index out of range");
      auto r = row(i);
      out.values.insert(out.values.end(), r.begin(), r.end());
      out.labels.push_back(labels[i]);
    }
    return out;
  }
};

struct NormalizationParams {
  std::vector<std::string> feature_names;
  std::vector<double> min;
  std::vector<double> max;
};

/// Shards are ascending row indices into the partitioned matrix.
struct PartitionPlan {
  std::size_t client_count = 0;
  std::vector<std::vector<std::size_t>> shards;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

// Splits one CSV record. Double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  if (quoted) throw DataError("line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(field));
  return fields;
}

inline bool is_nan_token(std::string_view s) { return s == "nan" || s == "NaN" || s == "NAN"; }

// Parses a full-token real number, including inf/infinity spellings.
inline std::optional<double> parse_real(std::string_view s) {
  if (s.empty()) return std::nullopt;
  bool negative = false;
  if (s.front() == '+' || s.front() == '-') {
    negative = s.front() == '-';
    s.remove_prefix(1);
    if (s.empty() || s.front() == '+' || s.front() == '-') return std::nullopt;
  }
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    if (ec == std::errc::result_out_of_range && ptr == s.data() + s.size()) {
      // strtod saturates overflow to HUGE_VAL and underflow to zero.
      v = std::strtod(std::string(s).c_str(), nullptr);
    } else {
      return std::nullopt;
    }
  }
  return negative ? -v : v;
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Reads CSV text with a header line. A column is numeric iff every
/// non-missing cell parses as a real number; empty cells and nan/NaN are
/// missing.
inline RawTable parse_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw DataError("CSV input is empty (no header line)");
  ++line_no;
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
      static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF) {
    line.erase(0, 3);
  }
  RawTable table;
  for (auto& name : detail::split_csv_line(line, line_no)) {
    table.column_names.emplace_back(detail::trim(name));
  }
  const std::size_t width = table.column_names.size();
  std::vector<std::vector<std::string>> cells(width);
  while (std::getline(in, line)) {
    ++line_no;
    // A blank line is an empty cell in a one-column file, noise otherwise.
    if (detail::trim(line).empty() && width > 1) continue;
    auto fields = detail::split_csv_line(line, line_no);
    if (fields.size() != width) {
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                      " fields, found " + std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < width; ++c) cells[c].emplace_back(detail::trim(fields[c]));
    ++table.row_count;
  }

  for (std::size_t c = 0; c < width; ++c) {
    bool numeric = true;
    std::vector<double> numbers;
    numbers.reserve(cells[c].size());
    for (const auto& cell : cells[c]) {
      if (cell.empty() || detail::is_nan_token(cell)) {
        numbers.push_back(kMissing);
        continue;
      }
      auto v = detail::parse_real(cell);
      if (!v) {
        numeric = false;
        break;
      }
      numbers.push_back(*v);
    }
    if (numeric) {
      table.columns.push_back(Column::numeric(std::move(numbers)));
    } else {
      std::vector<std::optional<std::string>> texts;
      texts.reserve(cells[c].size());
      for (auto& cell : cells[c]) {
        if (cell.empty() || detail::is_nan_token(cell)) {
          texts.emplace_back(std::nullopt);
        } else {
          texts.emplace_back(std::move(cell));
        }
      }
      table.columns.push_back(Column::categorical(std::move(texts)));
    }
  }
  table.validate();
  return table;
}

inline RawTable load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  return parse_csv(in);
}

// ---------------------------------------------------------------------------
// Cleaning and encoding
// ---------------------------------------------------------------------------

/// Replaces +/-infinity with missing and removes the named columns.
inline RawTable sanitize(RawTable table, std::span<const std::string> drop_columns) {
  for (const auto& name : drop_columns) {
    if (!table.find(name)) throw DataError("cannot drop unknown column '" + name + "'");
  }
  RawTable out;
  out.row_count = table.row_count;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (std::find(drop_columns.begin(), drop_columns.end(), table.column_names[c]) !=
        drop_columns.end()) {
      continue;
    }
    Column col = std::move(table.columns[c]);
    if (col.kind == ColumnKind::numeric) {
      for (double& v : col.numbers) {
        if (std::isinf(v)) v = kMissing;
      }
    }
    out.column_names.push_back(std::move(table.column_names[c]));
    out.columns.push_back(std::move(col));
  }
  return out;
}

/// Ordinal codes assigned in lexicographic (byte) order of category text.
inline std::pair<RawTable, EncodingMap> encode_categoricals(RawTable table) {
  EncodingMap map;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    Column& col = table.columns[c];
    if (col.kind != ColumnKind::categorical) continue;
    std::vector<std::string> cats;
    for (const auto& t : col.texts) {
      if (t) cats.push_back(*t);
    }
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());

    std::vector<double> codes;
    codes.reserve(col.texts.size());
    for (const auto& t : col.texts) {
      if (!t) {
        codes.push_back(kMissing);
      } else {
        auto pos = std::lower_bound(cats.begin(), cats.end(), *t);
        codes.push_back(static_cast<double>(pos - cats.begin()));
      }
    }
    col = Column::numeric(std::move(codes));
    map.categories.emplace(table.column_names[c], std::move(cats));
  }
  return {std::move(table), std::move(map)};
}

/// Rewrites the label column as numeric 0/1: cells equal to `benign_token`
/// become 0, every other observed value becomes 1.
inline RawTable binarize_label(RawTable table, std::string_view label_column,
                               std::string_view benign_token) {
  const std::size_t li = table.index_of(label_column);
  Column& col = table.columns[li];
  std::vector<double> out(table.row_count);
  if (col.kind == ColumnKind::numeric) {
    auto benign = detail::parse_real(benign_token);
    for (std::size_t r = 0; r < table.row_count; ++r) {
      if (is_missing(col.numbers[r])) {
        throw DataError("label column '" + std::string(label_column) + "' has a missing value at row " +
                        std::to_string(r));
      }
      out[r] = (benign && col.numbers[r] == *benign) ? 0.0 : 1.0;
    }
  } else {
    for (std::size_t r = 0; r < table.row_count; ++r) {
      if (!col.texts[r]) {
        throw DataError("label column '" + std::string(label_column) + "' has a missing value at row " +
                        std::to_string(r));
      }
      out[r] = (*col.texts[r] == benign_token) ? 0.0 : 1.0;
    }
  }
  col = Column::numeric(std::move(out));
  return table;
}

namespace detail {

template <typename Key>
std::optional<Key> mode_of(const std::map<Key, std::size_t>& counts) {
  std::optional<Key> best;
  std::size_t best_count = 0;
  for (const auto& [key, n] : counts) {
    if (n > best_count) {  // ascending iteration: ties keep the smallest key
      best = key;
      best_count = n;
    }
  }
  return best;
}

template <typename Key, typename Cells, typename IsMissing, typename Get, typename Set>
void impute_column(Cells& cells, std::span<const std::size_t> class_of, std::size_t class_count,
                   const std::string& name, IsMissing missing, Get get, Set set) {
  std::vector<std::map<Key, std::size_t>> per_class(class_count);
  std::map<Key, std::size_t> global;
  bool any_missing = false;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    if (missing(cells[r])) {
      any_missing = true;
      continue;
    }
    ++per_class[class_of[r]][get(cells[r])];
    ++global[get(cells[r])];
  }
  if (!any_missing) return;
  auto global_mode = mode_of(global);
  if (!global_mode) throw DataError("column '" + name + "' has no observed values to impute from");
  std::vector<std::optional<Key>> modes(class_count);
  for (std::size_t k = 0; k < class_count; ++k) modes[k] = mode_of(per_class[k]);
  for (std::size_t r = 0; r < cells.size(); ++r) {
    if (!missing(cells[r])) continue;
    const auto& m = modes[class_of[r]];
    set(cells[r], m ? *m : *global_mode);
  }
}

}  // namespace detail

/// Fills each missing cell with the most frequent value of its column among
/// rows of the same class. Ties go to the smallest value; classes without
/// observations in a column fall back to the column's global mode.
inline RawTable impute_mode_by_class(RawTable table, std::string_view label_column) {
  const std::size_t li = table.index_of(label_column);
  const Column& label = table.columns[li];

  std::vector<std::size_t> class_of(table.row_count);
  std::size_t class_count = 0;
  if (label.kind == ColumnKind::numeric) {
    std::map<double, std::size_t> ids;
    for (double v : label.numbers) {
      if (is_missing(v)) throw DataError("label column '" + std::string(label_column) + "' has missing values");
      ids.emplace(v, 0);
    }
    for (auto& [_, id] : ids) id = class_count++;
    for (std::size_t r = 0; r < table.row_count; ++r) class_of[r] = ids.at(label.numbers[r]);
  } else {
    std::map<std::string, std::size_t> ids;
    for (const auto& t : label.texts) {
      if (!t) throw DataError("label column '" + std::string(label_column) + "' has missing values");
      ids.emplace(*t, 0);
    }
    for (auto& [_, id] : ids) id = class_count++;
    for (std::size_t r = 0; r < table.row_count; ++r) class_of[r] = ids.at(*label.texts[r]);
  }

  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (c == li) continue;
    Column& col = table.columns[c];
    if (col.kind == ColumnKind::numeric) {
      detail::impute_column<double>(
          col.numbers, class_of, class_count, table.column_names[c],
          [](double v) { return is_missing(v); }, [](double v) { return v; },
          [](double& cell, double v) { cell = v; });
    } else {
      detail::impute_column<std::string>(
          col.texts, class_of, class_count, table.column_names[c],
          [](const std::optional<std::string>& t) { return !t.has_value(); },
          [](const std::optional<std::string>& t) { return *t; },
          [](std::optional<std::string>& cell, const std::string& v) { cell = v; });
    }
  }
  return table;
}

/// Converts a fully numeric, complete table into a FeatureMatrix. The label
/// column must already hold 0/1 values.
inline FeatureMatrix to_feature_matrix(const RawTable& table, std::string_view label_column) {
  const std::size_t li = table.index_of(label_column);
  FeatureMatrix m;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (c == li) continue;
    if (table.columns[c].kind != ColumnKind::numeric) {
      throw DataError("column '" + table.column_names[c] + "' is not numeric");
    }
    m.feature_names.push_back(table.column_names[c]);
  }
  m.values.reserve(table.row_count * m.feature_names.size());
  for (std::size_t r = 0; r < table.row_count; ++r) {
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      if (c == li) continue;
      const double v = table.columns[c].numbers[r];
      if (!std::isfinite(v)) {
        throw DataError("column '" + table.column_names[c] + "' row " + std::to_string(r) +
                        " is missing or non-finite");
      }
      m.values.push_back(v);
    }
    const double y = table.columns[li].numbers[r];
    if (y != 0.0 && y != 1.0) throw DataError("label value outside {0,1} at row " + std::to_string(r));
    m.labels.push_back(static_cast<std::uint8_t>(y));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Normalization, splitting and partitioning
// ---------------------------------------------------------------------------

/// Min-max scaling fit on `train` only. Constant features map to 0.
inline NormalizationParams fit_normalization(const FeatureMatrix& train) {
  NormalizationParams p;
  p.feature_names = train.feature_names;
  const std::size_t d = train.cols();
  p.min.assign(d, 0.0);
  p.max.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    if (train.empty()) break;
    double lo = train.at(0, j);
    double hi = lo;
    for (std::size_t r = 1; r < train.rows(); ++r) {
      lo = std::min(lo, train.at(r, j));
      hi = std::max(hi, train.at(r, j));
    }
    p.min[j] = lo;
    p.max[j] = hi;
  }
  return p;
}

inline FeatureMatrix apply_normalization(FeatureMatrix m, const NormalizationParams& p) {
  if (m.feature_names != p.feature_names) {
    throw DataError("normalization parameters do not match the matrix's features");
  }
  const std::size_t d = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      double& v = m.values[r * d + j];
      const double range = p.max[j] - p.min[j];
      v = range > 0.0 ? (v - p.min[j]) / range : 0.0;
    }
  }
  return m;
}

struct NormalizedPair {
  FeatureMatrix train;
  FeatureMatrix test;
  NormalizationParams params;
};

inline NormalizedPair normalize(FeatureMatrix train, FeatureMatrix test) {
  if (train.feature_names != test.feature_names) {
    throw DataError("train and test feature names differ");
  }
  auto params = fit_normalization(train);
  auto tr = apply_normalization(std::move(train), params);
  auto te = apply_normalization(std::move(test), params);
  return {std::move(tr), std::move(te), std::move(params)};
}

/// Per-class shuffled split. Each class contributes floor(fraction * size)
/// rows to train. Index lists are returned ascending.
inline SplitIndices stratified_split_indices(std::span<const std::uint8_t> labels,
                                             double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ArgumentError("train fraction must lie strictly between 0 and 1");
  }
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] ? 1 : 0].push_back(i);
  for (int k = 0; k < 2; ++k) {
    if (by_class[k].size() < 2) {
      throw DataError("class " + std::to_string(k) + " has " + std::to_string(by_class[k].size()) +
                      " samples; stratified splitting needs at least 2");
    }
  }
  SplitIndices out;
  Rng rng(seed);
  for (auto& idx : by_class) {
    shuffle(idx, rng);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(idx.size())));
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

struct MatrixSplit {
  FeatureMatrix train;
  FeatureMatrix test;
};

inline MatrixSplit stratified_split(const FeatureMatrix& m, double train_fraction, std::uint64_t seed) {
  auto idx = stratified_split_indices(m.labels, train_fraction, seed);
  return {m.subset(idx.train), m.subset(idx.test)};
}

/// A client's own train/test split of its shard; same contract as
/// stratified_split.
inline MatrixSplit local_split(const FeatureMatrix& shard, double train_fraction, std::uint64_t seed) {
  return stratified_split(shard, train_fraction, seed);
}

/// Seeded per-class shuffle followed by a round-robin deal to clients. The
/// deal counter carries over from class 0 to class 1 so shard sizes differ
/// by at most one.
inline PartitionPlan partition_balanced(std::span<const std::uint8_t> labels, std::size_t client_count,
                                        std::uint64_t seed) {
  if (client_count < 1) throw ArgumentError("client count must be at least 1");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] ? 1 : 0].push_back(i);
  for (int k = 0; k < 2; ++k) {
    if (by_class[k].size() < client_count) {
      throw DataError("class " + std::to_string(k) + " has " + std::to_string(by_class[k].size()) +
                      " rows, fewer than the " + std::to_string(client_count) + " clients");
    }
  }
  PartitionPlan plan;
  plan.client_count = client_count;
  plan.shards.resize(client_count);
  Rng rng(seed);
  std::size_t next = 0;
  for (auto& idx : by_class) {
    shuffle(idx, rng);
    for (std::size_t i : idx) {
      plan.shards[next].push_back(i);
      next = (next + 1) % client_count;
    }
  }
  for (auto& s : plan.shards) std::sort(s.begin(), s.end());
  return plan;
}

inline PartitionPlan partition_balanced(const FeatureMatrix& m, std::size_t client_count, std::uint64_t seed) {
  return partition_balanced(std::span<const std::uint8_t>(m.labels), client_count, seed);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Two Gaussian clusters. Class means differ by `separation` along one
/// seeded, randomly signed coordinate axis; each feature is then given a
/// seeded affine offset/scale so raw ranges differ across features.
/// Exactly round(n_rows * positive_fraction) rows are positive.
inline FeatureMatrix synth_generate(std::size_t n_rows, std::size_t n_features, double separation,
                                    double positive_fraction, std::uint64_t seed) {
  if (n_features < 2) throw ArgumentError("synthetic data needs at least 2 features");
  if (!(positive_fraction > 0.0 && positive_fraction < 1.0)) {
    throw ArgumentError("positive fraction must lie strictly between 0 and 1");
  }
  if (!(separation >= 0.0)) throw ArgumentError("separation must be non-negative");

  Rng rng(seed);
  const auto signal_axis = static_cast<std::size_t>(rng.below(n_features));
  const double direction = rng.coin() ? 1.0 : -1.0;
  std::vector<double> offset(n_features), scale(n_features);
  for (std::size_t j = 0; j < n_features; ++j) {
    offset[j] = rng.uniform(-5.0, 5.0);
    scale[j] = rng.uniform(0.5, 3.0);
  }

  const auto n_pos = static_cast<std::size_t>(std::llround(static_cast<double>(n_rows) * positive_fraction));
  std::vector<std::uint8_t> labels(n_rows, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(std::min(n_pos, n_rows)), 1);
  shuffle(labels, rng);

  FeatureMatrix m;
  for (std::size_t j = 0; j < n_features; ++j) m.feature_names.push_back("f" + std::to_string(j));
  m.values.resize(n_rows * n_features);
  for (std::size_t r = 0; r < n_rows; ++r) {
    for (std::size_t j = 0; j < n_features; ++j) {
      double z = rng.normal();
      if (j == signal_axis && labels[r]) z += direction * separation;
      m.values[r * n_features + j] = offset[j] + scale[j] * z;
    }
  }
  m.labels = std::move(labels);
  return m;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr std::string_view kLabelHeader = "label";

/// Writes features then a trailing `label` column. Values use 17 significant
/// digits so they read back bit-identically.
inline void write_matrix_csv(std::ostream& out, const FeatureMatrix& m) {
  for (const auto& name : m.feature_names) out << name << ',';
  out << kLabelHeader << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t j = 0; j < m.cols(); ++j) out << detail::format_real(m.at(r, j)) << ',';
    out << static_cast<int>(m.labels[r]) << '\n';
  }
}

inline void write_matrix_csv(const std::filesystem::path& path, const FeatureMatrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_matrix_csv(out, m);
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline FeatureMatrix read_matrix_csv(std::istream& in) {
  RawTable t = parse_csv(in);
  if (t.column_names.empty() || t.column_names.back() != kLabelHeader) {
    throw DataError("prepared matrix must end with a 'label' column");
  }
  auto m = to_feature_matrix(t, kLabelHeader);
  m.validate();
  return m;
}

inline FeatureMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  return read_matrix_csv(in);
}

/// Sidecar metadata: `key: value` lines.
///   norm.<feature>: <min> <max>
///   encoding.<column>.<code>: <category text>
inline void write_metadata(std::ostream& out, const NormalizationParams& norm, const EncodingMap& enc,
                           const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  out << "format: fedids-prepared-v1\n";
  for (const auto& [k, v] : extra) out << k << ": " << v << '\n';
  out << "features: " << norm.feature_names.size() << '\n';
  for (std::size_t j = 0; j < norm.feature_names.size(); ++j) {
    out << "norm." << norm.feature_names[j] << ": " << detail::format_real(norm.min[j]) << ' '
        << detail::format_real(norm.max[j]) << '\n';
  }
  for (const auto& [column, cats] : enc.categories) {
    for (std::size_t code = 0; code < cats.size(); ++code) {
      out << "encoding." << column << '.' << code << ": " << cats[code] << '\n';
    }
  }
}

struct Metadata {
  NormalizationParams norm;
  EncodingMap encoding;
  std::map<std::string, std::string> fields;
};

inline Metadata read_metadata(std::istream& in) {
  Metadata md;
  std::map<std::string, std::map<std::size_t, std::string>> enc;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto colon = line.find(": ");
    if (colon == std::string::npos) throw DataError("metadata line " + std::to_string(line_no) + ": missing ': '");
    std::string key = line.substr(0, colon);
    std::string value = line.substr(colon + 2);
    if (key.rfind("norm.", 0) == 0) {
      std::istringstream vs(value);
      std::string lo, hi;
      vs >> lo >> hi;
      auto a = detail::parse_real(lo), b = detail::parse_real(hi);
      if (!a || !b) throw DataError("metadata line " + std::to_string(line_no) + ": bad range");
      md.norm.feature_names.push_back(key.substr(5));
      md.norm.min.push_back(*a);
      md.norm.max.push_back(*b);
    } else if (key.rfind("encoding.", 0) == 0) {
      const auto dot = key.rfind('.');
      if (dot <= 9) throw DataError("metadata line " + std::to_string(line_no) + ": bad encoding key");
      std::size_t code = 0;
      const std::string code_text = key.substr(dot + 1);
      auto [p, ec] = std::from_chars(code_text.data(), code_text.data() + code_text.size(), code);
      if (ec != std::errc() || p != code_text.data() + code_text.size()) {
        throw DataError("metadata line " + std::to_string(line_no) + ": bad category code");
      }
      enc[key.substr(9, dot - 9)][code] = value;
    } else {
      md.fields[key] = value;
    }
  }
  for (auto& [column, codes] : enc) {
    auto& cats = md.encoding.categories[column];
    for (auto& [code, text] : codes) {
      if (code != cats.size()) throw DataError("metadata encoding for '" + column + "' is not dense");
      cats.push_back(std::move(text));
    }
  }
  return md;
}

}  // namespace fedids
