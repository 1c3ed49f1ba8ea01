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

// Command implementations behind the `fedids` executable: run configuration,
// data preparation, federation runs, reports and standalone explanation.
//
// Output directory layout:
//
//   <out>/prepared/{train.csv,test.csv,partition.txt,metadata.txt,summary.json}
//   <out>/global_log.jsonl
//   <out>/final_model.model, <out>/final_report.json
//   <out>/models/round_<r>_best_client_<id>.model
//   <out>/shap/round_<r>_client_<id>.shap, <out>/shap/round_<r>_global.shap
//   <out>/clients/client_<id>.jsonl
//   <out>/report.csv

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedids/common.hpp"
#include "fedids/dataset.hpp"
#include "fedids/federation.hpp"
#include "fedids/gbdt.hpp"
#include "fedids/metrics.hpp"
#include "fedids/shap.hpp"

namespace fedids {

/// Invalid configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitRunFailed = 3 };

struct SyntheticSpec {
  std::size_t rows = 10000;
  std::size_t features = 20;
  double separation = 6.0;
  double positive_fraction = 0.3;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
};

struct RunConfig {
  std::optional<std::filesystem::path> input;
  std::optional<SyntheticSpec> synthetic;
  std::string label_column = "label";
  std::string benign_token = "0";
  std::vector<std::string> drop_columns;
  double train_fraction = 0.8;
  FederationConfig federation;
  std::filesystem::path out_dir = "fedids_out";

  std::uint64_t synthetic_seed() const {
    return synthetic && synthetic->seed ? *synthetic->seed : federation.seed;
  }

  void validate() const {
    if (input.has_value() == synthetic.has_value()) {
      throw ConfigError("configure exactly one of data.input and data.synthetic");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
      throw ConfigError("data.train_fraction must lie strictly between 0 and 1");
    }
    if (out_dir.empty()) throw ConfigError("an output directory is required");
    try {
      federation.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read_key(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "'");
  }
}

}  // namespace detail

/// Parses the JSON run configuration. Keys:
///
///   data.input | data.synthetic{rows,features,separation,positive_fraction,seed}
///   data.label_column, data.benign_token, data.drop_columns,
///   data.train_fraction, data.local_train_fraction
///   federation.clients, federation.rounds, federation.seed,
///   federation.workers, federation.failures ([[round, client], ...])
///   train.lambda, train.gamma, train.eta, train.max_depth, train.min_child_cover
///   out
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::reject_unknown(j, {"data", "federation", "train", "out"}, "config");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d,
                           {"input", "synthetic", "label_column", "benign_token", "drop_columns", "train_fraction",
                            "local_train_fraction"},
                           "data");
    if (d.contains("input") && !d.at("input").is_null()) {
      std::string p;
      detail::read_key(d, "input", p, "data");
      cfg.input = p;
    }
    if (d.contains("synthetic") && !d.at("synthetic").is_null()) {
      const auto& s = d.at("synthetic");
      detail::reject_unknown(s, {"rows", "features", "separation", "positive_fraction", "seed"}, "data.synthetic");
      SyntheticSpec spec;
      detail::read_key(s, "rows", spec.rows, "data.synthetic");
      detail::read_key(s, "features", spec.features, "data.synthetic");
      detail::read_key(s, "separation", spec.separation, "data.synthetic");
      detail::read_key(s, "positive_fraction", spec.positive_fraction, "data.synthetic");
      if (s.contains("seed")) {
        std::uint64_t seed = 0;
        detail::read_key(s, "seed", seed, "data.synthetic");
        spec.seed = seed;
      }
      cfg.synthetic = spec;
    }
    detail::read_key(d, "label_column", cfg.label_column, "data");
    detail::read_key(d, "benign_token", cfg.benign_token, "data");
    detail::read_key(d, "drop_columns", cfg.drop_columns, "data");
    detail::read_key(d, "train_fraction", cfg.train_fraction, "data");
    detail::read_key(d, "local_train_fraction", cfg.federation.local_train_fraction, "data");
  }
  if (j.contains("federation")) {
    const auto& f = j.at("federation");
    detail::reject_unknown(f, {"clients", "rounds", "seed", "workers", "failures"}, "federation");
    detail::read_key(f, "clients", cfg.federation.client_count, "federation");
    detail::read_key(f, "rounds", cfg.federation.round_count, "federation");
    detail::read_key(f, "seed", cfg.federation.seed, "federation");
    detail::read_key(f, "workers", cfg.federation.workers, "federation");
    std::vector<std::pair<std::uint32_t, std::uint32_t>> failures;
    detail::read_key(f, "failures", failures, "federation");
    cfg.federation.failures = inject_failure(failures);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(t, {"lambda", "gamma", "eta", "max_depth", "min_child_cover"}, "train");
    auto& tc = cfg.federation.train;
    detail::read_key(t, "lambda", tc.lambda, "train");
    detail::read_key(t, "gamma", tc.gamma, "train");
    detail::read_key(t, "eta", tc.eta, "train");
    detail::read_key(t, "max_depth", tc.max_depth, "train");
    detail::read_key(t, "min_child_cover", tc.min_child_cover, "train");
  }
  if (j.contains("out")) {
    std::string out;
    detail::read_key(j, "out", out, "config");
    cfg.out_dir = out;
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PreparationSummary {
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;
  std::size_t train_positives = 0;
  std::size_t test_positives = 0;
  std::vector<std::size_t> client_rows;
  std::vector<std::size_t> client_positives;
};

struct PreparedOutput {
  PreparedData data;
  NormalizationParams norm;
  EncodingMap encoding;
  PreparationSummary summary;
};

namespace detail {

template <typename F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw DataError(std::string(stage) + ": " + e.what());
  }
}

inline std::uint64_t split_seed(std::uint64_t seed) { return mix_seed(seed ^ 0x5b17ULL); }
inline std::uint64_t partition_seed(std::uint64_t seed) { return mix_seed(seed ^ 0x9a47ULL); }

}  // namespace detail

/// Raw table to a class-encoded, imputed FeatureMatrix (before splitting).
inline std::pair<FeatureMatrix, EncodingMap> clean_table(RawTable table, const std::string& label_column,
                                                         const std::string& benign_token,
                                                         const std::vector<std::string>& drop_columns) {
  if (!table.find(label_column)) throw DataError("label column '" + label_column + "' not found");
  if (std::find(drop_columns.begin(), drop_columns.end(), label_column) != drop_columns.end()) {
    throw DataError("label column '" + label_column + "' cannot be dropped");
  }
  table = detail::run_stage("sanitize", [&] { return sanitize(std::move(table), drop_columns); });
  table = detail::run_stage("label", [&] { return binarize_label(std::move(table), label_column, benign_token); });
  auto [encoded, encoding] = detail::run_stage("encode", [&] { return encode_categoricals(std::move(table)); });
  auto imputed = detail::run_stage("impute", [&] { return impute_mode_by_class(std::move(encoded), label_column); });
  auto matrix = detail::run_stage("matrix", [&] { return to_feature_matrix(imputed, label_column); });
  return {std::move(matrix), std::move(encoding)};
}

/// Split, normalize (fit on train) and partition a clean matrix.
inline PreparedOutput prepare_matrix(const FeatureMatrix& matrix, double train_fraction, std::uint32_t clients,
                                     std::uint64_t seed) {
  PreparedOutput out;
  auto split = detail::run_stage("split", [&] {
    return stratified_split(matrix, train_fraction, detail::split_seed(seed));
  });
  auto normalized = detail::run_stage("normalize", [&] {
    return normalize(std::move(split.train), std::move(split.test));
  });
  out.data.plan = detail::run_stage("partition", [&] {
    return partition_balanced(normalized.train, clients, detail::partition_seed(seed));
  });
  out.data.global_train = std::move(normalized.train);
  out.data.global_test = std::move(normalized.test);
  out.norm = std::move(normalized.params);

  auto& s = out.summary;
  s.train_rows = out.data.global_train.rows();
  s.test_rows = out.data.global_test.rows();
  s.train_positives = out.data.global_train.positives();
  s.test_positives = out.data.global_test.positives();
  for (const auto& shard : out.data.plan.shards) {
    s.client_rows.push_back(shard.size());
    std::size_t pos = 0;
    for (auto i : shard) pos += out.data.global_train.labels[i];
    s.client_positives.push_back(pos);
  }
  return out;
}

inline PreparedOutput prepare_from_table(RawTable table, const RunConfig& cfg) {
  auto [matrix, encoding] = clean_table(std::move(table), cfg.label_column, cfg.benign_token, cfg.drop_columns);
  auto out = prepare_matrix(matrix, cfg.train_fraction, cfg.federation.client_count, cfg.federation.seed);
  out.encoding = std::move(encoding);
  return out;
}

inline void write_partition(std::ostream& out, const PartitionPlan& plan) {
  out << "clients: " << plan.client_count << '\n';
  for (std::size_t c = 0; c < plan.shards.size(); ++c) {
    out << "client_" << c << ':';
    for (auto i : plan.shards[c]) out << ' ' << i;
    out << '\n';
  }
}

inline PartitionPlan read_partition(std::istream& in) {
  PartitionPlan plan;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw DataError("partition file: malformed line");
    const std::string key = line.substr(0, colon);
    std::istringstream values(line.substr(colon + 1));
    if (key == "clients") {
      values >> plan.client_count;
      continue;
    }
    if (key.rfind("client_", 0) != 0) throw DataError("partition file: unexpected key '" + key + "'");
    std::vector<std::size_t> shard;
    std::size_t i = 0;
    while (values >> i) shard.push_back(i);
    plan.shards.push_back(std::move(shard));
  }
  if (plan.shards.size() != plan.client_count) throw DataError("partition file: shard count mismatch");
  return plan;
}

inline std::filesystem::path prepared_dir(const std::filesystem::path& out) { return out / "prepared"; }

inline void write_prepared(const std::filesystem::path& out_dir, const PreparedOutput& p, const RunConfig& cfg) {
  const auto dir = prepared_dir(out_dir);
  std::filesystem::create_directories(dir);
  write_matrix_csv(dir / "train.csv", p.data.global_train);
  write_matrix_csv(dir / "test.csv", p.data.global_test);
  {
    std::ofstream part(dir / "partition.txt", std::ios::binary | std::ios::trunc);
    write_partition(part, p.data.plan);
  }
  {
    std::ofstream meta(dir / "metadata.txt", std::ios::binary | std::ios::trunc);
    std::vector<std::pair<std::string, std::string>> extra = {
        {"source", cfg.input ? cfg.input->generic_string() : std::string("synthetic")},
        {"label_column", cfg.label_column},
        {"benign_token", cfg.benign_token},
        {"seed", std::to_string(cfg.federation.seed)}};
    write_metadata(meta, p.norm, p.encoding, extra);
  }
  nlohmann::ordered_json s;
  s["train_rows"] = p.summary.train_rows;
  s["test_rows"] = p.summary.test_rows;
  s["train_class_counts"] = {p.summary.train_rows - p.summary.train_positives, p.summary.train_positives};
  s["test_class_counts"] = {p.summary.test_rows - p.summary.test_positives, p.summary.test_positives};
  s["client_rows"] = p.summary.client_rows;
  s["client_positives"] = p.summary.client_positives;
  std::ofstream out(dir / "summary.json", std::ios::binary | std::ios::trunc);
  out << s.dump(2) << '\n';
}

inline PreparedData load_prepared(const std::filesystem::path& out_dir) {
  const auto dir = prepared_dir(out_dir);
  if (!std::filesystem::exists(dir / "train.csv")) {
    throw DataError("no prepared data under '" + dir.string() + "' (run `fedids prepare` first)");
  }
  PreparedData d;
  d.global_train = read_matrix_csv(dir / "train.csv");
  d.global_test = read_matrix_csv(dir / "test.csv");
  std::ifstream part(dir / "partition.txt");
  if (!part) throw DataError("missing partition.txt under '" + dir.string() + "'");
  d.plan = read_partition(part);
  for (const auto& shard : d.plan.shards) {
    for (auto i : shard) {
      if (i >= d.global_train.rows()) throw DataError("partition index out of range");
    }
  }
  return d;
}

inline PreparationSummary cmd_prepare(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  PreparedOutput p;
  if (cfg.input) {
    RawTable table = detail::run_stage("load", [&] { return load_csv(*cfg.input); });
    p = prepare_from_table(std::move(table), cfg);
  } else {
    const auto& s = *cfg.synthetic;
    FeatureMatrix m = detail::run_stage("synthesize", [&] {
      return synth_generate(s.rows, s.features, s.separation, s.positive_fraction, cfg.synthetic_seed());
    });
    p = prepare_matrix(m, cfg.train_fraction, cfg.federation.client_count, cfg.federation.seed);
  }
  write_prepared(cfg.out_dir, p, cfg);
  log << "prepared " << p.summary.train_rows << " train rows (" << p.summary.train_positives << " positive), "
      << p.summary.test_rows << " test rows (" << p.summary.test_positives << " positive), "
      << p.summary.client_rows.size() << " client shards\n";
  return p.summary;
}

// ---------------------------------------------------------------------------
// run / report / explain / synth
// ---------------------------------------------------------------------------

inline int cmd_run(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  PreparedData data = load_prepared(cfg.out_dir);
  FederationConfig fc = cfg.federation;
  fc.out_dir = cfg.out_dir;
  FederationReport report = run_federation(fc, data);
  for (const auto& e : report.rounds) {
    log << "round " << e.round << ": " << to_string(e.outcome);
    if (e.global_metrics) {
      log << " best_client=" << *e.best_client_id << " accuracy=" << e.global_metrics->accuracy
          << " f1=" << e.global_metrics->f1 << " log_loss=" << e.global_metrics->log_loss;
    } else {
      log << " (" << e.reason << ")";
    }
    log << '\n';
  }
  return report.completed_rounds() > 0 ? kExitOk : kExitRunFailed;
}

inline constexpr const char* kReportColumns[] = {
    "round", "outcome", "best_client_id", "accuracy", "precision", "recall",          "f1",
    "log_loss", "roc_auc", "tp", "fn",    "fp",        "tn",        "round_wall_time_ms", "mean_client_train_ms"};

namespace detail {

inline std::string cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) return format_real(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace detail

/// Builds the per-round metrics table from the global log alone.
inline std::vector<std::vector<std::string>> report_rows(const std::vector<nlohmann::json>& log) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : log) {
    std::vector<std::string> r;
    r.push_back(detail::cell(e.at("round")));
    r.push_back(detail::cell(e.at("outcome")));
    r.push_back(detail::cell(e.at("best_client_id")));
    for (const char* k : {"accuracy", "precision", "recall", "f1", "log_loss", "roc_auc", "tp", "fn", "fp", "tn"}) {
      r.push_back(detail::cell(e.value(k, nlohmann::json())));
    }
    r.push_back(detail::cell(e.at("wall_time_ms")));
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& c : e.at("client_statuses")) {
      if (c.at("status") == "ok") {
        total += c.at("wall_time_ms").get<double>();
        ++n;
      }
    }
    r.push_back(n ? detail::format_real(total / static_cast<double>(n)) : "");
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void cmd_report(const std::filesystem::path& run_dir, std::ostream& out = std::cout) {
  const auto log_path = run_dir / kGlobalLogName;
  if (!std::filesystem::exists(log_path)) throw DataError("no global log in '" + run_dir.string() + "'");
  const auto log = read_round_log(log_path);
  if (log.empty()) throw DataError("global log in '" + run_dir.string() + "' is empty");
  const auto rows = report_rows(log);

  std::ofstream csv(run_dir / "report.csv", std::ios::binary | std::ios::trunc);
  if (!csv) throw DataError("cannot write report.csv");
  for (std::size_t i = 0; i < std::size(kReportColumns); ++i) csv << (i ? "," : "") << kReportColumns[i];
  csv << '\n';
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) csv << (i ? "," : "") << r[i];
    csv << '\n';
  }

  out << std::left << std::setw(6) << "round" << std::setw(10) << "outcome" << std::setw(6) << "best"
      << std::setw(10) << "accuracy" << std::setw(10) << "f1" << std::setw(10) << "log_loss" << std::setw(10)
      << "roc_auc" << "client_ms\n";
  for (const auto& e : log) {
    out << std::setw(6) << e.at("round").get<int>() << std::setw(10) << e.at("outcome").get<std::string>();
    if (e.at("outcome") == "completed") {
      out << std::setw(6) << e.at("best_client_id").get<int>() << std::fixed << std::setprecision(4)
          << std::setw(10) << e.at("accuracy").get<double>() << std::setw(10) << e.at("f1").get<double>()
          << std::setw(10) << e.at("log_loss").get<double>() << std::setw(10) << e.at("roc_auc").get<double>();
    } else {
      out << std::setw(6) << "-" << std::setw(10) << "-" << std::setw(10) << "-" << std::setw(10) << "-"
          << std::setw(10) << "-";
    }
    const std::string mean_ms = report_rows({e}).front().back();
    if (mean_ms.empty()) {
      out << "-";
    } else {
      out << std::fixed << std::setprecision(2) << std::stod(mean_ms);
    }
    out << '\n';
    out.unsetf(std::ios::fixed);
  }
}

inline std::size_t cmd_explain(const std::filesystem::path& model_path, const std::filesystem::path& data_path,
                               const std::filesystem::path& output, std::uint32_t round, ClientId client = kGlobal) {
  const Ensemble model = deserialize(read_bytes(model_path));
  const FeatureMatrix data = read_matrix_csv(data_path);
  if (data.cols() != model.n_features) {
    throw DataError("model expects " + std::to_string(model.n_features) + " features, data has " +
                    std::to_string(data.cols()));
  }
  const auto records = explain_batch(model, data, client, round);
  if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
  write_shap_archive(output, records, data.feature_names);
  return records.size();
}

inline void cmd_synth(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& output) {
  const FeatureMatrix m = synth_generate(spec.rows, spec.features, spec.separation, spec.positive_fraction, seed);
  if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
  write_matrix_csv(output, m);
}

}  // namespace fedids
