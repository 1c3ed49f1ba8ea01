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

// Round-based simulation of one server and N clients.
//
// Each round the server broadcasts its staged model bytes (or nothing in the
// first round). Every client continues boosting by exactly one tree on its
// local split, evaluates on its local test split and archives SHAP values for
// that split. The server ranks the successful updates, stages the winner for
// the next broadcast, evaluates it on the held-out global test split and
// archives global SHAP values. Rounds without a successful update are logged
// as skipped and leave the staged model untouched.
//
// Only model bytes, metrics and archive paths cross the client/server
// boundary; ClientUpdate has no field that can carry rows.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedids/common.hpp"
#include "fedids/dataset.hpp"
#include "fedids/gbdt.hpp"
#include "fedids/metrics.hpp"
#include "fedids/shap.hpp"

namespace fedids {

using Bytes = std::vector<std::uint8_t>;

/// Clients forced to fail in given rounds.
class FailureSchedule {
 public:
  FailureSchedule() = default;

  void add(std::uint32_t round, std::uint32_t client_id) { entries_.emplace(round, client_id); }

  bool should_fail(std::uint32_t round, std::uint32_t client_id) const {
    return entries_.count({round, client_id}) != 0;
  }

  bool empty() const { return entries_.empty(); }
  const std::set<std::pair<std::uint32_t, std::uint32_t>>& entries() const { return entries_; }

 private:
  std::set<std::pair<std::uint32_t, std::uint32_t>> entries_;
};

inline FailureSchedule inject_failure(std::span<const std::pair<std::uint32_t, std::uint32_t>> schedule) {
  FailureSchedule s;
  for (auto [round, client] : schedule) s.add(round, client);
  return s;
}

struct FederationConfig {
  std::uint32_t client_count = 10;
  std::uint32_t round_count = 10;
  std::uint64_t seed = 7;
  TrainConfig train;
  double local_train_fraction = 0.8;
  std::uint32_t workers = 1;  // clients trained concurrently per round
  FailureSchedule failures;
  std::filesystem::path out_dir;  // empty: keep everything in memory

  void validate() const {
    if (client_count < 1) throw ArgumentError("client_count must be >= 1");
    if (round_count < 1) throw ArgumentError("round_count must be >= 1");
    if (workers < 1) throw ArgumentError("workers must be >= 1");
    if (!(local_train_fraction > 0.0 && local_train_fraction < 1.0)) {
      throw ArgumentError("local_train_fraction must lie strictly between 0 and 1");
    }
    train.validate();
  }
};

/// Optional callbacks, mainly for tests and tooling.
struct FederationObserver {
  std::function<void(std::span<const ShapRecord>)> on_explained;
};

struct ClientState {
  std::uint32_t client_id = 0;
  FeatureMatrix local_train;
  FeatureMatrix local_test;
  double pos_weight = 1.0;
};

inline std::uint64_t client_seed(std::uint64_t seed, std::uint32_t client_id) {
  return mix_seed(seed ^ (0xc1e47ULL + client_id));
}

inline ClientState make_client_state(std::uint32_t client_id, const FeatureMatrix& shard, double train_fraction,
                                     std::uint64_t seed) {
  auto split = local_split(shard, train_fraction, client_seed(seed, client_id));
  ClientState s;
  s.client_id = client_id;
  s.pos_weight = compute_pos_weight(split.train.labels);
  s.local_train = std::move(split.train);
  s.local_test = std::move(split.test);
  return s;
}

enum class UpdateStatus { ok, failed };

struct ClientUpdate {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  UpdateStatus status = UpdateStatus::failed;
  Bytes model_bytes;                            // iff ok
  std::optional<MetricsReport> metrics;         // iff ok
  std::filesystem::path shap_archive_path;      // iff ok and archiving to disk
  std::string failure_reason;                   // iff failed
  double wall_time_ms = 0.0;

  bool ok() const { return status == UpdateStatus::ok; }
};

enum class RoundOutcome { completed, skipped };

struct ClientStatusEntry {
  std::uint32_t client_id = 0;
  UpdateStatus status = UpdateStatus::failed;
  std::string reason;
  std::optional<MetricsReport> metrics;
  double wall_time_ms = 0.0;
};

struct RoundLogEntry {
  std::uint32_t round = 0;
  RoundOutcome outcome = RoundOutcome::skipped;
  std::optional<std::uint32_t> best_client_id;
  std::vector<ClientStatusEntry> client_statuses;
  std::optional<MetricsReport> global_metrics;
  std::string reason;  // why a round was skipped
  double wall_time_ms = 0.0;
};

namespace detail {

inline std::string archive_name(std::uint32_t round, ClientId client) {
  return "round_" + std::to_string(round) + (client ? "_client_" + std::to_string(*client) : "_global") + ".shap";
}

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

}  // namespace detail

inline Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// One client's round: continue (or start) boosting, evaluate, explain.
/// Never throws; every failure becomes status=failed with a reason.
inline ClientUpdate client_round(const ClientState& state, std::optional<std::span<const std::uint8_t>> incoming,
                                 std::uint32_t round, const FederationConfig& config,
                                 const FederationObserver* observer = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  ClientUpdate u;
  u.client_id = state.client_id;
  u.round = round;
  try {
    if (config.failures.should_fail(round, state.client_id)) {
      throw Error("injected failure");
    }
    std::optional<Ensemble> model;
    if (incoming) model = deserialize(*incoming);
    Ensemble next = boost_round(model, state.local_train, config.train, state.pos_weight);
    MetricsReport metrics = evaluate(next, state.local_test);
    auto records = explain_batch(next, state.local_test, state.client_id, round);
    if (!config.out_dir.empty()) {
      const auto dir = config.out_dir / "shap";
      std::filesystem::create_directories(dir);
      u.shap_archive_path = dir / detail::archive_name(round, state.client_id);
      write_shap_archive(u.shap_archive_path, records, state.local_test.feature_names);
    }
    if (observer && observer->on_explained) observer->on_explained(records);
    u.model_bytes = serialize(next);
    u.metrics = metrics;
    u.status = UpdateStatus::ok;
  } catch (const std::exception& e) {
    u = ClientUpdate{};
    u.client_id = state.client_id;
    u.round = round;
    u.status = UpdateStatus::failed;
    u.failure_reason = e.what();
  }
  u.wall_time_ms = detail::elapsed_ms(start);
  return u;
}

/// True if `a` ranks strictly above `b`: F1 desc, accuracy desc, log-loss
/// asc, client id asc.
inline bool ranks_above(const ClientUpdate& a, const ClientUpdate& b) {
  const auto& ma = *a.metrics;
  const auto& mb = *b.metrics;
  if (ma.f1 != mb.f1) return ma.f1 > mb.f1;
  if (ma.accuracy != mb.accuracy) return ma.accuracy > mb.accuracy;
  if (ma.log_loss != mb.log_loss) return ma.log_loss < mb.log_loss;
  return a.client_id < b.client_id;
}

inline const ClientUpdate& select_best(std::span<const ClientUpdate> updates) {
  const ClientUpdate* best = nullptr;
  for (const auto& u : updates) {
    if (!u.ok()) continue;
    if (!best || ranks_above(u, *best)) best = &u;
  }
  if (!best) throw ArgumentError("select_best: no successful updates");
  return *best;
}

/// Server-side state carried across rounds.
struct ServerState {
  std::optional<Bytes> staged_model;
  std::optional<std::uint32_t> staged_client;
  std::uint32_t staged_round = 0;
  std::vector<std::filesystem::path> archives;
};

/// Scores the round's updates and stages the winner. Never throws.
inline RoundLogEntry server_round(ServerState& server, std::vector<ClientUpdate> updates,
                                  const FeatureMatrix& global_test, std::uint32_t round,
                                  const FederationConfig& config, const FederationObserver* observer = nullptr) {
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  RoundLogEntry entry;
  entry.round = round;
  for (const auto& u : updates) {
    entry.client_statuses.push_back({u.client_id, u.status, u.failure_reason, u.metrics, u.wall_time_ms});
    if (u.ok()) server.archives.push_back(u.shap_archive_path);
  }
  const bool any_ok = std::any_of(updates.begin(), updates.end(), [](const ClientUpdate& u) { return u.ok(); });
  if (!any_ok) {
    entry.outcome = RoundOutcome::skipped;
    entry.reason = "no valid client output";
    return entry;
  }
  try {
    const ClientUpdate& best = select_best(updates);
    const Ensemble model = deserialize(best.model_bytes);
    MetricsReport global = evaluate(model, global_test);
    auto records = explain_batch(model, global_test, kGlobal, round);
    if (!config.out_dir.empty()) {
      const auto shap_dir = config.out_dir / "shap";
      const auto model_dir = config.out_dir / "models";
      std::filesystem::create_directories(shap_dir);
      std::filesystem::create_directories(model_dir);
      const auto archive = shap_dir / detail::archive_name(round, kGlobal);
      write_shap_archive(archive, records, global_test.feature_names);
      server.archives.push_back(archive);
      detail::write_bytes(model_dir / ("round_" + std::to_string(round) + "_best_client_" +
                                       std::to_string(best.client_id) + ".model"),
                          best.model_bytes);
    }
    if (observer && observer->on_explained) observer->on_explained(records);
    server.staged_model = best.model_bytes;
    server.staged_client = best.client_id;
    server.staged_round = round;
    entry.outcome = RoundOutcome::completed;
    entry.best_client_id = best.client_id;
    entry.global_metrics = global;
  } catch (const std::exception& e) {
    entry.outcome = RoundOutcome::skipped;
    entry.best_client_id.reset();
    entry.global_metrics.reset();
    entry.reason = std::string("server error: ") + e.what();
  }
  return entry;
}

// ---------------------------------------------------------------------------
// Log records
// ---------------------------------------------------------------------------

inline const char* to_string(UpdateStatus s) { return s == UpdateStatus::ok ? "ok" : "failed"; }
inline const char* to_string(RoundOutcome o) { return o == RoundOutcome::completed ? "completed" : "skipped"; }

inline constexpr const char* kMetricFields[] = {"accuracy", "precision", "recall", "f1", "log_loss", "roc_auc",
                                                "tp",       "fn",        "fp",     "tn", "sample_count"};

inline void put_metrics(nlohmann::ordered_json& j, const std::optional<MetricsReport>& m) {
  if (!m) {
    for (const char* k : kMetricFields) {
      if (std::string_view(k) != "sample_count") j[k] = nullptr;
    }
    return;
  }
  j["accuracy"] = m->accuracy;
  j["precision"] = m->precision;
  j["recall"] = m->recall;
  j["f1"] = m->f1;
  j["log_loss"] = m->log_loss;
  j["roc_auc"] = m->roc_auc;
  j["tp"] = m->confusion.tp;
  j["fn"] = m->confusion.fn;
  j["fp"] = m->confusion.fp;
  j["tn"] = m->confusion.tn;
}

inline nlohmann::ordered_json to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  put_metrics(j, m);
  j["sample_count"] = m.sample_count;
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.log_loss = j.at("log_loss").get<double>();
  m.roc_auc = j.at("roc_auc").get<double>();
  m.confusion.tp = j.at("tp").get<std::size_t>();
  m.confusion.fn = j.at("fn").get<std::size_t>();
  m.confusion.fp = j.at("fp").get<std::size_t>();
  m.confusion.tn = j.at("tn").get<std::size_t>();
  m.sample_count = j.value("sample_count", m.confusion.total());
  return m;
}

/// One global-log line.
inline nlohmann::ordered_json to_json(const RoundLogEntry& e) {
  nlohmann::ordered_json j;
  j["round"] = e.round;
  j["outcome"] = to_string(e.outcome);
  if (e.best_client_id) {
    j["best_client_id"] = *e.best_client_id;
  } else {
    j["best_client_id"] = nullptr;
  }
  auto statuses = nlohmann::ordered_json::array();
  for (const auto& c : e.client_statuses) {
    nlohmann::ordered_json s;
    s["client_id"] = c.client_id;
    s["status"] = to_string(c.status);
    if (c.status == UpdateStatus::failed) s["reason"] = c.reason;
    if (c.metrics) {
      auto m = to_json(*c.metrics);
      for (auto& [k, v] : m.items()) s[k] = v;
    }
    s["wall_time_ms"] = c.wall_time_ms;
    statuses.push_back(std::move(s));
  }
  j["client_statuses"] = std::move(statuses);
  put_metrics(j, e.global_metrics);
  if (e.outcome == RoundOutcome::skipped) j["reason"] = e.reason;
  j["wall_time_ms"] = e.wall_time_ms;
  return j;
}

inline std::vector<nlohmann::json> read_round_log(std::istream& in) {
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("log line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<nlohmann::json> read_round_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  return read_round_log(in);
}

// ---------------------------------------------------------------------------
// Whole runs
// ---------------------------------------------------------------------------

struct PreparedData {
  FeatureMatrix global_train;
  FeatureMatrix global_test;
  PartitionPlan plan;
};

struct FederationReport {
  std::vector<RoundLogEntry> rounds;
  std::optional<Bytes> final_model;
  std::optional<std::uint32_t> final_model_client;
  std::uint32_t final_model_round = 0;
  std::vector<std::filesystem::path> shap_archives;

  std::size_t completed_rounds() const {
    return static_cast<std::size_t>(std::count_if(rounds.begin(), rounds.end(), [](const RoundLogEntry& e) {
      return e.outcome == RoundOutcome::completed;
    }));
  }
};

inline constexpr const char* kGlobalLogName = "global_log.jsonl";
inline constexpr const char* kFinalModelName = "final_model.model";
inline constexpr const char* kFinalReportName = "final_report.json";

namespace detail {

inline void write_run_outputs(const FederationConfig& config, const FederationReport& report,
                              const std::vector<std::vector<nlohmann::ordered_json>>& client_logs) {
  const auto& dir = config.out_dir;
  std::filesystem::create_directories(dir);
  {
    std::ofstream log(dir / kGlobalLogName, std::ios::binary | std::ios::trunc);
    if (!log) throw DataError("cannot write '" + (dir / kGlobalLogName).string() + "'");
    for (const auto& e : report.rounds) log << to_json(e).dump() << '\n';
  }
  std::filesystem::create_directories(dir / "clients");
  for (std::size_t c = 0; c < client_logs.size(); ++c) {
    std::ofstream log(dir / "clients" / ("client_" + std::to_string(c) + ".jsonl"),
                      std::ios::binary | std::ios::trunc);
    for (const auto& line : client_logs[c]) log << line.dump() << '\n';
  }
  if (report.final_model) write_bytes(dir / kFinalModelName, *report.final_model);

  nlohmann::ordered_json summary;
  summary["client_count"] = config.client_count;
  summary["round_count"] = config.round_count;
  summary["seed"] = config.seed;
  summary["completed_rounds"] = report.completed_rounds();
  auto table = nlohmann::ordered_json::array();
  for (const auto& e : report.rounds) {
    nlohmann::ordered_json row;
    row["round"] = e.round;
    row["outcome"] = to_string(e.outcome);
    row["best_client_id"] = e.best_client_id ? nlohmann::ordered_json(*e.best_client_id) : nullptr;
    put_metrics(row, e.global_metrics);
    table.push_back(std::move(row));
  }
  summary["rounds"] = std::move(table);
  if (report.final_model) {
    summary["final_model"] = kFinalModelName;
    summary["final_model_round"] = report.final_model_round;
    summary["final_model_client"] = *report.final_model_client;
  } else {
    summary["final_model"] = nullptr;
  }
  auto archives = nlohmann::ordered_json::array();
  for (const auto& p : report.shap_archives) archives.push_back(p.lexically_relative(dir).generic_string());
  summary["shap_archives"] = std::move(archives);
  std::ofstream out(dir / kFinalReportName, std::ios::binary | std::ios::trunc);
  out << summary.dump(2) << '\n';
}

}  // namespace detail

/// Runs `config.round_count` rounds. Deterministic given the config and
/// data; client completion order never affects the outcome.
inline FederationReport run_federation(const FederationConfig& config, const PreparedData& data,
                                       const FederationObserver* observer = nullptr) {
  config.validate();
  if (data.global_train.empty() || data.global_test.empty()) throw DataError("prepared data is missing");
  if (data.plan.shards.size() != config.client_count || data.plan.client_count != config.client_count) {
    throw DataError("partition has " + std::to_string(data.plan.shards.size()) + " shards, config expects " +
                    std::to_string(config.client_count) + " clients");
  }
  if (data.global_train.feature_names != data.global_test.feature_names) {
    throw DataError("global train and test features differ");
  }

  // A client whose shard cannot be split keeps failing with the same reason.
  std::vector<std::optional<ClientState>> clients(config.client_count);
  std::vector<std::string> setup_errors(config.client_count);
  for (std::uint32_t c = 0; c < config.client_count; ++c) {
    try {
      clients[c] = make_client_state(c, data.global_train.subset(data.plan.shards[c]), config.local_train_fraction,
                                     config.seed);
    } catch (const std::exception& e) {
      setup_errors[c] = std::string("client setup failed: ") + e.what();
    }
  }

  ServerState server;
  FederationReport report;
  std::vector<std::vector<nlohmann::ordered_json>> client_logs(config.client_count);

  for (std::uint32_t round = 1; round <= config.round_count; ++round) {
    const auto round_start = std::chrono::steady_clock::now();
    std::optional<std::span<const std::uint8_t>> incoming;
    if (server.staged_model) incoming = std::span<const std::uint8_t>(*server.staged_model);

    std::vector<ClientUpdate> updates(config.client_count);
    auto run_client = [&](std::uint32_t c) {
      if (!clients[c]) {
        updates[c].client_id = c;
        updates[c].round = round;
        updates[c].failure_reason = setup_errors[c];
        return;
      }
      updates[c] = client_round(*clients[c], incoming, round, config, observer);
    };
    const std::uint32_t workers = std::min(config.workers, config.client_count);
    if (workers <= 1 || (observer && observer->on_explained)) {
      for (std::uint32_t c = 0; c < config.client_count; ++c) run_client(c);
    } else {
      std::atomic<std::uint32_t> next{0};
      std::vector<std::jthread> pool;
      for (std::uint32_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          for (std::uint32_t c = next++; c < config.client_count; c = next++) run_client(c);
        });
      }
    }

    for (const auto& u : updates) {
      nlohmann::ordered_json line;
      line["round"] = round;
      line["status"] = to_string(u.status);
      if (u.ok()) {
        line["f1"] = u.metrics->f1;
        line["accuracy"] = u.metrics->accuracy;
        line["log_loss"] = u.metrics->log_loss;
        line["shap_archive"] = u.shap_archive_path.filename().generic_string();
      } else {
        line["reason"] = u.failure_reason;
      }
      line["wall_time_ms"] = u.wall_time_ms;
      client_logs[u.client_id].push_back(std::move(line));
    }

    RoundLogEntry entry = server_round(server, std::move(updates), data.global_test, round, config, observer);
    entry.wall_time_ms = detail::elapsed_ms(round_start);
    report.rounds.push_back(std::move(entry));
  }

  report.final_model = server.staged_model;
  report.final_model_client = server.staged_client;
  report.final_model_round = server.staged_round;
  report.shap_archives = server.archives;
  if (!config.out_dir.empty()) detail::write_run_outputs(config, report, client_logs);
  return report;
}

}  // namespace fedids
