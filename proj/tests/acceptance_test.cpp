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

// Acceptance checks. One line per criterion:
//   [PASS] <id> <name>: <measurement> (<seconds>s, limit <seconds>s)
// Exit status is nonzero if any criterion fails.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "fedids/commands.hpp"
#include "test_support.hpp"

namespace fedids {
namespace {

using testing::TempDir;

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0 means untimed
  std::function<Verdict()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Criterion 4's setup: 10 clients, 10 rounds, default TrainConfig, prepared
// exactly as `fedids prepare` would from the synthetic spec.
constexpr std::uint64_t kSeed = 7;

const PreparedData& reference_data() {
  static const PreparedData data = [] {
    const auto m = synth_generate(10000, 20, 6.0, 0.3, kSeed);
    return prepare_matrix(m, 0.8, 10, kSeed).data;
  }();
  return data;
}

FederationConfig reference_config(const std::filesystem::path& out) {
  FederationConfig c;
  c.client_count = 10;
  c.round_count = 10;
  c.seed = kSeed;
  c.workers = std::max(1u, std::min(10u, std::thread::hardware_concurrency()));
  c.out_dir = out;
  return c;
}

// Shared run of criterion 4, reused by 5, 6 and 11.
struct ReferenceRun {
  TempDir dir{"fedids_accept"};
  FederationReport report;
  double seconds = 0;
};

ReferenceRun& reference_run() {
  static ReferenceRun run;
  static bool done = false;
  if (!done) {
    done = true;
    const auto start = std::chrono::steady_clock::now();
    run.report = run_federation(reference_config(run.dir.path()), reference_data());
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return run;
}

nlohmann::json strip_times(nlohmann::json j) {
  if (j.is_object()) {
    j.erase("wall_time_ms");
    for (auto& [k, v] : j.items()) v = strip_times(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_times(v);
  }
  return j;
}

std::string timeless_jsonl(const std::filesystem::path& p) {
  std::string out;
  for (const auto& j : read_round_log(p)) out += strip_times(j).dump() + "\n";
  return out;
}

// --- criteria --------------------------------------------------------------

Verdict additivity() {
  FederationConfig cfg = reference_config({});
  double worst = 0;
  std::size_t rows = 0;
  FederationObserver obs{[&](std::span<const ShapRecord> recs) {
    for (const auto& r : recs) worst = std::max(worst, std::abs(r.shap.additivity_error()));
    rows += recs.size();
  }};
  run_federation(cfg, reference_data(), &obs);
  return {rows > 0 && worst <= 1e-9,
          std::to_string(rows) + " rows explained, max |phi0 + sum(phi) - margin| = " + fmt("%.3g", worst) +
              " (tol 1e-9)"};
}

Verdict oracle_equivalence() {
  Rng rng(20260101);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto d = 1 + static_cast<std::uint32_t>(rng.below(12));
    const auto depth = 1 + static_cast<std::uint32_t>(rng.below(4));
    const auto trees = 1 + static_cast<std::uint32_t>(rng.below(10));
    const auto m = testing::random_ensemble(rng, d, depth, trees);
    for (int r = 0; r < 10; ++r) {
      const auto row = testing::random_row(rng, d);
      const auto a = shap_exact(m, row);
      const auto b = shap_brute(m, row);
      worst = std::max(worst, std::abs(a.base_value - b.base_value));
      for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(a.contributions[j] - b.contributions[j]));
    }
  }
  return {worst <= 1e-9, "2000 rows over 200 ensembles, max component diff = " + fmt("%.3g", worst) + " (tol 1e-9)"};
}

Verdict continuation() {
  const auto& ref = reference_data();
  PreparedData one;
  one.global_train = ref.global_train;
  one.global_test = ref.global_test;
  one.plan = partition_balanced(one.global_train, 1, 3);
  FederationConfig cfg;
  cfg.client_count = 1;
  cfg.round_count = 8;
  cfg.seed = kSeed;
  const auto report = run_federation(cfg, one);

  const auto state = make_client_state(0, one.global_train.subset(one.plan.shards[0]), cfg.local_train_fraction,
                                       cfg.seed);
  std::optional<Ensemble> central;
  for (int r = 0; r < 8; ++r) central = boost_round(central, state.local_train, cfg.train, state.pos_weight);
  const auto want = serialize(*central);
  const bool same = report.final_model && *report.final_model == want;
  return {same, std::string(same ? "identical" : "different") + " serialized bytes (" + std::to_string(want.size()) +
                    " bytes, 8 trees)"};
}

Verdict accuracy_analog() {
  const auto& run = reference_run();
  const auto& last = run.report.rounds.back();
  if (!last.global_metrics) return {false, "final round skipped"};
  const auto& m = *last.global_metrics;
  return {m.accuracy >= 0.99 && m.f1 >= 0.99,
          "final global accuracy = " + fmt("%.4f", m.accuracy) + ", F1 = " + fmt("%.4f", m.f1) + " (need >= 0.99)"};
}

double mean_confident_positive(const std::filesystem::path& archive, std::span<const std::string> names) {
  std::ifstream in(archive);
  double total = 0;
  std::size_t n = 0;
  for (const auto& r : read_shap_archive(in, names)) {
    if (r.true_label == 1 && r.pred_label == 1) {
      total += r.pred_probability;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

Verdict confidence_growth() {
  const auto& run = reference_run();
  const auto& names = reference_data().global_test.feature_names;
  const auto last_round = run.report.rounds.back().round;
  const double first = mean_confident_positive(run.dir / "shap/round_1_global.shap", names);
  const double last = mean_confident_positive(
      run.dir / ("shap/round_" + std::to_string(last_round) + "_global.shap"), names);
  const auto& r1 = run.report.rounds.front().global_metrics;
  const auto& rn = run.report.rounds.back().global_metrics;
  if (!r1 || !rn) return {false, "first or final round skipped"};
  return {last - first >= 0.15 && rn->log_loss < r1->log_loss,
          "mean p(correct positives) " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " (gain " +
              fmt("%.4f", last - first) + ", need >= 0.15); log-loss " + fmt("%.4f", r1->log_loss) + " -> " +
              fmt("%.4f", rn->log_loss)};
}

Verdict best_selection() {
  const auto& run = reference_run();
  const auto log = read_round_log(run.dir / kGlobalLogName);
  std::size_t checked = 0;
  for (const auto& e : log) {
    if (e.at("outcome") != "completed") continue;
    const auto best_id = e.at("best_client_id").get<std::uint32_t>();
    std::optional<std::tuple<double, double, double>> best_key, max_key;
    for (const auto& c : e.at("client_statuses")) {
      if (c.at("status") != "ok") continue;
      const std::tuple<double, double, double> key{c.at("f1").get<double>(), c.at("accuracy").get<double>(),
                                                   -c.at("log_loss").get<double>()};
      if (!max_key || key > *max_key) max_key = key;
      if (c.at("client_id").get<std::uint32_t>() == best_id) best_key = key;
    }
    if (!best_key || *best_key != *max_key) {
      return {false, "round " + e.at("round").dump() + ": broadcast key is not the maximum"};
    }
    ++checked;
  }
  return {checked == log.size() && checked > 0,
          std::to_string(checked) + " completed rounds replayed; broadcast key = max key in each"};
}

Verdict skip_round() {
  TempDir dir("fedids_skip");
  auto cfg = reference_config(dir.path());
  cfg.round_count = 5;
  for (std::uint32_t c = 0; c < 10; ++c) cfg.failures.add(3, c);
  const auto report = run_federation(cfg, reference_data());
  const auto log = read_round_log(dir / kGlobalLogName);
  if (log.size() != 5) return {false, std::to_string(log.size()) + " log entries (want 5)"};
  if (log[2].at("outcome") != "skipped") return {false, "round 3 not skipped"};
  for (std::size_t i : {0, 1, 3, 4}) {
    if (log[i].at("outcome") != "completed") return {false, "round " + std::to_string(i + 1) + " not completed"};
  }
  auto model_of = [&](const nlohmann::json& e) {
    return deserialize(read_bytes(dir / ("models/round_" + e.at("round").dump() + "_best_client_" +
                                         e.at("best_client_id").dump() + ".model")));
  };
  const auto r2 = model_of(log[1]);
  const auto r4 = model_of(log[3]);
  // Round 4's clients must have continued from round 2's staged model.
  const bool lineage = r4.trees.size() == r2.trees.size() + 1 &&
                       std::equal(r2.trees.begin(), r2.trees.end(), r4.trees.begin());
  return {lineage, std::string("5 entries, round 3 skipped; round-4 model ") +
                       (lineage ? "extends" : "does not extend") + " the round-2 model by one tree"};
}

Verdict metric_oracles() {
  Rng rng(808);
  double worst = 0;
  bool auc_exact = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(200);
    std::vector<std::uint8_t> y(n);
    std::vector<double> p(n);
    y[0] = 0;
    y[1] = 1;
    for (std::size_t i = 2; i < n; ++i) y[i] = static_cast<std::uint8_t>(rng.below(2));
    for (auto& v : p) v = rng.below(4) == 0 ? static_cast<double>(rng.below(9)) / 8.0 : rng.uniform();
    const auto r = make_report(y, p);
    const auto ref = testing::naive_metrics(y, p);
    for (auto [a, b] : {std::pair{r.accuracy, ref.accuracy}, {r.precision, ref.precision}, {r.recall, ref.recall},
                        {r.f1, ref.f1}, {r.log_loss, ref.log_loss}}) {
      worst = std::max(worst, std::abs(a - b));
    }
    auc_exact = auc_exact && r.roc_auc == testing::pairwise_auc(y, p);
  }
  const std::vector<std::uint8_t> one{1};
  const std::vector<double> half{0.5};
  const double ln2_err = std::abs(log_loss(one, half) - std::log(2.0));
  return {worst <= 1e-12 && ln2_err <= 1e-12 && auc_exact,
          "max metric diff = " + fmt("%.3g", worst) + " (tol 1e-12); |log_loss({1},{0.5}) - ln 2| = " +
              fmt("%.3g", ln2_err) + "; AUC " + (auc_exact ? "exact" : "NOT exact")};
}

Verdict serialization() {
  Rng rng(99);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = 1 + static_cast<std::uint32_t>(rng.below(30));
    const auto m = testing::random_ensemble(rng, d, 1 + static_cast<std::uint32_t>(rng.below(6)),
                                            static_cast<std::uint32_t>(rng.below(20)));
    const auto back = deserialize(serialize(m));
    for (int i = 0; i < 1000; ++i) {
      const auto row = testing::random_row(rng, d);
      if (std::bit_cast<std::uint64_t>(predict_margin(m, row)) !=
          std::bit_cast<std::uint64_t>(predict_margin(back, row))) {
        ++mismatches;
      }
    }
  }
  auto bytes = serialize(testing::random_ensemble(rng, 4, 3, 3));
  std::size_t rejected = 0, tried = 0;
  auto expect_reject = [&](Bytes b) {
    ++tried;
    try {
      deserialize(b);
    } catch (const FormatError&) {
      ++rejected;
    }
  };
  for (std::size_t i = 0; i < 6; ++i) {  // magic and version bytes
    auto b = bytes;
    b[i] ^= 0x5a;
    expect_reject(b);
  }
  expect_reject(Bytes(bytes.begin(), bytes.begin() + 20));
  expect_reject(Bytes(bytes.begin(), bytes.end() - 1));
  return {mismatches == 0 && rejected == tried,
          "100000 margins, " + std::to_string(mismatches) + " mismatches; " + std::to_string(rejected) + "/" +
              std::to_string(tried) + " corrupted payloads rejected"};
}

RawTable random_table(Rng& rng) {
  const std::size_t rows = 200 + rng.below(300);
  const std::size_t numeric = 1 + rng.below(5);
  const std::size_t categorical = 1 + rng.below(3);
  RawTable t;
  t.row_count = rows;
  std::vector<bool> attack(rows);
  for (std::size_t i = 0; i < rows; ++i) attack[i] = rng.uniform() < 0.35;
  for (std::size_t c = 0; c < numeric; ++c) {
    std::vector<double> v(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      const double u = rng.uniform();
      if (u < 0.05) v[i] = std::numeric_limits<double>::infinity();
      else if (u < 0.08) v[i] = -std::numeric_limits<double>::infinity();
      else if (u < 0.15) v[i] = kMissing;
      else v[i] = rng.normal() * 10 + (attack[i] ? 5 : 0);
    }
    v[rng.below(rows)] = 1.0;  // at least one observed value
    t.column_names.push_back("n" + std::to_string(c));
    t.columns.push_back(Column::numeric(std::move(v)));
  }
  for (std::size_t c = 0; c < categorical; ++c) {
    std::vector<std::optional<std::string>> v(rows);
    const std::size_t levels = 1 + rng.below(6);
    for (std::size_t i = 0; i < rows; ++i) {
      if (rng.uniform() < 0.1) continue;
      v[i] = "L" + std::to_string(rng.below(levels));
    }
    v[rng.below(rows)] = "L0";
    t.column_names.push_back("c" + std::to_string(c));
    t.columns.push_back(Column::categorical(std::move(v)));
  }
  std::vector<std::optional<std::string>> label(rows);
  for (std::size_t i = 0; i < rows; ++i) label[i] = attack[i] ? (rng.coin() ? "DDoS" : "Scan") : "Normal";
  t.column_names.push_back("Attack_type");
  t.columns.push_back(Column::categorical(std::move(label)));
  return t;
}

Verdict pipeline_totality() {
  Rng rng(50);
  std::size_t bad_values = 0, bad_partitions = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto table = random_table(rng);
    const auto clients = static_cast<std::uint32_t>(2 + rng.below(9));
    auto [matrix, encoding] = clean_table(table, "Attack_type", "Normal", {});
    const auto out = prepare_matrix(matrix, 0.8, clients, static_cast<std::uint64_t>(trial));
    for (const auto* m : {&out.data.global_train, &out.data.global_test}) {
      for (double v : m->values) bad_values += std::isfinite(v) ? 0 : 1;
    }
    std::vector<int> hits(out.data.global_train.rows(), 0);
    for (const auto& shard : out.data.plan.shards) {
      for (auto i : shard) ++hits[i];
    }
    for (int h : hits) bad_partitions += h == 1 ? 0 : 1;
    if (out.data.plan.shards.size() != clients) ++bad_partitions;
  }
  return {bad_values == 0 && bad_partitions == 0,
          "50 tables: " + std::to_string(bad_values) + " non-finite values, " + std::to_string(bad_partitions) +
              " coverage/disjointness violations"};
}

Verdict determinism() {
  const auto& first = reference_run();
  TempDir dir("fedids_det");
  run_federation(reference_config(dir.path()), reference_data());

  std::size_t compared = 0, differing = 0;
  auto same = [&](const std::string& a, const std::string& b) {
    ++compared;
    if (a != b) ++differing;
  };
  same(timeless_jsonl(first.dir / kGlobalLogName), timeless_jsonl(dir / kGlobalLogName));
  for (const char* sub : {"models", "shap"}) {
    std::set<std::string> names_a, names_b;
    for (const auto& e : std::filesystem::directory_iterator(first.dir / sub)) names_a.insert(e.path().filename());
    for (const auto& e : std::filesystem::directory_iterator(dir / sub)) names_b.insert(e.path().filename());
    if (names_a != names_b) ++differing;
    for (const auto& n : names_a) same(testing::slurp(first.dir / sub / n), testing::slurp(dir / sub / n));
  }
  same(testing::slurp(first.dir / kFinalModelName), testing::slurp(dir / kFinalModelName));
  return {differing == 0, std::to_string(compared) + " artifacts compared, " + std::to_string(differing) +
                              " differ (wall-time fields excluded)"};
}

}  // namespace
}  // namespace fedids

int main() {
  using namespace fedids;
  const std::vector<Criterion> criteria = {
      {1, "SHAP additivity over a full federation run", 30, additivity},
      {2, "SHAP exact vs brute-force oracle", 60, oracle_equivalence},
      {3, "continuation equivalence (1 client, 8 rounds)", 10, continuation},
      {4, "synthetic accuracy analog (10 clients, 10 rounds)", 120, accuracy_analog},
      {5, "confidence growth round 1 -> final", 0, confidence_growth},
      {6, "best-model selection replay", 0, best_selection},
      {7, "skip-round handling", 0, skip_round},
      {8, "metric oracles", 0, metric_oracles},
      {9, "serialization round-trip", 0, serialization},
      {10, "pipeline totality", 0, pipeline_totality},
      {11, "determinism", 0, determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    // Criterion 4 is measured by the shared run it triggers.
    if (c.id == 4) seconds = reference_run().seconds;
    bool pass = v.pass;
    std::string timing = fmt("%.2fs", seconds);
    if (c.limit_s > 0) {
      timing += fmt(", limit %.0fs", c.limit_s);
      if (seconds >= c.limit_s) pass = false;
    }
    failures += pass ? 0 : 1;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << c.id << ' ' << c.name << ": " << v.detail << " (" << timing
              << ")" << std::endl;
  }
  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
