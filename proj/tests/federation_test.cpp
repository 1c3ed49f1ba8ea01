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

#include <gtest/gtest.h>

#include <algorithm>

#include "fedids/federation.hpp"
#include "test_support.hpp"

namespace fedids {
namespace {

using testing::TempDir;

PreparedData make_data(std::size_t rows, std::uint32_t clients, std::uint64_t seed, double separation = 3.0) {
  auto all = synth_generate(rows, 6, separation, 0.3, seed);
  auto split = stratified_split(all, 0.8, seed + 1);
  PreparedData d;
  d.global_train = std::move(split.train);
  d.global_test = std::move(split.test);
  d.plan = partition_balanced(d.global_train, clients, seed + 2);
  return d;
}

FederationConfig small_config(std::uint32_t clients, std::uint32_t rounds) {
  FederationConfig c;
  c.client_count = clients;
  c.round_count = rounds;
  c.seed = 11;
  c.train.max_depth = 3;
  return c;
}

ClientUpdate ok_update(std::uint32_t id, double f1, double acc, double loss) {
  ClientUpdate u;
  u.client_id = id;
  u.status = UpdateStatus::ok;
  u.metrics = MetricsReport{};
  u.metrics->f1 = f1;
  u.metrics->accuracy = acc;
  u.metrics->log_loss = loss;
  u.model_bytes = Bytes{static_cast<std::uint8_t>(id)};
  return u;
}

ClientUpdate failed_update(std::uint32_t id) {
  ClientUpdate u;
  u.client_id = id;
  u.failure_reason = "boom";
  return u;
}

// Drops every wall_time_ms field, recursively.
nlohmann::json strip_times(nlohmann::json j) {
  if (j.is_object()) {
    j.erase("wall_time_ms");
    for (auto& [k, v] : j.items()) v = strip_times(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_times(v);
  }
  return j;
}

std::string timeless_log(const std::filesystem::path& p) {
  std::string out;
  for (const auto& j : read_round_log(p)) out += strip_times(j).dump() + "\n";
  return out;
}

// --- client_round ----------------------------------------------------------

class ClientRoundTest : public ::testing::Test {
 protected:
  ClientRoundTest() : data(make_data(600, 2, 3)), config(small_config(2, 3)) {
    state = make_client_state(1, data.global_train.subset(data.plan.shards[1]), 0.8, config.seed);
  }
  PreparedData data;
  FederationConfig config;
  ClientState state;
};

TEST_F(ClientRoundTest, FreshModelOnFirstRound) {
  TempDir dir;
  config.out_dir = dir.path();
  std::size_t explained = 0;
  FederationObserver obs{[&](std::span<const ShapRecord> recs) { explained += recs.size(); }};
  const auto u = client_round(state, std::nullopt, 1, config, &obs);
  ASSERT_TRUE(u.ok()) << u.failure_reason;
  EXPECT_EQ(deserialize(u.model_bytes).trees.size(), 1u);
  ASSERT_TRUE(u.metrics.has_value());
  EXPECT_EQ(u.metrics->sample_count, state.local_test.rows());
  EXPECT_EQ(u.shap_archive_path, dir.path() / "shap" / "round_1_client_1.shap");
  std::ifstream in(u.shap_archive_path);
  EXPECT_EQ(read_shap_archive(in, state.local_test.feature_names).size(), state.local_test.rows());
  EXPECT_EQ(explained, state.local_test.rows());
  EXPECT_TRUE(u.failure_reason.empty());
}

TEST_F(ClientRoundTest, ContinuationAddsOneTree) {
  auto u = client_round(state, std::nullopt, 1, config);
  for (std::uint32_t r = 2; r <= 4; ++r) {
    const Bytes incoming = u.model_bytes;
    u = client_round(state, std::span<const std::uint8_t>(incoming), r, config);
    ASSERT_TRUE(u.ok());
    EXPECT_EQ(deserialize(u.model_bytes).trees.size(), r);
  }
}

TEST_F(ClientRoundTest, CorruptIncomingBytesFailCleanly) {
  const Bytes garbage{'F', 'G', 'B', 'X', 1, 2, 3};
  const auto u = client_round(state, std::span<const std::uint8_t>(garbage), 2, config);
  EXPECT_EQ(u.status, UpdateStatus::failed);
  EXPECT_FALSE(u.failure_reason.empty());
  EXPECT_TRUE(u.model_bytes.empty());
  EXPECT_FALSE(u.metrics.has_value());
  EXPECT_EQ(u.client_id, 1u);
  EXPECT_EQ(u.round, 2u);
}

TEST_F(ClientRoundTest, InjectedFailure) {
  const std::pair<std::uint32_t, std::uint32_t> plan[] = {{2, 1}};
  config.failures = inject_failure(plan);
  EXPECT_TRUE(client_round(state, std::nullopt, 1, config).ok());
  const auto u = client_round(state, std::nullopt, 2, config);
  EXPECT_FALSE(u.ok());
  EXPECT_EQ(u.failure_reason, "injected failure");
}

TEST(ClientState, PosWeightFromLocalTrain) {
  const auto data = make_data(600, 3, 5);
  const auto s = make_client_state(2, data.global_train.subset(data.plan.shards[2]), 0.8, 9);
  EXPECT_EQ(s.client_id, 2u);
  EXPECT_EQ(s.pos_weight, compute_pos_weight(s.local_train.labels));
  EXPECT_EQ(s.local_train.rows() + s.local_test.rows(), data.plan.shards[2].size());
}

// --- select_best -----------------------------------------------------------

TEST(SelectBest, Singleton) {
  const std::vector<ClientUpdate> u{failed_update(0), ok_update(3, 0.5, 0.5, 1.0)};
  EXPECT_EQ(select_best(u).client_id, 3u);
}

TEST(SelectBest, F1IsPrimaryKey) {
  const std::vector<ClientUpdate> u{ok_update(0, 0.95, 1.0, 0.0), ok_update(1, 0.99, 0.1, 5.0)};
  EXPECT_EQ(select_best(u).client_id, 1u);
}

TEST(SelectBest, AccuracyThenLogLossThenClientId) {
  const std::vector<ClientUpdate> acc{ok_update(0, 0.9, 0.8, 0.1), ok_update(1, 0.9, 0.85, 0.9)};
  EXPECT_EQ(select_best(acc).client_id, 1u);
  const std::vector<ClientUpdate> loss{ok_update(0, 0.9, 0.8, 0.05), ok_update(1, 0.9, 0.8, 0.02)};
  EXPECT_EQ(select_best(loss).client_id, 1u);
  const std::vector<ClientUpdate> id{ok_update(4, 0.9, 0.8, 0.02), ok_update(2, 0.9, 0.8, 0.02)};
  EXPECT_EQ(select_best(id).client_id, 2u);
}

TEST(SelectBest, NoOkUpdates) {
  const std::vector<ClientUpdate> u{failed_update(0), failed_update(1)};
  EXPECT_THROW(select_best(u), ArgumentError);
  EXPECT_THROW(select_best(std::span<const ClientUpdate>{}), ArgumentError);
}

TEST(SelectBest, ArgmaxOverRandomKeys) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<ClientUpdate> u;
    for (std::uint32_t c = 0; c < 10; ++c) {
      if (rng.below(4) == 0) {
        u.push_back(failed_update(c));
      } else {
        // Coarse values force ties on the leading keys.
        u.push_back(ok_update(c, static_cast<double>(rng.below(3)) / 2, static_cast<double>(rng.below(3)) / 2,
                              static_cast<double>(rng.below(3))));
      }
    }
    if (std::none_of(u.begin(), u.end(), [](const ClientUpdate& x) { return x.ok(); })) continue;
    const auto& best = select_best(u);
    auto key = [](const ClientUpdate& x) {
      return std::make_tuple(x.metrics->f1, x.metrics->accuracy, -x.metrics->log_loss,
                             -static_cast<double>(x.client_id));
    };
    for (const auto& x : u) {
      if (x.ok()) EXPECT_GE(key(best), key(x));
    }
  }
}

// --- server_round ----------------------------------------------------------

TEST(ServerRound, AllFailedSkipsAndKeepsStagedModel) {
  const auto data = make_data(400, 2, 1);
  const auto cfg = small_config(2, 3);
  ServerState server;
  server.staged_model = Bytes{1, 2, 3};
  server.staged_client = 1;
  server.staged_round = 1;
  const auto e = server_round(server, {failed_update(1), failed_update(0)}, data.global_test, 2, cfg);
  EXPECT_EQ(e.outcome, RoundOutcome::skipped);
  EXPECT_EQ(e.reason, "no valid client output");
  EXPECT_FALSE(e.best_client_id.has_value());
  EXPECT_FALSE(e.global_metrics.has_value());
  ASSERT_EQ(e.client_statuses.size(), 2u);
  EXPECT_EQ(e.client_statuses[0].client_id, 0u);
  EXPECT_EQ(e.client_statuses[0].reason, "boom");
  EXPECT_EQ(*server.staged_model, (Bytes{1, 2, 3}));
  EXPECT_EQ(server.staged_round, 1u);
}

TEST(ServerRound, CompletedRoundStagesWinnerIndependentOfOrder) {
  const auto data = make_data(600, 3, 2);
  auto cfg = small_config(3, 1);
  std::vector<ClientUpdate> updates;
  for (std::uint32_t c = 0; c < 3; ++c) {
    const auto s = make_client_state(c, data.global_train.subset(data.plan.shards[c]), 0.8, cfg.seed);
    updates.push_back(client_round(s, std::nullopt, 1, cfg));
  }
  ServerState a, b;
  auto reversed = updates;
  std::reverse(reversed.begin(), reversed.end());
  const auto ea = server_round(a, updates, data.global_test, 1, cfg);
  const auto eb = server_round(b, reversed, data.global_test, 1, cfg);
  ASSERT_EQ(ea.outcome, RoundOutcome::completed);
  EXPECT_EQ(ea.best_client_id, eb.best_client_id);
  EXPECT_EQ(*ea.best_client_id, select_best(updates).client_id);
  EXPECT_EQ(a.staged_model, select_best(updates).model_bytes);
  EXPECT_EQ(a.staged_model, b.staged_model);
  ASSERT_TRUE(ea.global_metrics.has_value());
  EXPECT_EQ(*ea.global_metrics, evaluate(deserialize(*a.staged_model), data.global_test));
  EXPECT_EQ(to_json(ea).dump(), to_json(eb).dump());
}

TEST(ServerRound, WritesGlobalArchiveAndSnapshot) {
  TempDir dir;
  const auto data = make_data(400, 1, 8);
  auto cfg = small_config(1, 1);
  cfg.out_dir = dir.path();
  const auto s = make_client_state(0, data.global_train.subset(data.plan.shards[0]), 0.8, cfg.seed);
  ServerState server;
  server_round(server, {client_round(s, std::nullopt, 4, cfg)}, data.global_test, 4, cfg);
  EXPECT_TRUE(std::filesystem::exists(dir / "shap/round_4_global.shap"));
  EXPECT_TRUE(std::filesystem::exists(dir / "models/round_4_best_client_0.model"));
  EXPECT_EQ(read_bytes(dir / "models/round_4_best_client_0.model"), *server.staged_model);
}

// --- run_federation --------------------------------------------------------

TEST(RunFederation, SingleClientSingleRound) {
  const auto data = make_data(500, 1, 4);
  const auto cfg = small_config(1, 1);
  const auto report = run_federation(cfg, data);
  ASSERT_TRUE(report.final_model.has_value());
  EXPECT_EQ(deserialize(*report.final_model).trees.size(), 1u);
  EXPECT_EQ(report.final_model_client, std::optional<std::uint32_t>(0));
  EXPECT_EQ(report.completed_rounds(), 1u);
}

TEST(RunFederation, SingleClientMatchesCentralizedLoop) {
  const auto data = make_data(800, 1, 6);
  const auto cfg = small_config(1, 6);
  const auto report = run_federation(cfg, data);

  const auto state = make_client_state(0, data.global_train.subset(data.plan.shards[0]), 0.8, cfg.seed);
  std::optional<Ensemble> central;
  for (int r = 0; r < 6; ++r) central = boost_round(central, state.local_train, cfg.train, state.pos_weight);
  EXPECT_EQ(*report.final_model, serialize(*central));
}

TEST(RunFederation, SkippedRoundLeavesLineageIntact) {
  const auto data = make_data(600, 3, 7);
  auto cfg = small_config(3, 3);
  const std::pair<std::uint32_t, std::uint32_t> plan[] = {{2, 0}, {2, 1}, {2, 2}};
  cfg.failures = inject_failure(plan);
  const auto report = run_federation(cfg, data);
  ASSERT_EQ(report.rounds.size(), 3u);
  EXPECT_EQ(report.rounds[0].outcome, RoundOutcome::completed);
  EXPECT_EQ(report.rounds[1].outcome, RoundOutcome::skipped);
  EXPECT_EQ(report.rounds[2].outcome, RoundOutcome::completed);
  EXPECT_EQ(deserialize(*report.final_model).trees.size(), 2u);
  EXPECT_EQ(report.final_model_round, 3u);
}

TEST(RunFederation, AllRoundsSkippedLeavesNoModel) {
  const auto data = make_data(400, 2, 7);
  auto cfg = small_config(2, 2);
  for (std::uint32_t r = 1; r <= 2; ++r) {
    cfg.failures.add(r, 0);
    cfg.failures.add(r, 1);
  }
  const auto report = run_federation(cfg, data);
  EXPECT_FALSE(report.final_model.has_value());
  EXPECT_EQ(report.completed_rounds(), 0u);
}

TEST(RunFederation, PartialFailureIsLogged) {
  const auto data = make_data(1000, 10, 7);
  auto cfg = small_config(10, 1);
  cfg.failures.add(1, 6);
  const auto report = run_federation(cfg, data);
  const auto& e = report.rounds.at(0);
  EXPECT_EQ(e.outcome, RoundOutcome::completed);
  EXPECT_EQ(e.client_statuses.at(6).status, UpdateStatus::failed);
  EXPECT_EQ(e.client_statuses.at(6).reason, "injected failure");
  EXPECT_NE(e.best_client_id, std::optional<std::uint32_t>(6));
}

TEST(RunFederation, EmptyScheduleHasNoEffect) {
  const auto data = make_data(600, 3, 12);
  auto cfg = small_config(3, 2);
  const auto a = run_federation(cfg, data);
  cfg.failures = inject_failure({});
  const auto b = run_federation(cfg, data);
  EXPECT_EQ(a.final_model, b.final_model);
}

TEST(RunFederation, StagedTreeCountTracksCompletedRounds) {
  const auto data = make_data(800, 4, 13);
  auto cfg = small_config(4, 5);
  for (std::uint32_t c = 0; c < 4; ++c) cfg.failures.add(3, c);
  TempDir dir;
  cfg.out_dir = dir.path();
  const auto report = run_federation(cfg, data);
  std::size_t completed = 0;
  for (const auto& e : report.rounds) {
    if (e.outcome != RoundOutcome::completed) continue;
    ++completed;
    const auto path = dir / ("models/round_" + std::to_string(e.round) + "_best_client_" +
                             std::to_string(*e.best_client_id) + ".model");
    EXPECT_EQ(deserialize(read_bytes(path)).trees.size(), completed);
  }
  EXPECT_EQ(completed, 4u);
}

TEST(RunFederation, WorkerCountDoesNotChangeOutputs) {
  const auto data = make_data(1000, 5, 14);
  TempDir a, b;
  auto cfg = small_config(5, 3);
  cfg.failures.add(2, 3);
  cfg.out_dir = a.path();
  run_federation(cfg, data);
  cfg.out_dir = b.path();
  cfg.workers = 4;
  run_federation(cfg, data);
  EXPECT_EQ(timeless_log(a / kGlobalLogName), timeless_log(b / kGlobalLogName));
  EXPECT_EQ(testing::slurp(a / kFinalModelName), testing::slurp(b / kFinalModelName));
  for (const auto& entry : std::filesystem::directory_iterator(a / "shap")) {
    EXPECT_EQ(testing::slurp(entry.path()), testing::slurp(b / "shap" / entry.path().filename().string()))
        << entry.path();
  }
}

TEST(RunFederation, LogFieldsAndOutputs) {
  const auto data = make_data(600, 2, 15);
  TempDir dir;
  auto cfg = small_config(2, 2);
  cfg.failures.add(1, 0);
  cfg.failures.add(1, 1);
  cfg.out_dir = dir.path();
  run_federation(cfg, data);

  const auto log = read_round_log(dir / kGlobalLogName);
  ASSERT_EQ(log.size(), 2u);
  for (const char* k : {"round", "outcome", "best_client_id", "client_statuses", "accuracy", "precision", "recall",
                        "f1", "log_loss", "roc_auc", "tp", "fn", "fp", "tn", "wall_time_ms"}) {
    EXPECT_TRUE(log[0].contains(k)) << k;
    EXPECT_TRUE(log[1].contains(k)) << k;
  }
  EXPECT_EQ(log[0]["outcome"], "skipped");
  EXPECT_TRUE(log[0]["best_client_id"].is_null());
  EXPECT_TRUE(log[0]["f1"].is_null());
  EXPECT_EQ(log[0]["client_statuses"][0]["status"], "failed");
  EXPECT_EQ(log[0]["client_statuses"][0]["reason"], "injected failure");
  EXPECT_EQ(log[1]["outcome"], "completed");
  EXPECT_TRUE(log[1]["f1"].is_number());

  EXPECT_TRUE(std::filesystem::exists(dir / kFinalModelName));
  EXPECT_TRUE(std::filesystem::exists(dir / kFinalReportName));
  EXPECT_TRUE(std::filesystem::exists(dir / "clients/client_0.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "shap/round_2_client_1.shap"));
  EXPECT_FALSE(std::filesystem::exists(dir / "shap/round_1_global.shap"));
}

TEST(RunFederation, RejectsMismatchedPartition) {
  const auto data = make_data(400, 2, 1);
  EXPECT_THROW(run_federation(small_config(3, 1), data), DataError);
  EXPECT_THROW(run_federation(small_config(2, 1), PreparedData{}), DataError);
}

}  // namespace
}  // namespace fedids
