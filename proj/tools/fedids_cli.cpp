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

// fedids: prepare data, run a federation, report, explain, synthesize.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 every round skipped.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedids/commands.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "JSON run configuration");
  cmd->add_option("--out", flags.out, "output directory (overrides config `out`)");
  cmd->add_option("--seed", flags.seed, "run seed (overrides federation.seed)");
}

fedids::RunConfig resolve(const CommonFlags& flags) {
  fedids::RunConfig cfg;
  if (!flags.config.empty()) cfg = fedids::load_run_config(flags.config);
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  if (flags.seed) cfg.federation.seed = *flags.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated gradient-boosted intrusion detection with SHAP explanations"};
  app.require_subcommand(1);

  CommonFlags prepare_flags, run_flags, report_flags, explain_flags, synth_flags;

  auto* prepare = app.add_subcommand("prepare", "clean, split, normalize and partition data");
  add_common(prepare, prepare_flags);

  auto* run = app.add_subcommand("run", "run the federation over prepared data");
  add_common(run, run_flags);

  auto* report = app.add_subcommand("report", "per-round metrics table from a run's global log");
  add_common(report, report_flags);
  std::string report_dir;
  report->add_option("run_dir", report_dir, "run directory (defaults to --out / config out)");

  auto* explain = app.add_subcommand("explain", "SHAP archive for a saved model over a prepared matrix");
  add_common(explain, explain_flags);
  std::string model_path, data_path, explain_output;
  std::uint32_t explain_round = 0;
  std::optional<std::uint32_t> explain_client;
  explain->add_option("--model", model_path, "model file")->required();
  explain->add_option("--data", data_path, "prepared matrix CSV")->required();
  explain->add_option("--output", explain_output, "archive path")->required();
  explain->add_option("--round", explain_round, "round recorded in each record");
  explain->add_option("--client", explain_client, "client id recorded in each record (default: global)");

  auto* synth = app.add_subcommand("synth", "write a synthetic two-cluster dataset as CSV");
  add_common(synth, synth_flags);
  fedids::SyntheticSpec spec;
  std::string synth_output;
  synth->add_option("--rows", spec.rows);
  synth->add_option("--features", spec.features);
  synth->add_option("--separation", spec.separation);
  synth->add_option("--positive-fraction", spec.positive_fraction);
  synth->add_option("--output", synth_output, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? fedids::kExitOk : fedids::kExitUsage;
  }

  try {
    if (*prepare) {
      fedids::cmd_prepare(resolve(prepare_flags));
      return fedids::kExitOk;
    }
    if (*run) {
      return fedids::cmd_run(resolve(run_flags));
    }
    if (*report) {
      std::string dir = report_dir;
      if (dir.empty()) dir = resolve(report_flags).out_dir.string();
      fedids::cmd_report(dir);
      return fedids::kExitOk;
    }
    if (*explain) {
      fedids::ClientId client = explain_client ? fedids::ClientId(*explain_client) : fedids::kGlobal;
      const auto n = fedids::cmd_explain(model_path, data_path, explain_output, explain_round, client);
      std::cout << "explained " << n << " rows -> " << explain_output << '\n';
      return fedids::kExitOk;
    }
    if (*synth) {
      const auto cfg = resolve(synth_flags);
      std::uint64_t seed = cfg.federation.seed;
      if (cfg.synthetic) {
        if (synth->count("--rows") == 0) spec.rows = cfg.synthetic->rows;
        if (synth->count("--features") == 0) spec.features = cfg.synthetic->features;
        if (synth->count("--separation") == 0) spec.separation = cfg.synthetic->separation;
        if (synth->count("--positive-fraction") == 0) spec.positive_fraction = cfg.synthetic->positive_fraction;
        if (!synth_flags.seed) seed = cfg.synthetic_seed();
      }
      fedids::cmd_synth(spec, seed, synth_output);
      return fedids::kExitOk;
    }
  } catch (const fedids::ConfigError& e) {
    std::cerr << "fedids: " << e.what() << '\n';
    return fedids::kExitUsage;
  } catch (const fedids::Error& e) {
    std::cerr << "fedids: " << e.what() << '\n';
    return fedids::kExitData;
  } catch (const std::exception& e) {
    std::cerr << "fedids: " << e.what() << '\n';
    return fedids::kExitData;
  }
  return fedids::kExitUsage;
}
