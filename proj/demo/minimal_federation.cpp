// Minimal in-memory federation: synthesize data, prepare it, run five rounds
// with three clients and print the global metrics per round.

#include <iostream>

#include "fedids/commands.hpp"

int main() {
  const auto data = fedids::synth_generate(3000, 8, 4.0, 0.3, 11);
  const auto prepared = fedids::prepare_matrix(data, 0.8, 3, 11);

  fedids::FederationConfig config;
  config.client_count = 3;
  config.round_count = 5;
  config.seed = 11;

  const auto report = fedids::run_federation(config, prepared.data);
  for (const auto& e : report.rounds) {
    std::cout << "round " << e.round << " " << fedids::to_string(e.outcome);
    if (e.global_metrics) {
      std::cout << " best_client=" << *e.best_client_id << " accuracy=" << e.global_metrics->accuracy
                << " f1=" << e.global_metrics->f1 << " log_loss=" << e.global_metrics->log_loss;
    }
    std::cout << '\n';
  }

  const auto model = fedids::deserialize(*report.final_model);
  const auto row = prepared.data.global_test.row(0);
  const auto shap = fedids::shap_exact(model, row);
  std::cout << "row 0: margin=" << shap.explained_margin << " base=" << shap.base_value << '\n';
  for (std::size_t j = 0; j < shap.contributions.size(); ++j) {
    std::cout << "  phi_" << prepared.data.global_test.feature_names[j] << " = " << shap.contributions[j] << '\n';
  }
}
