#pragma once

#include <cstdint>
#include <vector>

#include "cor/calibration.hpp"
#include "cor/corpus.hpp"
#include "cor/evaluate.hpp"
#include "cor/expert_analysis.hpp"
#include "cor/layer_analysis.hpp"
#include "cor/model.hpp"
#include "cor/router.hpp"
#include "cor/trainer.hpp"

namespace cor {

/// Everything needed to run the offline analysis and online evaluation for
/// one training seed. The model's vocab is taken from the corpus alphabet.
struct StudyConfig {
  FactCorpusSpec corpus;
  ModelConfig model;
  /// Training varies each layer's k in [1, 4] so the model tolerates the
  /// per-layer budgets a plan assigns.
  TrainConfig train{.steps = 600, .batch_size = 16, .jitter_k_min = 1, .jitter_k_max = 4};
  double p_low = 10.0;
  double p_high = 90.0;
  double delta = kDefaultDelta;
  double epsilon = kDefaultEpsilon;
  PlanOptions plan;
  std::vector<double> lambdas = {0.05, 0.1, 0.2, 0.5};
  /// Pareto budgets as per-layer multiples: K_total = L * m.
  std::vector<std::size_t> budget_multiples = {1, 2, 3, 4};
  std::size_t threads = 1;
};

struct SeedStudy {
  std::uint64_t seed = 0;
  std::vector<LayerSensitivity> intensity;
  ExpertImpactTable cei;
  RoutingPlan plan;
  EvalReport eval;
  std::vector<ParetoRow> pareto;
  std::vector<LambdaRow> lambda_rows;
  std::vector<LossRecord> loss_log;
};

SeedStudy run_seed_study(const StudyConfig& config, std::uint64_t seed);

}  // namespace cor
