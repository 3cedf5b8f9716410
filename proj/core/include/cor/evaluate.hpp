#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cor/corpus.hpp"
#include "cor/model.hpp"
#include "cor/router.hpp"

namespace cor {

/// Metric used in place of benchmark scores: next-token accuracy at the
/// object position of held-out completion prompts.
inline constexpr const char* kMetricDescription =
    "fact-object next-token accuracy (argmax at the object position of completion prompts)";

struct EvalQuery {
  std::vector<int> prompt;
  int object = 0;
  bool tail = false;
};

std::vector<EvalQuery> encode_queries(const Tokenizer& tokenizer, std::span<const Query> queries);

struct ModeReport {
  std::string mode;
  /// Expert activations per token summed over layers.
  std::size_t k_total = 0;
  double accuracy = 0.0;
  std::optional<double> head_accuracy;
  /// Undefined when the query set has no tail facts.
  std::optional<double> tail_accuracy;
  double nll = 0.0;
  /// Expert forward invocations counted over all prompt positions.
  std::size_t activations = 0;
  std::size_t queries = 0;

  friend bool operator==(const ModeReport&, const ModeReport&) = default;
};

struct EvalReport {
  std::string metric = kMetricDescription;
  std::vector<ModeReport> modes;

  const ModeReport* find(std::string_view mode) const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Produces the routing overrides for query `index`; empty means standard.
using OverrideSource = std::function<std::vector<RoutingOverride>(std::size_t index)>;

ModeReport evaluate_mode(const MoeModel& model, std::span<const EvalQuery> queries, std::string mode,
                         std::size_t k_total, const OverrideSource& overrides, std::size_t threads = 1);

/// Uniform static budgets: K_total split evenly with the remainder going to
/// lower layers.
std::vector<RoutingOverride> static_overrides(const ModelConfig& config, std::size_t k_total);

struct EvalOptions {
  std::uint64_t seed = 1;
  /// Per-layer k values for the static sweep (K_total = L * k).
  std::vector<std::size_t> static_k = {1, 2, 3, 4};
  std::size_t threads = 1;
};

/// Modes: standard, random (k_baseline uniformly random experts), cor when a
/// plan is given, and static-k for each entry of options.static_k that fits
/// the expert count. Throws Error if the cor mode's measured activations
/// differ from standard routing's.
EvalReport evaluate(const MoeModel& model, std::span<const EvalQuery> queries, const RoutingPlan* plan,
                    const EvalOptions& options = {});

struct ParetoRow {
  std::string mode;  // "static" or "cor"
  std::size_t k_total = 0;
  double accuracy = 0.0;
  std::optional<double> tail_accuracy;
  double nll = 0.0;

  friend bool operator==(const ParetoRow&, const ParetoRow&) = default;
};

using PlanBuilder = std::function<RoutingPlan(std::size_t k_total)>;

/// A static point and a CoR point per budget, at equal measured activation
/// totals (Error otherwise).
std::vector<ParetoRow> pareto_sweep(const MoeModel& model, std::span<const EvalQuery> queries,
                                    std::span<const std::size_t> budgets, const PlanBuilder& build,
                                    std::size_t threads = 1);

struct LambdaRow {
  double lambda = 0.0;
  double accuracy = 0.0;
  std::optional<double> tail_accuracy;
  double nll = 0.0;

  friend bool operator==(const LambdaRow&, const LambdaRow&) = default;
};

std::vector<LambdaRow> lambda_sweep(const MoeModel& model, std::span<const EvalQuery> queries,
                                    std::span<const double> lambdas, const std::function<RoutingPlan(double)>& build,
                                    std::size_t threads = 1);

struct ScatterRow {
  std::size_t layer = 0;
  std::size_t expert = 0;
  double mean_gate = 0.0;
  double cei = 0.0;
  bool defined = false;

  friend bool operator==(const ScatterRow&, const ScatterRow&) = default;
};

std::vector<ScatterRow> export_scatter(const ExpertImpactTable& table);

}  // namespace cor
