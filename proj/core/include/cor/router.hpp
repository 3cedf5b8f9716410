#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cor/expert_analysis.hpp"
#include "cor/layer_analysis.hpp"
#include "cor/model.hpp"

namespace cor {

inline constexpr double kDefaultLambda = 0.1;
inline constexpr double kRobustLambdaLow = 0.05;
inline constexpr double kRobustLambdaHigh = 0.2;

/// Integer per-layer budgets proportional to `intensity` that sum to
/// `k_total` exactly and lie in [k_min, k_max]. Unclamped layers get
/// k_total' * R_l / sum(R) over the unclamped set, floored, with leftover
/// units going to the largest fractional parts (ties to the lower layer).
/// Throws AllocationError on non-positive R or infeasible bounds.
std::vector<std::size_t> allocate_budgets(std::span<const double> intensity, std::size_t k_total, std::size_t k_min,
                                          std::size_t k_max);

/// Per-layer min-max normalized CEI; undefined cells count as 0 and a layer
/// with no spread maps to all zeros.
std::vector<std::vector<float>> normalize_cei(const ExpertImpactTable& table);

struct FusedSelection {
  std::vector<std::size_t> active;
  /// Selected experts that plain Top-k of the gates would not pick.
  std::vector<std::size_t> awakened;
};

/// Top-k of gates + lambda * prior with lower-index tie-break.
FusedSelection fused_select(std::span<const float> gates, std::span<const float> prior, float lambda, std::size_t k);

struct PlanLayer {
  std::size_t k = 0;
  double r = 0.0;
  std::vector<float> prior;

  friend bool operator==(const PlanLayer&, const PlanLayer&) = default;
};

struct RoutingPlan {
  std::size_t k_total = 0;
  double lambda = 0.0;
  std::size_t k_min = 1;
  std::size_t k_max = 0;
  std::vector<PlanLayer> layers;

  friend bool operator==(const RoutingPlan&, const RoutingPlan&) = default;
};

struct PlanOptions {
  double lambda = kDefaultLambda;
  std::size_t k_baseline = 2;
  /// Defaults to layers * k_baseline.
  std::optional<std::size_t> k_total;
  std::size_t k_min = 1;
  /// Defaults to the expert count; always capped by it.
  std::optional<std::size_t> k_max;
  /// Keep priors only on layers with R_l at or above the median R.
  bool fuse_high_intensity_only = false;
};

/// Warning text when lambda lies outside the robust small-value regime.
std::optional<std::string> lambda_warning(double lambda);

/// Combines budgets and priors into a plan. Non-positive or non-finite R_l
/// values are raised to a small positive floor before allocation. Warnings
/// (lambda regime, floored R) are appended to `warnings` when given.
/// Throws InputError when the inputs disagree on the layer count.
RoutingPlan build_plan(std::span<const LayerSensitivity> intensity, const ExpertImpactTable& table,
                       const PlanOptions& options, std::vector<std::string>* warnings = nullptr);

/// Throws InputError unless the plan fits the model: one layer entry per
/// model layer, priors of length N with values in [0,1], k within [0, N],
/// and budgets summing to k_total.
void validate_plan(const RoutingPlan& plan, const ModelConfig& config);

/// Per-layer routing overrides that apply the plan inside forward().
std::vector<RoutingOverride> plan_overrides(const RoutingPlan& plan);

}  // namespace cor
