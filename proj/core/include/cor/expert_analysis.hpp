#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cor/calibration.hpp"
#include "cor/model.hpp"

namespace cor {

struct ExpertImpact {
  std::size_t layer = 0;
  std::size_t expert = 0;
  double cei = 0.0;
  /// Hard tokens where the expert was active and could be ablated.
  std::size_t n_active = 0;
  /// Mean gate probability over those tokens; 0 when undefined.
  double mean_gate = 0.0;
  bool defined = false;

  friend bool operator==(const ExpertImpact&, const ExpertImpact&) = default;
};

struct ExpertImpactTable {
  std::size_t layers = 0;
  std::size_t experts = 0;
  /// Row-major by (layer, expert).
  std::vector<ExpertImpact> cells;
  /// (token, expert) pairs skipped because the expert was the only active one.
  std::size_t degenerate_skips = 0;

  const ExpertImpact& at(std::size_t layer, std::size_t expert) const { return cells.at(layer * experts + expert); }
  /// CEI values of one layer, undefined cells as 0.
  std::vector<double> layer_cei(std::size_t layer) const;
};

/// Surrogate gates after removing `expert` from `active`: the remaining
/// active gates are rescaled to sum to one, the removed one is zero and
/// inactive entries are copied unchanged.
/// Throws NotActivatedError if expert is not in active and
/// AblationDegenerateError if it is the only active expert.
std::vector<float> ablate_gates(std::span<const float> gates, std::span<const std::size_t> active, std::size_t expert);

/// Loss change at the record's target when `expert` is ablated at the last
/// context position of `layer`. Not clamped; may be negative.
double rescue_gain(const MoeModel& model, const TokenRecord& record, std::size_t layer, std::size_t expert);

/// CEI for every (layer, expert) over the hard set under standard routing.
/// Throws StratificationError when the hard set is empty.
ExpertImpactTable compute_cei(const MoeModel& model, std::span<const TokenRecord> hard, std::size_t threads = 1);

}  // namespace cor
