#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cor/expert_analysis.hpp"

namespace cor {

/// Ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation (Pearson over average ranks). Returns 0 when
/// either side has no spread. Throws DimensionError on length mismatch.
double spearman(std::span<const double> x, std::span<const double> y);

/// Spearman correlation between CEI and mean gate over defined cells.
double cei_gate_correlation(const ExpertImpactTable& table);

/// Experts whose mean gate is below their layer's median and whose CEI is
/// above their layer's 75th percentile, both taken over the layer's defined
/// cells.
std::vector<ExpertImpact> dormant_experts(const ExpertImpactTable& table);

}  // namespace cor
