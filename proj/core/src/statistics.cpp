#include "cor/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cor/kernels.hpp"

namespace cor {

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: inputs differ in length");
  if (x.size() < 2) return 0.0;
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double cei_gate_correlation(const ExpertImpactTable& table) {
  std::vector<double> cei, gate;
  for (const ExpertImpact& c : table.cells) {
    if (!c.defined) continue;
    cei.push_back(c.cei);
    gate.push_back(c.mean_gate);
  }
  return spearman(cei, gate);
}

std::vector<ExpertImpact> dormant_experts(const ExpertImpactTable& table) {
  std::vector<ExpertImpact> out;
  for (std::size_t l = 0; l < table.layers; ++l) {
    std::vector<double> gates, ceis;
    for (std::size_t e = 0; e < table.experts; ++e) {
      const ExpertImpact& c = table.at(l, e);
      if (!c.defined) continue;
      gates.push_back(c.mean_gate);
      ceis.push_back(c.cei);
    }
    if (gates.empty()) continue;
    const double gate_median = kernels::percentile(gates, 50.0);
    const double cei_q3 = kernels::percentile(ceis, 75.0);
    for (std::size_t e = 0; e < table.experts; ++e) {
      const ExpertImpact& c = table.at(l, e);
      if (c.defined && c.mean_gate < gate_median && c.cei > cei_q3) out.push_back(c);
    }
  }
  return out;
}

}  // namespace cor
