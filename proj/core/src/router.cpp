#include "cor/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cor/kernels.hpp"

namespace cor {
namespace {

/// Floors the shares and hands leftover units to the largest fractional
/// parts; ties go to the earlier entry of `layers`, which is in index order.
void largest_remainder(std::span<const std::size_t> layers, std::span<const double> shares, std::size_t units,
                       std::vector<std::size_t>& out) {
  std::size_t assigned = 0;
  std::vector<std::pair<double, std::size_t>> remainders;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const double whole = std::floor(shares[i]);
    out[layers[i]] = static_cast<std::size_t>(whole);
    assigned += out[layers[i]];
    remainders.emplace_back(shares[i] - whole, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t u = 0; assigned < units; ++u, ++assigned) out[layers[remainders[u % remainders.size()].second]] += 1;
}

}  // namespace

std::vector<std::size_t> allocate_budgets(std::span<const double> intensity, std::size_t k_total, std::size_t k_min,
                                          std::size_t k_max) {
  const std::size_t layers = intensity.size();
  if (layers == 0) throw AllocationError("no layers to allocate");
  for (std::size_t l = 0; l < layers; ++l) {
    if (!(intensity[l] > 0.0) || !std::isfinite(intensity[l])) {
      throw AllocationError("intensity of layer " + std::to_string(l) + " must be positive and finite");
    }
  }
  if (k_min > k_max || layers * k_min > k_total || layers * k_max < k_total) {
    throw AllocationError("budget " + std::to_string(k_total) + " is infeasible for " + std::to_string(layers) +
                          " layers within [" + std::to_string(k_min) + ", " + std::to_string(k_max) + "]");
  }

  // Layers by ascending intensity; clamped sets are a prefix (held at k_min)
  // and a suffix (held at k_max) of this order. Search the smallest clamping
  // that leaves every proportional share inside the bounds.
  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return intensity[a] < intensity[b]; });
  const double lo = static_cast<double>(k_min), hi = static_cast<double>(k_max);
  std::vector<double> sorted(layers), prefix(layers + 1, 0.0);
  for (std::size_t i = 0; i < layers; ++i) {
    sorted[i] = intensity[order[i]];
    prefix[i + 1] = prefix[i] + sorted[i];
  }
  // Loose O(1) version of the bound checks below, so only plausible
  // candidates pay for the exact test.
  auto plausible = [&](std::size_t low, std::size_t high, double units) {
    if (low + high == layers) return true;
    const double mass = prefix[layers - high] - prefix[low];
    const double slack = 1e-9 * (1.0 + hi);
    auto share = [&](std::size_t i) { return units * sorted[i] / mass; };
    if (share(low) < lo - slack || share(layers - high - 1) > hi + slack) return false;
    if (low > 0 && share(low - 1) > lo + slack) return false;
    if (high > 0 && share(layers - high) < hi - slack) return false;
    return true;
  };

  for (std::size_t clamped = 0; clamped <= layers; ++clamped) {
    for (std::size_t low = 0; low <= clamped; ++low) {
      const std::size_t high = clamped - low;
      const std::size_t fixed_units = low * k_min + high * k_max;
      if (fixed_units > k_total) continue;
      const std::size_t free_units = k_total - fixed_units;
      if (!plausible(low, high, static_cast<double>(free_units))) continue;
      std::vector<std::size_t> free_layers(order.begin() + static_cast<std::ptrdiff_t>(low),
                                           order.end() - static_cast<std::ptrdiff_t>(high));
      std::sort(free_layers.begin(), free_layers.end());
      std::vector<std::size_t> k(layers, 0);
      for (std::size_t i = 0; i < low; ++i) k[order[i]] = k_min;
      for (std::size_t i = layers - high; i < layers; ++i) k[order[i]] = k_max;
      if (free_layers.empty()) {
        if (free_units == 0) return k;
        continue;
      }
      if (free_units < free_layers.size() * k_min || free_units > free_layers.size() * k_max) continue;

      double mass = 0.0;
      for (std::size_t l : free_layers) mass += intensity[l];
      const double units = static_cast<double>(free_units);
      std::vector<double> shares;
      bool inside = true;
      for (std::size_t l : free_layers) {
        shares.push_back(units * intensity[l] / mass);
        inside = inside && shares.back() >= lo && shares.back() <= hi;
      }
      // Clamped layers must be ones whose share would cross their bound.
      for (std::size_t i = 0; inside && i < low; ++i) inside = units * intensity[order[i]] / mass <= lo;
      for (std::size_t i = layers - high; inside && i < layers; ++i) inside = units * intensity[order[i]] / mass >= hi;
      if (!inside) continue;

      largest_remainder(free_layers, shares, free_units, k);
      return k;
    }
  }

  // Not reached for feasible input; the clamp-free proportional split with
  // explicit repair keeps the contract if floating point rules out every
  // candidate above.
  std::vector<std::size_t> all(layers);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const double mass = std::accumulate(intensity.begin(), intensity.end(), 0.0);
  std::vector<double> shares;
  for (double r : intensity) shares.push_back(std::clamp(static_cast<double>(k_total) * r / mass, lo, hi));
  std::vector<std::size_t> k(layers, 0);
  largest_remainder(all, shares, 0, k);
  std::size_t sum = std::accumulate(k.begin(), k.end(), std::size_t{0});
  // Add to the most intense layers first, remove from the least intense.
  for (std::size_t i = 0; sum < k_total; i = (i + 1) % layers) {
    std::size_t& slot = k[order[layers - 1 - i]];
    if (slot < k_max) {
      ++slot;
      ++sum;
    }
  }
  for (std::size_t i = 0; sum > k_total; i = (i + 1) % layers) {
    std::size_t& slot = k[order[i]];
    if (slot > k_min) {
      --slot;
      --sum;
    }
  }
  return k;
}

std::vector<std::vector<float>> normalize_cei(const ExpertImpactTable& table) {
  std::vector<std::vector<float>> priors;
  for (std::size_t l = 0; l < table.layers; ++l) {
    const std::vector<double> norm = kernels::min_max_normalize<double>(table.layer_cei(l));
    priors.emplace_back(norm.begin(), norm.end());
  }
  return priors;
}

FusedSelection fused_select(std::span<const float> gates, std::span<const float> prior, float lambda, std::size_t k) {
  if (k > gates.size()) {
    throw ConfigError("k=" + std::to_string(k) + " exceeds " + std::to_string(gates.size()) + " experts");
  }
  if (prior.size() != gates.size()) throw DimensionError("prior length differs from the gate vector");
  FusedSelection out;
  out.active = select_experts<float>(gates, k, prior, lambda);
  const std::vector<std::size_t> plain = kernels::top_k(gates, k);
  for (std::size_t e : out.active)
    if (std::find(plain.begin(), plain.end(), e) == plain.end()) out.awakened.push_back(e);
  return out;
}

std::optional<std::string> lambda_warning(double lambda) {
  if (lambda >= kRobustLambdaLow && lambda <= kRobustLambdaHigh) return std::nullopt;
  std::ostringstream os;
  os << "lambda " << lambda << " lies outside the robust regime [" << kRobustLambdaLow << ", " << kRobustLambdaHigh
     << "]; large priors can override the router's context signal";
  return os.str();
}

RoutingPlan build_plan(std::span<const LayerSensitivity> intensity, const ExpertImpactTable& table,
                       const PlanOptions& options, std::vector<std::string>* warnings) {
  const std::size_t layers = intensity.size();
  if (layers == 0) throw InputError("plan needs at least one layer");
  if (table.layers != layers) {
    throw InputError("intensity covers " + std::to_string(layers) + " layers, CEI table covers " +
                     std::to_string(table.layers));
  }
  if (table.cells.size() != table.layers * table.experts) throw InputError("CEI table does not cover every cell");
  for (std::size_t l = 0; l < layers; ++l) {
    if (intensity[l].layer != l) throw InputError("intensity entries must be ordered by layer");
  }
  auto warn = [&](std::string text) {
    if (warnings) warnings->push_back(std::move(text));
  };
  if (auto w = lambda_warning(options.lambda)) warn(*w);

  double largest = 0.0;
  for (const auto& s : intensity)
    if (std::isfinite(s.r)) largest = std::max(largest, s.r);
  const double floor_value = largest > 0.0 ? largest * 1e-6 : 1e-6;
  std::vector<double> r;
  for (const auto& s : intensity) {
    if (s.r > 0.0 && std::isfinite(s.r)) {
      r.push_back(s.r);
    } else {
      warn("layer " + std::to_string(s.layer) + " has non-positive intensity; using the floor value");
      r.push_back(floor_value);
    }
  }

  RoutingPlan plan;
  plan.lambda = options.lambda;
  plan.k_total = options.k_total.value_or(layers * options.k_baseline);
  plan.k_min = options.k_min;
  plan.k_max = std::min(options.k_max.value_or(table.experts), table.experts);
  const std::vector<std::size_t> budgets = allocate_budgets(r, plan.k_total, plan.k_min, plan.k_max);
  std::vector<std::vector<float>> priors = normalize_cei(table);

  double median = 0.0;
  if (options.fuse_high_intensity_only) median = kernels::percentile(r, 50.0);
  for (std::size_t l = 0; l < layers; ++l) {
    if (options.fuse_high_intensity_only && r[l] < median) std::fill(priors[l].begin(), priors[l].end(), 0.0f);
    plan.layers.push_back(PlanLayer{budgets[l], intensity[l].r, std::move(priors[l])});
  }
  return plan;
}

void validate_plan(const RoutingPlan& plan, const ModelConfig& config) {
  if (plan.layers.size() != config.layers) {
    throw InputError("plan has " + std::to_string(plan.layers.size()) + " layers, model has " +
                     std::to_string(config.layers));
  }
  std::size_t sum = 0;
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const PlanLayer& layer = plan.layers[l];
    if (layer.k > config.experts) throw InputError("plan layer " + std::to_string(l) + " selects more than N experts");
    if (layer.prior.size() != config.experts) {
      throw InputError("plan layer " + std::to_string(l) + " prior has the wrong length");
    }
    for (float p : layer.prior)
      if (!(p >= 0.0f && p <= 1.0f)) throw InputError("plan layer " + std::to_string(l) + " prior outside [0, 1]");
    sum += layer.k;
  }
  if (sum != plan.k_total) throw InputError("plan budgets sum to " + std::to_string(sum) + ", not K_total");
}

std::vector<RoutingOverride> plan_overrides(const RoutingPlan& plan) {
  std::vector<RoutingOverride> out;
  for (const PlanLayer& layer : plan.layers) {
    RoutingOverride o;
    o.k = layer.k;
    o.prior = layer.prior;
    o.lambda = static_cast<float>(plan.lambda);
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace cor
