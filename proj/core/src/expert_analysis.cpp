#include "cor/expert_analysis.hpp"

#include <algorithm>
#include <string>

#include "cor/kernels.hpp"
#include "cor/parallel.hpp"

namespace cor {
namespace {

struct Sample {
  std::size_t layer;
  std::size_t expert;
  double gain;
  double gate;
};

ForwardOptions ablation_options(const MoeModel& model, std::size_t position, std::size_t layer, std::size_t expert) {
  ForwardOptions options;
  options.layers.resize(model.config().layers);
  options.layers[layer].ablations.push_back(GateAblation{position, expert});
  return options;
}

}  // namespace

std::vector<double> ExpertImpactTable::layer_cei(std::size_t layer) const {
  std::vector<double> out;
  for (std::size_t e = 0; e < experts; ++e) {
    const ExpertImpact& c = at(layer, e);
    out.push_back(c.defined ? c.cei : 0.0);
  }
  return out;
}

std::vector<float> ablate_gates(std::span<const float> gates, std::span<const std::size_t> active, std::size_t expert) {
  if (std::find(active.begin(), active.end(), expert) == active.end()) {
    throw NotActivatedError("expert " + std::to_string(expert) + " is not in the active set");
  }
  if (active.size() < 2) throw AblationDegenerateError("ablating the only active expert leaves no experts");
  double remaining = 0.0;
  for (std::size_t j : active) {
    if (j >= gates.size()) throw IndexError("active index out of range");
    if (j != expert) remaining += gates[j];
  }
  std::vector<float> out(gates.begin(), gates.end());
  for (std::size_t j : active) out[j] = j == expert ? 0.0f : static_cast<float>(gates[j] / remaining);
  return out;
}

double rescue_gain(const MoeModel& model, const TokenRecord& record, std::size_t layer, std::size_t expert) {
  if (layer >= model.config().layers) throw IndexError("layer " + std::to_string(layer) + " out of range");
  if (record.context.empty()) throw InputError("record has an empty context");
  const double base = token_loss(model, record.context, record.token);
  const double ablated =
      token_loss(model, record.context, record.token, ablation_options(model, record.context.size() - 1, layer, expert));
  return ablated - base;
}

ExpertImpactTable compute_cei(const MoeModel& model, std::span<const TokenRecord> hard, std::size_t threads) {
  if (hard.empty()) throw StratificationError("CEI needs a non-empty hard set");
  const std::size_t layers = model.config().layers, experts = model.config().experts;

  std::vector<std::vector<Sample>> samples(hard.size());
  std::vector<std::size_t> skips(hard.size(), 0);
  parallel_for(hard.size(), threads, [&](std::size_t i) {
    const TokenRecord& rec = hard[i];
    if (rec.context.empty()) throw InputError("record has an empty context");
    ForwardOptions capture;
    capture.capture = true;
    const ForwardResult factual = model.forward(rec.context, capture);
    const std::size_t last = rec.context.size() - 1;
    const int target[] = {rec.token};
    const Tensor last_row =
        Tensor::matrix(1, factual.logits.cols(),
                       std::vector<float>(factual.logits.row(last).begin(), factual.logits.row(last).end()));
    const double base = kernels::cross_entropy_nll(last_row, target)[0];
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& active = factual.traces[l].active[last];
      for (std::size_t e : active) {
        if (active.size() < 2) {
          ++skips[i];
          continue;
        }
        const double ablated = token_loss(model, rec.context, rec.token, ablation_options(model, last, l, e));
        samples[i].push_back(Sample{l, e, ablated - base, static_cast<double>(factual.traces[l].gates(last, e))});
      }
    }
  });

  ExpertImpactTable table;
  table.layers = layers;
  table.experts = experts;
  table.cells.resize(layers * experts);
  std::vector<double> gain_sum(layers * experts, 0.0), gate_sum(layers * experts, 0.0);
  for (std::size_t i = 0; i < hard.size(); ++i) {
    table.degenerate_skips += skips[i];
    for (const Sample& s : samples[i]) {
      const std::size_t c = s.layer * experts + s.expert;
      gain_sum[c] += s.gain;
      gate_sum[c] += s.gate;
      table.cells[c].n_active += 1;
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t e = 0; e < experts; ++e) {
      ExpertImpact& cell = table.cells[l * experts + e];
      cell.layer = l;
      cell.expert = e;
      cell.defined = cell.n_active > 0;
      if (cell.defined) {
        cell.cei = gain_sum[l * experts + e] / static_cast<double>(cell.n_active);
        cell.mean_gate = gate_sum[l * experts + e] / static_cast<double>(cell.n_active);
      }
    }
  }
  return table;
}

}  // namespace cor
