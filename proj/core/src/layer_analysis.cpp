#include "cor/layer_analysis.hpp"

#include <numeric>
#include <string>

#include "cor/parallel.hpp"

namespace cor {
namespace {

double mean(std::span<const double> values) {
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

void check_layer(const MoeModel& model, std::size_t layer) {
  if (layer >= model.config().layers) {
    throw IndexError("layer " + std::to_string(layer) + " out of range for a " +
                     std::to_string(model.config().layers) + "-layer model");
  }
}

}  // namespace

double knowledge_intensity(double s_hard, double s_easy, double epsilon) { return s_hard / (s_easy + epsilon); }

std::vector<double> loss_degradations(const MoeModel& model, std::span<const TokenRecord> records, std::size_t layer,
                                      double delta) {
  check_layer(model, layer);
  ForwardOptions perturbed;
  perturbed.layers.resize(model.config().layers);
  perturbed.layers[layer].output_scale = static_cast<float>(1.0 + delta);
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    const double base = token_loss(model, rec.context, rec.token);
    out.push_back(token_loss(model, rec.context, rec.token, perturbed) - base);
  }
  return out;
}

double perturb_and_measure(const MoeModel& model, std::span<const TokenRecord> records, std::size_t layer,
                           double delta) {
  if (records.empty()) throw InputError("perturb_and_measure needs at least one record");
  const std::vector<double> d = loss_degradations(model, records, layer, delta);
  return mean(d);
}

std::vector<LayerSensitivity> rki(const MoeModel& model, const StratifiedSets& sets, double delta, double epsilon,
                                  std::size_t threads) {
  if (sets.hard.empty() || sets.easy.empty()) {
    throw StratificationError("knowledge intensity needs non-empty hard and easy sets (hard " +
                              std::to_string(sets.hard.size()) + ", easy " + std::to_string(sets.easy.size()) + ")");
  }
  // One pass per layer over hard followed by easy records.
  std::vector<TokenRecord> all(sets.hard);
  all.insert(all.end(), sets.easy.begin(), sets.easy.end());
  const std::size_t n_hard = sets.hard.size();

  std::vector<LayerSensitivity> out(model.config().layers);
  parallel_for(out.size(), threads, [&](std::size_t l) {
    const std::vector<double> d = loss_degradations(model, all, l, delta);
    LayerSensitivity& s = out[l];
    s.layer = l;
    s.n_hard = n_hard;
    s.n_easy = all.size() - n_hard;
    s.s_hard = mean(std::span<const double>(d.data(), n_hard));
    s.s_easy = mean(std::span<const double>(d.data() + n_hard, s.n_easy));
    s.r = knowledge_intensity(s.s_hard, s.s_easy, epsilon);
  });
  return out;
}

}  // namespace cor
