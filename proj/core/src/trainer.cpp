#include "cor/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "cor/kernels.hpp"

namespace cor {
namespace {

std::uint64_t next_random(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
struct RecordedLoss {
  Var lm;
  Var aux;
  Var total;
};

template <typename T>
RecordedLoss<T> record_loss(Tape<T>& tape, const BasicMoeModel<T>& model, const ModelVars& vars, const Batch& batch,
                            double aux_weight) {
  ForwardOptions options;
  if (!batch.layer_k.empty()) {
    options.layers.resize(batch.layer_k.size());
    for (std::size_t l = 0; l < batch.layer_k.size(); ++l) options.layers[l].k = batch.layer_k[l];
  }
  const RecordedForward rec = model.record(tape, vars, batch.inputs, batch.seq_len, options);
  RecordedLoss<T> out;
  out.lm = tape.mean(tape.cross_entropy(rec.logits, batch.targets));

  const std::size_t layers = rec.gate_probs.size();
  const std::size_t n = model.config().experts;
  Var aux;
  for (std::size_t l = 0; l < layers; ++l) {
    std::size_t routed = 0;
    for (std::size_t c : rec.expert_counts[l]) routed += c;
    const double assignments = static_cast<double>(std::max<std::size_t>(routed, 1));
    // Constant weights alpha * N * f_i / L against the column-mean gate probabilities.
    std::vector<T> weights(n);
    for (std::size_t e = 0; e < n; ++e) {
      const double f = static_cast<double>(rec.expert_counts[l][e]) / assignments;
      weights[e] = static_cast<T>(aux_weight * static_cast<double>(n) * f / static_cast<double>(layers));
    }
    Var term = tape.weighted_sum(tape.column_mean(rec.gate_probs[l]), std::move(weights));
    aux = aux.valid() ? tape.add(aux, term) : term;
  }
  out.aux = aux;
  out.total = tape.add(out.lm, aux);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0 || seq_len == 0) throw ConfigError("train config: batch size and sequence length must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning rate must be positive");
  if (!(aux_weight >= 0.0)) throw ConfigError("train config: aux weight must be non-negative");
  if (!(grad_clip >= 0.0)) throw ConfigError("train config: grad clip must be non-negative");
  if (jitter_k_max > 0 && jitter_k_min > jitter_k_max) throw ConfigError("train config: jitter range is empty");
}

double load_balancing_loss(const Tensor& gates, const std::vector<std::vector<std::size_t>>& active, double alpha) {
  const std::size_t rows = gates.rows(), n = gates.cols();
  if (active.size() != rows) throw DimensionError("load_balancing_loss: active sets do not match gate rows");
  std::vector<double> f(n, 0.0), p(n, 0.0);
  std::size_t assignments = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t e : active[r]) f.at(e) += 1.0;
    assignments += active[r].size();
    for (std::size_t e = 0; e < n; ++e) p[e] += gates(r, e);
  }
  if (assignments == 0 || rows == 0) return 0.0;
  double total = 0.0;
  for (std::size_t e = 0; e < n; ++e) {
    total += (f[e] / static_cast<double>(assignments)) * (p[e] / static_cast<double>(rows));
  }
  return alpha * static_cast<double>(n) * total;
}

template <typename T>
LossAndGradients<T> loss_and_gradients(const BasicMoeModel<T>& model, const Batch& batch, double aux_weight) {
  Tape<T> tape(true);
  const ModelVars vars = model.bind(tape, true);
  const RecordedLoss<T> loss = record_loss(tape, model, vars, batch, aux_weight);
  tape.backward(loss.total);
  LossAndGradients<T> out;
  out.lm_loss = tape.value(loss.lm)[0];
  out.aux_loss = tape.value(loss.aux)[0];
  for (Var v : vars.flatten()) out.gradients.push_back(tape.grad(v));
  return out;
}

template <typename T>
std::pair<T, T> batch_loss(const BasicMoeModel<T>& model, const Batch& batch, double aux_weight) {
  Tape<T> tape(false);
  const ModelVars vars = model.bind(tape, false);
  const RecordedLoss<T> loss = record_loss(tape, model, vars, batch, aux_weight);
  return {tape.value(loss.lm)[0], tape.value(loss.aux)[0]};
}

Batch sample_batch(std::span<const std::vector<int>> documents, std::size_t batch_size, std::size_t seq_len,
                   std::uint64_t& rng_state) {
  std::size_t total = 0;
  for (const auto& doc : documents) total += doc.size();
  if (documents.empty() || total < seq_len + 1) {
    throw InputError("corpus holds " + std::to_string(total) + " tokens, need at least " + std::to_string(seq_len + 1));
  }
  Batch batch;
  batch.seq_len = seq_len;
  batch.inputs.reserve(batch_size * seq_len);
  batch.targets.reserve(batch_size * seq_len);
  std::vector<int> window;
  for (std::size_t b = 0; b < batch_size; ++b) {
    std::size_t d = static_cast<std::size_t>(next_random(rng_state) % documents.size());
    window.clear();
    while (window.size() < seq_len + 1) {
      const auto& doc = documents[d];
      const std::size_t take = std::min(doc.size(), seq_len + 1 - window.size());
      window.insert(window.end(), doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(take));
      d = (d + 1) % documents.size();
    }
    batch.inputs.insert(batch.inputs.end(), window.begin(), window.end() - 1);
    batch.targets.insert(batch.targets.end(), window.begin() + 1, window.end());
  }
  return batch;
}

Trainer::Trainer(MoeModel model, TrainConfig config) : model_(std::move(model)), config_(config) {
  config_.validate();
  model_.weights().for_each([&](const std::string&, const Tensor& t) {
    first_moment_.emplace_back(t.shape());
    second_moment_.emplace_back(t.shape());
  });
}

LossRecord Trainer::train_step(const Batch& batch) {
  LossAndGradients<float> lg;
  try {
    lg = loss_and_gradients(model_, batch, config_.aux_weight);
  } catch (const NumericError& e) {
    throw NumericError("training step " + std::to_string(step_) + ": " + e.what());
  }
  ++step_;

  double norm_sq = 0.0;
  for (const auto& g : lg.gradients)
    for (float v : g.values()) norm_sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(norm_sq);
  if (!std::isfinite(norm)) throw NumericError("training step " + std::to_string(step_ - 1) + ": non-finite gradient");
  const float clip = (config_.grad_clip > 0.0 && norm > config_.grad_clip)
                         ? static_cast<float>(config_.grad_clip / norm)
                         : 1.0f;

  const float lr = static_cast<float>(config_.learning_rate);
  constexpr float beta1 = 0.9f, beta2 = 0.99f, eps = 1e-8f;
  const float correction1 = 1.0f - std::pow(beta1, static_cast<float>(step_));
  const float correction2 = 1.0f - std::pow(beta2, static_cast<float>(step_));
  std::size_t index = 0;
  model_.weights().for_each([&](const std::string&, Tensor& w) {
    const Tensor& g = lg.gradients[index];
    Tensor& m = first_moment_[index];
    Tensor& v = second_moment_[index];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g[i] * clip;
      if (config_.optimizer == Optimizer::sgd) {
        w[i] -= lr * gi;
        continue;
      }
      m[i] = beta1 * m[i] + (1.0f - beta1) * gi;
      v[i] = beta2 * v[i] + (1.0f - beta2) * gi * gi;
      w[i] -= lr * (m[i] / correction1) / (std::sqrt(v[i] / correction2) + eps);
    }
    ++index;
  });
  return LossRecord{step_ - 1, static_cast<double>(lg.lm_loss), static_cast<double>(lg.aux_loss)};
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  std::span<const std::vector<int>> documents) {
  config.validate();
  if (documents.empty()) throw InputError("training corpus is empty");
  if (config.seq_len > model_config.context) throw ConfigError("train seq_len exceeds model context");
  if (config.jitter_k_max > model_config.experts) throw ConfigError("train jitter range exceeds the expert count");
  for (const auto& doc : documents)
    for (int id : doc)
      if (id < 0 || static_cast<std::size_t>(id) >= model_config.vocab) {
        throw InputError("corpus token id " + std::to_string(id) + " outside the model vocabulary");
      }

  Trainer trainer(MoeModel::initialize(model_config, config.seed), config);
  std::uint64_t rng_state = config.seed * 0x2545f4914f6cdd1dULL + 17;
  std::vector<LossRecord> log;
  log.reserve(config.steps);
  for (std::size_t s = 0; s < config.steps; ++s) {
    Batch batch = sample_batch(documents, config.batch_size, config.seq_len, rng_state);
    if (config.jitter_k_max > 0) {
      const std::size_t span = config.jitter_k_max - config.jitter_k_min + 1;
      for (std::size_t l = 0; l < model_config.layers; ++l) {
        batch.layer_k.push_back(config.jitter_k_min + static_cast<std::size_t>(next_random(rng_state) % span));
      }
    }
    log.push_back(trainer.train_step(batch));
  }
  return TrainResult{std::move(trainer).release(), std::move(log)};
}

std::vector<std::vector<double>> measure_expert_load(const MoeModel& model,
                                                     std::span<const std::vector<int>> documents) {
  const auto& cfg = model.config();
  std::vector<std::vector<double>> load(cfg.layers, std::vector<double>(cfg.experts, 0.0));
  std::vector<double> assignments(cfg.layers, 0.0);
  ForwardOptions options;
  options.capture = true;
  for (const auto& doc : documents) {
    if (doc.empty()) continue;
    const std::size_t len = std::min(doc.size(), cfg.context);
    const auto result = model.forward(std::span<const int>(doc.data(), len), options);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (const auto& set : result.traces[l].active) {
        for (std::size_t e : set) load[l][e] += 1.0;
        assignments[l] += static_cast<double>(set.size());
      }
    }
  }
  for (std::size_t l = 0; l < cfg.layers; ++l)
    if (assignments[l] > 0.0)
      for (auto& v : load[l]) v /= assignments[l];
  return load;
}

template LossAndGradients<float> loss_and_gradients<float>(const BasicMoeModel<float>&, const Batch&, double);
template LossAndGradients<double> loss_and_gradients<double>(const BasicMoeModel<double>&, const Batch&, double);
template std::pair<float, float> batch_loss<float>(const BasicMoeModel<float>&, const Batch&, double);
template std::pair<double, double> batch_loss<double>(const BasicMoeModel<double>&, const Batch&, double);

}  // namespace cor
