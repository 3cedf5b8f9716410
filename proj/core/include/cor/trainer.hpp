#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cor/model.hpp"

namespace cor {

enum class Optimizer { sgd, adam };

struct TrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  std::size_t seq_len = 32;
  double learning_rate = 3e-3;
  /// Weight alpha of the load-balancing auxiliary loss.
  double aux_weight = 0.01;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::adam;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  /// When max > 0, every step draws each layer's expert count uniformly
  /// from [min, max] instead of using k_baseline.
  std::size_t jitter_k_min = 0;
  std::size_t jitter_k_max = 0;

  void validate() const;
};

/// One training batch: `rows` sequences of seq_len inputs and shifted targets.
struct Batch {
  std::vector<int> inputs;  // packed, rows * seq_len
  std::vector<int> targets;
  std::size_t seq_len = 0;
  /// Per-layer expert counts; empty means k_baseline everywhere.
  std::vector<std::size_t> layer_k;
};

struct LossRecord {
  std::size_t step = 0;
  double lm_loss = 0.0;
  double aux_loss = 0.0;
};

template <typename T>
struct LossAndGradients {
  T lm_loss{};
  T aux_loss{};
  /// One tensor per parameter, BasicModelWeights::for_each order.
  std::vector<BasicTensor<T>> gradients;
};

/// alpha * N * sum_i f_i * P_i for one layer, where f_i is the fraction of
/// token-expert assignments routed to expert i (sums to one over i) and P_i is
/// the mean gate probability of expert i.
double load_balancing_loss(const Tensor& gates, const std::vector<std::vector<std::size_t>>& active, double alpha);

/// Language-model loss plus the layer-averaged auxiliary loss, with
/// gradients. Top-k membership is treated as constant; gradients reach the
/// router only through the selected experts' gate probabilities and the
/// auxiliary term.
template <typename T>
LossAndGradients<T> loss_and_gradients(const BasicMoeModel<T>& model, const Batch& batch, double aux_weight);

/// Loss only, same definition as loss_and_gradients.
template <typename T>
std::pair<T, T> batch_loss(const BasicMoeModel<T>& model, const Batch& batch, double aux_weight);

/// Draws `batch_size` windows that start at document boundaries and run
/// across following documents (wrapping at the end of the list).
Batch sample_batch(std::span<const std::vector<int>> documents, std::size_t batch_size, std::size_t seq_len,
                   std::uint64_t& rng_state);

class Trainer {
 public:
  Trainer(MoeModel model, TrainConfig config);

  /// One optimizer update. Throws NumericError naming the step on NaN/Inf.
  LossRecord train_step(const Batch& batch);

  const MoeModel& model() const noexcept { return model_; }
  MoeModel release() && { return std::move(model_); }
  std::size_t steps_taken() const noexcept { return step_; }

 private:
  MoeModel model_;
  TrainConfig config_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  std::size_t step_ = 0;
};

struct TrainResult {
  MoeModel model;
  std::vector<LossRecord> log;
};

/// Deterministic in (model_config, config, documents). Throws InputError when
/// no document is long enough to provide a training window.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  std::span<const std::vector<int>> documents);

/// Fraction of token-expert assignments each expert receives, per layer,
/// under standard routing over the given documents.
std::vector<std::vector<double>> measure_expert_load(const MoeModel& model, std::span<const std::vector<int>> documents);

}  // namespace cor
