#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cor/tape.hpp"
#include "cor/tensor.hpp"

namespace cor {

/// Hyperparameters of the toy MoE transformer.
struct ModelConfig {
  std::size_t layers = 4;
  std::size_t experts = 16;
  std::size_t k_baseline = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 32;
  std::size_t vocab = 64;
  std::size_t context = 48;
  std::size_t heads = 4;

  /// Throws ConfigError unless 1 <= k_baseline <= experts, heads divides
  /// d_model and every field is positive.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct BasicLayerWeights {
  BasicTensor<T> attn_norm;  // [d]
  BasicTensor<T> wq, wk, wv, wo;  // [d x d]
  BasicTensor<T> moe_norm;  // [d]
  BasicTensor<T> router;  // W_g, [d x N]
  std::vector<BasicTensor<T>> expert_in;  // N x [d x d_ff]
  std::vector<BasicTensor<T>> expert_out;  // N x [d_ff x d]
};

template <typename T>
struct BasicModelWeights {
  BasicTensor<T> token_embedding;  // [V x d]
  BasicTensor<T> position_embedding;  // [context x d]
  std::vector<BasicLayerWeights<T>> layers;
  BasicTensor<T> final_norm;  // [d]
  BasicTensor<T> lm_head;  // [d x V]

  /// Visits every tensor as f(name, tensor) in a fixed order. Checkpoints and
  /// optimizers rely on this order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm", layer.attn_norm);
      f(p + "wq", layer.wq);
      f(p + "wk", layer.wk);
      f(p + "wv", layer.wv);
      f(p + "wo", layer.wo);
      f(p + "moe_norm", layer.moe_norm);
      f(p + "router", layer.router);
      for (std::size_t e = 0; e < layer.expert_in.size(); ++e) {
        f(p + "experts." + std::to_string(e) + ".w_in", layer.expert_in[e]);
        f(p + "experts." + std::to_string(e) + ".w_out", layer.expert_out[e]);
      }
    }
    f(std::string("final_norm"), self.final_norm);
    f(std::string("lm_head"), self.lm_head);
  }
};

/// Removes `expert` from the active set of token `position` and renormalizes
/// the remaining active gates to sum to one.
struct GateAblation {
  std::size_t position = 0;
  std::size_t expert = 0;
};

/// Per-layer routing intervention. A default-constructed override is the
/// standard Top-k_baseline path.
struct RoutingOverride {
  std::optional<std::size_t> k;
  /// Causal prior in [0,1]^N; when non-empty selection uses gate + lambda * prior.
  std::vector<float> prior;
  float lambda = 0.0f;
  std::vector<GateAblation> ablations;
  /// Multiplies the expert-sum output O_l before the residual add.
  float output_scale = 1.0f;
  /// When set, k experts are drawn uniformly at random per token instead.
  std::optional<std::uint64_t> random_seed;
};

struct ForwardOptions {
  /// Empty, or exactly one entry per layer.
  std::vector<RoutingOverride> layers;
  bool capture = false;
};

template <typename T>
struct BasicLayerTrace {
  BasicTensor<T> gates;  // [tokens x N], full softmax
  std::vector<std::vector<std::size_t>> active;  // per token, selection order
  BasicTensor<T> input;  // residual stream entering the MoE sublayer
  BasicTensor<T> output;  // expert-sum term O_l, before the residual add
};

template <typename T>
struct BasicForwardResult {
  BasicTensor<T> logits;  // [tokens x V]
  std::vector<BasicLayerTrace<T>> traces;
  std::size_t expert_invocations = 0;
};

/// Tape handles for every parameter, mirroring BasicModelWeights.
struct LayerVars {
  Var attn_norm, wq, wk, wv, wo, moe_norm, router;
  std::vector<Var> expert_in, expert_out;
};

struct ModelVars {
  Var token_embedding, position_embedding;
  std::vector<LayerVars> layers;
  Var final_norm, lm_head;

  /// Same order as BasicModelWeights::for_each.
  std::vector<Var> flatten() const;
};

/// Graph handles produced while recording a forward pass for training.
struct RecordedForward {
  Var logits;
  std::vector<Var> gate_probs;  // per layer, [rows x N]
  std::vector<std::vector<std::size_t>> expert_counts;  // per layer, tokens routed to each expert
  std::size_t expert_invocations = 0;
};

/// Top-k of gates (plus lambda * prior when a prior is given), ties to the lower index.
template <typename T>
std::vector<std::size_t> select_experts(std::span<const T> gates, std::size_t k, std::span<const float> prior = {},
                                        float lambda = 0.0f);

template <typename T>
class BasicMoeModel {
 public:
  using TensorT = BasicTensor<T>;
  static constexpr T kNormEps = T(1e-5);

  /// Validates config and every weight shape (ConfigError / DimensionError).
  BasicMoeModel(ModelConfig config, BasicModelWeights<T> weights);

  /// Seeded random initialization. Router weights start small and uniform.
  static BasicMoeModel initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const BasicModelWeights<T>& weights() const noexcept { return weights_; }
  BasicModelWeights<T>& weights() noexcept { return weights_; }

  /// softmax(x W_g) for one router input row.
  std::vector<T> gate(std::span<const T> router_input, std::size_t layer) const;

  /// One MoE sublayer over [rows x d] residual-stream input:
  /// h + sum_{i in A} w_i E_i(norm(h)).
  std::pair<TensorT, BasicLayerTrace<T>> moe_layer_forward(const TensorT& h, std::size_t layer,
                                                           const RoutingOverride& override = {}) const;

  /// Causal LM logits for one sequence of at most `context` tokens.
  BasicForwardResult<T> forward(std::span<const int> tokens, const ForwardOptions& options = {}) const;

  ModelVars bind(Tape<T>& tape, bool requires_grad) const;

  /// Records a forward pass over `packed` = sequences of length seq_len laid
  /// end to end. Traces are appended to `traces` when non-null.
  RecordedForward record(Tape<T>& tape, const ModelVars& vars, std::span<const int> packed, std::size_t seq_len,
                         const ForwardOptions& options, std::vector<BasicLayerTrace<T>>* traces = nullptr) const;

  template <typename U>
  BasicMoeModel<U> cast() const {
    BasicModelWeights<U> w;
    w.token_embedding = weights_.token_embedding.template cast<U>();
    w.position_embedding = weights_.position_embedding.template cast<U>();
    for (const auto& layer : weights_.layers) {
      BasicLayerWeights<U> l;
      l.attn_norm = layer.attn_norm.template cast<U>();
      l.wq = layer.wq.template cast<U>();
      l.wk = layer.wk.template cast<U>();
      l.wv = layer.wv.template cast<U>();
      l.wo = layer.wo.template cast<U>();
      l.moe_norm = layer.moe_norm.template cast<U>();
      l.router = layer.router.template cast<U>();
      for (const auto& t : layer.expert_in) l.expert_in.push_back(t.template cast<U>());
      for (const auto& t : layer.expert_out) l.expert_out.push_back(t.template cast<U>());
      w.layers.push_back(std::move(l));
    }
    w.final_norm = weights_.final_norm.template cast<U>();
    w.lm_head = weights_.lm_head.template cast<U>();
    return BasicMoeModel<U>(config_, std::move(w));
  }

 private:
  Var record_moe(Tape<T>& tape, const LayerVars& vars, Var h, std::size_t layer, const RoutingOverride& override, RecordedForward& out,
                 BasicLayerTrace<T>* trace) const;

  ModelConfig config_;
  BasicModelWeights<T> weights_;
};

using MoeModel = BasicMoeModel<float>;
using MoeModel64 = BasicMoeModel<double>;
using LayerTrace = BasicLayerTrace<float>;
using ForwardResult = BasicForwardResult<float>;
using ModelWeights = BasicModelWeights<float>;

extern template class BasicMoeModel<float>;
extern template class BasicMoeModel<double>;

}  // namespace cor
