#include "cor/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "cor/kernels.hpp"

namespace cor {
namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<std::size_t> random_experts(std::uint64_t seed, std::size_t layer, std::size_t row, std::size_t experts,
                                        std::size_t k) {
  std::mt19937_64 rng(mix64(seed ^ mix64(layer * 0x100000001b3ULL + row)));
  std::vector<std::size_t> order(experts);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates; only the first k slots matter.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, experts - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(k);
  return order;
}

template <typename T>
void require_shape(const BasicTensor<T>& t, const Shape& expected, const std::string& name) {
  if (t.shape() != expected) {
    throw DimensionError("weight '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                         shape_string(expected));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (layers == 0 || experts == 0 || d_model == 0 || d_ff == 0 || vocab == 0 || context == 0 || heads == 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (k_baseline < 1 || k_baseline > experts) {
    throw ConfigError("model config: k_baseline must lie in [1, experts]");
  }
  if (d_model % heads != 0) throw ConfigError("model config: d_model must be divisible by heads");
}

std::vector<Var> ModelVars::flatten() const {
  std::vector<Var> out{token_embedding, position_embedding};
  for (const auto& l : layers) {
    for (Var v : {l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.moe_norm, l.router}) out.push_back(v);
    for (std::size_t e = 0; e < l.expert_in.size(); ++e) {
      out.push_back(l.expert_in[e]);
      out.push_back(l.expert_out[e]);
    }
  }
  out.push_back(final_norm);
  out.push_back(lm_head);
  return out;
}

template <typename T>
std::vector<std::size_t> select_experts(std::span<const T> gates, std::size_t k, std::span<const float> prior,
                                        float lambda) {
  if (prior.empty()) return kernels::top_k(gates, k);
  if (prior.size() != gates.size()) {
    throw DimensionError("routing prior has " + std::to_string(prior.size()) + " entries for " +
                         std::to_string(gates.size()) + " experts");
  }
  std::vector<T> score(gates.size());
  for (std::size_t i = 0; i < gates.size(); ++i) score[i] = gates[i] + static_cast<T>(lambda) * static_cast<T>(prior[i]);
  return kernels::top_k<T>(score, k);
}

template <typename T>
BasicMoeModel<T>::BasicMoeModel(ModelConfig config, BasicModelWeights<T> weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const std::size_t d = config_.d_model, n = config_.experts;
  require_shape(weights_.token_embedding, {config_.vocab, d}, "token_embedding");
  require_shape(weights_.position_embedding, {config_.context, d}, "position_embedding");
  if (weights_.layers.size() != config_.layers) throw DimensionError("weights hold a different number of layers");
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto& layer = weights_.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    require_shape(layer.attn_norm, {d}, p + "attn_norm");
    for (const auto* w : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) require_shape(*w, {d, d}, p + "attention");
    require_shape(layer.moe_norm, {d}, p + "moe_norm");
    require_shape(layer.router, {d, n}, p + "router");
    if (layer.expert_in.size() != n || layer.expert_out.size() != n) {
      throw DimensionError(p + "experts: expected " + std::to_string(n) + " experts");
    }
    for (std::size_t e = 0; e < n; ++e) {
      require_shape(layer.expert_in[e], {d, config_.d_ff}, p + "w_in");
      require_shape(layer.expert_out[e], {config_.d_ff, d}, p + "w_out");
    }
  }
  require_shape(weights_.final_norm, {d}, "final_norm");
  require_shape(weights_.lm_head, {d, config_.vocab}, "lm_head");
}

template <typename T>
BasicMoeModel<T> BasicMoeModel<T>::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  auto normal = [&](Shape shape, double stddev) {
    BasicTensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
  };
  auto ones = [](std::size_t n) { return BasicTensor<T>({n}, T{1}); };
  const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layers));

  BasicModelWeights<T> w;
  w.token_embedding = normal({config.vocab, d}, 0.5);
  w.position_embedding = normal({config.context, d}, 0.1);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BasicLayerWeights<T> layer;
    layer.attn_norm = ones(d);
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    layer.wq = normal({d, d}, in_std);
    layer.wk = normal({d, d}, in_std);
    layer.wv = normal({d, d}, in_std);
    layer.wo = normal({d, d}, in_std * depth_scale);
    layer.moe_norm = ones(d);
    layer.router = BasicTensor<T>({d, config.experts});
    std::uniform_real_distribution<double> small(-0.01, 0.01);
    for (auto& v : layer.router.values()) v = static_cast<T>(small(rng));
    for (std::size_t e = 0; e < config.experts; ++e) {
      layer.expert_in.push_back(normal({d, config.d_ff}, in_std));
      layer.expert_out.push_back(normal({config.d_ff, d}, depth_scale / std::sqrt(static_cast<double>(config.d_ff))));
    }
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = ones(d);
  w.lm_head = normal({d, config.vocab}, 1.0 / std::sqrt(static_cast<double>(d)));
  return BasicMoeModel(config, std::move(w));
}

template <typename T>
std::vector<T> BasicMoeModel<T>::gate(std::span<const T> router_input, std::size_t layer) const {
  if (layer >= config_.layers) throw IndexError("gate: layer " + std::to_string(layer) + " out of range");
  if (router_input.size() != config_.d_model) throw DimensionError("gate: input width does not match d_model");
  const auto& router = weights_.layers[layer].router;
  std::vector<T> logits(config_.experts, T{});
  for (std::size_t c = 0; c < config_.d_model; ++c)
    for (std::size_t e = 0; e < config_.experts; ++e) logits[e] += router_input[c] * router(c, e);
  return kernels::softmax<T>(logits);
}

template <typename T>
ModelVars BasicMoeModel<T>::bind(Tape<T>& tape, bool requires_grad) const {
  ModelVars vars;
  vars.token_embedding = tape.parameter(weights_.token_embedding, requires_grad);
  vars.position_embedding = tape.parameter(weights_.position_embedding, requires_grad);
  for (const auto& layer : weights_.layers) {
    LayerVars lv;
    lv.attn_norm = tape.parameter(layer.attn_norm, requires_grad);
    lv.wq = tape.parameter(layer.wq, requires_grad);
    lv.wk = tape.parameter(layer.wk, requires_grad);
    lv.wv = tape.parameter(layer.wv, requires_grad);
    lv.wo = tape.parameter(layer.wo, requires_grad);
    lv.moe_norm = tape.parameter(layer.moe_norm, requires_grad);
    lv.router = tape.parameter(layer.router, requires_grad);
    for (std::size_t e = 0; e < layer.expert_in.size(); ++e) {
      lv.expert_in.push_back(tape.parameter(layer.expert_in[e], requires_grad));
      lv.expert_out.push_back(tape.parameter(layer.expert_out[e], requires_grad));
    }
    vars.layers.push_back(std::move(lv));
  }
  vars.final_norm = tape.parameter(weights_.final_norm, requires_grad);
  vars.lm_head = tape.parameter(weights_.lm_head, requires_grad);
  return vars;
}

template <typename T>
Var BasicMoeModel<T>::record_moe(Tape<T>& tape, const LayerVars& vars, Var h, std::size_t layer, const RoutingOverride& override, RecordedForward& out,
                                 BasicLayerTrace<T>* trace) const {
  const std::size_t n = config_.experts;
  const std::size_t k = override.k.value_or(config_.k_baseline);
  if (k > n) {
    throw ConfigError("layer " + std::to_string(layer) + ": k=" + std::to_string(k) + " exceeds " +
                      std::to_string(n) + " experts");
  }
  if (!override.prior.empty() && override.prior.size() != n) {
    throw ConfigError("layer " + std::to_string(layer) + ": prior length does not match expert count");
  }

  Var x = tape.rms_norm(h, vars.moe_norm, kNormEps);
  Var probs = tape.softmax_rows(tape.matmul(x, vars.router));
  // Valid only until the next op is recorded.
  const TensorT& pv = tape.value(probs);
  const std::size_t rows = pv.rows();

  std::vector<std::vector<std::size_t>> active(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (override.random_seed) {
      active[r] = random_experts(*override.random_seed, layer, r, n, k);
    } else {
      active[r] = select_experts<T>(pv.row(r), k, override.prior, override.lambda);
    }
  }

  // Virtual ablation: drop the expert, renormalize the remaining active mass.
  std::vector<T> factor(rows, T{1});
  for (const auto& ab : override.ablations) {
    if (ab.position >= rows) {
      throw IndexError("ablation position " + std::to_string(ab.position) + " out of range");
    }
    auto& set = active[ab.position];
    auto it = std::find(set.begin(), set.end(), ab.expert);
    if (it == set.end()) {
      throw NotActivatedError("expert " + std::to_string(ab.expert) + " is not active at layer " +
                              std::to_string(layer) + ", position " + std::to_string(ab.position));
    }
    if (set.size() < 2) {
      throw AblationDegenerateError("ablating expert " + std::to_string(ab.expert) + " at layer " +
                                    std::to_string(layer) + " leaves no active experts");
    }
    set.erase(it);
    T remaining{};
    for (std::size_t j : set) remaining += pv(ab.position, j);
    factor[ab.position] = T{1} / remaining;
  }

  std::vector<std::vector<std::size_t>> rows_for(n);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t e : active[r]) rows_for[e].push_back(r);

  std::vector<std::size_t> counts(n);
  Var sum;
  for (std::size_t e = 0; e < n; ++e) {
    const auto& idx = rows_for[e];
    counts[e] = idx.size();
    if (idx.empty()) continue;
    std::vector<Cell> cells;
    cells.reserve(idx.size());
    bool renormalized = false;
    std::vector<T> scale(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      cells.push_back({idx[i], e});
      scale[i] = factor[idx[i]];
      renormalized = renormalized || scale[i] != T{1};
    }
    Var xe = tape.gather_rows(x, idx);
    Var ye = tape.matmul(tape.silu(tape.matmul(xe, vars.expert_in[e])), vars.expert_out[e]);
    Var we = tape.gather_elements(probs, std::move(cells));
    if (renormalized) we = tape.mul(we, tape.constant(TensorT({idx.size(), 1}, std::move(scale))));
    Var part = tape.scatter_rows(tape.scale_rows(ye, we), idx, rows);
    sum = sum.valid() ? tape.add(sum, part) : part;
  }
  if (!sum.valid()) sum = tape.constant(TensorT({rows, config_.d_model}));
  if (override.output_scale != 1.0f) sum = tape.scale(sum, static_cast<T>(override.output_scale));

  std::size_t invocations = 0;
  for (const auto& set : active) invocations += set.size();
  out.expert_invocations += invocations;
  out.gate_probs.push_back(probs);
  out.expert_counts.push_back(std::move(counts));

  if (trace) {
    trace->gates = tape.value(probs);
    trace->active = std::move(active);
    trace->input = tape.value(h);
    trace->output = tape.value(sum);
  }
  return tape.add(h, sum);
}

template <typename T>
RecordedForward BasicMoeModel<T>::record(Tape<T>& tape, const ModelVars& vars, std::span<const int> packed,
                                         std::size_t seq_len, const ForwardOptions& options,
                                         std::vector<BasicLayerTrace<T>>* traces) const {
  if (seq_len == 0 || seq_len > config_.context) {
    throw InputError("sequence length " + std::to_string(seq_len) + " outside [1, " +
                     std::to_string(config_.context) + "]");
  }
  if (packed.empty() || packed.size() % seq_len != 0) {
    throw InputError("packed token count is not a positive multiple of the sequence length");
  }
  if (!options.layers.empty() && options.layers.size() != config_.layers) {
    throw ConfigError("routing overrides given for " + std::to_string(options.layers.size()) + " of " +
                      std::to_string(config_.layers) + " layers");
  }
  std::vector<int> positions(packed.size());
  for (std::size_t i = 0; i < packed.size(); ++i) positions[i] = static_cast<int>(i % seq_len);

  RecordedForward out;
  Var h = tape.add(tape.embedding(vars.token_embedding, packed), tape.embedding(vars.position_embedding, positions));
  static const RoutingOverride kStandard{};
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const LayerVars& lv = vars.layers[l];
    Var a = tape.rms_norm(h, lv.attn_norm, kNormEps);
    Var attn = tape.causal_attention(tape.matmul(a, lv.wq), tape.matmul(a, lv.wk), tape.matmul(a, lv.wv),
                                     config_.heads, seq_len);
    h = tape.add(h, tape.matmul(attn, lv.wo));
    BasicLayerTrace<T>* trace = nullptr;
    if (traces) {
      traces->emplace_back();
      trace = &traces->back();
    }
    const RoutingOverride& ov = options.layers.empty() ? kStandard : options.layers[l];
    h = record_moe(tape, lv, h, l, ov, out, trace);
  }
  out.logits = tape.matmul(tape.rms_norm(h, vars.final_norm, kNormEps), vars.lm_head);
  return out;
}

template <typename T>
BasicForwardResult<T> BasicMoeModel<T>::forward(std::span<const int> tokens, const ForwardOptions& options) const {
  Tape<T> tape(false);
  const ModelVars vars = bind(tape, false);
  BasicForwardResult<T> result;
  RecordedForward rec =
      record(tape, vars, tokens, tokens.size(), options, options.capture ? &result.traces : nullptr);
  result.logits = tape.value(rec.logits);
  result.expert_invocations = rec.expert_invocations;
  return result;
}

template <typename T>
std::pair<BasicTensor<T>, BasicLayerTrace<T>> BasicMoeModel<T>::moe_layer_forward(const TensorT& h, std::size_t layer,
                                                                                const RoutingOverride& override) const {
  if (layer >= config_.layers) throw IndexError("moe_layer_forward: layer " + std::to_string(layer) + " out of range");
  if (h.cols() != config_.d_model) throw DimensionError("moe_layer_forward: input width does not match d_model");
  Tape<T> tape(false);
  const ModelVars vars = bind(tape, false);
  TensorT input = h.rank() == 2 ? h : TensorT({1, h.size()}, h.values());
  Var hv = tape.constant(std::move(input));
  RecordedForward rec;
  BasicLayerTrace<T> trace;
  Var out = record_moe(tape, vars.layers[layer], hv, layer, override, rec, &trace);
  TensorT result = tape.value(out);
  if (h.rank() == 1) result = TensorT({result.size()}, result.values());
  return {std::move(result), std::move(trace)};
}

template std::vector<std::size_t> select_experts<float>(std::span<const float>, std::size_t, std::span<const float>,
                                                        float);
template std::vector<std::size_t> select_experts<double>(std::span<const double>, std::size_t, std::span<const float>,
                                                         float);
template class BasicMoeModel<float>;
template class BasicMoeModel<double>;

}  // namespace cor
