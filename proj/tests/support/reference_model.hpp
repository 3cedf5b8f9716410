#pragma once

// Straight-line scalar reimplementation of the MoE transformer in double
// precision. Shares no code with the library beyond the weight containers,
// so it serves as an independent oracle for forward(), moe_layer_forward()
// and the ablation hooks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "cor/model.hpp"

namespace cor::test {

using Matrix = std::vector<std::vector<double>>;

struct RefOverride {
  std::optional<std::size_t> k;
  std::vector<double> prior;
  double lambda = 0.0;
  /// (position, expert) pairs removed with renormalization over the rest.
  std::vector<std::pair<std::size_t, std::size_t>> ablations;
  double output_scale = 1.0;
};

struct RefLayerTrace {
  Matrix gates;
  std::vector<std::vector<std::size_t>> active;
  Matrix output;
};

struct RefResult {
  Matrix logits;
  std::vector<RefLayerTrace> traces;
};

inline double at(const Tensor64& t, std::size_t r, std::size_t c) { return t.values()[r * t.cols() + c]; }

inline Matrix rms_rows(const Matrix& x, const Tensor64& gain) {
  Matrix out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    double ms = 0.0;
    for (double v : x[r]) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x[r].size()) + 1e-5);
    for (std::size_t c = 0; c < x[r].size(); ++c) out[r][c] = x[r][c] * inv * gain.values()[c];
  }
  return out;
}

inline Matrix times(const Matrix& x, const Tensor64& w) {
  const std::size_t n = w.cols();
  Matrix out(x.size(), std::vector<double>(n, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t i = 0; i < x[r].size(); ++i)
      for (std::size_t c = 0; c < n; ++c) out[r][c] += x[r][i] * at(w, i, c);
  return out;
}

inline std::vector<double> softmax_vec(const std::vector<double>& v) {
  const double peak = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += out[i] = std::exp(v[i] - peak);
  for (double& x : out) x /= z;
  return out;
}

/// Indices of the k largest scores, larger score first, lower index on ties.
inline std::vector<std::size_t> ref_top_k(const std::vector<double>& score, std::size_t k) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(k);
  return idx;
}

inline double silu_ref(double x) { return x / (1.0 + std::exp(-x)); }

inline Matrix ref_moe(const ModelConfig& cfg, const BasicLayerWeights<double>& w, const Matrix& h, const RefOverride& ov,
                      RefLayerTrace* trace) {
  const std::size_t n = cfg.experts, d = cfg.d_model;
  const Matrix x = rms_rows(h, w.moe_norm);
  const Matrix logits = times(x, w.router);
  Matrix out(h.size(), std::vector<double>(d, 0.0));
  for (std::size_t t = 0; t < h.size(); ++t) {
    const std::vector<double> g = softmax_vec(logits[t]);
    std::vector<double> score = g;
    if (!ov.prior.empty())
      for (std::size_t e = 0; e < n; ++e) score[e] += ov.lambda * ov.prior[e];
    std::vector<std::size_t> active = ref_top_k(score, ov.k.value_or(cfg.k_baseline));
    std::vector<double> weight(n, 0.0);
    for (std::size_t e : active) weight[e] = g[e];
    for (const auto& [pos, expert] : ov.ablations) {
      if (pos != t) continue;
      active.erase(std::find(active.begin(), active.end(), expert));
      double rest = 0.0;
      for (std::size_t e : active) rest += g[e];
      std::fill(weight.begin(), weight.end(), 0.0);
      for (std::size_t e : active) weight[e] = g[e] / rest;
    }
    for (std::size_t e : active) {
      std::vector<double> hidden(cfg.d_ff, 0.0);
      for (std::size_t f = 0; f < cfg.d_ff; ++f) {
        for (std::size_t c = 0; c < d; ++c) hidden[f] += x[t][c] * at(w.expert_in[e], c, f);
        hidden[f] = silu_ref(hidden[f]);
      }
      for (std::size_t c = 0; c < d; ++c) {
        double y = 0.0;
        for (std::size_t f = 0; f < cfg.d_ff; ++f) y += hidden[f] * at(w.expert_out[e], f, c);
        out[t][c] += weight[e] * y;
      }
    }
    for (double& v : out[t]) v *= ov.output_scale;
    if (trace) {
      trace->gates.push_back(g);
      trace->active.push_back(active);
    }
  }
  if (trace) trace->output = out;
  Matrix next = h;
  for (std::size_t t = 0; t < h.size(); ++t)
    for (std::size_t c = 0; c < d; ++c) next[t][c] += out[t][c];
  return next;
}

inline RefResult ref_forward(const ModelConfig& cfg, const BasicModelWeights<double>& w, const std::vector<int>& tokens,
                             const std::vector<RefOverride>& overrides = {}) {
  const std::size_t T = tokens.size(), d = cfg.d_model, dh = d / cfg.heads;
  Matrix h(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c)
      h[t][c] = at(w.token_embedding, static_cast<std::size_t>(tokens[t]), c) + at(w.position_embedding, t, c);

  RefResult result;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& lw = w.layers[l];
    const Matrix a = rms_rows(h, lw.attn_norm);
    const Matrix q = times(a, lw.wq), k = times(a, lw.wk), v = times(a, lw.wv);
    Matrix attn(T, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t c0 = head * dh;
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> s(t + 1);
        for (std::size_t j = 0; j <= t; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[t][c0 + c] * k[j][c0 + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        const std::vector<double> p = softmax_vec(s);
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t c = 0; c < dh; ++c) attn[t][c0 + c] += p[j] * v[j][c0 + c];
      }
    }
    const Matrix proj = times(attn, lw.wo);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) h[t][c] += proj[t][c];
    RefLayerTrace trace;
    h = ref_moe(cfg, lw, h, overrides.empty() ? RefOverride{} : overrides[l], &trace);
    result.traces.push_back(std::move(trace));
  }
  result.logits = times(rms_rows(h, w.final_norm), w.lm_head);
  return result;
}

/// Next-token NLL of `target` after the last row of `logits`.
inline double ref_nll(const Matrix& logits, int target) {
  const std::vector<double>& row = logits.back();
  const std::vector<double> p = softmax_vec(row);
  return -std::log(p[static_cast<std::size_t>(target)]);
}

}  // namespace cor::test
