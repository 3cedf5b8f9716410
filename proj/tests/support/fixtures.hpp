#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cor/calibration.hpp"
#include "cor/model.hpp"

namespace cor::test {

inline ModelConfig small_config(std::size_t layers = 2, std::size_t experts = 4, std::size_t d = 8) {
  ModelConfig c;
  c.layers = layers;
  c.experts = experts;
  c.k_baseline = 2;
  c.d_model = d;
  c.d_ff = d;
  c.vocab = 11;
  c.context = 16;
  c.heads = 2;
  return c;
}

/// Seeded model whose router weights are redrawn at `router_std` so gates
/// are far from uniform and Top-k choices are well separated.
template <typename T = float>
BasicMoeModel<T> random_model(const ModelConfig& config, std::uint64_t seed, double router_std = 1.0) {
  BasicMoeModel<T> model = BasicMoeModel<T>::initialize(config, seed);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> dist(0.0, router_std);
  for (auto& layer : model.weights().layers)
    for (auto& v : layer.router.values()) v = static_cast<T>(dist(rng));
  return model;
}

inline std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
  std::vector<int> out(n);
  for (int& t : out) t = pick(rng);
  return out;
}

/// Records whose context is a random sequence and whose target follows it.
inline std::vector<TokenRecord> random_records(std::size_t n, const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(1, config.context - 1);
  std::vector<TokenRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenRecord r;
    r.doc = i;
    r.context = random_tokens(len(rng), config.vocab, seed * 31 + i);
    r.position = r.context.size();
    r.token = random_tokens(1, config.vocab, seed * 77 + i)[0];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cor::test
