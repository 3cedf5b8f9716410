#include <benchmark/benchmark.h>

#include <random>

#include "cor/kernels.hpp"
#include "cor/model.hpp"

namespace {

cor::Tensor random_tensor(cor::Shape shape, std::uint64_t seed) {
  cor::Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const cor::Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(cor::kernels::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64);

void BM_SoftmaxRows(benchmark::State& state) {
  const cor::Tensor x = random_tensor({48, static_cast<std::size_t>(state.range(0))}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(cor::kernels::softmax(x, 1));
}
BENCHMARK(BM_SoftmaxRows)->Arg(16)->Arg(64);

void BM_TopK(benchmark::State& state) {
  const cor::Tensor x = random_tensor({static_cast<std::size_t>(state.range(0))}, 4);
  const std::span<const float> values(x.values());
  for (auto _ : state) benchmark::DoNotOptimize(cor::kernels::top_k(values, 2));
}
BENCHMARK(BM_TopK)->Arg(16)->Arg(64);

void BM_MoeLayer(benchmark::State& state) {
  cor::ModelConfig cfg;
  cfg.k_baseline = static_cast<std::size_t>(state.range(0));
  const cor::MoeModel model = cor::MoeModel::initialize(cfg, 5);
  const cor::Tensor h = random_tensor({cfg.context, cfg.d_model}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(model.moe_layer_forward(h, 0));
}
BENCHMARK(BM_MoeLayer)->Arg(1)->Arg(2)->Arg(4);

void BM_Forward(benchmark::State& state) {
  const cor::ModelConfig cfg;
  const cor::MoeModel model = cor::MoeModel::initialize(cfg, 7);
  std::vector<int> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i % cfg.vocab);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(8)->Arg(48);

}  // namespace
