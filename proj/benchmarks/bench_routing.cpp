#include <benchmark/benchmark.h>

#include <random>

#include "cor/expert_analysis.hpp"
#include "cor/router.hpp"

namespace {

void BM_AllocateBudgets(benchmark::State& state) {
  const auto layers = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> dist(0.01, 10.0);
  std::vector<double> r(layers);
  for (double& v : r) v = dist(rng);
  for (auto _ : state) benchmark::DoNotOptimize(cor::allocate_budgets(r, 2 * layers, 1, 8));
}
BENCHMARK(BM_AllocateBudgets)->Arg(4)->Arg(32)->Arg(256);

void BM_FusedSelect(benchmark::State& state) {
  const auto experts = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> gates(experts), prior(experts);
  for (float& g : gates) g = dist(rng);
  for (float& p : prior) p = dist(rng);
  for (auto _ : state) benchmark::DoNotOptimize(cor::fused_select(gates, prior, 0.1f, 2));
}
BENCHMARK(BM_FusedSelect)->Arg(16)->Arg(64);

void BM_RescueGain(benchmark::State& state) {
  cor::ModelConfig cfg;
  const cor::MoeModel model = cor::MoeModel::initialize(cfg, 3);
  cor::TokenRecord record;
  for (std::size_t i = 0; i < static_cast<std::size_t>(state.range(0)); ++i)
    record.context.push_back(static_cast<int>(i % cfg.vocab));
  record.position = record.context.size();
  record.token = 1;
  cor::ForwardOptions o;
  o.capture = true;
  const std::size_t expert = model.forward(record.context, o).traces[1].active.back()[0];
  for (auto _ : state) benchmark::DoNotOptimize(cor::rescue_gain(model, record, 1, expert));
}
BENCHMARK(BM_RescueGain)->Arg(8)->Arg(32);

}  // namespace
