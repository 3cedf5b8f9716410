#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "cor/expert_analysis.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace cor;

namespace {

std::vector<std::size_t> active_at_last(const MoeModel& m, const TokenRecord& r, std::size_t layer) {
  ForwardOptions o;
  o.capture = true;
  return m.forward(r.context, o).traces[layer].active.back();
}

}  // namespace

TEST_CASE("ablating one of two equal gates moves all mass to the other") {
  const std::vector<float> g = {0.5f, 0.5f, 0.0f};
  const std::vector<std::size_t> active = {0, 1};
  CHECK(ablate_gates(g, active, 0) == std::vector<float>{0.0f, 1.0f, 0.0f});
}

TEST_CASE("ablation redistributes proportionally and leaves inactive gates alone") {
  const std::vector<float> g = {0.6f, 0.3f, 0.1f, 0.25f};
  const std::vector<std::size_t> active = {0, 1, 2};
  const auto s = ablate_gates(g, active, 0);
  CHECK(s[0] == 0.0f);
  CHECK(s[1] == doctest::Approx(0.75));
  CHECK(s[2] == doctest::Approx(0.25));
  CHECK(s[3] == 0.25f);
}

TEST_CASE("surviving active gates sum to one on random inputs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(1e-3f, 1.0f);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial) % 15;
    std::vector<float> g(n);
    for (float& v : g) v = u(rng);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(2 + static_cast<std::size_t>(trial) % (n - 1));
    const std::size_t removed = idx[static_cast<std::size_t>(trial) % idx.size()];
    const auto s = ablate_gates(g, idx, removed);
    double mass = 0.0;
    for (std::size_t j : idx) mass += s[j];
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(s[removed] == 0.0f);
  }
}

TEST_CASE("ablation precondition errors") {
  const std::vector<float> g = {0.7f, 0.3f};
  CHECK_THROWS_AS(ablate_gates(g, std::vector<std::size_t>{0, 1}, 3), NotActivatedError);
  CHECK_THROWS_AS(ablate_gates(g, std::vector<std::size_t>{0}, 0), AblationDegenerateError);
  const ModelConfig cfg = test::small_config();
  const MoeModel m = test::random_model(cfg, 1);
  const TokenRecord r = test::random_records(1, cfg, 2)[0];
  const auto active = active_at_last(m, r, 0);
  std::size_t idle = 0;
  while (std::find(active.begin(), active.end(), idle) != active.end()) ++idle;
  CHECK_THROWS_AS(rescue_gain(m, r, 0, idle), NotActivatedError);
  CHECK_THROWS_AS(rescue_gain(m, r, cfg.layers, active[0]), IndexError);
}

TEST_CASE("ablating one of two identical experts with equal gates changes nothing") {
  ModelConfig cfg = test::small_config(2, 2, 8);
  MoeModel m = test::random_model(cfg, 4);
  for (auto& layer : m.weights().layers) {
    layer.router.fill(0.0f);
    layer.expert_in[1] = layer.expert_in[0];
    layer.expert_out[1] = layer.expert_out[0];
  }
  for (const auto& r : test::random_records(10, cfg, 5)) {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      REQUIRE(active_at_last(m, r, l) == std::vector<std::size_t>{0, 1});
      CHECK(std::abs(rescue_gain(m, r, l, 0)) < 1e-5);
      CHECK(std::abs(rescue_gain(m, r, l, 1)) < 1e-5);
    }
  }
}

TEST_CASE("rescue gain equals a full recomputation with edited gates") {
  const ModelConfig cfg = test::small_config(2, 4, 8);
  const MoeModel m = test::random_model(cfg, 6);
  const auto w64 = m.cast<double>().weights();
  std::size_t pairs = 0;
  bool negative = false;
  for (const auto& r : test::random_records(13, cfg, 7)) {
    const auto base = test::ref_forward(cfg, w64, r.context);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (std::size_t e : base.traces[l].active.back()) {
        std::vector<test::RefOverride> ov(cfg.layers);
        ov[l].ablations.push_back({r.context.size() - 1, e});
        const double expected =
            test::ref_nll(test::ref_forward(cfg, w64, r.context, ov).logits, r.token) - test::ref_nll(base.logits, r.token);
        const double gain = rescue_gain(m, r, l, e);
        CHECK(std::abs(gain - expected) < 1e-5);
        negative |= gain < 0.0;
        ++pairs;
      }
    }
  }
  CHECK(pairs >= 50);
  CHECK(negative);
}

TEST_CASE("ablation leaves earlier layers and positions untouched") {
  const ModelConfig cfg = test::small_config(3);
  const MoeModel m = test::random_model(cfg, 8);
  const TokenRecord r = test::random_records(1, cfg, 9)[0];
  ForwardOptions plain;
  plain.capture = true;
  const auto base = m.forward(r.context, plain);
  const std::size_t t = r.context.size() - 1;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    ForwardOptions ab = plain;
    ab.layers.resize(cfg.layers);
    ab.layers[l].ablations.push_back({t, base.traces[l].active[t][0]});
    const auto run = m.forward(r.context, ab);
    for (std::size_t u = 0; u < l; ++u) CHECK(run.traces[u].output == base.traces[u].output);
    for (std::size_t u = l; u < cfg.layers; ++u) {
      for (std::size_t row = 0; row < t; ++row) {
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
          CHECK(run.traces[u].input(row, c) == base.traces[u].input(row, c));
          CHECK(run.traces[u].output(row, c) == base.traces[u].output(row, c));
        }
      }
    }
  }
}

TEST_CASE("CEI table matches exhaustive brute force") {
  const ModelConfig cfg = test::small_config(2, 4, 8);
  const MoeModel m = test::random_model(cfg, 10);
  const auto hard = test::random_records(20, cfg, 11);
  const ExpertImpactTable table = compute_cei(m, hard);
  REQUIRE(table.cells.size() == cfg.layers * cfg.experts);

  std::vector<double> sum(table.cells.size(), 0.0), gate(table.cells.size(), 0.0);
  std::vector<std::size_t> count(table.cells.size(), 0);
  for (const auto& r : hard) {
    ForwardOptions o;
    o.capture = true;
    const auto f = m.forward(r.context, o);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (std::size_t e : f.traces[l].active.back()) {
        const std::size_t c = l * cfg.experts + e;
        sum[c] += rescue_gain(m, r, l, e);
        gate[c] += f.traces[l].gates(r.context.size() - 1, e);
        count[c] += 1;
      }
    }
  }
  std::size_t total = 0;
  for (std::size_t c = 0; c < table.cells.size(); ++c) {
    const ExpertImpact& cell = table.cells[c];
    CHECK(cell.layer == c / cfg.experts);
    CHECK(cell.expert == c % cfg.experts);
    CHECK(cell.n_active == count[c]);
    CHECK(cell.defined == (count[c] > 0));
    if (count[c] == 0) {
      CHECK(cell.cei == 0.0);
      CHECK(cell.mean_gate == 0.0);
    } else {
      CHECK(cell.cei == sum[c] / static_cast<double>(count[c]));
      CHECK(cell.mean_gate == doctest::Approx(gate[c] / static_cast<double>(count[c])).epsilon(1e-12));
    }
    CHECK(cell.n_active <= hard.size());
    total += cell.n_active;
  }
  CHECK(total == cfg.k_baseline * cfg.layers * hard.size() - table.degenerate_skips);
  CHECK(table.degenerate_skips == 0);
}

TEST_CASE("experts never routed on the hard set stay undefined") {
  ModelConfig cfg = test::small_config(2, 4, 8);
  MoeModel m = test::random_model(cfg, 12);
  // Identical router columns tie every gate, so Top-2 is always {0, 1}.
  for (auto& layer : m.weights().layers)
    for (std::size_t r = 0; r < cfg.d_model; ++r)
      for (std::size_t e = 1; e < cfg.experts; ++e) layer.router(r, e) = layer.router(r, 0);
  const auto table = compute_cei(m, test::random_records(15, cfg, 13));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    CHECK(table.at(l, 0).n_active == 15);
    for (std::size_t e : {2, 3}) {
      CHECK_FALSE(table.at(l, e).defined);
      CHECK(table.at(l, e).cei == 0.0);
      CHECK(table.layer_cei(l)[e] == 0.0);
    }
  }
}

TEST_CASE("single-expert routing is skipped and counted") {
  ModelConfig cfg = test::small_config(2, 4, 8);
  cfg.k_baseline = 1;
  const MoeModel m = test::random_model(cfg, 14);
  const auto hard = test::random_records(7, cfg, 15);
  const auto table = compute_cei(m, hard);
  CHECK(table.degenerate_skips == cfg.layers * hard.size());
  for (const auto& c : table.cells) CHECK_FALSE(c.defined);
}

TEST_CASE("CEI does not depend on record order or thread count") {
  const ModelConfig cfg = test::small_config(2, 4, 8);
  const MoeModel m = test::random_model(cfg, 16);
  auto hard = test::random_records(18, cfg, 17);
  const auto a = compute_cei(m, hard);
  CHECK(compute_cei(m, hard, 3).cells == a.cells);
  std::reverse(hard.begin(), hard.end());
  const auto b = compute_cei(m, hard);
  for (std::size_t c = 0; c < a.cells.size(); ++c) {
    CHECK(b.cells[c].n_active == a.cells[c].n_active);
    CHECK(b.cells[c].cei == doctest::Approx(a.cells[c].cei).epsilon(1e-12));
  }
  CHECK_THROWS_AS(compute_cei(m, std::vector<TokenRecord>{}), StratificationError);
}
