#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "cor/calibration.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace cor;

namespace {

std::vector<TokenRecord> with_losses(const std::vector<double>& losses) {
  std::vector<TokenRecord> out;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    TokenRecord r;
    r.doc = i;
    r.position = 1;
    r.context = {static_cast<int>(i % 7)};
    r.loss = losses[i];
    out.push_back(r);
  }
  return out;
}

std::vector<std::vector<int>> documents(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(1, cfg.context + 1);
  std::vector<std::vector<int>> docs;
  for (std::size_t i = 0; i < n; ++i) docs.push_back(test::random_tokens(len(rng), cfg.vocab, seed * 13 + i));
  return docs;
}

}  // namespace

TEST_CASE("one record per token after each document's first") {
  const ModelConfig cfg = test::small_config();
  const MoeModel m = test::random_model(cfg, 1);
  auto docs = documents(cfg, 12, 4);
  docs.push_back({3});
  const auto records = compute_losses(m, docs);
  std::size_t tokens = 0;
  for (const auto& d : docs) tokens += d.size();
  CHECK(records.size() == tokens - docs.size());
  for (const auto& r : records) {
    CHECK(r.context.size() == r.position);
    CHECK(r.token == docs[r.doc][r.position]);
    CHECK(r.loss >= 0.0);
  }
}

TEST_CASE("a corpus of single-token documents yields no records") {
  const ModelConfig cfg = test::small_config();
  const std::vector<std::vector<int>> docs = {{1}, {2}, {3}};
  CHECK(compute_losses(test::random_model(cfg, 1), docs).empty());
}

TEST_CASE("batched losses match per-token recomputation and the scalar oracle") {
  const ModelConfig cfg = test::small_config();
  const MoeModel m = test::random_model(cfg, 2);
  const auto w64 = m.cast<double>().weights();
  const auto records = compute_losses(m, documents(cfg, 6, 9));
  REQUIRE(!records.empty());
  for (const auto& r : records) {
    CHECK(r.loss == doctest::Approx(token_loss(m, r.context, r.token)).epsilon(1e-5));
    const double ref = test::ref_nll(test::ref_forward(cfg, w64, r.context).logits, r.token);
    CHECK(r.loss == doctest::Approx(ref).epsilon(1e-4));
  }
}

TEST_CASE("loss computation does not depend on the thread count") {
  const ModelConfig cfg = test::small_config();
  const MoeModel m = test::random_model(cfg, 3);
  const auto docs = documents(cfg, 20, 5);
  CHECK(compute_losses(m, docs, 1) == compute_losses(m, docs, 3));
}

TEST_CASE("loss computation input errors") {
  const ModelConfig cfg = test::small_config();
  const MoeModel m = test::random_model(cfg, 1);
  CHECK_THROWS_AS(compute_losses(m, std::vector<std::vector<int>>{}), InputError);
  const std::vector<std::vector<int>> too_long = {test::random_tokens(cfg.context + 2, cfg.vocab, 1)};
  CHECK_THROWS_AS(compute_losses(m, too_long), InputError);
  const std::vector<int> empty_context;
  CHECK_THROWS_AS(token_loss(m, empty_context, 1), InputError);
}

TEST_CASE("stratification of 1..100 at the 10th and 90th percentiles") {
  std::vector<double> losses(100);
  std::iota(losses.begin(), losses.end(), 1.0);
  const auto sets = stratify(with_losses(losses));
  CHECK(sets.tau_high == doctest::Approx(90.1));
  CHECK(sets.tau_low == doctest::Approx(10.9));
  CHECK(sets.hard.size() == 10);
  CHECK(sets.easy.size() == 10);
  for (const auto& r : sets.hard) CHECK(r.loss > 90.1);
  for (const auto& r : sets.easy) CHECK(r.loss < 10.9);
}

TEST_CASE("identical losses leave both sets empty") {
  const auto sets = stratify(with_losses(std::vector<double>(40, 1.25)));
  CHECK(sets.hard.empty());
  CHECK(sets.easy.empty());
}

TEST_CASE("extreme percentiles leave both sets empty") {
  std::vector<double> losses(30);
  std::iota(losses.begin(), losses.end(), 0.5);
  const auto sets = stratify(with_losses(losses), 0.0, 100.0);
  CHECK(sets.hard.empty());
  CHECK(sets.easy.empty());
}

TEST_CASE("set sizes stay within their percentile share") {
  std::mt19937_64 rng(8);
  std::exponential_distribution<double> dist(1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 10 + static_cast<std::size_t>(trial) * 7;
    std::vector<double> losses(n);
    for (double& v : losses) v = dist(rng);
    const double p_low = 5.0 + trial % 20, p_high = 70.0 + trial % 25;
    const auto sets = stratify(with_losses(losses), p_low, p_high);
    const double nd = static_cast<double>(n);
    CHECK(static_cast<double>(sets.hard.size()) <= std::ceil(nd * (100.0 - p_high) / 100.0));
    CHECK(static_cast<double>(sets.easy.size()) <= std::ceil(nd * p_low / 100.0));
    for (const auto& r : sets.hard) CHECK(r.loss > sets.tau_high);
    for (const auto& r : sets.easy) CHECK(r.loss < sets.tau_low);
  }
}

TEST_CASE("stratification is invariant to monotone transforms of the loss") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> dist(0.0, 5.0);
  std::vector<double> losses(200), squashed(200);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    losses[i] = dist(rng);
    squashed[i] = std::exp(0.5 * losses[i]) + 3.0;
  }
  const auto a = stratify(with_losses(losses));
  const auto b = stratify(with_losses(squashed));
  REQUIRE(a.hard.size() == b.hard.size());
  REQUIRE(a.easy.size() == b.easy.size());
  for (std::size_t i = 0; i < a.hard.size(); ++i) CHECK(a.hard[i].doc == b.hard[i].doc);
  for (std::size_t i = 0; i < a.easy.size(); ++i) CHECK(a.easy[i].doc == b.easy[i].doc);
}

TEST_CASE("stratification errors") {
  CHECK_THROWS_AS(stratify(with_losses(std::vector<double>(9, 1.0))), InsufficientDataError);
  const auto ok = with_losses(std::vector<double>(10, 1.0));
  CHECK_NOTHROW(stratify(ok));
  CHECK_THROWS_AS(stratify(ok, 50.0, 40.0), ConfigError);
  CHECK_THROWS_AS(stratify(ok, -1.0, 90.0), ConfigError);
  CHECK_THROWS_AS(stratify(ok, 10.0, 101.0), ConfigError);
}

TEST_CASE("loss histogram covers every record") {
  std::vector<double> losses(57);
  for (std::size_t i = 0; i < losses.size(); ++i) losses[i] = std::sqrt(static_cast<double>(i));
  const auto h = loss_histogram(with_losses(losses), 8);
  CHECK(std::accumulate(h.counts.begin(), h.counts.end(), std::size_t{0}) == 57);
  CHECK(h.min == 0.0);
  CHECK(h.max == doctest::Approx(std::sqrt(56.0)));
  CHECK(h.counts.back() >= 1);
}
