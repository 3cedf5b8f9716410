#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cor/model.hpp"

namespace cor {

/// One predicted calibration token. `context` holds the tokens before
/// `position`, so the record alone is enough to recompute its loss.
struct TokenRecord {
  std::size_t doc = 0;
  std::size_t position = 0;
  int token = 0;
  std::vector<int> context;
  double loss = 0.0;

  friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

struct StratifiedSets {
  double p_low = 10.0;
  double p_high = 90.0;
  double tau_low = 0.0;
  double tau_high = 0.0;
  std::vector<TokenRecord> hard;
  std::vector<TokenRecord> easy;
};

/// Loss of predicting `target` after `context` (next-token NLL at the last row).
double token_loss(const MoeModel& model, std::span<const int> context, int target, const ForwardOptions& options = {});

/// One record per token except each document's first. Throws InputError on
/// an empty corpus or a document longer than context + 1 tokens.
std::vector<TokenRecord> compute_losses(const MoeModel& model, std::span<const std::vector<int>> documents,
                                        std::size_t threads = 1);

/// Hard = loss > p_high percentile, easy = loss < p_low percentile.
/// Throws InsufficientDataError below 10 records and ConfigError unless
/// 0 <= p_low <= p_high <= 100.
StratifiedSets stratify(std::span<const TokenRecord> records, double p_low = 10.0, double p_high = 90.0);

/// Loss histogram with `bins` equal-width bins over [min, max].
struct LossHistogram {
  double min = 0.0;
  double max = 0.0;
  std::vector<std::size_t> counts;
};

LossHistogram loss_histogram(std::span<const TokenRecord> records, std::size_t bins = 32);

}  // namespace cor
