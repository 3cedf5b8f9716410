#include "cor/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <string>

#include "cor/kernels.hpp"
#include "cor/parallel.hpp"

namespace cor {

double token_loss(const MoeModel& model, std::span<const int> context, int target, const ForwardOptions& options) {
  if (context.empty()) throw InputError("token_loss needs a non-empty context");
  const ForwardResult result = model.forward(context, options);
  const std::size_t last = result.logits.rows() - 1;
  const Tensor row = Tensor::matrix(1, result.logits.cols(),
                                    std::vector<float>(result.logits.row(last).begin(), result.logits.row(last).end()));
  const int targets[] = {target};
  return static_cast<double>(kernels::cross_entropy_nll(row, targets)[0]);
}

std::vector<TokenRecord> compute_losses(const MoeModel& model, std::span<const std::vector<int>> documents,
                                        std::size_t threads) {
  if (documents.empty()) throw InputError("calibration corpus is empty");
  const std::size_t limit = model.config().context + 1;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    if (documents[d].size() > limit) {
      throw InputError("calibration document " + std::to_string(d) + " has " + std::to_string(documents[d].size()) +
                       " tokens, limit is " + std::to_string(limit));
    }
  }

  std::vector<std::vector<TokenRecord>> per_doc(documents.size());
  parallel_for(documents.size(), threads, [&](std::size_t d) {
    const auto& doc = documents[d];
    if (doc.size() < 2) return;
    const std::span<const int> inputs(doc.data(), doc.size() - 1);
    const ForwardResult result = model.forward(inputs);
    const std::vector<float> losses =
        kernels::cross_entropy_nll(result.logits, std::span<const int>(doc.data() + 1, doc.size() - 1));
    for (std::size_t p = 1; p < doc.size(); ++p) {
      per_doc[d].push_back(TokenRecord{d, p, doc[p], std::vector<int>(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(p)),
                                       static_cast<double>(losses[p - 1])});
    }
  });

  std::vector<TokenRecord> records;
  for (auto& recs : per_doc) std::move(recs.begin(), recs.end(), std::back_inserter(records));
  return records;
}

StratifiedSets stratify(std::span<const TokenRecord> records, double p_low, double p_high) {
  if (!(0.0 <= p_low && p_low <= p_high && p_high <= 100.0)) {
    throw ConfigError("stratify: need 0 <= p_low <= p_high <= 100");
  }
  if (records.size() < 10) {
    throw InsufficientDataError("stratify needs at least 10 records, got " + std::to_string(records.size()));
  }
  std::vector<double> losses;
  losses.reserve(records.size());
  for (const auto& r : records) losses.push_back(r.loss);

  StratifiedSets sets;
  sets.p_low = p_low;
  sets.p_high = p_high;
  sets.tau_low = kernels::percentile(losses, p_low);
  sets.tau_high = kernels::percentile(losses, p_high);
  for (const auto& r : records) {
    if (r.loss > sets.tau_high) sets.hard.push_back(r);
    if (r.loss < sets.tau_low) sets.easy.push_back(r);
  }
  return sets;
}

LossHistogram loss_histogram(std::span<const TokenRecord> records, std::size_t bins) {
  LossHistogram h;
  h.counts.assign(bins, 0);
  if (records.empty() || bins == 0) return h;
  const auto [lo, hi] = std::minmax_element(records.begin(), records.end(),
                                            [](const TokenRecord& a, const TokenRecord& b) { return a.loss < b.loss; });
  h.min = lo->loss;
  h.max = hi->loss;
  const double width = (h.max - h.min) / static_cast<double>(bins);
  for (const auto& r : records) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((r.loss - h.min) / width) : 0;
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

}  // namespace cor
