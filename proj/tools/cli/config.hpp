#pragma once

// Run configuration for cor-lab. The file format is flat UTF-8 text, one
// `key = value` per line; blank lines and lines starting with '#' are
// ignored. Lists are comma separated. Keys:
//
//   seed                                   training / evaluation seed
//   threads
//   corpus.n_head_facts  corpus.n_tail_facts  corpus.head_repetitions
//   corpus.tail_repetitions  corpus.calibration_tokens
//   corpus.queries_per_fact  corpus.seed
//   model.layers  model.experts  model.k_baseline  model.d_model
//   model.d_ff  model.context  model.heads
//   train.steps  train.batch_size  train.seq_len  train.learning_rate
//   train.aux_weight  train.optimizer (sgd|adam)  train.grad_clip
//   train.jitter_k_min  train.jitter_k_max
//   calibration.p_low  calibration.p_high
//   analysis.delta  analysis.epsilon
//   plan.lambda  plan.k_min  plan.k_max  plan.k_total
//   plan.fuse_high_intensity_only (true|false)
//   eval.static_k  sweep.budget_multiples  sweep.lambdas
//   cascade.kappa  cascade.gain  cascade.noise_floor  cascade.width
//   cascade.probes  cascade.seed

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cor/layer_analysis.hpp"
#include "cor/study.hpp"

namespace cor::cli {

struct LabConfig {
  StudyConfig study;
  std::uint64_t seed = 1;
  std::vector<std::size_t> static_k = {1, 2, 3, 4};
  CascadeSpec cascade{.kappa = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0}};
};

/// Applies every assignment in `text` on top of `base`. Throws ConfigError
/// naming the line on unknown keys, malformed lines or unparsable values.
LabConfig parse_config(std::string_view text, LabConfig base = {});

/// Applies one assignment; used for both file lines and flag overrides.
void set_option(LabConfig& config, std::string_view key, std::string_view value);

}  // namespace cor::cli
