#pragma once

// Text formats exchanged between pipeline stages. Every writer is
// deterministic and every parser accepts exactly what the writer emits, so
// write -> parse -> write is byte-identical. Parse failures throw
// FormatError naming the offending field.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cor/calibration.hpp"
#include "cor/corpus.hpp"
#include "cor/evaluate.hpp"
#include "cor/expert_analysis.hpp"
#include "cor/layer_analysis.hpp"
#include "cor/router.hpp"
#include "cor/trainer.hpp"

namespace cor {

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

/// {"step", "lm_loss", "aux_loss"} per line.
std::string loss_log_jsonl(std::span<const LossRecord> log);
std::vector<LossRecord> parse_loss_log(std::string_view text);

struct CalibrationReport {
  std::size_t total_records = 0;
  LossHistogram histogram;
  StratifiedSets sets;
};

CalibrationReport make_calibration_report(std::span<const TokenRecord> records, const StratifiedSets& sets);
std::string calibration_json(const CalibrationReport& report);
CalibrationReport parse_calibration(std::string_view text);

/// [{layer, S_hard, S_easy, R_l, n_hard, n_easy}]
std::string rki_json(std::span<const LayerSensitivity> layers);
std::vector<LayerSensitivity> parse_rki(std::string_view text);

/// [{layer, expert, cei, n_active, mean_gate, defined}]; the grid must be
/// complete when parsing.
std::string cei_json(const ExpertImpactTable& table);
ExpertImpactTable parse_cei(std::string_view text);

/// {K_total, lambda, k_min, k_max, layers: [{l, k_l, R_l, prior}]}
std::string plan_json(const RoutingPlan& plan);
RoutingPlan parse_plan(std::string_view text);

std::string eval_json(const EvalReport& report);
EvalReport parse_eval(std::string_view text);

std::string corpus_json(const FactCorpusSpec& spec, const FactCorpus& corpus);
std::pair<FactCorpusSpec, FactCorpus> parse_corpus(std::string_view text);

std::string cascade_json(const CascadeSpec& spec, const CascadeReport& report);
std::pair<CascadeSpec, CascadeReport> parse_cascade(std::string_view text);

/// mode,K_total,accuracy,tail_accuracy,nll; an undefined tail accuracy is an empty field.
std::string pareto_csv(std::span<const ParetoRow> rows);
std::vector<ParetoRow> parse_pareto_csv(std::string_view text);

/// layer,expert,mean_gate,cei,defined
std::string scatter_csv(std::span<const ScatterRow> rows);
std::vector<ScatterRow> parse_scatter_csv(std::string_view text);

/// lambda,accuracy,tail_accuracy,nll
std::string lambda_csv(std::span<const LambdaRow> rows);
std::vector<LambdaRow> parse_lambda_csv(std::string_view text);

/// Shortest decimal text that parses back to the same double.
std::string format_number(double value);

}  // namespace cor
