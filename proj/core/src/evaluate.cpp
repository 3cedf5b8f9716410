#include "cor/evaluate.hpp"

#include <algorithm>
#include <cmath>

#include "cor/kernels.hpp"
#include "cor/parallel.hpp"

namespace cor {
namespace {

struct QueryOutcome {
  bool correct = false;
  double loss = 0.0;
  std::size_t activations = 0;
};

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void require_matched(const ModeReport& a, const ModeReport& b) {
  if (a.activations != b.activations) {
    throw Error("compute mismatch: " + a.mode + " used " + std::to_string(a.activations) + " expert activations, " +
                b.mode + " used " + std::to_string(b.activations));
  }
}

}  // namespace

std::vector<EvalQuery> encode_queries(const Tokenizer& tokenizer, std::span<const Query> queries) {
  std::vector<EvalQuery> out;
  for (const Query& q : queries) out.push_back(EvalQuery{tokenizer.encode(q.prompt), tokenizer.id(q.object), q.tail});
  return out;
}

const ModeReport* EvalReport::find(std::string_view mode) const {
  for (const auto& m : modes)
    if (m.mode == mode) return &m;
  return nullptr;
}

ModeReport evaluate_mode(const MoeModel& model, std::span<const EvalQuery> queries, std::string mode,
                         std::size_t k_total, const OverrideSource& overrides, std::size_t threads) {
  if (queries.empty()) throw InputError("evaluation needs at least one query");
  std::vector<QueryOutcome> outcomes(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const EvalQuery& q = queries[i];
    if (q.prompt.empty()) throw InputError("query " + std::to_string(i) + " has an empty prompt");
    ForwardOptions options;
    if (overrides) options.layers = overrides(i);
    const ForwardResult result = model.forward(q.prompt, options);
    const std::size_t last = result.logits.rows() - 1;
    const auto row = result.logits.row(last);
    const std::size_t best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const Tensor logits = Tensor::matrix(1, row.size(), std::vector<float>(row.begin(), row.end()));
    const int target[] = {q.object};
    outcomes[i] = QueryOutcome{best == static_cast<std::size_t>(q.object),
                               static_cast<double>(kernels::cross_entropy_nll(logits, target)[0]),
                               result.expert_invocations};
  });

  ModeReport report;
  report.mode = std::move(mode);
  report.k_total = k_total;
  report.queries = queries.size();
  std::size_t correct = 0, head = 0, head_correct = 0, tail = 0, tail_correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const QueryOutcome& o = outcomes[i];
    correct += o.correct;
    loss += o.loss;
    report.activations += o.activations;
    if (queries[i].tail) {
      ++tail;
      tail_correct += o.correct;
    } else {
      ++head;
      head_correct += o.correct;
    }
  }
  const auto n = static_cast<double>(queries.size());
  report.accuracy = static_cast<double>(correct) / n;
  report.nll = loss / n;
  if (head > 0) report.head_accuracy = static_cast<double>(head_correct) / static_cast<double>(head);
  if (tail > 0) report.tail_accuracy = static_cast<double>(tail_correct) / static_cast<double>(tail);
  return report;
}

std::vector<RoutingOverride> static_overrides(const ModelConfig& config, std::size_t k_total) {
  const std::vector<double> uniform(config.layers, 1.0);
  const std::vector<std::size_t> budgets = allocate_budgets(uniform, k_total, 0, config.experts);
  std::vector<RoutingOverride> out(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) out[l].k = budgets[l];
  return out;
}

EvalReport evaluate(const MoeModel& model, std::span<const EvalQuery> queries, const RoutingPlan* plan,
                    const EvalOptions& options) {
  const ModelConfig& cfg = model.config();
  const std::size_t baseline = cfg.layers * cfg.k_baseline;
  EvalReport report;

  report.modes.push_back(evaluate_mode(model, queries, "standard", baseline, {}, options.threads));

  const std::uint64_t seed = options.seed;
  report.modes.push_back(evaluate_mode(
      model, queries, "random", baseline,
      [&](std::size_t i) {
        std::vector<RoutingOverride> o(cfg.layers);
        for (auto& layer : o) layer.random_seed = mix(seed ^ mix(i));
        return o;
      },
      options.threads));

  if (plan) {
    validate_plan(*plan, cfg);
    const std::vector<RoutingOverride> o = plan_overrides(*plan);
    report.modes.push_back(
        evaluate_mode(model, queries, "cor", plan->k_total, [&](std::size_t) { return o; }, options.threads));
    if (plan->k_total == baseline) require_matched(report.modes.front(), report.modes.back());
  }

  for (std::size_t k : options.static_k) {
    if (k > cfg.experts) continue;
    const std::vector<RoutingOverride> o = static_overrides(cfg, cfg.layers * k);
    report.modes.push_back(evaluate_mode(model, queries, "static-k" + std::to_string(k), cfg.layers * k,
                                         [&](std::size_t) { return o; }, options.threads));
  }
  return report;
}

std::vector<ParetoRow> pareto_sweep(const MoeModel& model, std::span<const EvalQuery> queries,
                                    std::span<const std::size_t> budgets, const PlanBuilder& build,
                                    std::size_t threads) {
  std::vector<ParetoRow> rows;
  auto row = [](const ModeReport& r, std::string mode) {
    return ParetoRow{std::move(mode), r.k_total, r.accuracy, r.tail_accuracy, r.nll};
  };
  for (std::size_t k_total : budgets) {
    const std::vector<RoutingOverride> fixed = static_overrides(model.config(), k_total);
    const ModeReport s =
        evaluate_mode(model, queries, "static", k_total, [&](std::size_t) { return fixed; }, threads);
    const RoutingPlan plan = build(k_total);
    validate_plan(plan, model.config());
    if (plan.k_total != k_total) throw Error("plan builder returned a plan for a different budget");
    const std::vector<RoutingOverride> fused = plan_overrides(plan);
    const ModeReport c = evaluate_mode(model, queries, "cor", k_total, [&](std::size_t) { return fused; }, threads);
    require_matched(s, c);
    rows.push_back(row(s, "static"));
    rows.push_back(row(c, "cor"));
  }
  return rows;
}

std::vector<LambdaRow> lambda_sweep(const MoeModel& model, std::span<const EvalQuery> queries,
                                    std::span<const double> lambdas, const std::function<RoutingPlan(double)>& build,
                                    std::size_t threads) {
  std::vector<LambdaRow> rows;
  for (double lambda : lambdas) {
    const RoutingPlan plan = build(lambda);
    validate_plan(plan, model.config());
    const std::vector<RoutingOverride> o = plan_overrides(plan);
    const ModeReport r = evaluate_mode(model, queries, "cor", plan.k_total, [&](std::size_t) { return o; }, threads);
    rows.push_back(LambdaRow{lambda, r.accuracy, r.tail_accuracy, r.nll});
  }
  return rows;
}

std::vector<ScatterRow> export_scatter(const ExpertImpactTable& table) {
  std::vector<ScatterRow> rows;
  for (const ExpertImpact& c : table.cells) rows.push_back(ScatterRow{c.layer, c.expert, c.mean_gate, c.cei, c.defined});
  return rows;
}

}  // namespace cor
