#include "cor/study.hpp"

namespace cor {

SeedStudy run_seed_study(const StudyConfig& config, std::uint64_t seed) {
  const FactCorpus corpus = generate_corpus(config.corpus);
  const Tokenizer tokenizer = Tokenizer::for_corpus(corpus);
  ModelConfig model_config = config.model;
  model_config.vocab = tokenizer.vocab_size();
  TrainConfig train_config = config.train;
  train_config.seed = seed;

  SeedStudy study;
  study.seed = seed;
  TrainResult trained = train(model_config, train_config, encode_all(tokenizer, corpus.train));
  study.loss_log = std::move(trained.log);
  const MoeModel& model = trained.model;

  const std::vector<TokenRecord> records =
      compute_losses(model, encode_all(tokenizer, corpus.calibration), config.threads);
  const StratifiedSets sets = stratify(records, config.p_low, config.p_high);
  study.intensity = rki(model, sets, config.delta, config.epsilon, config.threads);
  study.cei = compute_cei(model, sets.hard, config.threads);

  PlanOptions plan_options = config.plan;
  plan_options.k_baseline = model_config.k_baseline;
  study.plan = build_plan(study.intensity, study.cei, plan_options);

  const std::vector<EvalQuery> queries = encode_queries(tokenizer, corpus.test);
  EvalOptions eval_options;
  eval_options.seed = seed;
  eval_options.threads = config.threads;
  study.eval = evaluate(model, queries, &study.plan, eval_options);

  std::vector<std::size_t> budgets;
  for (std::size_t m : config.budget_multiples) budgets.push_back(model_config.layers * m);
  study.pareto = pareto_sweep(
      model, queries, budgets,
      [&](std::size_t k_total) {
        PlanOptions o = plan_options;
        o.k_total = k_total;
        return build_plan(study.intensity, study.cei, o);
      },
      config.threads);
  study.lambda_rows = lambda_sweep(
      model, queries, config.lambdas,
      [&](double lambda) {
        PlanOptions o = plan_options;
        o.lambda = lambda;
        return build_plan(study.intensity, study.cei, o);
      },
      config.threads);
  return study;
}

}  // namespace cor
