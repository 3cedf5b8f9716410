#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "config.hpp"
#include "cor/checkpoint.hpp"
#include "cor/reports.hpp"
#include "cor/statistics.hpp"

#ifndef COR_VERSION
#define COR_VERSION "unknown"
#endif

namespace cor::cli {
namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct Flags {
  std::string config;
  std::string model;
  std::string out = ".";
  std::string corpus;
  std::string calibration;
  std::string rki;
  std::string cei;
  std::string plan;
  /// Flag name -> config key, applied over the config file in this order.
  std::vector<std::pair<std::string, std::string>> overrides;
};

class Run {
 public:
  Run(std::string subcommand, LabConfig config, const Flags& flags, std::ostream& out, std::ostream& err)
      : subcommand_(std::move(subcommand)), config_(std::move(config)), flags_(flags), out_(out), err_(err) {}

  const LabConfig& config() const { return config_; }
  std::ostream& out() { return out_; }
  std::ostream& err() { return err_; }

  /// Input file: the explicit flag when given, else `fallback` inside --out.
  fs::path input(const std::string& name, const std::string& flag, const std::string& fallback) {
    fs::path p = flag.empty() ? fs::path(flags_.out) / fallback : fs::path(flag);
    inputs_.emplace_back(name, p.string());
    return p;
  }

  fs::path output(const std::string& name, const std::string& file) {
    fs::path p = fs::path(flags_.out) / file;
    outputs_.emplace_back(name, p.string());
    return p;
  }

  fs::path model_input() { return input("model", flags_.model, "model.ckpt"); }

  fs::path model_output() {
    fs::path p = flags_.model.empty() ? fs::path(flags_.out) / "model.ckpt" : fs::path(flags_.model);
    outputs_.emplace_back("model", p.string());
    return p;
  }

  /// The plan is optional for eval: an explicit --plan must exist, the
  /// default location is used only when present.
  std::optional<fs::path> optional_plan() {
    if (!flags_.plan.empty()) return input("plan", flags_.plan, "");
    const fs::path p = fs::path(flags_.out) / "plan.json";
    if (!fs::exists(p)) return std::nullopt;
    inputs_.emplace_back("plan", p.string());
    return p;
  }

  std::pair<FactCorpusSpec, FactCorpus> load_corpus() {
    return parse_corpus(read_text_file(input("corpus", flags_.corpus, "corpus.json")));
  }

  CalibrationReport load_calibration() {
    return parse_calibration(read_text_file(input("calibration", flags_.calibration, "calibration.json")));
  }

  std::vector<LayerSensitivity> load_rki() { return parse_rki(read_text_file(input("rki", flags_.rki, "rki.json"))); }

  ExpertImpactTable load_cei() { return parse_cei(read_text_file(input("cei", flags_.cei, "cei.json"))); }

  void write_manifest() {
    Json inputs = Json::object(), outputs = Json::object();
    for (const auto& [k, v] : inputs_) inputs[k] = v;
    for (const auto& [k, v] : outputs_) outputs[k] = v;
    const Json manifest{{"subcommand", subcommand_},
                        {"version", COR_VERSION},
                        {"config", flags_.config.empty() ? Json(nullptr) : Json(flags_.config)},
                        {"seed", config_.seed},
                        {"inputs", inputs},
                        {"outputs", outputs}};
    write_text_file(fs::path(flags_.out) / (subcommand_ + ".manifest.json"), manifest.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  LabConfig config_;
  const Flags& flags_;
  std::ostream& out_;
  std::ostream& err_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::pair<std::string, std::string>> outputs_;
};

std::string fmt(double v) { return format_number(v); }

std::string opt(const std::optional<double>& v) { return v ? fmt(*v) : "undefined"; }

void require_vocab(const MoeModel& model, const Tokenizer& tokenizer) {
  if (model.config().vocab != tokenizer.vocab_size()) {
    throw InputError("checkpoint vocab " + std::to_string(model.config().vocab) + " does not match the corpus alphabet (" +
                     std::to_string(tokenizer.vocab_size()) + " symbols)");
  }
}

PlanOptions plan_options(const LabConfig& config, const MoeModel& model) {
  PlanOptions options = config.study.plan;
  options.k_baseline = model.config().k_baseline;
  return options;
}

void gen_corpus(Run& run) {
  const FactCorpusSpec& spec = run.config().study.corpus;
  const FactCorpus corpus = generate_corpus(spec);
  write_text_file(run.output("corpus", "corpus.json"), corpus_json(spec, corpus));
  run.out() << "corpus: " << corpus.facts.size() << " facts (" << spec.n_head_facts << " head, " << spec.n_tail_facts
            << " tail), " << corpus.train.size() << " training sentences, " << corpus.calibration.size()
            << " calibration sentences, " << corpus.test.size() << " test queries\n";
}

void train_model(Run& run) {
  const auto [spec, corpus] = run.load_corpus();
  const Tokenizer tokenizer = Tokenizer::for_corpus(corpus);
  ModelConfig model_config = run.config().study.model;
  model_config.vocab = tokenizer.vocab_size();
  TrainConfig train_config = run.config().study.train;
  train_config.seed = run.config().seed;
  const TrainResult result = train(model_config, train_config, encode_all(tokenizer, corpus.train));
  save_checkpoint(result.model, run.model_output());
  write_text_file(run.output("loss_log", "loss_log.jsonl"), loss_log_jsonl(result.log));
  run.out() << "trained " << train_config.steps << " steps";
  if (!result.log.empty()) {
    run.out() << ", lm_loss " << fmt(result.log.front().lm_loss) << " -> " << fmt(result.log.back().lm_loss);
  }
  run.out() << "\n";
}

void calibrate(Run& run) {
  const MoeModel model = load_checkpoint(run.model_input());
  const auto [spec, corpus] = run.load_corpus();
  const Tokenizer tokenizer = Tokenizer::for_corpus(corpus);
  require_vocab(model, tokenizer);
  const LabConfig& config = run.config();
  const std::vector<TokenRecord> records =
      compute_losses(model, encode_all(tokenizer, corpus.calibration), config.study.threads);
  const StratifiedSets sets = stratify(records, config.study.p_low, config.study.p_high);
  write_text_file(run.output("calibration", "calibration.json"),
                  calibration_json(make_calibration_report(records, sets)));
  run.out() << "calibration: " << records.size() << " tokens, hard " << sets.hard.size() << " (loss > "
            << fmt(sets.tau_high) << "), easy " << sets.easy.size() << " (loss < " << fmt(sets.tau_low) << ")\n";
}

void analyze_layers(Run& run) {
  const MoeModel model = load_checkpoint(run.model_input());
  const CalibrationReport calibration = run.load_calibration();
  const LabConfig& config = run.config();
  const std::vector<LayerSensitivity> layers =
      rki(model, calibration.sets, config.study.delta, config.study.epsilon, config.study.threads);
  write_text_file(run.output("rki", "rki.json"), rki_json(layers));
  for (const LayerSensitivity& l : layers) {
    run.out() << "layer " << l.layer << ": S_hard " << fmt(l.s_hard) << ", S_easy " << fmt(l.s_easy) << ", R "
              << fmt(l.r) << "\n";
  }
}

void analyze_experts(Run& run) {
  const MoeModel model = load_checkpoint(run.model_input());
  const CalibrationReport calibration = run.load_calibration();
  const ExpertImpactTable table = compute_cei(model, calibration.sets.hard, run.config().study.threads);
  write_text_file(run.output("cei", "cei.json"), cei_json(table));
  const std::size_t defined =
      static_cast<std::size_t>(std::count_if(table.cells.begin(), table.cells.end(), [](const ExpertImpact& c) {
        return c.defined;
      }));
  run.out() << "cei: " << defined << " of " << table.cells.size() << " cells defined, " << table.degenerate_skips
            << " degenerate ablations skipped, " << dormant_experts(table).size()
            << " dormant experts, spearman(cei, gate) " << fmt(cei_gate_correlation(table)) << "\n";
}

void build_plan_cmd(Run& run) {
  const MoeModel model = load_checkpoint(run.model_input());
  const std::vector<LayerSensitivity> intensity = run.load_rki();
  const ExpertImpactTable table = run.load_cei();
  std::vector<std::string> warnings;
  const RoutingPlan plan = build_plan(intensity, table, plan_options(run.config(), model), &warnings);
  validate_plan(plan, model.config());
  for (const std::string& w : warnings) run.err() << "warning: " << w << "\n";
  write_text_file(run.output("plan", "plan.json"), plan_json(plan));
  run.out() << "plan: K_total " << plan.k_total << ", lambda " << fmt(plan.lambda) << ", k_l =";
  for (const PlanLayer& l : plan.layers) run.out() << " " << l.k;
  run.out() << "\n";
}

void eval_cmd(Run& run) {
  const MoeModel model = load_checkpoint(run.model_input());
  const auto [spec, corpus] = run.load_corpus();
  const Tokenizer tokenizer = Tokenizer::for_corpus(corpus);
  require_vocab(model, tokenizer);
  std::optional<RoutingPlan> plan;
  if (const auto path = run.optional_plan()) {
    plan = parse_plan(read_text_file(*path));
    validate_plan(*plan, model.config());
  }
  const LabConfig& config = run.config();
  EvalOptions options;
  options.seed = config.seed;
  options.static_k = config.static_k;
  options.threads = config.study.threads;
  const EvalReport report = evaluate(model, encode_queries(tokenizer, corpus.test), plan ? &*plan : nullptr, options);
  write_text_file(run.output("eval", "eval.json"), eval_json(report));
  run.out() << "metric: " << report.metric << "\n";
  for (const ModeReport& m : report.modes) {
    run.out() << m.mode << ": K_total " << m.k_total << ", accuracy " << fmt(m.accuracy) << ", tail "
              << opt(m.tail_accuracy) << ", head " << opt(m.head_accuracy) << ", nll " << fmt(m.nll)
              << ", activations " << m.activations << "\n";
  }
}

void pareto_cmd(Run& run) {
  const MoeModel model = load_checkpoint(run.model_input());
  const auto [spec, corpus] = run.load_corpus();
  const Tokenizer tokenizer = Tokenizer::for_corpus(corpus);
  require_vocab(model, tokenizer);
  const std::vector<LayerSensitivity> intensity = run.load_rki();
  const ExpertImpactTable table = run.load_cei();
  const LabConfig& config = run.config();
  const PlanOptions base = plan_options(config, model);
  const std::vector<EvalQuery> queries = encode_queries(tokenizer, corpus.test);

  std::vector<std::size_t> budgets;
  for (std::size_t m : config.study.budget_multiples) budgets.push_back(model.config().layers * m);
  const std::vector<ParetoRow> rows = pareto_sweep(
      model, queries, budgets,
      [&](std::size_t k_total) {
        PlanOptions o = base;
        o.k_total = k_total;
        return build_plan(intensity, table, o);
      },
      config.study.threads);
  const std::vector<LambdaRow> lambdas = lambda_sweep(
      model, queries, config.study.lambdas,
      [&](double lambda) {
        PlanOptions o = base;
        o.lambda = lambda;
        return build_plan(intensity, table, o);
      },
      config.study.threads);
  write_text_file(run.output("pareto", "pareto.csv"), pareto_csv(rows));
  write_text_file(run.output("lambda_sweep", "lambda_sweep.csv"), lambda_csv(lambdas));
  for (const ParetoRow& r : rows) {
    run.out() << r.mode << " K_total " << r.k_total << ": accuracy " << fmt(r.accuracy) << ", tail "
              << opt(r.tail_accuracy) << ", nll " << fmt(r.nll) << "\n";
  }
  for (const LambdaRow& r : lambdas) {
    run.out() << "lambda " << fmt(r.lambda) << ": accuracy " << fmt(r.accuracy) << ", tail " << opt(r.tail_accuracy)
              << "\n";
  }
}

void export_scatter_cmd(Run& run) {
  const ExpertImpactTable table = run.load_cei();
  write_text_file(run.output("scatter", "scatter.csv"), scatter_csv(export_scatter(table)));
  run.out() << "scatter: " << table.cells.size() << " rows, " << dormant_experts(table).size()
            << " in the dormant zone\n";
}

void verify_cascade_cmd(Run& run) {
  CascadeSpec spec = run.config().cascade;
  spec.delta = run.config().study.delta;
  spec.epsilon = run.config().study.epsilon;
  const CascadeReport report = verify_cascade(spec);
  write_text_file(run.output("cascade", "cascade.json"), cascade_json(spec, report));
  for (std::size_t l = 0; l < report.r.size(); ++l) {
    run.out() << "layer " << l << ": S_hard " << fmt(report.s_hard[l]) << ", S_easy " << fmt(report.s_easy[l])
              << ", R " << fmt(report.r[l]) << "\n";
  }
  const auto [lo, hi] = std::minmax_element(report.r.begin(), report.r.end());
  run.out() << "max R / min R = " << fmt(*hi / *lo) << "\n";
}

const std::vector<std::pair<std::string, std::function<void(Run&)>>>& commands() {
  static const std::vector<std::pair<std::string, std::function<void(Run&)>>> table = {
      {"gen-corpus", gen_corpus},
      {"train", train_model},
      {"calibrate", calibrate},
      {"analyze-layers", analyze_layers},
      {"analyze-experts", analyze_experts},
      {"build-plan", build_plan_cmd},
      {"eval", eval_cmd},
      {"pareto", pareto_cmd},
      {"export-scatter", export_scatter_cmd},
      {"verify-cascade", verify_cascade_cmd},
  };
  return table;
}

const char* describe(const std::string& name) {
  static const std::map<std::string, const char*> text = {
      {"gen-corpus", "generate the synthetic fact corpus (corpus.json)"},
      {"train", "train the MoE model (model.ckpt, loss_log.jsonl)"},
      {"calibrate", "per-token calibration losses and hard/easy sets (calibration.json)"},
      {"analyze-layers", "layer perturbation sensitivity and knowledge intensity (rki.json)"},
      {"analyze-experts", "counterfactual expert impact by virtual ablation (cei.json)"},
      {"build-plan", "per-layer budgets and causal priors (plan.json)"},
      {"eval", "compare routing modes on the test queries (eval.json)"},
      {"pareto", "budget and lambda sweeps (pareto.csv, lambda_sweep.csv)"},
      {"export-scatter", "gate versus impact scatter (scatter.csv)"},
      {"verify-cascade", "depth-bias check on the synthetic residual cascade (cascade.json)"},
  };
  return text.at(name);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Counterfactual routing laboratory for a toy mixture-of-experts model", "cor-lab"};
  app.set_version_flag("--version", COR_VERSION);
  app.require_subcommand(1);
  app.fallthrough();

  Flags flags;
  app.add_option("--config", flags.config, "key = value configuration file");
  app.add_option("--model", flags.model, "checkpoint path (default: <out>/model.ckpt)");
  app.add_option("--out", flags.out, "directory for outputs and default inputs")->capture_default_str();
  app.add_option("--corpus", flags.corpus, "corpus JSON (default: <out>/corpus.json)");
  app.add_option("--calibration", flags.calibration, "calibration JSON (default: <out>/calibration.json)");
  app.add_option("--rki", flags.rki, "RKI JSON (default: <out>/rki.json)");
  app.add_option("--cei", flags.cei, "CEI JSON (default: <out>/cei.json)");
  app.add_option("--plan", flags.plan, "plan JSON for eval (default: <out>/plan.json when present)");

  const std::vector<std::pair<std::string, std::string>> override_flags = {
      {"--seed", "seed"},           {"--lambda", "plan.lambda"},    {"--delta", "analysis.delta"},
      {"--p-low", "calibration.p_low"}, {"--p-high", "calibration.p_high"}, {"--k-min", "plan.k_min"},
      {"--k-max", "plan.k_max"},    {"--threads", "threads"},
  };
  std::map<std::string, std::string> override_values;
  for (const auto& [flag, key] : override_flags) {
    app.add_option(flag, override_values[key], "overrides config key " + key);
  }

  std::string chosen;
  for (const auto& [name, handler] : commands()) {
    app.add_subcommand(name, describe(name))->callback([&chosen, n = name] { chosen = n; });
  }

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    LabConfig config;
    if (!flags.config.empty()) config = parse_config(read_text_file(flags.config));
    for (const auto& [flag, key] : override_flags) {
      if (app.count(flag) > 0) set_option(config, key, override_values[key]);
    }
    if (config.study.threads == 0) throw ConfigError("threads must be positive");
    std::filesystem::create_directories(flags.out);
    Run run(chosen, std::move(config), flags, out, err);
    const auto it = std::find_if(commands().begin(), commands().end(), [&](const auto& c) { return c.first == chosen; });
    it->second(run);
    run.write_manifest();
    return 0;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace cor::cli
