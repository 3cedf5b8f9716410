#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "config.hpp"
#include "cor/errors.hpp"
#include "cor/reports.hpp"

using namespace cor;
namespace fs = std::filesystem;

namespace {

const char* const kTinyConfig = R"(# tiny lab for tests
seed = 3
corpus.n_head_facts = 4
corpus.n_tail_facts = 4
corpus.calibration_tokens = 300
corpus.queries_per_fact = 2
model.layers = 2
model.experts = 4
model.d_model = 16
model.d_ff = 16
model.heads = 2
train.steps = 20
train.jitter_k_min = 1
train.jitter_k_max = 3
sweep.budget_multiples = 1, 2
sweep.lambdas = 0.1, 0.5
cascade.kappa = 1, 2, 1
)";

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result lab(std::vector<std::string> args) {
  args.insert(args.begin(), "cor-lab");
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cor_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "lab.cfg";
  std::ofstream(p) << text;
  return p;
}

const std::vector<std::string> kPipeline = {"gen-corpus", "train",    "calibrate", "analyze-layers", "analyze-experts",
                                            "build-plan", "eval",     "pareto",    "export-scatter", "verify-cascade"};

const std::vector<std::string> kOutputs = {"corpus.json", "model.ckpt", "loss_log.jsonl", "calibration.json",
                                           "rki.json",    "cei.json",   "plan.json",      "eval.json",
                                           "pareto.csv",  "lambda_sweep.csv", "scatter.csv", "cascade.json"};

std::map<std::string, std::string> run_pipeline(const fs::path& dir, const fs::path& config) {
  std::map<std::string, std::string> files;
  for (const std::string& sub : kPipeline) {
    const Result r = lab({sub, "--config", config.string(), "--out", dir.string()});
    INFO(sub << ": " << r.err);
    REQUIRE(r.code == 0);
  }
  for (const std::string& f : kOutputs) {
    INFO(f);
    REQUIRE(fs::exists(dir / f));
    files[f] = read_text_file(dir / f);
  }
  return files;
}

}  // namespace

TEST_CASE("config files parse keys, comments and lists") {
  const cli::LabConfig c = cli::parse_config(kTinyConfig);
  CHECK(c.seed == 3);
  CHECK(c.study.model.layers == 2);
  CHECK(c.study.model.d_model == 16);
  CHECK(c.study.train.steps == 20);
  CHECK(c.study.budget_multiples == std::vector<std::size_t>{1, 2});
  CHECK(c.study.lambdas == std::vector<double>{0.1, 0.5});
  CHECK(c.cascade.kappa == std::vector<double>{1, 2, 1});

  cli::LabConfig base;
  base.seed = 9;
  CHECK(cli::parse_config("\n# only a comment\n", base).seed == 9);
  CHECK(cli::parse_config("plan.fuse_high_intensity_only = true").study.plan.fuse_high_intensity_only);
  CHECK(cli::parse_config("train.optimizer = sgd").study.train.optimizer == Optimizer::sgd);
}

TEST_CASE("config errors name the line") {
  for (const char* text : {"seed = 1\nmodel.colour = 3\n", "seed = 1\nmodel.layers 3\n", "seed = 1\nmodel.layers = x\n",
                           "seed = 1\ntrain.optimizer = rmsprop\n", "seed = 1\nplan.lambda =\n"}) {
    INFO(text);
    try {
      cli::parse_config(text);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("config line 2:") != std::string::npos);
    }
  }
}

TEST_CASE("the full pipeline runs, writes manifests and is reproducible") {
  const fs::path dir = scratch("pipeline");
  const fs::path config = write_config(dir, kTinyConfig);
  const auto first = run_pipeline(dir / "a", config);
  const auto second = run_pipeline(dir / "b", config);
  CHECK(first == second);

  for (const std::string& sub : kPipeline) {
    const fs::path manifest = dir / "a" / (sub + ".manifest.json");
    INFO(sub);
    REQUIRE(fs::exists(manifest));
    const auto j = nlohmann::json::parse(read_text_file(manifest));
    CHECK(j.at("subcommand") == sub);
    CHECK(j.at("seed") == 3);
    CHECK(j.at("outputs").is_object());
  }

  const RoutingPlan plan = parse_plan(first.at("plan.json"));
  CHECK(plan.layers.size() == 2);
  CHECK(plan.k_total == 4);
  const EvalReport eval = parse_eval(first.at("eval.json"));
  CHECK(eval.find("cor") != nullptr);
  CHECK(eval.find("standard")->activations == eval.find("cor")->activations);
  CHECK(parse_pareto_csv(first.at("pareto.csv")).size() == 4);
  CHECK(parse_lambda_csv(first.at("lambda_sweep.csv")).size() == 2);
}

TEST_CASE("rerunning a subcommand reproduces its output byte for byte") {
  const fs::path dir = scratch("rerun");
  const fs::path config = write_config(dir, kTinyConfig);
  const std::string out = dir.string();
  REQUIRE(lab({"gen-corpus", "--config", config.string(), "--out", out}).code == 0);
  REQUIRE(lab({"train", "--config", config.string(), "--out", out}).code == 0);
  const std::string ckpt = read_text_file(dir / "model.ckpt");
  REQUIRE(lab({"train", "--config", config.string(), "--out", out}).code == 0);
  CHECK(read_text_file(dir / "model.ckpt") == ckpt);
  REQUIRE(lab({"train", "--config", config.string(), "--out", out, "--seed", "4"}).code == 0);
  CHECK(read_text_file(dir / "model.ckpt") != ckpt);
}

TEST_CASE("lambda outside the robust regime warns on stderr") {
  const fs::path dir = scratch("lambda");
  const fs::path config = write_config(dir, kTinyConfig);
  const std::string out = dir.string();
  for (const char* sub : {"gen-corpus", "train", "calibrate", "analyze-layers", "analyze-experts"}) {
    REQUIRE(lab({sub, "--config", config.string(), "--out", out}).code == 0);
  }
  const Result quiet = lab({"build-plan", "--config", config.string(), "--out", out});
  REQUIRE(quiet.code == 0);
  CHECK(quiet.err.find("robust regime") == std::string::npos);
  const Result loud = lab({"build-plan", "--config", config.string(), "--out", out, "--lambda", "0.9"});
  REQUIRE(loud.code == 0);
  CHECK(loud.err.find("robust regime") != std::string::npos);
  CHECK(parse_plan(read_text_file(dir / "plan.json")).lambda == 0.9);
}

TEST_CASE("usage, input and config errors exit with 2") {
  const fs::path dir = scratch("errors");
  CHECK(lab({}).code == 2);
  CHECK(lab({"no-such-command"}).code == 2);
  const Result missing = lab({"calibrate", "--out", dir.string()});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("error:") != std::string::npos);
  CHECK(lab({"gen-corpus", "--out", dir.string(), "--threads", "0"}).code == 2);
  CHECK(lab({"gen-corpus", "--config", (dir / "absent.cfg").string(), "--out", dir.string()}).code == 2);
  const fs::path bad = write_config(dir, "model.layers = 2\nbogus = 1\n");
  const Result r = lab({"gen-corpus", "--config", bad.string(), "--out", dir.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("config line 2") != std::string::npos);
  CHECK(lab({"--help"}).code == 0);
}

TEST_CASE("a diverging run exits with 3") {
  const fs::path dir = scratch("diverge");
  const fs::path config = write_config(
      dir, std::string(kTinyConfig) + "train.optimizer = sgd\ntrain.grad_clip = 0\ntrain.learning_rate = 1e300\n");
  REQUIRE(lab({"gen-corpus", "--config", config.string(), "--out", dir.string()}).code == 0);
  const Result r = lab({"train", "--config", config.string(), "--out", dir.string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("numeric error") != std::string::npos);
}
