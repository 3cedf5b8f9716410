#include "config.hpp"

#include <charconv>
#include <functional>
#include <map>

#include "cor/errors.hpp"

namespace cor::cli {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_value(std::string_view key, std::string_view text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("config: bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return v;
}

template <typename T>
std::vector<T> parse_list(std::string_view key, std::string_view text) {
  std::vector<T> out;
  while (true) {
    const auto comma = text.find(',');
    out.push_back(parse_value<T>(key, trim(text.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError("config: expected true or false for " + std::string(key));
}

using Setter = std::function<void(LabConfig&, std::string_view, std::string_view)>;

template <typename T, typename Get>
Setter number(Get get) {
  return [get](LabConfig& c, std::string_view k, std::string_view v) { get(c) = parse_value<T>(k, v); };
}

#define COR_SIZE(field) number<std::size_t>([](LabConfig& c) -> std::size_t& { return c.field; })
#define COR_DOUBLE(field) number<double>([](LabConfig& c) -> double& { return c.field; })

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"seed", number<std::uint64_t>([](LabConfig& c) -> std::uint64_t& { return c.seed; })},
      {"threads", COR_SIZE(study.threads)},
      {"corpus.n_head_facts", COR_SIZE(study.corpus.n_head_facts)},
      {"corpus.n_tail_facts", COR_SIZE(study.corpus.n_tail_facts)},
      {"corpus.head_repetitions", COR_SIZE(study.corpus.head_repetitions)},
      {"corpus.tail_repetitions", COR_SIZE(study.corpus.tail_repetitions)},
      {"corpus.calibration_tokens", COR_SIZE(study.corpus.calibration_tokens)},
      {"corpus.queries_per_fact", COR_SIZE(study.corpus.queries_per_fact)},
      {"corpus.seed", number<std::uint64_t>([](LabConfig& c) -> std::uint64_t& { return c.study.corpus.seed; })},
      {"model.layers", COR_SIZE(study.model.layers)},
      {"model.experts", COR_SIZE(study.model.experts)},
      {"model.k_baseline", COR_SIZE(study.model.k_baseline)},
      {"model.d_model", COR_SIZE(study.model.d_model)},
      {"model.d_ff", COR_SIZE(study.model.d_ff)},
      {"model.context", COR_SIZE(study.model.context)},
      {"model.heads", COR_SIZE(study.model.heads)},
      {"train.steps", COR_SIZE(study.train.steps)},
      {"train.batch_size", COR_SIZE(study.train.batch_size)},
      {"train.seq_len", COR_SIZE(study.train.seq_len)},
      {"train.learning_rate", COR_DOUBLE(study.train.learning_rate)},
      {"train.aux_weight", COR_DOUBLE(study.train.aux_weight)},
      {"train.optimizer",
       [](LabConfig& c, std::string_view k, std::string_view v) {
         if (v == "sgd") {
           c.study.train.optimizer = Optimizer::sgd;
         } else if (v == "adam") {
           c.study.train.optimizer = Optimizer::adam;
         } else {
           throw ConfigError("config: expected sgd or adam for " + std::string(k));
         }
       }},
      {"train.grad_clip", COR_DOUBLE(study.train.grad_clip)},
      {"train.jitter_k_min", COR_SIZE(study.train.jitter_k_min)},
      {"train.jitter_k_max", COR_SIZE(study.train.jitter_k_max)},
      {"calibration.p_low", COR_DOUBLE(study.p_low)},
      {"calibration.p_high", COR_DOUBLE(study.p_high)},
      {"analysis.delta", COR_DOUBLE(study.delta)},
      {"analysis.epsilon", COR_DOUBLE(study.epsilon)},
      {"plan.lambda", COR_DOUBLE(study.plan.lambda)},
      {"plan.k_min", COR_SIZE(study.plan.k_min)},
      {"plan.k_max",
       [](LabConfig& c, std::string_view k, std::string_view v) { c.study.plan.k_max = parse_value<std::size_t>(k, v); }},
      {"plan.k_total",
       [](LabConfig& c, std::string_view k, std::string_view v) { c.study.plan.k_total = parse_value<std::size_t>(k, v); }},
      {"plan.fuse_high_intensity_only",
       [](LabConfig& c, std::string_view k, std::string_view v) {
         c.study.plan.fuse_high_intensity_only = parse_bool(k, v);
       }},
      {"eval.static_k",
       [](LabConfig& c, std::string_view k, std::string_view v) { c.static_k = parse_list<std::size_t>(k, v); }},
      {"sweep.budget_multiples",
       [](LabConfig& c, std::string_view k, std::string_view v) {
         c.study.budget_multiples = parse_list<std::size_t>(k, v);
       }},
      {"sweep.lambdas",
       [](LabConfig& c, std::string_view k, std::string_view v) { c.study.lambdas = parse_list<double>(k, v); }},
      {"cascade.kappa",
       [](LabConfig& c, std::string_view k, std::string_view v) { c.cascade.kappa = parse_list<double>(k, v); }},
      {"cascade.gain", COR_DOUBLE(cascade.gain)},
      {"cascade.noise_floor", COR_DOUBLE(cascade.noise_floor)},
      {"cascade.width", COR_SIZE(cascade.width)},
      {"cascade.probes", COR_SIZE(cascade.probes)},
      {"cascade.seed", number<std::uint64_t>([](LabConfig& c) -> std::uint64_t& { return c.cascade.seed; })},
  };
  return table;
}

#undef COR_SIZE
#undef COR_DOUBLE

}  // namespace

void set_option(LabConfig& config, std::string_view key, std::string_view value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("config: unknown key '" + std::string(key) + "'");
  it->second(config, key, value);
}

LabConfig parse_config(std::string_view text, LabConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto end = text.find('\n');
    const std::string_view line = trim(text.substr(0, end));
    text.remove_prefix(end == std::string_view::npos ? text.size() : end + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
    }
    try {
      set_option(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

}  // namespace cor::cli
