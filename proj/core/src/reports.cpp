#include "cor/reports.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cor {
namespace {

using Json = nlohmann::ordered_json;

Json parse_json(std::string_view text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(what + ": malformed JSON: " + e.what(), e.byte, "json");
  }
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

const Json& member(const Json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw FormatError("expected an object", 0, path);
  const auto it = j.find(key);
  if (it == j.end()) throw FormatError("missing field", 0, path + key);
  return *it;
}

std::size_t get_size(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = member(j, key, path);
  if (!v.is_number_unsigned()) throw FormatError("expected a non-negative integer", 0, path + key);
  return v.get<std::size_t>();
}

double get_double(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = member(j, key, path);
  if (!v.is_number()) throw FormatError("expected a number", 0, path + key);
  return v.get<double>();
}

std::optional<double> get_optional_double(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = member(j, key, path);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) throw FormatError("expected a number or null", 0, path + key);
  return v.get<double>();
}

bool get_bool(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = member(j, key, path);
  if (!v.is_boolean()) throw FormatError("expected a boolean", 0, path + key);
  return v.get<bool>();
}

std::string get_string(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = member(j, key, path);
  if (!v.is_string()) throw FormatError("expected a string", 0, path + key);
  return v.get<std::string>();
}

const Json& get_array(const Json& j, const std::string& key, const std::string& path) {
  const Json& v = member(j, key, path);
  if (!v.is_array()) throw FormatError("expected an array", 0, path + key);
  return v;
}

const Json& as_array(const Json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + ": expected a top-level array", 0, "");
  return j;
}

std::string item(const std::string& name, std::size_t i) { return name + "[" + std::to_string(i) + "]."; }

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

std::vector<int> get_ids(const Json& j, const std::string& key, const std::string& path) {
  std::vector<int> out;
  for (const Json& v : get_array(j, key, path)) {
    if (!v.is_number_integer()) throw FormatError("expected integer token ids", 0, path + key);
    out.push_back(v.get<int>());
  }
  return out;
}

Json record_json(const TokenRecord& r) {
  return Json{{"doc", r.doc}, {"pos", r.position}, {"token", r.token}, {"loss", r.loss}, {"context", r.context}};
}

TokenRecord parse_record(const Json& j, const std::string& path) {
  TokenRecord r;
  r.doc = get_size(j, "doc", path);
  r.position = get_size(j, "pos", path);
  const Json& token = member(j, "token", path);
  if (!token.is_number_integer()) throw FormatError("expected an integer token id", 0, path + "token");
  r.token = token.get<int>();
  r.loss = get_double(j, "loss", path);
  r.context = get_ids(j, "context", path);
  return r;
}

// CSV ------------------------------------------------------------------------

std::vector<std::vector<std::string>> split_csv(std::string_view text, std::string_view header) {
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 0, offset = 0;
  while (offset < text.size()) {
    const std::size_t end = std::min(text.find('\n', offset), text.size());
    const std::string_view line = text.substr(offset, end - offset);
    if (line_no == 0) {
      if (line != header) throw FormatError("unexpected CSV header", offset, "header");
    } else if (!line.empty()) {
      std::vector<std::string> cells;
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = line.find(',', start);
        cells.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      rows.push_back(std::move(cells));
    }
    ++line_no;
    offset = end + 1;
  }
  if (line_no == 0) throw FormatError("empty CSV", 0, "header");
  return rows;
}

double parse_number(const std::string& cell, const std::string& field) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) throw FormatError("bad number '" + cell + "'", 0, field);
  return v;
}

std::size_t parse_size(const std::string& cell, const std::string& field) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) throw FormatError("bad integer '" + cell + "'", 0, field);
  return v;
}

std::optional<double> parse_optional(const std::string& cell, const std::string& field) {
  if (cell.empty()) return std::nullopt;
  return parse_number(cell, field);
}

void expect_columns(const std::vector<std::string>& row, std::size_t n, std::size_t index) {
  if (row.size() != n) {
    throw FormatError("row " + std::to_string(index) + " has " + std::to_string(row.size()) + " columns, expected " +
                          std::to_string(n),
                      0, "row");
  }
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

}  // namespace

std::string format_number(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) throw Error("number formatting failed");
  return std::string(buf, ptr);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

std::string loss_log_jsonl(std::span<const LossRecord> log) {
  std::string out;
  for (const LossRecord& r : log) {
    out += Json{{"step", r.step}, {"lm_loss", r.lm_loss}, {"aux_loss", r.aux_loss}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<LossRecord> parse_loss_log(std::string_view text) {
  std::vector<LossRecord> out;
  std::size_t offset = 0;
  while (offset < text.size()) {
    const std::size_t end = std::min(text.find('\n', offset), text.size());
    const std::string_view line = text.substr(offset, end - offset);
    if (!line.empty()) {
      const std::string path = item("line", out.size());
      const Json j = parse_json(line, "loss log");
      out.push_back(LossRecord{get_size(j, "step", path), get_double(j, "lm_loss", path),
                               get_double(j, "aux_loss", path)});
    }
    offset = end + 1;
  }
  return out;
}

CalibrationReport make_calibration_report(std::span<const TokenRecord> records, const StratifiedSets& sets) {
  return CalibrationReport{records.size(), loss_histogram(records), sets};
}

std::string calibration_json(const CalibrationReport& report) {
  Json hard = Json::array(), easy = Json::array();
  for (const auto& r : report.sets.hard) hard.push_back(record_json(r));
  for (const auto& r : report.sets.easy) easy.push_back(record_json(r));
  Json j{
      {"thresholds",
       {{"p_low", report.sets.p_low},
        {"p_high", report.sets.p_high},
        {"tau_low", report.sets.tau_low},
        {"tau_high", report.sets.tau_high}}},
      {"total_records", report.total_records},
      {"histogram", {{"min", report.histogram.min}, {"max", report.histogram.max}, {"counts", report.histogram.counts}}},
      {"hard", hard},
      {"easy", easy},
  };
  return dump(j);
}

CalibrationReport parse_calibration(std::string_view text) {
  const Json j = parse_json(text, "calibration report");
  CalibrationReport report;
  const Json& t = member(j, "thresholds", "");
  report.sets.p_low = get_double(t, "p_low", "thresholds.");
  report.sets.p_high = get_double(t, "p_high", "thresholds.");
  report.sets.tau_low = get_double(t, "tau_low", "thresholds.");
  report.sets.tau_high = get_double(t, "tau_high", "thresholds.");
  report.total_records = get_size(j, "total_records", "");
  const Json& h = member(j, "histogram", "");
  report.histogram.min = get_double(h, "min", "histogram.");
  report.histogram.max = get_double(h, "max", "histogram.");
  for (const Json& c : get_array(h, "counts", "histogram.")) {
    if (!c.is_number_unsigned()) throw FormatError("expected counts", 0, "histogram.counts");
    report.histogram.counts.push_back(c.get<std::size_t>());
  }
  const Json& hard = get_array(j, "hard", "");
  for (std::size_t i = 0; i < hard.size(); ++i) report.sets.hard.push_back(parse_record(hard[i], item("hard", i)));
  const Json& easy = get_array(j, "easy", "");
  for (std::size_t i = 0; i < easy.size(); ++i) report.sets.easy.push_back(parse_record(easy[i], item("easy", i)));
  return report;
}

std::string rki_json(std::span<const LayerSensitivity> layers) {
  Json j = Json::array();
  for (const auto& s : layers) {
    j.push_back({{"layer", s.layer},
                 {"S_hard", s.s_hard},
                 {"S_easy", s.s_easy},
                 {"R_l", s.r},
                 {"n_hard", s.n_hard},
                 {"n_easy", s.n_easy}});
  }
  return dump(j);
}

std::vector<LayerSensitivity> parse_rki(std::string_view text) {
  const Json doc = parse_json(text, "RKI report");
  const Json& j = as_array(doc, "RKI report");
  std::vector<LayerSensitivity> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = item("", i);
    out.push_back(LayerSensitivity{get_size(j[i], "layer", p), get_double(j[i], "S_hard", p),
                                   get_double(j[i], "S_easy", p), get_double(j[i], "R_l", p),
                                   get_size(j[i], "n_hard", p), get_size(j[i], "n_easy", p)});
  }
  return out;
}

std::string cei_json(const ExpertImpactTable& table) {
  Json j = Json::array();
  for (const auto& c : table.cells) {
    j.push_back({{"layer", c.layer},
                 {"expert", c.expert},
                 {"cei", c.cei},
                 {"n_active", c.n_active},
                 {"mean_gate", c.mean_gate},
                 {"defined", c.defined}});
  }
  return dump(j);
}

ExpertImpactTable parse_cei(std::string_view text) {
  const Json doc = parse_json(text, "CEI table");
  const Json& j = as_array(doc, "CEI table");
  std::vector<ExpertImpact> cells;
  std::size_t layers = 0, experts = 0;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = item("", i);
    ExpertImpact c;
    c.layer = get_size(j[i], "layer", p);
    c.expert = get_size(j[i], "expert", p);
    c.cei = get_double(j[i], "cei", p);
    c.n_active = get_size(j[i], "n_active", p);
    c.mean_gate = get_double(j[i], "mean_gate", p);
    c.defined = get_bool(j[i], "defined", p);
    layers = std::max(layers, c.layer + 1);
    experts = std::max(experts, c.expert + 1);
    cells.push_back(c);
  }
  if (cells.empty() || cells.size() != layers * experts) throw FormatError("CEI table grid is incomplete", 0, "cells");
  ExpertImpactTable table;
  table.layers = layers;
  table.experts = experts;
  table.cells.resize(cells.size());
  std::vector<bool> seen(cells.size(), false);
  for (const ExpertImpact& c : cells) {
    const std::size_t index = c.layer * experts + c.expert;
    if (seen[index]) throw FormatError("duplicate CEI cell", 0, "cells");
    seen[index] = true;
    table.cells[index] = c;
  }
  return table;
}

std::string plan_json(const RoutingPlan& plan) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const PlanLayer& p = plan.layers[l];
    layers.push_back({{"l", l}, {"k_l", p.k}, {"R_l", p.r}, {"prior", p.prior}});
  }
  return dump(Json{{"K_total", plan.k_total},
                   {"lambda", plan.lambda},
                   {"k_min", plan.k_min},
                   {"k_max", plan.k_max},
                   {"layers", layers}});
}

RoutingPlan parse_plan(std::string_view text) {
  const Json j = parse_json(text, "routing plan");
  RoutingPlan plan;
  plan.k_total = get_size(j, "K_total", "");
  plan.lambda = get_double(j, "lambda", "");
  plan.k_min = get_size(j, "k_min", "");
  plan.k_max = get_size(j, "k_max", "");
  const Json& layers = get_array(j, "layers", "");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = item("layers", i);
    if (get_size(layers[i], "l", p) != i) throw FormatError("layers out of order", 0, p + "l");
    PlanLayer layer;
    layer.k = get_size(layers[i], "k_l", p);
    layer.r = get_double(layers[i], "R_l", p);
    for (const Json& v : get_array(layers[i], "prior", p)) {
      if (!v.is_number()) throw FormatError("expected numbers", 0, p + "prior");
      layer.prior.push_back(v.get<float>());
    }
    plan.layers.push_back(std::move(layer));
  }
  return plan;
}

std::string eval_json(const EvalReport& report) {
  Json modes = Json::array();
  for (const ModeReport& m : report.modes) {
    modes.push_back({{"mode", m.mode},
                     {"K_total", m.k_total},
                     {"accuracy", m.accuracy},
                     {"head_accuracy", optional_json(m.head_accuracy)},
                     {"tail_accuracy", optional_json(m.tail_accuracy)},
                     {"nll", m.nll},
                     {"activations", m.activations},
                     {"queries", m.queries}});
  }
  return dump(Json{{"metric", report.metric}, {"modes", modes}});
}

EvalReport parse_eval(std::string_view text) {
  const Json j = parse_json(text, "eval report");
  EvalReport report;
  report.metric = get_string(j, "metric", "");
  const Json& modes = get_array(j, "modes", "");
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const std::string p = item("modes", i);
    ModeReport m;
    m.mode = get_string(modes[i], "mode", p);
    m.k_total = get_size(modes[i], "K_total", p);
    m.accuracy = get_double(modes[i], "accuracy", p);
    m.head_accuracy = get_optional_double(modes[i], "head_accuracy", p);
    m.tail_accuracy = get_optional_double(modes[i], "tail_accuracy", p);
    m.nll = get_double(modes[i], "nll", p);
    m.activations = get_size(modes[i], "activations", p);
    m.queries = get_size(modes[i], "queries", p);
    report.modes.push_back(std::move(m));
  }
  return report;
}

std::string corpus_json(const FactCorpusSpec& spec, const FactCorpus& corpus) {
  Json facts = Json::array(), test = Json::array();
  for (const Fact& f : corpus.facts) {
    facts.push_back(
        {{"subject", f.subject}, {"relation", f.relation}, {"object", std::string(1, f.object)}, {"tail", f.tail}});
  }
  for (const Query& q : corpus.test) {
    test.push_back(
        {{"fact", q.fact}, {"prompt", q.prompt}, {"object", std::string(1, q.object)}, {"tail", q.tail}});
  }
  return dump(Json{{"spec",
                    {{"n_head_facts", spec.n_head_facts},
                     {"n_tail_facts", spec.n_tail_facts},
                     {"head_repetitions", spec.head_repetitions},
                     {"tail_repetitions", spec.tail_repetitions},
                     {"calibration_tokens", spec.calibration_tokens},
                     {"queries_per_fact", spec.queries_per_fact},
                     {"seed", spec.seed}}},
                   {"facts", facts},
                   {"train", corpus.train},
                   {"calibration", corpus.calibration},
                   {"test", test}});
}

std::pair<FactCorpusSpec, FactCorpus> parse_corpus(std::string_view text) {
  const Json j = parse_json(text, "corpus");
  FactCorpusSpec spec;
  const Json& s = member(j, "spec", "");
  spec.n_head_facts = get_size(s, "n_head_facts", "spec.");
  spec.n_tail_facts = get_size(s, "n_tail_facts", "spec.");
  spec.head_repetitions = get_size(s, "head_repetitions", "spec.");
  spec.tail_repetitions = get_size(s, "tail_repetitions", "spec.");
  spec.calibration_tokens = get_size(s, "calibration_tokens", "spec.");
  spec.queries_per_fact = get_size(s, "queries_per_fact", "spec.");
  spec.seed = get_size(s, "seed", "spec.");

  auto single_char = [](const Json& v, const std::string& path) {
    const std::string str = get_string(v, "object", path);
    if (str.size() != 1) throw FormatError("object must be one character", 0, path + "object");
    return str[0];
  };
  auto strings = [](const Json& arr, const std::string& key) {
    std::vector<std::string> out;
    for (const Json& v : arr) {
      if (!v.is_string()) throw FormatError("expected strings", 0, key);
      out.push_back(v.get<std::string>());
    }
    return out;
  };

  FactCorpus corpus;
  const Json& facts = get_array(j, "facts", "");
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const std::string p = item("facts", i);
    corpus.facts.push_back(Fact{get_string(facts[i], "subject", p), get_size(facts[i], "relation", p),
                                single_char(facts[i], p), get_bool(facts[i], "tail", p)});
  }
  corpus.train = strings(get_array(j, "train", ""), "train");
  corpus.calibration = strings(get_array(j, "calibration", ""), "calibration");
  const Json& test = get_array(j, "test", "");
  for (std::size_t i = 0; i < test.size(); ++i) {
    const std::string p = item("test", i);
    corpus.test.push_back(Query{get_size(test[i], "fact", p), get_string(test[i], "prompt", p),
                                single_char(test[i], p), get_bool(test[i], "tail", p)});
  }
  return {spec, corpus};
}

std::string cascade_json(const CascadeSpec& spec, const CascadeReport& report) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < report.r.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"kappa", spec.kappa[l]},
                      {"S_hard", report.s_hard[l]},
                      {"S_easy", report.s_easy[l]},
                      {"R_l", report.r[l]}});
  }
  return dump(Json{{"gain", spec.gain},
                   {"noise_floor", spec.noise_floor},
                   {"delta", spec.delta},
                   {"epsilon", spec.epsilon},
                   {"width", spec.width},
                   {"probes", spec.probes},
                   {"seed", spec.seed},
                   {"layers", layers}});
}

std::pair<CascadeSpec, CascadeReport> parse_cascade(std::string_view text) {
  const Json j = parse_json(text, "cascade report");
  CascadeSpec spec;
  spec.gain = get_double(j, "gain", "");
  spec.noise_floor = get_double(j, "noise_floor", "");
  spec.delta = get_double(j, "delta", "");
  spec.epsilon = get_double(j, "epsilon", "");
  spec.width = get_size(j, "width", "");
  spec.probes = get_size(j, "probes", "");
  spec.seed = get_size(j, "seed", "");
  CascadeReport report;
  const Json& layers = get_array(j, "layers", "");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = item("layers", l);
    if (get_size(layers[l], "layer", p) != l) throw FormatError("layers out of order", 0, p + "layer");
    spec.kappa.push_back(get_double(layers[l], "kappa", p));
    report.s_hard.push_back(get_double(layers[l], "S_hard", p));
    report.s_easy.push_back(get_double(layers[l], "S_easy", p));
    report.r.push_back(get_double(layers[l], "R_l", p));
  }
  return {spec, report};
}

std::string pareto_csv(std::span<const ParetoRow> rows) {
  std::string out = "mode,K_total,accuracy,tail_accuracy,nll\n";
  for (const ParetoRow& r : rows) {
    out += r.mode + "," + std::to_string(r.k_total) + "," + format_number(r.accuracy) + "," +
           optional_cell(r.tail_accuracy) + "," + format_number(r.nll) + "\n";
  }
  return out;
}

std::vector<ParetoRow> parse_pareto_csv(std::string_view text) {
  std::vector<ParetoRow> out;
  const auto rows = split_csv(text, "mode,K_total,accuracy,tail_accuracy,nll");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    expect_columns(rows[i], 5, i);
    out.push_back(ParetoRow{rows[i][0], parse_size(rows[i][1], "K_total"), parse_number(rows[i][2], "accuracy"),
                            parse_optional(rows[i][3], "tail_accuracy"), parse_number(rows[i][4], "nll")});
  }
  return out;
}

std::string scatter_csv(std::span<const ScatterRow> rows) {
  std::string out = "layer,expert,mean_gate,cei,defined\n";
  for (const ScatterRow& r : rows) {
    out += std::to_string(r.layer) + "," + std::to_string(r.expert) + "," + format_number(r.mean_gate) + "," +
           format_number(r.cei) + "," + (r.defined ? "true" : "false") + "\n";
  }
  return out;
}

std::vector<ScatterRow> parse_scatter_csv(std::string_view text) {
  std::vector<ScatterRow> out;
  const auto rows = split_csv(text, "layer,expert,mean_gate,cei,defined");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    expect_columns(rows[i], 5, i);
    const std::string& flag = rows[i][4];
    if (flag != "true" && flag != "false") throw FormatError("bad boolean '" + flag + "'", 0, "defined");
    out.push_back(ScatterRow{parse_size(rows[i][0], "layer"), parse_size(rows[i][1], "expert"),
                             parse_number(rows[i][2], "mean_gate"), parse_number(rows[i][3], "cei"), flag == "true"});
  }
  return out;
}

std::string lambda_csv(std::span<const LambdaRow> rows) {
  std::string out = "lambda,accuracy,tail_accuracy,nll\n";
  for (const LambdaRow& r : rows) {
    out += format_number(r.lambda) + "," + format_number(r.accuracy) + "," + optional_cell(r.tail_accuracy) + "," +
           format_number(r.nll) + "\n";
  }
  return out;
}

std::vector<LambdaRow> parse_lambda_csv(std::string_view text) {
  std::vector<LambdaRow> out;
  const auto rows = split_csv(text, "lambda,accuracy,tail_accuracy,nll");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    expect_columns(rows[i], 4, i);
    out.push_back(LambdaRow{parse_number(rows[i][0], "lambda"), parse_number(rows[i][1], "accuracy"),
                            parse_optional(rows[i][2], "tail_accuracy"), parse_number(rows[i][3], "nll")});
  }
  return out;
}

}  // namespace cor
