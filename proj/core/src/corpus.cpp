#include "cor/corpus.hpp"

#include <algorithm>
#include <array>
#include <random>
#include <set>

#include "cor/errors.hpp"

namespace cor {
namespace {

constexpr std::string_view kObjectSymbols = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

// Sentence = subject + middle + object + ". ". Subjects lead so that the
// first character of a document carries the entity name.
constexpr std::array<std::string_view, kRelations> kTemplates = {
    " lives in ",
    " works for ",
    " paints with ",
    " was born in ",
};

}  // namespace

void FactCorpusSpec::validate() const {
  if (n_head_facts == 0) throw ConfigError("corpus: need at least one head fact");
  if (n_head_facts + n_tail_facts > kObjectSymbols.size()) {
    throw ConfigError("corpus: at most " + std::to_string(kObjectSymbols.size()) + " facts are supported");
  }
  if (head_repetitions == 0) throw ConfigError("corpus: head repetitions must be positive");
  if (queries_per_fact == 0) throw ConfigError("corpus: need at least one query per fact");
  if (n_tail_facts > 0 && tail_repetitions >= head_repetitions) {
    throw ConfigError("corpus: tail repetitions must be below head repetitions");
  }
}

std::string render_fact(std::size_t relation, std::string_view subject, char object) {
  const std::string_view middle = kTemplates.at(relation);
  std::string out;
  out.reserve(subject.size() + middle.size() + 3);
  out.append(subject).append(middle);
  out.push_back(object);
  out.append(". ");
  return out;
}

FactCorpus generate_corpus(const FactCorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  FactCorpus corpus;

  const std::size_t total = spec.n_head_facts + spec.n_tail_facts;
  std::set<std::string> used;
  std::uniform_int_distribution<int> letter(0, 25);
  std::uniform_int_distribution<std::size_t> relation(0, kRelations - 1);
  std::vector<char> objects(kObjectSymbols.begin(), kObjectSymbols.begin() + static_cast<std::ptrdiff_t>(total));
  std::shuffle(objects.begin(), objects.end(), rng);
  for (std::size_t f = 0; f < total; ++f) {
    std::string subject;
    do {
      subject.clear();
      for (int i = 0; i < 3; ++i) subject.push_back(static_cast<char>('a' + letter(rng)));
    } while (!used.insert(subject).second);
    corpus.facts.push_back(Fact{subject, relation(rng), objects[f], f >= spec.n_head_facts});
  }

  auto render = [](const Fact& fact) { return render_fact(fact.relation, fact.subject, fact.object); };

  for (const Fact& fact : corpus.facts) {
    const std::size_t reps = fact.tail ? spec.tail_repetitions : spec.head_repetitions;
    for (std::size_t r = 0; r < reps; ++r) corpus.train.push_back(render(fact));
  }
  std::shuffle(corpus.train.begin(), corpus.train.end(), rng);

  // Calibration text follows the training distribution: facts are drawn in
  // proportion to their repetition counts.
  std::vector<double> weights;
  for (const Fact& fact : corpus.facts) {
    weights.push_back(static_cast<double>(fact.tail ? spec.tail_repetitions : spec.head_repetitions));
  }
  std::discrete_distribution<std::size_t> pick_fact(weights.begin(), weights.end());
  std::size_t predictable = 0;
  while (predictable < spec.calibration_tokens) {
    std::string doc = render(corpus.facts[pick_fact(rng)]);
    predictable += doc.size() - 1;
    corpus.calibration.push_back(std::move(doc));
  }

  // Queries: the fact on its own, then preceded by other facts so the
  // prompt is a context never seen verbatim in training.
  std::uniform_int_distribution<std::size_t> other_fact(0, total - 2);
  for (std::size_t f = 0; f < total; ++f) {
    const Fact& fact = corpus.facts[f];
    std::string sentence = render(fact);
    sentence.resize(sentence.size() - 3);  // drop object, period and space
    for (std::size_t v = 0; v < spec.queries_per_fact; ++v) {
      std::string prompt;
      if (v > 0 && total > 1) {
        std::size_t g = other_fact(rng);
        if (g >= f) ++g;
        prompt = render(corpus.facts[g]);
      }
      corpus.test.push_back(Query{f, prompt + sentence, fact.object, fact.tail});
    }
  }
  return corpus;
}

Tokenizer::Tokenizer(std::string alphabet) : alphabet_(std::move(alphabet)), index_(256, -1) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    auto& slot = index_[static_cast<unsigned char>(alphabet_[i])];
    if (slot != -1) throw InputError("tokenizer alphabet repeats a character");
    slot = static_cast<int>(i);
  }
}

Tokenizer Tokenizer::for_corpus(const FactCorpus& corpus) {
  std::set<char> chars;
  auto add = [&](std::string_view s) { chars.insert(s.begin(), s.end()); };
  for (const auto& s : corpus.train) add(s);
  for (const auto& s : corpus.calibration) add(s);
  for (const auto& q : corpus.test) {
    add(q.prompt);
    chars.insert(q.object);
  }
  return Tokenizer(std::string(chars.begin(), chars.end()));
}

int Tokenizer::id(char c) const {
  const int v = index_[static_cast<unsigned char>(c)];
  if (v < 0) throw InputError(std::string("character '") + c + "' is not in the tokenizer alphabet");
  return v;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id(c));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int v : ids) {
    if (v < 0 || static_cast<std::size_t>(v) >= alphabet_.size()) throw IndexError("token id out of range");
    out.push_back(alphabet_[static_cast<std::size_t>(v)]);
  }
  return out;
}

std::vector<std::vector<int>> encode_all(const Tokenizer& tokenizer, const std::vector<std::string>& texts) {
  std::vector<std::vector<int>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenizer.encode(t));
  return out;
}

}  // namespace cor
