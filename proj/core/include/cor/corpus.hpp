#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cor {

struct FactCorpusSpec {
  std::size_t n_head_facts = 12;
  std::size_t n_tail_facts = 24;
  std::size_t head_repetitions = 24;
  std::size_t tail_repetitions = 3;
  /// Calibration documents are added until this many tokens are predictable.
  std::size_t calibration_tokens = 1000;
  /// Test prompts per fact: one bare, the rest preceded by another fact.
  std::size_t queries_per_fact = 3;
  std::uint64_t seed = 7;

  /// Throws ConfigError on tail_repetitions >= head_repetitions, zero head
  /// facts or more facts than distinct object symbols.
  void validate() const;
};

struct Fact {
  std::string subject;
  std::size_t relation = 0;
  char object = 0;
  bool tail = false;
};

/// Completion prompt; the model must produce `object` after `prompt`.
struct Query {
  std::size_t fact = 0;
  std::string prompt;
  char object = 0;
  bool tail = false;
};

struct FactCorpus {
  std::vector<Fact> facts;
  std::vector<std::string> train;
  std::vector<std::string> calibration;
  std::vector<Query> test;
};

inline constexpr std::size_t kRelations = 4;

/// "<subject> <relation words> <object>. "; the object is the character
/// before the closing period.
std::string render_fact(std::size_t relation, std::string_view subject, char object);

FactCorpus generate_corpus(const FactCorpusSpec& spec);

/// Character-level tokenizer over a fixed sorted alphabet.
class Tokenizer {
 public:
  explicit Tokenizer(std::string alphabet);
  /// Alphabet of every character in the corpus (all splits), sorted.
  static Tokenizer for_corpus(const FactCorpus& corpus);

  const std::string& alphabet() const noexcept { return alphabet_; }
  std::size_t vocab_size() const noexcept { return alphabet_.size(); }
  /// Throws InputError on a character outside the alphabet.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;
  int id(char c) const;

 private:
  std::string alphabet_;
  std::vector<int> index_;
};

std::vector<std::vector<int>> encode_all(const Tokenizer& tokenizer, const std::vector<std::string>& texts);

}  // namespace cor
