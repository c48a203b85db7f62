#pragma once

// Synthetic verifiable arithmetic task: +/- chains over integers in [0, 99],
// several surface templates per problem, and a character-level tokenizer.

#include "sedlab/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sedlab {

struct Problem {
  std::string prompt_text;   // e.g. "23+45-17="
  std::int64_t canonical_answer = 0;
  int difficulty = 1;        // operand count is difficulty + 1
  std::uint64_t seed = 0;

  friend bool operator==(const Problem&, const Problem&) = default;
};

struct LabeledExample {
  Problem problem;
  std::string label_text;
  int template_id = 0;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

/// Number of solution template families.
inline constexpr int template_count = 4;
inline constexpr std::string_view answer_marker = "#### ";

/// Difficulty outside {1,2,3}.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Problem generate_problem(std::uint64_t seed, int difficulty);

/// Operands and signs parsed back from a prompt ("a+b-c=").
struct Expression {
  std::vector<std::int64_t> operands;
  std::vector<char> ops;  // ops[i] joins operands[i] and operands[i+1]
};
Expression parse_prompt(std::string_view prompt_text);

/// Template families:
///   0  left-to-right steps     "23+45=68, 68-17=51 #### 51"
///   1  regrouped               "p:23+45=68 n:17=17 68-17=51 #### 51"
///                              (positive terms, then negative terms, then their difference)
///   2  terse equation chain    "68-17=51 #### 51"
///   3  verbose sentences       "23 plus 45 is 68. 68 minus 17 makes 51. #### 51"
///                              (the verb "is"/"makes" per step is drawn from seed)
std::string render_solution(const Problem& problem, int template_id, std::uint64_t seed);

/// Integer after the last "#### " marker, if any.
std::optional<std::int64_t> extract_answer(std::string_view text);

/// 1 iff the extracted answer equals the canonical answer.
int verify(std::string_view completion, const Problem& problem);

class Tokenizer {
 public:
  static constexpr TokenId pad = 0;
  static constexpr TokenId bos = 1;
  static constexpr TokenId eos = 2;

  Tokenizer();

  std::size_t vocab_size() const noexcept { return 3 + alphabet_.size(); }
  std::string_view alphabet() const noexcept { return alphabet_; }
  bool supports(std::string_view text) const noexcept;

  /// Throws std::invalid_argument on characters outside the alphabet.
  std::vector<TokenId> tokenize(std::string_view text) const;
  /// Special ids are dropped.
  std::string detokenize(std::span<const TokenId> ids) const;
  /// Printable name of one token ("<eos>" for specials).
  std::string token_name(TokenId id) const;

 private:
  std::string alphabet_;
  std::vector<int> index_;  // char -> id, -1 if absent
};

/// A training sequence: BOS + prompt + label + EOS, split into model inputs
/// and the label span the loss runs over.
struct EncodedExample {
  std::vector<TokenId> inputs;    // all tokens but the last
  std::vector<TokenId> targets;   // inputs shifted by one
  std::size_t label_start = 0;    // first input row whose target is a label token
  std::size_t label_count = 0;    // label characters + EOS
};

EncodedExample encode_example(const Tokenizer& tok, const LabeledExample& ex);
std::vector<TokenId> encode_prompt(const Tokenizer& tok, const Problem& problem);

struct DatasetSpec {
  std::size_t n = 0;
  std::vector<double> template_mix{0.25, 0.25, 0.25, 0.25};
  std::vector<int> difficulties{1, 2, 3};
  std::uint64_t seed = 0;
};

/// Example i uses seed mix_seed(seed, i); output order is by index.
std::vector<LabeledExample> build_sft_dataset(const DatasetSpec& spec);

/// Problems only, seeded like build_sft_dataset.
std::vector<Problem> build_problems(std::size_t n, std::span<const int> difficulties, std::uint64_t seed);

/// Schema: {"prompt","label","answer","template_id","difficulty","seed"}.
void write_jsonl(const std::vector<LabeledExample>& examples, const std::filesystem::path& path);
/// Throws std::runtime_error naming the 1-based line number on malformed input.
std::vector<LabeledExample> read_jsonl(const std::filesystem::path& path);

/// One record of an externally produced probability log.
struct ProbabilityRecord {
  std::size_t position = 0;
  double label_prob = 0.0;
  std::vector<double> topk_probs;
};

/// Schema: {"position": int, "label_prob": real, "topk_probs": [real, ...]}.
std::vector<ProbabilityRecord> read_probability_log(const std::filesystem::path& path);

}  // namespace sedlab
