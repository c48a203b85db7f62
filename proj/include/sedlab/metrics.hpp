#pragma once

// Diversity and accuracy metrics: BLEU / Self-BLEU over whitespace words,
// distinct-n, avg@k and mean token entropy.

#include "sedlab/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sedlab {

using Sentence = std::vector<std::string>;

/// Whitespace-separated words.
Sentence words(std::string_view text);

/// Corpus BLEU of one candidate against references, in [0, 100].
/// Modified n-gram precisions for n = 1..max_n; a precision with zero matches
/// becomes 1/(c+1) (add-one), others are left as is. Brevity penalty uses the
/// reference length closest to the candidate (ties go to the shorter one).
/// An empty candidate scores 0.
double bleu(const Sentence& candidate, std::span<const Sentence> references, std::size_t max_n = 4);

/// Mean over sentences of bleu(sentence, all other sentences). Needs >= 2.
double self_bleu(std::span<const Sentence> corpus, std::size_t max_n = 4);

/// Mean over problems of passes / k. Throws on ragged or empty input.
double avg_at_k(const std::vector<std::vector<bool>>& pass_matrix);

/// Unique n-grams / total n-grams over the corpus; 0 when there are none.
double distinct_n(std::span<const Sentence> corpus, std::size_t n);

/// Mean Shannon entropy (nats) over positions.
double mean_token_entropy(std::span<const TokenDistribution> distributions);

struct MetricsReport {
  double self_bleu = 0.0;
  double distinct_1 = 0.0;
  double distinct_2 = 0.0;
  double avg_at_k = 0.0;
  double mean_token_entropy = 0.0;
  std::size_t sample_count = 0;
  double greedy_accuracy = 0.0;
  // Protocol the numbers were produced under.
  std::size_t k = 8;
  double temperature = 0.7;
  std::size_t eval_problems = 0;
  std::size_t diversity_samples = 0;
  double diversity_temperature = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

void write_metrics_json(const MetricsReport& r, const std::filesystem::path& path);
/// Header plus one row.
void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path);

}  // namespace sedlab
