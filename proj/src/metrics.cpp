#include "sedlab/metrics.hpp"

#include "sedlab/csv.hpp"
#include "sedlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace sedlab {

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  if (s.size() < n) {
    return counts;
  }
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[Ngram(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

Sentence words(std::string_view text) {
  Sentence out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) {
      out.emplace_back(text.substr(i, j - i));
    }
    i = j;
  }
  return out;
}

double bleu(const Sentence& candidate, std::span<const Sentence> references, std::size_t max_n) {
  if (references.empty()) {
    throw std::invalid_argument("bleu: no references");
  }
  if (max_n == 0) {
    throw std::invalid_argument("bleu: max_n must be >= 1");
  }
  if (candidate.empty()) {
    std::fprintf(stderr, "warning: bleu of an empty candidate is 0\n");
    return 0.0;
  }
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cand = ngram_counts(candidate, n);
    std::map<Ngram, std::size_t> max_ref;
    for (const auto& ref : references) {
      for (const auto& [g, c] : ngram_counts(ref, n)) {
        auto& m = max_ref[g];
        m = std::max(m, c);
      }
    }
    std::size_t matches = 0;
    std::size_t total = 0;
    for (const auto& [g, c] : cand) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) {
        matches += std::min(c, it->second);
      }
    }
    const double precision = matches == 0 ? 1.0 / static_cast<double>(total + 1)
                                          : static_cast<double>(matches) / static_cast<double>(total);
    log_sum += std::log(precision);
  }
  const double geo = std::exp(log_sum / static_cast<double>(max_n));

  const double c = static_cast<double>(candidate.size());
  std::size_t best = references.front().size();
  for (const auto& ref : references) {
    const auto d = [&](std::size_t len) { return std::abs(static_cast<double>(len) - c); };
    if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) {
      best = ref.size();
    }
  }
  const double bp = static_cast<double>(best) > c ? std::exp(1.0 - static_cast<double>(best) / c) : 1.0;
  return std::clamp(100.0 * bp * geo, 0.0, 100.0);
}

double self_bleu(std::span<const Sentence> corpus, std::size_t max_n) {
  if (corpus.size() < 2) {
    throw std::invalid_argument("self_bleu: need at least 2 sentences, got " + std::to_string(corpus.size()));
  }
  std::vector<Sentence> others;
  others.reserve(corpus.size() - 1);
  std::vector<double> scores;
  scores.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    others.clear();
    for (std::size_t j = 0; j < corpus.size(); ++j) {
      if (j != i) {
        others.push_back(corpus[j]);
      }
    }
    scores.push_back(bleu(corpus[i], others, max_n));
  }
  // Summing in sorted order makes the mean independent of corpus order.
  std::sort(scores.begin(), scores.end());
  double total = 0.0;
  for (double s : scores) {
    total += s;
  }
  return total / static_cast<double>(corpus.size());
}

double avg_at_k(const std::vector<std::vector<bool>>& pass_matrix) {
  if (pass_matrix.empty()) {
    throw std::invalid_argument("avg_at_k: no problems");
  }
  const std::size_t k = pass_matrix.front().size();
  if (k == 0) {
    throw std::invalid_argument("avg_at_k: k must be >= 1");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pass_matrix.size(); ++i) {
    const auto& row = pass_matrix[i];
    if (row.size() != k) {
      throw std::invalid_argument("avg_at_k: problem " + std::to_string(i) + " has " + std::to_string(row.size()) +
                                  " samples, expected " + std::to_string(k));
    }
    total += static_cast<double>(std::count(row.begin(), row.end(), true)) / static_cast<double>(k);
  }
  return total / static_cast<double>(pass_matrix.size());
}

double distinct_n(std::span<const Sentence> corpus, std::size_t n) {
  if (n == 0) {
    throw std::invalid_argument("distinct_n: n must be >= 1");
  }
  std::set<Ngram> unique;
  std::size_t total = 0;
  for (const auto& s : corpus) {
    for (const auto& [g, c] : ngram_counts(s, n)) {
      unique.insert(g);
      total += c;
    }
  }
  if (total == 0) {
    std::fprintf(stderr, "warning: distinct_%zu over a corpus without %zu-grams is 0\n", n, n);
    return 0.0;
  }
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double mean_token_entropy(std::span<const TokenDistribution> distributions) {
  if (distributions.empty()) {
    throw std::invalid_argument("mean_token_entropy: no distributions");
  }
  double total = 0.0;
  for (const auto& d : distributions) {
    total += entropy(d.probs);
  }
  return total / static_cast<double>(distributions.size());
}

void MetricsReport::validate() const {
  for (double v : {self_bleu, distinct_1, distinct_2, avg_at_k, mean_token_entropy, greedy_accuracy}) {
    if (!std::isfinite(v)) {
      throw std::domain_error("MetricsReport: non-finite field");
    }
  }
  if (avg_at_k < 0.0 || avg_at_k > 1.0) {
    throw std::domain_error("MetricsReport: avg_at_k outside [0, 1]");
  }
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"self_bleu", r.self_bleu},
                     {"distinct_1", r.distinct_1},
                     {"distinct_2", r.distinct_2},
                     {"avg_at_k", r.avg_at_k},
                     {"mean_token_entropy", r.mean_token_entropy},
                     {"sample_count", r.sample_count},
                     {"greedy_accuracy", r.greedy_accuracy},
                     {"protocol",
                      {{"k", r.k},
                       {"temperature", r.temperature},
                       {"eval_problems", r.eval_problems},
                       {"diversity_samples", r.diversity_samples},
                       {"diversity_temperature", r.diversity_temperature}}}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.self_bleu = j.at("self_bleu").get<double>();
  r.distinct_1 = j.at("distinct_1").get<double>();
  r.distinct_2 = j.at("distinct_2").get<double>();
  r.avg_at_k = j.at("avg_at_k").get<double>();
  r.mean_token_entropy = j.at("mean_token_entropy").get<double>();
  r.sample_count = j.at("sample_count").get<std::size_t>();
  r.greedy_accuracy = j.value("greedy_accuracy", 0.0);
  if (j.contains("protocol")) {
    const auto& p = j.at("protocol");
    r.k = p.value("k", r.k);
    r.temperature = p.value("temperature", r.temperature);
    r.eval_problems = p.value("eval_problems", r.eval_problems);
    r.diversity_samples = p.value("diversity_samples", r.diversity_samples);
    r.diversity_temperature = p.value("diversity_temperature", r.diversity_temperature);
  }
}

void write_metrics_json(const MetricsReport& r, const std::filesystem::path& path) {
  r.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  out << nlohmann::json(r).dump(2) << '\n';
}

void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path) {
  r.validate();
  CsvWriter csv(path, {"self_bleu", "distinct_1", "distinct_2", "avg_at_k", "mean_token_entropy", "sample_count",
                       "greedy_accuracy", "k", "temperature"});
  csv.row(r.self_bleu, r.distinct_1, r.distinct_2, r.avg_at_k, r.mean_token_entropy, r.sample_count,
          r.greedy_accuracy, r.k, r.temperature);
}

}  // namespace sedlab
