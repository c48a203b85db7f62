#include "sedlab/metrics.hpp"

#include "sedlab/rng.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

using namespace sedlab;

namespace {

// Straight transcription of the BLEU convention, used as an oracle.
double oracle_bleu(const Sentence& c, const std::vector<Sentence>& refs) {
  if (c.empty()) {
    return 0.0;
  }
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, int> cand, best;
    for (std::size_t i = 0; i + n <= c.size(); ++i) {
      cand[{c.begin() + i, c.begin() + i + n}]++;
    }
    for (const auto& r : refs) {
      std::map<std::vector<std::string>, int> rc;
      for (std::size_t i = 0; i + n <= r.size(); ++i) {
        rc[{r.begin() + i, r.begin() + i + n}]++;
      }
      for (const auto& [g, k] : rc) {
        best[g] = std::max(best[g], k);
      }
    }
    int match = 0, total = 0;
    for (const auto& [g, k] : cand) {
      total += k;
      match += std::min(k, best.count(g) ? best[g] : 0);
    }
    const double p = match == 0 ? 1.0 / (total + 1.0) : static_cast<double>(match) / total;
    log_sum += std::log(p);
  }
  std::size_t ref_len = refs[0].size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t l) { return std::abs(static_cast<double>(l) - static_cast<double>(c.size())); };
    if (d(r.size()) < d(ref_len) || (d(r.size()) == d(ref_len) && r.size() < ref_len)) {
      ref_len = r.size();
    }
  }
  const double bp = ref_len > c.size() ? std::exp(1.0 - static_cast<double>(ref_len) / c.size()) : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

Sentence random_sentence(Rng& rng, std::size_t vocab) {
  Sentence s;
  const std::size_t len = 1 + rng.uniform_int(9);
  for (std::size_t i = 0; i < len; ++i) {
    s.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(vocab))));
  }
  return s;
}

}  // namespace

TEST_CASE("word splitting") {
  CHECK(words("  a b\tc\n d ") == Sentence{"a", "b", "c", "d"});
  CHECK(words("").empty());
}

TEST_CASE("bleu worked examples") {
  const std::vector<Sentence> ref{words("a b c d e")};
  CHECK(std::abs(bleu(words("a b c d"), ref) - 100.0 * std::exp(1.0 - 5.0 / 4.0)) < 1e-9);
  CHECK(std::abs(bleu(words("a b c d"), ref) - 77.88) < 0.01);
  const std::vector<Sentence> same{words("x y z w v")};
  CHECK(bleu(words("x y z w v"), same) == 100.0);
  // No shared words: each precision is floored at 1/(c+1), which is small for long candidates.
  Sentence cand, other;
  for (int i = 0; i < 30; ++i) {
    cand.push_back("p" + std::to_string(i));
    other.push_back("q" + std::to_string(i));
  }
  const double none = bleu(cand, std::vector<Sentence>{other});
  CHECK(none > 0.0);
  CHECK(none < 5.0);
  const double expected_none = 100.0 * std::pow(1.0 / (31.0 * 30.0 * 29.0 * 28.0), 0.25);
  CHECK(std::abs(none - expected_none) < 1e-9);
  CHECK(bleu(Sentence{}, ref) == 0.0);
  CHECK_THROWS(bleu(words("a"), std::span<const Sentence>{}));
}

TEST_CASE("bleu agrees with the oracle and stays in range") {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const Sentence c = random_sentence(rng, 4);
    std::vector<Sentence> refs;
    const std::size_t nr = 1 + rng.uniform_int(4);
    for (std::size_t i = 0; i < nr; ++i) {
      refs.push_back(random_sentence(rng, 4));
    }
    const double b = bleu(c, refs);
    CHECK(std::abs(b - oracle_bleu(c, refs)) < 1e-9);
    CHECK(b >= 0.0);
    CHECK(b <= 100.0);
  }
}

TEST_CASE("single-reference bleu is 100 exactly for a verbatim match") {
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const Sentence c = random_sentence(rng, 3);
    const Sentence r = rng.uniform_int(4) == 0 ? c : random_sentence(rng, 3);
    const std::vector<Sentence> refs{r};
    CHECK((bleu(c, refs) == 100.0) == (c == r));
  }
}

TEST_CASE("self-bleu") {
  const std::vector<Sentence> same(5, words("the cat sat on the mat"));
  CHECK(self_bleu(same) == 100.0);
  std::vector<Sentence> disjoint(3);
  for (int s = 0; s < 3; ++s) {
    for (int i = 0; i < 30; ++i) {
      disjoint[s].push_back(std::to_string(s) + "w" + std::to_string(i));
    }
  }
  CHECK(self_bleu(disjoint) < 5.0);
  CHECK_THROWS(self_bleu(std::vector<Sentence>{words("a")}));

  Rng rng(4);
  std::vector<Sentence> corpus;
  for (int i = 0; i < 12; ++i) {
    corpus.push_back(random_sentence(rng, 5));
  }
  const double base = self_bleu(corpus);
  double expected = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<Sentence> rest;
    for (std::size_t j = 0; j < corpus.size(); ++j) {
      if (j != i) {
        rest.push_back(corpus[j]);
      }
    }
    expected += oracle_bleu(corpus[i], rest);
  }
  CHECK(std::abs(base - expected / corpus.size()) < 1e-9);
  for (int p = 0; p < 10; ++p) {
    rng.shuffle(corpus);
    CHECK(self_bleu(corpus) == base);
  }
}

TEST_CASE("avg@k") {
  CHECK(avg_at_k({{true, false}, {true, true}}) == 0.75);
  CHECK(avg_at_k({{true, true, true}, {true, true, true}}) == 1.0);
  CHECK(avg_at_k({{true}, {false}, {false}, {true}}) == 0.5);
  CHECK(avg_at_k({{false, true}, {true, true}}) == avg_at_k({{true, true}, {true, false}}));
  CHECK_THROWS(avg_at_k({{true, false}, {true}}));
  CHECK_THROWS(avg_at_k({}));
}

TEST_CASE("distinct-n") {
  CHECK(distinct_n(std::vector<Sentence>{words("a b c d")}, 1) == 1.0);
  CHECK(distinct_n(std::vector<Sentence>{words("a a a a")}, 1) == 0.25);
  CHECK(distinct_n(std::vector<Sentence>{words("a b"), words("c")}, 3) == 0.0);
  CHECK(distinct_n(std::vector<Sentence>{words("a b a b")}, 2) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS(distinct_n(std::vector<Sentence>{words("a")}, 0));
}

TEST_CASE("mean token entropy") {
  std::vector<TokenDistribution> d(2);
  d[0].probs = std::vector<double>(10, 0.1);
  d[1].probs = {1.0, 0.0, 0.0};
  CHECK(std::abs(mean_token_entropy(std::span(d).subspan(0, 1)) - std::log(10.0)) < 1e-12);
  CHECK(mean_token_entropy(std::span(d).subspan(1, 1)) == 0.0);
  CHECK(std::abs(mean_token_entropy(d) - std::log(10.0) / 2.0) < 1e-12);
  CHECK_THROWS(mean_token_entropy(std::span<const TokenDistribution>{}));
}

TEST_CASE("metrics report serialization") {
  MetricsReport r;
  r.self_bleu = 42.5;
  r.distinct_1 = 0.3;
  r.distinct_2 = 0.6;
  r.avg_at_k = 0.125;
  r.mean_token_entropy = 0.9;
  r.sample_count = 64;
  r.eval_problems = 8;
  r.diversity_samples = 64;
  CHECK_NOTHROW(r.validate());
  const MetricsReport back = nlohmann::json(r).get<MetricsReport>();
  CHECK(back.self_bleu == r.self_bleu);
  CHECK(back.avg_at_k == r.avg_at_k);
  CHECK(back.k == 8);
  CHECK(back.temperature == 0.7);
  CHECK(back.eval_problems == 8);

  const auto dir = testing::scratch_dir("metrics_out");
  write_metrics_json(r, dir / "m.json");
  write_metrics_csv(r, dir / "m.csv");
  std::ifstream js(dir / "m.json");
  CHECK(nlohmann::json::parse(js).get<MetricsReport>().distinct_2 == 0.6);
  std::ifstream csv(dir / "m.csv");
  std::string header, row, extra;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header.find("self_bleu") != std::string::npos);
  CHECK_FALSE(row.empty());
  CHECK_FALSE(std::getline(csv, extra));

  r.avg_at_k = 1.5;
  CHECK_THROWS(r.validate());
  r.avg_at_k = 0.5;
  r.self_bleu = std::nan("");
  CHECK_THROWS(r.validate());
}
