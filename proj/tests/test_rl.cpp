#include "sedlab/rl.hpp"

#include "sedlab/rng.hpp"
#include "sedlab/sft.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

using namespace sedlab;

namespace {

const Tokenizer tok;

ModelConfig small_config(std::uint64_t seed = 4) {
  ModelConfig c;
  c.vocab_size = tok.vocab_size();
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.max_seq_len = 48;
  c.seed = seed;
  return c;
}

Problem fixed_problem() {
  Problem p;
  p.prompt_text = "12+7=";
  p.canonical_answer = 19;
  p.difficulty = 1;
  return p;
}

// Memorizes the given labels for fixed_problem().
Model memorized(const std::vector<std::string>& labels, int epochs) {
  std::vector<LabeledExample> ds;
  for (const auto& l : labels) {
    ds.push_back({fixed_problem(), l, 2});
  }
  SftConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = ds.size();
  cfg.learning_rate = 1e-2;
  cfg.optimizer = OptimizerKind::adam;
  return train_sft(Model(small_config()), ds, cfg, tok).model;
}

std::vector<TokenId> completion_of(const std::string& text) {
  auto ids = tok.tokenize(text);
  ids.push_back(Tokenizer::eos);
  return ids;
}

bool same_params(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (!(a.parameters()[i].var.value() == b.parameters()[i].var.value())) {
      return false;
    }
  }
  return true;
}

RolloutGroup manual_group(const std::vector<std::string>& completions, const std::vector<double>& rewards) {
  RolloutGroup g;
  g.problem = fixed_problem();
  g.prompt = encode_prompt(tok, g.problem);
  for (const auto& c : completions) {
    g.completions.push_back(completion_of(c));
  }
  g.rewards = rewards;
  g.advantages = group_advantages(rewards);
  return g;
}

}  // namespace

TEST_CASE("rl config defaults, validation and json") {
  RlConfig c;
  CHECK(c.group_size == 8);
  CHECK(c.temperature == 1.0);
  CHECK(c.kl_coeff == 0.0);
  CHECK_NOTHROW(c.validate());
  c.group_size = 1;
  CHECK_THROWS(c.validate());
  c.group_size = 4;
  c.kl_coeff = -1;
  CHECK_THROWS(c.validate());
  c.kl_coeff = 0.1;
  c.seed = 77;
  const RlConfig back = nlohmann::json(c).get<RlConfig>();
  CHECK(back.group_size == 4);
  CHECK(back.kl_coeff == 0.1);
  CHECK(back.seed == 77);
}

TEST_CASE("group advantages") {
  CHECK(group_advantages(std::vector<double>{1, 1, 1, 1}) == std::vector<double>{0, 0, 0, 0});
  CHECK(group_advantages(std::vector<double>{0, 0}) == std::vector<double>{0, 0});
  const auto a = group_advantages(std::vector<double>{1, 0});
  CHECK(std::abs(a[0] - 0.5 / (0.5 + 1e-8)) < 1e-15);
  CHECK(std::abs(a[1] + 0.5 / (0.5 + 1e-8)) < 1e-15);
  const auto b = group_advantages(std::vector<double>{1, 0, 0, 1});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(std::abs(b[i]) - 1.0) < 1e-7);
  }
  CHECK(b[0] > 0);
  CHECK(b[1] < 0);
  CHECK_THROWS(group_advantages(std::vector<double>{1}));
}

TEST_CASE("advantages are shift and scale invariant") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(8);
    for (auto& v : r) {
      v = static_cast<double>(rng.uniform_int(2));
    }
    r[0] = 0.0;
    r[1] = 1.0;
    const auto base = group_advantages(r);
    CHECK(std::abs(std::accumulate(base.begin(), base.end(), 0.0)) < 1e-9);
    const double shift = rng.uniform01() * 10 - 5;
    const double scale = 0.1 + rng.uniform01() * 10;
    std::vector<double> shifted = r, scaled = r;
    for (std::size_t i = 0; i < r.size(); ++i) {
      shifted[i] += shift;
      scaled[i] *= scale;
    }
    const auto as = group_advantages(shifted);
    const auto ac = group_advantages(scaled);
    for (std::size_t i = 0; i < r.size(); ++i) {
      CHECK(std::abs(as[i] - base[i]) < 1e-6);
      CHECK(std::abs(ac[i] - base[i]) < 1e-6);
    }
  }
}

TEST_CASE("filter keeps mixed groups in order") {
  std::vector<RolloutGroup> groups;
  const std::vector<std::vector<double>> rewards{
      {1, 1, 1, 1, 1, 1, 1, 1}, {0, 1, 0, 0, 0, 0, 0, 0}, {0, 0, 0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 1, 1, 1, 0}};
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    RolloutGroup g;
    g.problem.seed = i;
    g.rewards = rewards[i];
    groups.push_back(g);
  }
  const auto kept = filter_prompts(groups);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].problem.seed == 1);
  CHECK(kept[1].problem.seed == 3);
  CHECK(filter_prompts(std::span<const RolloutGroup>{}).empty());
}

TEST_CASE("rollouts are seeded and replay through forward") {
  const Model m(small_config(9));
  const Problem p = fixed_problem();
  const RolloutGroup a = rollout_group(m, p, 4, 1.0, 123, 20, tok);
  const RolloutGroup b = rollout_group(m, p, 4, 1.0, 123, 20, tok);
  CHECK(a.completions == b.completions);
  CHECK(a.rewards == b.rewards);
  CHECK_THROWS(rollout_group(m, p, 1, 1.0, 1, 20, tok));
  for (std::size_t i = 0; i < a.completions.size(); ++i) {
    const auto& c = a.completions[i];
    CHECK(c == sample(m, a.prompt, 1.0, 20, Tokenizer::eos, mix_seed(123, i)));
    std::vector<TokenId> seq = a.prompt;
    seq.insert(seq.end(), c.begin(), c.end());
    const auto d = forward(m, seq);
    double total = 0.0;
    for (std::size_t t = 0; t < c.size(); ++t) {
      const double lp = std::log(d[a.prompt.size() - 1 + t].probs[c[t]]);
      CHECK(std::abs(a.logprobs[i][t] - lp) < 1e-9);
      total += lp;
    }
    CHECK(std::abs(sequence_logprob(m, a.prompt, c) - total) < 1e-9);
  }
}

TEST_CASE("a memorized answer gives all-correct groups") {
  const Model m = memorized({"12+7=19 #### 19"}, 150);
  REQUIRE(tok.detokenize(sample(m, encode_prompt(tok, fixed_problem()), 0.0, 30, Tokenizer::eos, 0)) ==
          "12+7=19 #### 19");
  const RolloutGroup g = rollout_group(m, fixed_problem(), 8, 0.05, 5, 30, tok);
  CHECK(g.rewards == std::vector<double>(8, 1.0));
  CHECK(g.advantages == std::vector<double>(8, 0.0));
  CHECK(filter_prompts(std::vector<RolloutGroup>{g}).empty());
}

TEST_CASE("zero-advantage batches leave parameters bit-unchanged") {
  Model m(small_config());
  const Model before = m;
  RlConfig cfg;
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto opt = make_optimizer(kind, 0.1);
    const std::vector<RolloutGroup> groups{manual_group({"1 #### 19", "2 #### 19"}, {1, 1}),
                                           manual_group({"3", "4"}, {0, 0})};
    const GrpoStepStats s = grpo_step(m, groups, cfg, *opt);
    CHECK_FALSE(s.updated);
    CHECK(s.contributing_completions == 0);
    CHECK(same_params(m, before));
    const GrpoStepStats e = grpo_step(m, std::span<const RolloutGroup>{}, cfg, *opt);
    CHECK(e.empty_batch);
    CHECK(same_params(m, before));
  }
}

TEST_CASE("one step raises the rewarded completion") {
  Model m(small_config(6));
  const RolloutGroup g = manual_group({"12+7=19 #### 19", "12+7=18 #### 18"}, {1, 0});
  const double good0 = sequence_logprob(m, g.prompt, g.completions[0]);
  const double bad0 = sequence_logprob(m, g.prompt, g.completions[1]);
  RlConfig cfg;
  Sgd opt(0.05);
  const std::vector<RolloutGroup> kept{g};
  const GrpoStepStats s = grpo_step(m, kept, cfg, opt);
  CHECK(s.updated);
  CHECK(s.contributing_completions == 2);
  CHECK(s.token_count == g.completions[0].size() + g.completions[1].size());
  CHECK(sequence_logprob(m, g.prompt, g.completions[0]) > good0);
  CHECK(sequence_logprob(m, g.prompt, g.completions[1]) < bad0);

  // Loss is the pure policy-gradient term when no KL is requested.
  Model fresh(small_config(6));
  const double n = static_cast<double>(s.token_count);
  const double expected = -(g.advantages[0] * good0 + g.advantages[1] * bad0) / n;
  Sgd opt2(0.05);
  CHECK(std::abs(grpo_step(fresh, kept, cfg, opt2).loss - expected) < 1e-12);
}

TEST_CASE("KL to an identical snapshot adds nothing") {
  const RolloutGroup g = manual_group({"12+7=19 #### 19", "7 #### 7"}, {1, 0});
  const std::vector<RolloutGroup> kept{g};
  RlConfig plain;
  RlConfig kl = plain;
  kl.kl_coeff = 0.5;
  Model a(small_config(6)), b(small_config(6));
  const Model snapshot = b;
  Sgd oa(0.05), ob(0.05);
  const auto sa = grpo_step(a, kept, plain, oa);
  const auto sb = grpo_step(b, kept, kl, ob, &snapshot);
  CHECK(std::abs(sa.loss - sb.loss) < 1e-12);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& va = a.parameters()[i].var.value();
    const auto& vb = b.parameters()[i].var.value();
    for (std::size_t j = 0; j < va.size(); ++j) {
      CHECK(std::abs(va[j] - vb[j]) < 1e-12);
    }
  }
  // Away from the snapshot the KL term is positive.
  Model c = a;
  Sgd oc(0.05);
  CHECK(grpo_step(c, kept, kl, oc, &snapshot).loss > grpo_step(a, kept, plain, oa).loss - 1e-15);
}

TEST_CASE("rollout pass rate estimates the frozen model's success probability") {
  // Half the training labels carry a wrong final answer.
  const Model m = memorized({"12+7=19 #### 19", "12+7=19 #### 91"}, 150);
  const std::vector<TokenId> prompt = encode_prompt(tok, fixed_problem());
  int truth_hits = 0;
  const int truth_n = 4000;
  for (int s = 0; s < truth_n; ++s) {
    truth_hits += verify(tok.detokenize(sample(m, prompt, 1.0, 30, Tokenizer::eos, mix_seed(0xBEEF, s))),
                         fixed_problem());
  }
  const double truth = static_cast<double>(truth_hits) / truth_n;
  REQUIRE(truth > 0.2);
  REQUIRE(truth < 0.8);
  double est = 0.0;
  for (std::uint64_t j = 0; j < 64; ++j) {
    const RolloutGroup g = rollout_group(m, fixed_problem(), 8, 1.0, mix_seed(42, j), 30, tok);
    est += std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0);
  }
  est /= 64.0 * 8.0;
  CHECK(std::abs(est - truth) < 0.05);
}

TEST_CASE("train_rl logs replay from stored rollouts and are deterministic") {
  const Model start = memorized({"12+7=19 #### 19", "12+7=19 #### 91"}, 60);
  std::vector<Problem> problems{fixed_problem()};
  Problem other = fixed_problem();
  other.prompt_text = "12+8=";
  other.canonical_answer = 20;
  problems.push_back(other);
  RlConfig cfg;
  cfg.steps = 4;
  cfg.batch_prompts = 3;
  cfg.group_size = 4;
  cfg.max_new_tokens = 24;
  cfg.seed = 9;
  const RlResult a = train_rl(start, problems, cfg, true, tok);
  const RlResult b = train_rl(start, problems, cfg, false, tok);
  REQUIRE(a.log.size() == 4);
  REQUIRE(a.rollouts.size() == 4);
  CHECK(b.rollouts.empty());
  CHECK(same_params(a.model, b.model));
  for (std::size_t s = 0; s < a.log.size(); ++s) {
    const auto& rec = a.log[s];
    CHECK(rec.step == s + 1);
    CHECK(rec.pass_rate == b.log[s].pass_rate);
    CHECK(rec.kept_fraction == b.log[s].kept_fraction);
    CHECK(rec.mean_token_entropy == b.log[s].mean_token_entropy);
    CHECK(rec.kept_fraction >= 0.0);
    CHECK(rec.kept_fraction <= 1.0);

    const auto& groups = a.rollouts[s];
    REQUIRE(groups.size() == 3);
    double rewards = 0.0, samples = 0.0, kept = 0.0;
    for (const auto& g : groups) {
      const double sum = std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0);
      rewards += sum;
      samples += static_cast<double>(g.rewards.size());
      kept += (sum > 0.0 && sum < static_cast<double>(g.rewards.size())) ? 1.0 : 0.0;
    }
    CHECK(std::abs(rec.pass_rate - rewards / samples) < 1e-12);
    CHECK(std::abs(rec.kept_fraction - kept / 3.0) < 1e-12);
  }

  const auto dir = testing::scratch_dir("rl_csv");
  write_rl_log_csv(a.log, dir / "rl.csv");
  std::ifstream in(dir / "rl.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,pass_rate,kept_fraction,mean_advantage_abs,mean_token_entropy,mean_completion_len");
  CHECK_THROWS(train_rl(start, std::span<const Problem>{}, cfg, false, tok));
}
