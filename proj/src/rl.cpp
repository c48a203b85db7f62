#include "sedlab/rl.hpp"

#include "sedlab/csv.hpp"
#include "sedlab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace sedlab {

void RlConfig::validate() const {
  if (group_size < 2) {
    throw std::invalid_argument("RlConfig: group_size must be >= 2");
  }
  if (batch_prompts == 0) {
    throw std::invalid_argument("RlConfig: batch_prompts must be positive");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("RlConfig: learning_rate must be positive");
  }
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("RlConfig: temperature must be >= 0");
  }
  if (!(kl_coeff >= 0.0) || !std::isfinite(kl_coeff)) {
    throw std::invalid_argument("RlConfig: kl_coeff must be >= 0");
  }
  if (max_new_tokens == 0) {
    throw std::invalid_argument("RlConfig: max_new_tokens must be positive");
  }
}

void to_json(nlohmann::json& j, const RlConfig& c) {
  j = nlohmann::json{{"group_size", c.group_size},         {"batch_prompts", c.batch_prompts},
                     {"learning_rate", c.learning_rate},   {"temperature", c.temperature},
                     {"kl_coeff", c.kl_coeff},             {"steps", c.steps},
                     {"seed", c.seed},                     {"max_new_tokens", c.max_new_tokens},
                     {"optimizer", to_string(c.optimizer)}};
}

void from_json(const nlohmann::json& j, RlConfig& c) {
  c.group_size = j.value("group_size", c.group_size);
  c.batch_prompts = j.value("batch_prompts", c.batch_prompts);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.temperature = j.value("temperature", c.temperature);
  c.kl_coeff = j.value("kl_coeff", c.kl_coeff);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  if (j.contains("optimizer")) {
    c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
  }
}

RolloutGroup rollout_group(const Model& model, const Problem& problem, std::size_t group_size, double temperature,
                           std::uint64_t seed, std::size_t max_new_tokens, const Tokenizer& tok) {
  if (group_size < 2) {
    throw std::invalid_argument("rollout_group: group size must be >= 2");
  }
  RolloutGroup g;
  g.problem = problem;
  g.prompt = encode_prompt(tok, problem);
  const std::size_t room = model.config().max_seq_len - g.prompt.size();
  const std::size_t max_new = std::min(max_new_tokens, room);
  for (std::size_t i = 0; i < group_size; ++i) {
    SampleTrace trace = sample_trace(model, g.prompt, temperature, max_new, Tokenizer::eos, mix_seed(seed, i));
    g.rewards.push_back(static_cast<double>(verify(tok.detokenize(trace.tokens), problem)));
    g.completions.push_back(std::move(trace.tokens));
    g.logprobs.push_back(std::move(trace.logprobs));
    g.entropies.push_back(std::move(trace.entropies));
  }
  g.advantages = group_advantages(g.rewards);
  return g;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw std::invalid_argument("group_advantages: need at least 2 rewards");
  }
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  std::vector<double> adv(rewards.size(), 0.0);
  if (*lo == *hi) {
    return adv;
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) {
    var += (r - mean) * (r - mean);
  }
  const double denom = std::sqrt(var / n) + advantage_eps;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    adv[i] = (rewards[i] - mean) / denom;
  }
  return adv;
}

std::vector<RolloutGroup> filter_prompts(std::span<const RolloutGroup> groups) {
  std::vector<RolloutGroup> kept;
  for (const auto& g : groups) {
    const double s = std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0);
    if (s != 0.0 && s != static_cast<double>(g.rewards.size())) {
      kept.push_back(g);
    }
  }
  return kept;
}

namespace {

std::vector<TokenId> joined_inputs(std::span<const TokenId> prompt, std::span<const TokenId> completion) {
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end() - 1);
  return seq;
}

// Softmax rows predicting each completion token: [len x V].
ad::Var completion_probs(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> completion) {
  const auto seq = joined_inputs(prompt, completion);
  return ad::softmax_rows(ad::slice_rows(model.logits(seq), prompt.size() - 1, completion.size()));
}

std::vector<std::size_t> as_indices(std::span<const TokenId> ids) { return {ids.begin(), ids.end()}; }

}  // namespace

double sequence_logprob(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> completion) {
  if (prompt.empty() || completion.empty()) {
    throw std::invalid_argument("sequence_logprob: empty prompt or completion");
  }
  ad::Var probs = completion_probs(model, prompt, completion);
  return ad::sum(ad::log(ad::gather(probs, as_indices(completion)))).value().item();
}

GrpoStepStats grpo_step(Model& model, std::span<const RolloutGroup> kept, const RlConfig& config,
                        Optimizer& optimizer, const Model* reference) {
  GrpoStepStats stats;
  if (kept.empty()) {
    stats.empty_batch = true;
    return stats;
  }
  for (const auto& g : kept) {
    for (const auto& c : g.completions) {
      stats.token_count += c.size();
    }
  }
  if (stats.token_count == 0) {
    stats.empty_batch = true;
    return stats;
  }
  const bool use_kl = config.kl_coeff > 0.0 && reference != nullptr;
  const double inv_tokens = 1.0 / static_cast<double>(stats.token_count);

  model.zero_grad();
  for (const auto& g : kept) {
    for (std::size_t i = 0; i < g.completions.size(); ++i) {
      const auto& comp = g.completions[i];
      const double a = g.advantages[i];
      if (comp.empty() || (a == 0.0 && !use_kl)) {
        continue;
      }
      ad::Var probs = completion_probs(model, g.prompt, comp);
      ad::Var loss = ad::scale(ad::sum(ad::log(ad::gather(probs, as_indices(comp)))), -a * inv_tokens);
      if (use_kl) {
        const auto ref = forward(*reference, joined_inputs(g.prompt, comp));
        const std::size_t vocab = model.config().vocab_size;
        ad::Array log_ref({comp.size(), vocab});
        for (std::size_t t = 0; t < comp.size(); ++t) {
          const auto& q = ref[g.prompt.size() - 1 + t].probs;
          for (std::size_t j = 0; j < vocab; ++j) {
            log_ref.at(t, j) = std::log(std::max(q[j], ad::log_floor));
          }
        }
        ad::Var kl = ad::sum(ad::mul(probs, ad::sub(ad::log(probs), ad::constant(std::move(log_ref)))));
        loss = ad::add(loss, ad::scale(kl, config.kl_coeff * inv_tokens));
      }
      if (!std::isfinite(loss.value().item())) {
        throw std::runtime_error("grpo_step: non-finite loss for prompt \"" + g.problem.prompt_text + "\"");
      }
      stats.loss += loss.value().item();
      ad::backward(loss);
      ++stats.contributing_completions;
    }
  }
  if (stats.contributing_completions == 0) {
    return stats;
  }
  for (const auto& p : model.parameters()) {
    if (p.var.has_grad() && !p.var.grad().all_finite()) {
      throw std::runtime_error("grpo_step: non-finite gradient in " + p.name);
    }
  }
  optimizer.step(model);
  model.zero_grad();
  stats.updated = true;
  return stats;
}

RlResult train_rl(Model model, std::span<const Problem> problems, const RlConfig& config, bool keep_rollouts,
                  const Tokenizer& tok) {
  config.validate();
  if (problems.empty()) {
    throw std::invalid_argument("train_rl: no problems");
  }
  auto optimizer = make_optimizer(config.optimizer, config.learning_rate);
  std::optional<Model> reference;
  if (config.kl_coeff > 0.0) {
    reference = model;
  }

  RlResult result{std::move(model), {}, {}};
  std::vector<std::size_t> order(problems.size());
  std::size_t cursor = order.size();
  std::uint64_t pass = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<RolloutGroup> groups;
    const std::uint64_t step_seed = mix_seed(config.seed, step);
    for (std::size_t j = 0; j < config.batch_prompts; ++j) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(config.seed ^ 0x5eed5eedULL, pass++));
        rng.shuffle(order);
        cursor = 0;
      }
      const Problem& p = problems[order[cursor++]];
      groups.push_back(rollout_group(result.model, p, config.group_size, config.temperature, mix_seed(step_seed, j),
                                     config.max_new_tokens, tok));
    }

    RlRecord rec;
    rec.step = step;
    double reward_sum = 0.0;
    double entropy_sum = 0.0;
    std::size_t token_total = 0;
    std::size_t samples = 0;
    for (const auto& g : groups) {
      for (std::size_t i = 0; i < g.completions.size(); ++i) {
        reward_sum += g.rewards[i];
        token_total += g.completions[i].size();
        entropy_sum += std::accumulate(g.entropies[i].begin(), g.entropies[i].end(), 0.0);
        ++samples;
      }
    }
    rec.pass_rate = reward_sum / static_cast<double>(samples);
    rec.mean_completion_len = static_cast<double>(token_total) / static_cast<double>(samples);
    rec.mean_token_entropy = token_total ? entropy_sum / static_cast<double>(token_total) : 0.0;

    const auto kept = filter_prompts(groups);
    rec.kept_fraction = static_cast<double>(kept.size()) / static_cast<double>(groups.size());
    std::size_t adv_count = 0;
    for (const auto& g : kept) {
      for (double a : g.advantages) {
        rec.mean_advantage_abs += std::abs(a);
        ++adv_count;
      }
    }
    if (adv_count) {
      rec.mean_advantage_abs /= static_cast<double>(adv_count);
    }
    grpo_step(result.model, kept, config, *optimizer, reference ? &*reference : nullptr);
    result.log.push_back(rec);
    if (keep_rollouts) {
      result.rollouts.push_back(std::move(groups));
    }
  }
  return result;
}

void write_rl_log_csv(std::span<const RlRecord> log, const std::filesystem::path& path) {
  CsvWriter csv(path, {"step", "pass_rate", "kept_fraction", "mean_advantage_abs", "mean_token_entropy",
                       "mean_completion_len"});
  for (const auto& r : log) {
    csv.row(r.step, r.pass_rate, r.kept_fraction, r.mean_advantage_abs, r.mean_token_entropy,
            r.mean_completion_len);
  }
}

}  // namespace sedlab
