#pragma once

// GRPO-lite: group rollouts, binary verifier reward, group-normalized
// advantages and a single policy-gradient step per batch of rollouts.

#include "sedlab/model.hpp"
#include "sedlab/optim.hpp"
#include "sedlab/tasks.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace sedlab {

inline constexpr double advantage_eps = 1e-8;

struct RlConfig {
  std::size_t group_size = 8;
  // Desk-scale default. The reference setup used 256 prompts per batch.
  std::size_t batch_prompts = 8;
  double learning_rate = 1e-3;
  double temperature = 1.0;
  double kl_coeff = 0.0;  // > 0 adds KL to the starting snapshot
  std::size_t steps = 200;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 96;
  OptimizerKind optimizer = OptimizerKind::adam;

  void validate() const;
};

void to_json(nlohmann::json& j, const RlConfig& c);
void from_json(const nlohmann::json& j, RlConfig& c);

struct RolloutGroup {
  Problem problem;
  std::vector<TokenId> prompt;
  std::vector<std::vector<TokenId>> completions;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<std::vector<double>> logprobs;   // per token, untempered policy
  std::vector<std::vector<double>> entropies;  // per token, untempered policy
};

/// Completion i is sampled with seed mix_seed(seed, i).
RolloutGroup rollout_group(const Model& model, const Problem& problem, std::size_t group_size, double temperature,
                           std::uint64_t seed, std::size_t max_new_tokens = 96, const Tokenizer& tok = Tokenizer{});

/// (r_i - mean) / (population std + 1e-8); all-equal rewards give exact zeros.
std::vector<double> group_advantages(std::span<const double> rewards);

/// Drops groups whose rewards are all 0 or all 1; survivors keep their order.
std::vector<RolloutGroup> filter_prompts(std::span<const RolloutGroup> groups);

struct GrpoStepStats {
  double loss = 0.0;
  std::size_t token_count = 0;
  std::size_t contributing_completions = 0;
  bool updated = false;
  bool empty_batch = false;  // warning: nothing to learn from
};

/// One gradient step on -(1/N_tok) sum_i A_i sum_t log pi(token_i,t)
/// [+ kl_coeff * KL(pi || reference) per token]. If nothing contributes the
/// parameters are left untouched.
GrpoStepStats grpo_step(Model& model, std::span<const RolloutGroup> kept, const RlConfig& config,
                        Optimizer& optimizer, const Model* reference = nullptr);

/// Summed log-probability of a completion after a prompt under the current model.
double sequence_logprob(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> completion);

struct RlRecord {
  std::size_t step = 0;
  double pass_rate = 0.0;
  double kept_fraction = 0.0;
  double mean_advantage_abs = 0.0;
  double mean_token_entropy = 0.0;
  double mean_completion_len = 0.0;
};

struct RlResult {
  Model model;
  std::vector<RlRecord> log;
  std::vector<std::vector<RolloutGroup>> rollouts;  // per step, when requested
};

RlResult train_rl(Model model, std::span<const Problem> problems, const RlConfig& config,
                  bool keep_rollouts = false, const Tokenizer& tok = Tokenizer{});

/// Columns: step,pass_rate,kept_fraction,mean_advantage_abs,mean_token_entropy,mean_completion_len.
void write_rl_log_csv(std::span<const RlRecord> log, const std::filesystem::path& path);

}  // namespace sedlab
