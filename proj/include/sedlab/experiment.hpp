#pragma once

// Experiment manifest and the pipeline stages the command-line runner wires
// together: data generation, SFT, calibration, RL, evaluation and analysis.

#include "sedlab/calibration.hpp"
#include "sedlab/metrics.hpp"
#include "sedlab/model.hpp"
#include "sedlab/rl.hpp"
#include "sedlab/sft.hpp"
#include "sedlab/tasks.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedlab {

/// Bad flags, config values or incompatible inputs (exit code 2).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::size_t sft_examples = 2000;
  std::vector<double> template_mix{0.55, 0.25, 0.12, 0.08};
  std::vector<int> sft_difficulties{1, 2, 3};
  std::size_t rl_problems = 512;
  std::vector<int> rl_difficulties{1, 2, 3};
  /// External SFT data; when empty the set is generated from the fields above.
  std::string sft_path;
};

struct EvalProtocol {
  std::size_t k = 8;
  double temperature = 0.7;
  std::size_t eval_problems = 64;
  std::vector<int> difficulties{2, 3};
  std::size_t diversity_prompts = 16;
  std::size_t diversity_samples = 64;
  double diversity_temperature = 1.0;
  std::size_t max_new_tokens = 96;

  friend bool operator==(const EvalProtocol&, const EvalProtocol&) = default;
};

struct ExperimentManifest {
  std::string experiment_id = "exp";
  std::uint64_t master_seed = 0;
  ModelConfig model;
  SftConfig sft;
  RlConfig rl;
  MaskConfig mask;
  DataConfig data;
  EvalProtocol eval;
  std::string output_dir = "runs";

  /// Desk-scale defaults used by the runner.
  static ExperimentManifest defaults();

  /// Derives every stage seed from master_seed and fixes the vocabulary to
  /// the tokenizer. Idempotent.
  void resolve();
  /// Throws UsageError naming the offending field.
  void validate() const;

  std::filesystem::path directory() const { return std::filesystem::path(output_dir) / experiment_id; }
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const EvalProtocol& c);
void from_json(const nlohmann::json& j, EvalProtocol& c);
void to_json(nlohmann::json& j, const ExperimentManifest& m);
/// Missing keys keep the values already in m.
void from_json(const nlohmann::json& j, ExperimentManifest& m);

ExperimentManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const ExperimentManifest& m, const std::filesystem::path& path);

/// Seed streams derived from the master seed.
enum class SeedStream : std::uint64_t { model = 1, sft_data = 2, sft = 3, rl = 4, rl_problems = 5, eval = 6, held_out = 7 };
std::uint64_t stream_seed(std::uint64_t master, SeedStream stream);

std::vector<LabeledExample> make_sft_data(const ExperimentManifest& m);
/// RL prompts, disjoint from the SFT prompts.
std::vector<Problem> make_rl_problems(const ExperimentManifest& m, const std::vector<LabeledExample>& sft_data);
/// Held-out evaluation prompts, disjoint from SFT and RL prompts.
std::vector<Problem> make_eval_problems(const ExperimentManifest& m, const std::vector<LabeledExample>& sft_data,
                                        const std::vector<Problem>& rl_problems);

/// avg@k and greedy accuracy over problems; Self-BLEU (per prompt, averaged),
/// distinct-n and sampled-token entropy over the first diversity_prompts.
MetricsReport evaluate_model(const Model& model, const std::vector<Problem>& problems, const EvalProtocol& protocol,
                             std::uint64_t seed, const Tokenizer& tok = Tokenizer{});

struct PipelineResult {
  SftResult sft;
  std::optional<RlResult> rl;
  MetricsReport sft_metrics;
  std::optional<MetricsReport> rl_metrics;
};

/// gen-data, sft, rl (when rl.steps > 0) and eval in memory, no files.
PipelineResult run_pipeline(const ExperimentManifest& manifest, const Tokenizer& tok = Tokenizer{});

}  // namespace sedlab
