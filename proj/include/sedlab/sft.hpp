#pragma once

#include "sedlab/calibration.hpp"
#include "sedlab/model.hpp"
#include "sedlab/objectives.hpp"
#include "sedlab/optim.hpp"
#include "sedlab/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedlab {

struct SftConfig {
  int epochs = 3;
  std::size_t batch_size = 16;
  // Desk-scale default. The reference setup used 2e-5 for 3B-7B models.
  double learning_rate = 2e-3;
  OptimizerKind optimizer = OptimizerKind::sgd;
  ObjectiveConfig objective;
  /// Required for sed_sft; tau is calibrated from it during training.
  std::optional<MaskConfig> mask_config;
  std::uint64_t seed = 0;
  std::size_t log_every = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const SftConfig& c);
void from_json(const nlohmann::json& j, SftConfig& c);

struct TrainRecord {
  std::size_t step = 0;
  double ce_term = 0.0;          // per token
  double de_term = 0.0;          // per token, before lambda
  double masked_fraction = 0.0;
  double mean_label_prob = 0.0;
  double token_entropy = 0.0;    // mean predictive entropy at label positions
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::vector<MaskPlan> mask_plans;  // one per calibration
};

/// Raised when a step yields a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step, std::vector<std::size_t> batch)
      : std::runtime_error(what), step_(step), batch_(std::move(batch)) {}
  std::size_t step() const noexcept { return step_; }
  const std::vector<std::size_t>& batch() const noexcept { return batch_; }

 private:
  std::size_t step_;
  std::vector<std::size_t> batch_;
};

/// Sorted indices of the fixed calibration subset the trainer uses: all of
/// [0, n) when size >= n, otherwise a seeded sample of `size` indices.
std::vector<std::size_t> calibration_subset(std::size_t n, std::size_t size, std::uint64_t seed);

/// One gradient step on a batch. Gradients are averaged over the batch's
/// label tokens; the returned record has step = 0.
TrainRecord sft_step(Model& model, std::span<const LabeledExample> batch, const ObjectiveConfig& objective,
                     Optimizer& optimizer, const Tokenizer& tok);

struct SftResult {
  Model model;
  TrainLog log;
};

SftResult train_sft(Model model, std::span<const LabeledExample> dataset, const SftConfig& config,
                    const Tokenizer& tok = Tokenizer{});

struct HeatmapRow {
  std::size_t example_id = 0;
  std::size_t position = 0;
  std::string label_char;
  double label_prob = 0.0;
};

struct SftEval {
  double mean_label_prob = 0.0;
  std::vector<HeatmapRow> rows;
};

SftEval eval_sft(const Model& model, std::span<const LabeledExample> dataset, const Tokenizer& tok = Tokenizer{});

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path);
/// Columns: example_id,position,label_char,label_prob.
void write_heatmap_csv(const SftEval& eval, const std::filesystem::path& path);

}  // namespace sedlab
