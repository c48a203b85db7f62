#pragma once

// Token exploration-space quantification via cumulative top-k probability,
// quantile threshold calibration and mask construction.

#include "sedlab/model.hpp"
#include "sedlab/tasks.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace sedlab {

enum class QuantileMethod { linear_interpolation };

/// When tau is (re)computed during SFT.
enum class MaskRefresh { per_epoch, frozen_once };

struct MaskConfig {
  std::size_t k = 2;
  double r = 0.7;  // masking ratio: fraction of positions excluded from the penalty
  QuantileMethod quantile_method = QuantileMethod::linear_interpolation;
  std::size_t calibration_sample_size = 512;
  MaskRefresh refresh = MaskRefresh::per_epoch;

  void validate() const;
};

void to_json(nlohmann::json& j, const MaskConfig& c);
void from_json(const nlohmann::json& j, MaskConfig& c);

struct CalibrationStats {
  std::size_t count = 0;
  double min = 0.0;
  double max = 0.0;
  double realized_de_fraction = 0.0;
};

struct MaskPlan {
  double tau = 0.0;
  MaskConfig config;
  CalibrationStats calibration_stats;

  /// M_t for one position. r >= 1 is the all-masked limit: always 0.
  bool applies(double p_topk) const noexcept;
  /// Mask as 0/1 doubles, ready for ad::mask_mul.
  std::vector<double> mask(std::span<const double> p_topk) const;
};

void to_json(nlohmann::json& j, const MaskPlan& p);

/// Sum of the k largest probabilities; k is capped at the vocabulary size.
double topk_cumprob(std::span<const double> probs, std::size_t k);
double topk_cumprob(const TokenDistribution& dist, std::size_t k);

/// (1 - r) quantile by linear interpolation at fractional index (1-r)(n-1)
/// over the ascending-sorted values.
double calibrate_threshold(std::span<const double> p_values, double r,
                           QuantileMethod method = QuantileMethod::linear_interpolation);

/// Quantile q in [0,1] by linear interpolation on sorted values.
double quantile(std::span<const double> values, double q);

/// M_t = 1 exactly when p_values[t] < tau.
std::vector<std::uint8_t> build_mask(std::span<const double> p_values, double tau);

/// P_top-k at every label position of every example, in example order.
std::vector<double> label_topk_values(const Model& model, const Tokenizer& tok,
                                      std::span<const LabeledExample> examples, std::size_t k);

MaskPlan run_calibration(const Model& model, const Tokenizer& tok, std::span<const LabeledExample> subset,
                         const MaskConfig& config);

/// Calibration from externally logged top-k probabilities (no model).
MaskPlan calibrate_from_log(std::span<const ProbabilityRecord> records, const MaskConfig& config);

struct TopkSummary {
  std::size_t k = 0;
  std::size_t position_count = 0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  std::vector<double> bin_left;
  std::vector<std::size_t> bin_count;
};

struct ExplorationStats {
  std::vector<TopkSummary> per_k;
};

ExplorationStats exploration_stats(const Model& model, const Tokenizer& tok, std::span<const LabeledExample> subset,
                                   std::span<const std::size_t> ks, std::size_t bins = 20);

/// Summary of already-computed values (bins equal-width over [0, 1]).
TopkSummary summarize_topk(std::size_t k, std::span<const double> values, std::size_t bins = 20);

/// Columns: k,position_count,median,q25,q75,histogram_bin_left,histogram_count.
void write_exploration_csv(const ExplorationStats& stats, const std::filesystem::path& path);

}  // namespace sedlab
