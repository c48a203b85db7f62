#pragma once

// SFT objectives. Every loss sums over label tokens; the trainer divides by
// the token count of the batch.

#include "sedlab/autodiff.hpp"
#include "sedlab/calibration.hpp"
#include "sedlab/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace sedlab {

enum class ObjectiveKind { ce, sed_sft, sed_sft_no_mask, dft_style, entropy_bonus };

std::string_view to_string(ObjectiveKind kind) noexcept;
/// Accepts the canonical names and the CLI spellings (ce, sed, sed-no-mask, dft, entropy-bonus).
ObjectiveKind parse_objective_kind(std::string_view name);

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::ce;
  double lambda = 1.0;
  /// Required by sed_sft, forbidden for sed_sft_no_mask.
  std::optional<MaskPlan> mask_plan;
  double beta = 0.0;  // entropy-bonus weight

  void validate() const;
};

struct LossBreakdown {
  double ce_term = 0.0;
  double de_term = 0.0;
  double total = 0.0;
  double masked_fraction = 0.0;  // share of tokens with M_t = 0
  std::size_t token_count = 0;
};

/// Sum of -log p over label probabilities. Throws on p <= 0.
double ce_loss(std::span<const double> label_probs);

/// (p - 1/2)^2.
double de_penalty(double p);

/// sum_t [-log p_t + lambda * M_t * (p_t - 1/2)^2].
LossBreakdown sed_sft_loss(std::span<const double> label_probs, std::span<const std::uint8_t> mask, double lambda);

/// Simplified DFT-style stand-in: sum_t -sg(p_t) * log p_t, with sg a stop-gradient.
double dft_style_loss(std::span<const double> label_probs);

/// Shannon entropy in nats.
double entropy(std::span<const double> probs);

/// Simplified entropy-bonus stand-in for GEM: CE - beta * sum_t H(probs_t).
double entropy_bonus_loss(std::span<const TokenDistribution> distributions, double beta);

struct ObjectiveTerms {
  ad::Var total;
  LossBreakdown breakdown;
  double label_prob_sum = 0.0;
  double entropy_sum = 0.0;
  std::vector<double> mask;  // M_t per label row as applied
};

/// Differentiable objective over softmax rows [n x V] of the label positions.
/// The DE mask is read from the current values and held constant.
ObjectiveTerms objective_graph(const ad::Var& probs, std::span<const std::size_t> labels,
                               const ObjectiveConfig& config);

}  // namespace sedlab
