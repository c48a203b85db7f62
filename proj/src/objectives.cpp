#include "sedlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sedlab {

std::string_view to_string(ObjectiveKind kind) noexcept {
  switch (kind) {
    case ObjectiveKind::ce: return "ce";
    case ObjectiveKind::sed_sft: return "sed_sft";
    case ObjectiveKind::sed_sft_no_mask: return "sed_sft_no_mask";
    case ObjectiveKind::dft_style: return "dft_style";
    case ObjectiveKind::entropy_bonus: return "entropy_bonus";
  }
  return "unknown";
}

ObjectiveKind parse_objective_kind(std::string_view name) {
  if (name == "ce") return ObjectiveKind::ce;
  if (name == "sed" || name == "sed_sft") return ObjectiveKind::sed_sft;
  if (name == "sed-no-mask" || name == "sed_sft_no_mask") return ObjectiveKind::sed_sft_no_mask;
  if (name == "dft" || name == "dft_style") return ObjectiveKind::dft_style;
  if (name == "entropy-bonus" || name == "entropy_bonus") return ObjectiveKind::entropy_bonus;
  throw std::invalid_argument("unknown objective '" + std::string(name) +
                              "' (expected ce, sed, sed-no-mask, dft, entropy-bonus)");
}

void ObjectiveConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("ObjectiveConfig: lambda must be finite and >= 0");
  }
  if (!(beta >= 0.0) || !std::isfinite(beta)) {
    throw std::invalid_argument("ObjectiveConfig: beta must be finite and >= 0");
  }
  if (kind == ObjectiveKind::sed_sft && !mask_plan) {
    throw std::invalid_argument("ObjectiveConfig: sed_sft requires a mask plan");
  }
  if (kind == ObjectiveKind::sed_sft_no_mask && mask_plan) {
    throw std::invalid_argument("ObjectiveConfig: sed_sft_no_mask does not take a mask plan");
  }
}

namespace {

void check_prob(double p, const char* who) {
  if (!(p > 0.0) || p > 1.0) {
    throw std::domain_error(std::string(who) + ": label probability must be in (0, 1], got " + std::to_string(p));
  }
}

double neg_log(double p) { return -std::log(std::max(p, ad::log_floor)); }

}  // namespace

double ce_loss(std::span<const double> label_probs) {
  double s = 0.0;
  for (double p : label_probs) {
    check_prob(p, "ce_loss");
    s += neg_log(p);
  }
  return s;
}

double de_penalty(double p) {
  const double d = p - 0.5;
  return d * d;
}

LossBreakdown sed_sft_loss(std::span<const double> label_probs, std::span<const std::uint8_t> mask, double lambda) {
  if (mask.size() != label_probs.size()) {
    throw std::invalid_argument("sed_sft_loss: mask length " + std::to_string(mask.size()) +
                                " != label count " + std::to_string(label_probs.size()));
  }
  LossBreakdown b;
  b.token_count = label_probs.size();
  b.ce_term = ce_loss(label_probs);
  std::size_t masked = 0;
  for (std::size_t t = 0; t < label_probs.size(); ++t) {
    if (mask[t]) {
      b.de_term += de_penalty(label_probs[t]);
    } else {
      ++masked;
    }
  }
  b.total = b.ce_term + lambda * b.de_term;
  b.masked_fraction = b.token_count ? static_cast<double>(masked) / static_cast<double>(b.token_count) : 0.0;
  return b;
}

double dft_style_loss(std::span<const double> label_probs) {
  double s = 0.0;
  for (double p : label_probs) {
    check_prob(p, "dft_style_loss");
    s += p * neg_log(p);
  }
  return s;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double q : probs) {
    if (q > 0.0) {
      h -= q * std::log(q);
    }
  }
  return h;
}

double entropy_bonus_loss(std::span<const TokenDistribution> distributions, double beta) {
  if (!(beta >= 0.0)) {
    throw std::invalid_argument("entropy_bonus_loss: beta must be >= 0");
  }
  double ce = 0.0;
  double h = 0.0;
  for (const auto& d : distributions) {
    check_prob(d.label_prob, "entropy_bonus_loss");
    ce += neg_log(d.label_prob);
    h += entropy(d.probs);
  }
  return ce - beta * h;
}

ObjectiveTerms objective_graph(const ad::Var& probs, std::span<const std::size_t> labels,
                               const ObjectiveConfig& config) {
  config.validate();
  const ad::Array& pv = probs.value();
  if (pv.rank() != 2 || pv.rows() != labels.size()) {
    throw ad::ShapeError("objective_graph: probs " + ad::shape_str(pv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  const std::size_t vocab = pv.cols();

  ObjectiveTerms terms;
  terms.breakdown.token_count = n;
  for (std::size_t t = 0; t < n; ++t) {
    const auto row = pv.data().subspan(t * vocab, vocab);
    terms.label_prob_sum += row[labels[t]];
    terms.entropy_sum += entropy(row);
  }

  ad::Var p = ad::gather(probs, labels);
  ad::Var log_p = ad::log(p);
  ad::Var ce = ad::scale(ad::sum(log_p), -1.0);
  terms.breakdown.ce_term = ce.value().item();
  terms.mask.assign(n, 0.0);

  switch (config.kind) {
    case ObjectiveKind::ce:
      terms.total = ce;
      break;
    case ObjectiveKind::sed_sft:
    case ObjectiveKind::sed_sft_no_mask: {
      if (config.kind == ObjectiveKind::sed_sft) {
        std::vector<double> topk(n);
        for (std::size_t t = 0; t < n; ++t) {
          topk[t] = topk_cumprob(pv.data().subspan(t * vocab, vocab), config.mask_plan->config.k);
        }
        terms.mask = config.mask_plan->mask(topk);
      } else {
        terms.mask.assign(n, 1.0);
      }
      ad::Var de = ad::sum(ad::mask_mul(ad::square(ad::sub_scalar(p, 0.5)), terms.mask));
      terms.breakdown.de_term = de.value().item();
      terms.total = ad::add(ce, ad::scale(de, config.lambda));
      break;
    }
    case ObjectiveKind::dft_style:
      terms.total = ad::scale(ad::sum(ad::mul(ad::detach(p), log_p)), -1.0);
      break;
    case ObjectiveKind::entropy_bonus: {
      // beta * sum q log q == -beta * sum H
      ad::Var neg_entropy = ad::sum(ad::mul(probs, ad::log(probs)));
      terms.total = ad::add(ce, ad::scale(neg_entropy, config.beta));
      break;
    }
  }
  std::size_t masked = 0;
  for (double m : terms.mask) {
    masked += m == 0.0 ? 1 : 0;
  }
  terms.breakdown.masked_fraction = n ? static_cast<double>(masked) / static_cast<double>(n) : 0.0;
  terms.breakdown.total = terms.total.value().item();
  return terms;
}

}  // namespace sedlab
