#include "sedlab/calibration.hpp"

#include "sedlab/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>

namespace sedlab {

void MaskConfig::validate() const {
  if (k == 0) {
    throw std::invalid_argument("MaskConfig: k must be positive");
  }
  if (!(r >= 0.0 && r <= 1.0)) {
    throw std::invalid_argument("MaskConfig: r must be in [0, 1]");
  }
  if (calibration_sample_size == 0) {
    throw std::invalid_argument("MaskConfig: calibration_sample_size must be positive");
  }
}

void to_json(nlohmann::json& j, const MaskConfig& c) {
  j = nlohmann::json{{"k", c.k},
                     {"r", c.r},
                     {"quantile_method", "linear_interpolation"},
                     {"calibration_sample_size", c.calibration_sample_size},
                     {"refresh", c.refresh == MaskRefresh::per_epoch ? "per_epoch" : "frozen_once"}};
}

void from_json(const nlohmann::json& j, MaskConfig& c) {
  c.k = j.value("k", c.k);
  c.r = j.value("r", c.r);
  const auto method = j.value("quantile_method", std::string("linear_interpolation"));
  if (method != "linear_interpolation") {
    throw std::invalid_argument("MaskConfig: unsupported quantile_method " + method);
  }
  c.calibration_sample_size = j.value("calibration_sample_size", c.calibration_sample_size);
  const auto refresh = j.value("refresh", std::string(c.refresh == MaskRefresh::per_epoch ? "per_epoch" : "frozen_once"));
  if (refresh == "per_epoch") {
    c.refresh = MaskRefresh::per_epoch;
  } else if (refresh == "frozen_once") {
    c.refresh = MaskRefresh::frozen_once;
  } else {
    throw std::invalid_argument("MaskConfig: refresh must be per_epoch or frozen_once");
  }
}

bool MaskPlan::applies(double p_topk) const noexcept {
  if (config.r >= 1.0) {
    return false;
  }
  return p_topk < tau;
}

std::vector<double> MaskPlan::mask(std::span<const double> p_topk) const {
  std::vector<double> m(p_topk.size());
  for (std::size_t i = 0; i < p_topk.size(); ++i) {
    m[i] = applies(p_topk[i]) ? 1.0 : 0.0;
  }
  return m;
}

void to_json(nlohmann::json& j, const MaskPlan& p) {
  j = nlohmann::json{{"tau", p.tau},
                     {"config", p.config},
                     {"calibration_stats",
                      {{"count", p.calibration_stats.count},
                       {"min", p.calibration_stats.min},
                       {"max", p.calibration_stats.max},
                       {"realized_de_fraction", p.calibration_stats.realized_de_fraction}}}};
}

double topk_cumprob(std::span<const double> probs, std::size_t k) {
  if (k == 0) {
    throw std::invalid_argument("topk_cumprob: k must be positive");
  }
  std::vector<double> sorted(probs.begin(), probs.end());
  const std::size_t kk = std::min(k, sorted.size());
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kk), sorted.end(),
                    std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < kk; ++i) {
    s += sorted[i];
  }
  return s;
}

double topk_cumprob(const TokenDistribution& dist, std::size_t k) { return topk_cumprob(dist.probs, k); }

double quantile(std::span<const double> values, double q) {
  if (values.empty()) {
    throw std::invalid_argument("quantile: empty input");
  }
  if (!(q >= 0.0 && q <= 1.0)) {
    throw std::invalid_argument("quantile: q must be in [0, 1]");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) {
    return sorted[lo];
  }
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double calibrate_threshold(std::span<const double> p_values, double r, QuantileMethod method) {
  if (p_values.empty()) {
    throw std::invalid_argument("calibrate_threshold: no values to calibrate on");
  }
  if (!(r >= 0.0 && r <= 1.0)) {
    throw std::invalid_argument("calibrate_threshold: r must be in [0, 1]");
  }
  switch (method) {
    case QuantileMethod::linear_interpolation:
      return quantile(p_values, 1.0 - r);
  }
  throw std::invalid_argument("calibrate_threshold: unknown quantile method");
}

std::vector<std::uint8_t> build_mask(std::span<const double> p_values, double tau) {
  std::vector<std::uint8_t> m(p_values.size());
  for (std::size_t i = 0; i < p_values.size(); ++i) {
    m[i] = p_values[i] < tau ? 1 : 0;
  }
  return m;
}

std::vector<double> label_topk_values(const Model& model, const Tokenizer& tok,
                                      std::span<const LabeledExample> examples, std::size_t k) {
  std::vector<double> out;
  for (const auto& ex : examples) {
    const EncodedExample enc = encode_example(tok, ex);
    const auto dists = forward(model, enc.inputs);
    for (std::size_t i = 0; i < enc.label_count; ++i) {
      out.push_back(topk_cumprob(dists[enc.label_start + i], k));
    }
  }
  return out;
}

namespace {

MaskPlan plan_from_values(std::span<const double> values, const MaskConfig& config) {
  MaskPlan plan;
  plan.config = config;
  plan.tau = calibrate_threshold(values, config.r, config.quantile_method);
  plan.calibration_stats.count = values.size();
  plan.calibration_stats.min = *std::min_element(values.begin(), values.end());
  plan.calibration_stats.max = *std::max_element(values.begin(), values.end());
  std::size_t applied = 0;
  for (double v : values) {
    applied += plan.applies(v) ? 1 : 0;
  }
  plan.calibration_stats.realized_de_fraction = static_cast<double>(applied) / static_cast<double>(values.size());
  return plan;
}

}  // namespace

MaskPlan run_calibration(const Model& model, const Tokenizer& tok, std::span<const LabeledExample> subset,
                         const MaskConfig& config) {
  config.validate();
  if (subset.empty()) {
    throw std::invalid_argument("run_calibration: empty calibration subset");
  }
  const auto values = label_topk_values(model, tok, subset, config.k);
  return plan_from_values(values, config);
}

MaskPlan calibrate_from_log(std::span<const ProbabilityRecord> records, const MaskConfig& config) {
  config.validate();
  if (records.empty()) {
    throw std::invalid_argument("calibrate_from_log: empty probability log");
  }
  std::vector<double> values;
  values.reserve(records.size());
  for (const auto& r : records) {
    values.push_back(topk_cumprob(r.topk_probs, config.k));
  }
  return plan_from_values(values, config);
}

TopkSummary summarize_topk(std::size_t k, std::span<const double> values, std::size_t bins) {
  if (values.empty()) {
    throw std::invalid_argument("summarize_topk: no values");
  }
  if (bins == 0) {
    throw std::invalid_argument("summarize_topk: bins must be positive");
  }
  TopkSummary s;
  s.k = k;
  s.position_count = values.size();
  s.median = quantile(values, 0.5);
  s.q25 = quantile(values, 0.25);
  s.q75 = quantile(values, 0.75);
  s.bin_left.resize(bins);
  s.bin_count.assign(bins, 0);
  for (std::size_t b = 0; b < bins; ++b) {
    s.bin_left[b] = static_cast<double>(b) / static_cast<double>(bins);
  }
  for (double v : values) {
    auto b = static_cast<std::size_t>(std::clamp(v, 0.0, 1.0) * static_cast<double>(bins));
    s.bin_count[std::min(b, bins - 1)] += 1;
  }
  return s;
}

ExplorationStats exploration_stats(const Model& model, const Tokenizer& tok, std::span<const LabeledExample> subset,
                                   std::span<const std::size_t> ks, std::size_t bins) {
  if (subset.empty()) {
    throw std::invalid_argument("exploration_stats: empty subset");
  }
  // One forward pass per example; every k is read off the same distributions.
  std::vector<std::vector<double>> per_k(ks.size());
  for (const auto& ex : subset) {
    const EncodedExample enc = encode_example(tok, ex);
    const auto dists = forward(model, enc.inputs);
    for (std::size_t i = 0; i < enc.label_count; ++i) {
      for (std::size_t j = 0; j < ks.size(); ++j) {
        per_k[j].push_back(topk_cumprob(dists[enc.label_start + i], ks[j]));
      }
    }
  }
  ExplorationStats stats;
  for (std::size_t j = 0; j < ks.size(); ++j) {
    stats.per_k.push_back(summarize_topk(ks[j], per_k[j], bins));
  }
  return stats;
}

void write_exploration_csv(const ExplorationStats& stats, const std::filesystem::path& path) {
  CsvWriter csv(path, {"k", "position_count", "median", "q25", "q75", "histogram_bin_left", "histogram_count"});
  for (const auto& s : stats.per_k) {
    for (std::size_t b = 0; b < s.bin_left.size(); ++b) {
      csv.row(s.k, s.position_count, s.median, s.q25, s.q75, s.bin_left[b], s.bin_count[b]);
    }
  }
}

}  // namespace sedlab
