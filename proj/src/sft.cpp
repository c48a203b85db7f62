#include "sedlab/sft.hpp"

#include "sedlab/csv.hpp"
#include "sedlab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sedlab {

namespace {

constexpr std::uint64_t calibration_stream = 0xCA11B;

bool grads_finite(const Model& model) {
  for (const auto& p : model.parameters()) {
    if (p.var.has_grad() && !p.var.grad().all_finite()) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::vector<std::size_t> calibration_subset(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (size >= n) {
    return idx;
  }
  Rng rng(mix_seed(seed, calibration_stream));
  rng.shuffle(idx);
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void SftConfig::validate() const {
  if (epochs <= 0) {
    throw std::invalid_argument("SftConfig: epochs must be positive");
  }
  if (batch_size == 0) {
    throw std::invalid_argument("SftConfig: batch_size must be positive");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("SftConfig: learning_rate must be positive");
  }
  if (log_every == 0) {
    throw std::invalid_argument("SftConfig: log_every must be positive");
  }
  if (!(objective.lambda >= 0.0) || !(objective.beta >= 0.0)) {
    throw std::invalid_argument("SftConfig: lambda and beta must be >= 0");
  }
  if (objective.kind == ObjectiveKind::sed_sft && !mask_config) {
    throw std::invalid_argument("SftConfig: objective sed_sft requires a mask config");
  }
  if (mask_config) {
    mask_config->validate();
  }
}

void to_json(nlohmann::json& j, const SftConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", to_string(c.optimizer)},
                     {"objective", to_string(c.objective.kind)},
                     {"lambda", c.objective.lambda},
                     {"beta", c.objective.beta},
                     {"seed", c.seed},
                     {"log_every", c.log_every}};
  j["mask"] = c.mask_config ? nlohmann::json(*c.mask_config) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, SftConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) {
    c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
  }
  if (j.contains("objective")) {
    c.objective.kind = parse_objective_kind(j.at("objective").get<std::string>());
  }
  c.objective.lambda = j.value("lambda", c.objective.lambda);
  c.objective.beta = j.value("beta", c.objective.beta);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  if (j.contains("mask")) {
    if (j.at("mask").is_null()) {
      c.mask_config.reset();
    } else {
      MaskConfig m = c.mask_config.value_or(MaskConfig{});
      from_json(j.at("mask"), m);
      c.mask_config = m;
    }
  }
}

TrainRecord sft_step(Model& model, std::span<const LabeledExample> batch, const ObjectiveConfig& objective,
                     Optimizer& optimizer, const Tokenizer& tok) {
  if (batch.empty()) {
    throw std::invalid_argument("sft_step: empty batch");
  }
  std::vector<EncodedExample> encoded;
  encoded.reserve(batch.size());
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    encoded.push_back(encode_example(tok, ex));
    tokens += encoded.back().label_count;
  }
  const double inv_tokens = 1.0 / static_cast<double>(tokens);

  model.zero_grad();
  double ce = 0.0;
  double de = 0.0;
  double masked = 0.0;
  double prob_sum = 0.0;
  double entropy_sum = 0.0;
  for (std::size_t i = 0; i < encoded.size(); ++i) {
    const auto& enc = encoded[i];
    ad::Var logits = model.logits(enc.inputs);
    ad::Var probs = ad::softmax_rows(ad::slice_rows(logits, enc.label_start, enc.label_count));
    std::vector<std::size_t> labels(enc.targets.begin() + static_cast<std::ptrdiff_t>(enc.label_start),
                                    enc.targets.end());
    ObjectiveTerms terms = objective_graph(probs, labels, objective);
    if (!std::isfinite(terms.breakdown.total)) {
      throw TrainingError("non-finite loss on batch example " + std::to_string(i) + " (prompt \"" +
                              batch[i].problem.prompt_text + "\")",
                          0, {i});
    }
    ad::backward(ad::scale(terms.total, inv_tokens));
    ce += terms.breakdown.ce_term;
    de += terms.breakdown.de_term;
    masked += std::round(terms.breakdown.masked_fraction * static_cast<double>(enc.label_count));
    prob_sum += terms.label_prob_sum;
    entropy_sum += terms.entropy_sum;
  }
  if (!grads_finite(model)) {
    throw TrainingError("non-finite gradient", 0, {});
  }
  optimizer.step(model);

  TrainRecord rec;
  rec.ce_term = ce * inv_tokens;
  rec.de_term = de * inv_tokens;
  rec.masked_fraction = masked / static_cast<double>(tokens);
  rec.mean_label_prob = prob_sum * inv_tokens;
  rec.token_entropy = entropy_sum * inv_tokens;
  return rec;
}

SftResult train_sft(Model model, std::span<const LabeledExample> dataset, const SftConfig& config,
                    const Tokenizer& tok) {
  config.validate();
  if (dataset.empty()) {
    throw std::invalid_argument("train_sft: empty dataset");
  }
  if (config.batch_size > dataset.size()) {
    throw std::invalid_argument("train_sft: batch_size exceeds dataset size");
  }
  auto optimizer = make_optimizer(config.optimizer, config.learning_rate);
  ObjectiveConfig objective = config.objective;
  objective.mask_plan.reset();
  const bool needs_plan = objective.kind == ObjectiveKind::sed_sft;

  std::vector<LabeledExample> calib;
  if (needs_plan) {
    for (std::size_t i : calibration_subset(dataset.size(), config.mask_config->calibration_sample_size, config.seed)) {
      calib.push_back(dataset[i]);
    }
  }

  TrainLog log;
  std::vector<std::size_t> order(dataset.size());
  std::vector<LabeledExample> batch;
  std::size_t step = 0;
  const std::size_t steps_per_epoch = (dataset.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (needs_plan && (epoch == 0 || config.mask_config->refresh == MaskRefresh::per_epoch)) {
      objective.mask_plan = run_calibration(model, tok, calib, *config.mask_config);
      log.mask_plans.push_back(*objective.mask_plan);
    }
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      batch.clear();
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(lo + config.batch_size, order.size());
      for (std::size_t i = lo; i < hi; ++i) {
        batch.push_back(dataset[order[i]]);
      }
      ++step;
      TrainRecord rec;
      try {
        rec = sft_step(model, batch, objective, *optimizer, tok);
      } catch (const TrainingError& e) {
        std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                     order.begin() + static_cast<std::ptrdiff_t>(hi));
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), step, std::move(ids));
      }
      rec.step = step;
      if (step % config.log_every == 0 || step == total_steps) {
        log.records.push_back(rec);
      }
    }
  }
  model.zero_grad();
  return {std::move(model), std::move(log)};
}

SftEval eval_sft(const Model& model, std::span<const LabeledExample> dataset, const Tokenizer& tok) {
  if (dataset.empty()) {
    throw std::invalid_argument("eval_sft: empty dataset");
  }
  SftEval out;
  double sum = 0.0;
  for (std::size_t e = 0; e < dataset.size(); ++e) {
    const EncodedExample enc = encode_example(tok, dataset[e]);
    const auto dists = forward(model, enc.inputs);
    for (std::size_t t = 0; t < enc.label_count; ++t) {
      const auto& d = dists[enc.label_start + t];
      const TokenId label = enc.targets[enc.label_start + t];
      out.rows.push_back({e, t, tok.token_name(label), d.probs[label]});
      sum += d.probs[label];
    }
  }
  out.mean_label_prob = sum / static_cast<double>(out.rows.size());
  return out;
}

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
  CsvWriter csv(path, {"step", "ce_term", "de_term", "masked_fraction", "mean_label_prob", "token_entropy"});
  for (const auto& r : log.records) {
    csv.row(r.step, r.ce_term, r.de_term, r.masked_fraction, r.mean_label_prob, r.token_entropy);
  }
}

void write_heatmap_csv(const SftEval& eval, const std::filesystem::path& path) {
  CsvWriter csv(path, {"example_id", "position", "label_char", "label_prob"});
  for (const auto& r : eval.rows) {
    csv.row(r.example_id, r.position, r.label_char, r.label_prob);
  }
}

}  // namespace sedlab
