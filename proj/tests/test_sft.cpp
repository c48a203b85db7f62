#include "sedlab/sft.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace sedlab;

namespace {

const Tokenizer tok;

Model small_model(std::uint64_t seed = 3) {
  ModelConfig c;
  c.vocab_size = tok.vocab_size();
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.max_seq_len = 64;
  c.seed = seed;
  return Model(c);
}

std::vector<LabeledExample> data(std::size_t n, std::uint64_t seed = 12) {
  DatasetSpec spec;
  spec.n = n;
  spec.seed = seed;
  spec.difficulties = {1, 2};
  return build_sft_dataset(spec);
}

bool same_params(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (!(a.parameters()[i].var.value() == b.parameters()[i].var.value())) {
      return false;
    }
  }
  return true;
}

std::size_t label_tokens(const LabeledExample& ex) { return encode_example(tok, ex).label_count; }

}  // namespace

TEST_CASE("sft config validation and json") {
  SftConfig c;
  CHECK(c.learning_rate == 2e-3);
  CHECK(c.optimizer == OptimizerKind::sgd);
  CHECK_NOTHROW(c.validate());
  c.learning_rate = 0.0;
  CHECK_THROWS(c.validate());
  c.learning_rate = 1e-3;
  c.batch_size = 0;
  CHECK_THROWS(c.validate());
  c.batch_size = 4;
  c.objective.kind = ObjectiveKind::sed_sft;
  CHECK_THROWS(c.validate());
  c.mask_config = MaskConfig{};
  CHECK_NOTHROW(c.validate());
  c.epochs = 5;
  c.seed = 99;
  c.optimizer = OptimizerKind::adam;
  const SftConfig back = nlohmann::json(c).get<SftConfig>();
  CHECK(back.epochs == 5);
  CHECK(back.seed == 99);
  CHECK(back.optimizer == OptimizerKind::adam);
  CHECK(back.objective.kind == ObjectiveKind::sed_sft);
  REQUIRE(back.mask_config.has_value());
  CHECK(back.mask_config->r == 0.7);
}

TEST_CASE("calibration subset is sorted, seeded and bounded") {
  const auto a = calibration_subset(1000, 50, 4);
  CHECK(a.size() == 50);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(a.back() < 1000);
  CHECK(a == calibration_subset(1000, 50, 4));
  CHECK(a != calibration_subset(1000, 50, 5));
  const auto all = calibration_subset(10, 50, 4);
  CHECK(all.size() == 10);
  CHECK(all.front() == 0);
  CHECK(all.back() == 9);
}

TEST_CASE("a batch step averages gradients over label tokens") {
  const auto ds = data(2);
  ObjectiveConfig ce;
  const Model start = small_model();

  auto delta_after = [&](std::span<const LabeledExample> batch) {
    Model m = start;
    Sgd opt(0.5);
    sft_step(m, batch, ce, opt, tok);
    std::vector<double> d;
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      const auto& v = m.parameters()[i].var.value();
      const auto& v0 = start.parameters()[i].var.value();
      for (std::size_t j = 0; j < v.size(); ++j) {
        d.push_back(v[j] - v0[j]);
      }
    }
    return d;
  };
  const auto both = delta_after(ds);
  const auto first = delta_after(std::span(ds).subspan(0, 1));
  const auto second = delta_after(std::span(ds).subspan(1, 1));
  const double na = static_cast<double>(label_tokens(ds[0]));
  const double nb = static_cast<double>(label_tokens(ds[1]));
  double worst = 0.0;
  for (std::size_t i = 0; i < both.size(); ++i) {
    const double expected = (na * first[i] + nb * second[i]) / (na + nb);
    worst = std::max(worst, std::abs(both[i] - expected));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("lambda zero step equals a CE step bit for bit") {
  const auto ds = data(4);
  ObjectiveConfig ce;
  ObjectiveConfig sed;
  sed.kind = ObjectiveKind::sed_sft_no_mask;
  sed.lambda = 0.0;
  Model a = small_model(), b = small_model();
  Sgd oa(0.1), ob(0.1);
  const TrainRecord ra = sft_step(a, ds, ce, oa, tok);
  const TrainRecord rb = sft_step(b, ds, sed, ob, tok);
  CHECK(same_params(a, b));
  CHECK(ra.ce_term == rb.ce_term);
}

TEST_CASE("non-finite loss aborts with the offending batch") {
  const auto ds = data(6);
  Model m = small_model();
  for (auto& p : m.mutable_parameters()) {
    if (p.name == "head.b") {
      p.var.mutable_value()[5] = std::nan("");
    }
  }
  SftConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 3;
  try {
    (void)train_sft(m, ds, cfg, tok);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 1);
    CHECK(e.batch().size() == 3);
  }
}

TEST_CASE("training is deterministic and logs every step") {
  const auto ds = data(20);
  SftConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.seed = 5;
  cfg.learning_rate = 0.05;
  const SftResult a = train_sft(small_model(), ds, cfg, tok);
  const SftResult b = train_sft(small_model(), ds, cfg, tok);
  CHECK(same_params(a.model, b.model));
  // ceil(20 / 6) = 4 steps per epoch
  REQUIRE(a.log.records.size() == 8);
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    CHECK(a.log.records[i].step == i + 1);
    CHECK(std::isfinite(a.log.records[i].ce_term));
    CHECK(a.log.records[i].ce_term == b.log.records[i].ce_term);
  }
  cfg.seed = 6;
  CHECK_FALSE(same_params(train_sft(small_model(), ds, cfg, tok).model, a.model));

  cfg.batch_size = 30;
  CHECK_THROWS(train_sft(small_model(), ds, cfg, tok));
  CHECK_THROWS(train_sft(small_model(), std::span<const LabeledExample>{}, SftConfig{}, tok));
}

TEST_CASE("sed-sft with r = 1 reproduces the CE trajectory") {
  const auto ds = data(24);
  SftConfig ce;
  ce.epochs = 2;
  ce.batch_size = 8;
  ce.seed = 11;
  ce.learning_rate = 0.05;
  SftConfig sed = ce;
  sed.objective.kind = ObjectiveKind::sed_sft;
  MaskConfig mc;
  mc.r = 1.0;
  mc.calibration_sample_size = 8;
  sed.mask_config = mc;
  const SftResult a = train_sft(small_model(), ds, ce, tok);
  const SftResult b = train_sft(small_model(), ds, sed, tok);
  REQUIRE(a.log.records.size() == b.log.records.size());
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    CHECK(a.log.records[i].ce_term == b.log.records[i].ce_term);
    CHECK(b.log.records[i].masked_fraction == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(same_params(a.model, b.model));
  CHECK(b.log.mask_plans.size() == 2);
}

TEST_CASE("frozen calibration runs once") {
  const auto ds = data(16);
  SftConfig sed;
  sed.epochs = 3;
  sed.batch_size = 8;
  sed.objective.kind = ObjectiveKind::sed_sft;
  MaskConfig mc;
  mc.calibration_sample_size = 8;
  mc.refresh = MaskRefresh::frozen_once;
  sed.mask_config = mc;
  CHECK(train_sft(small_model(), ds, sed, tok).log.mask_plans.size() == 1);
  sed.mask_config->refresh = MaskRefresh::per_epoch;
  const SftResult r = train_sft(small_model(), ds, sed, tok);
  CHECK(r.log.mask_plans.size() == 3);
  for (const auto& rec : r.log.records) {
    CHECK(rec.masked_fraction >= 0.0);
    CHECK(rec.masked_fraction <= 1.0);
  }
}

TEST_CASE("CE training raises the label probability") {
  const auto ds = data(200, 40);
  SftConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 20;
  cfg.learning_rate = 3e-3;
  cfg.optimizer = OptimizerKind::adam;
  Model m = small_model(8);
  std::vector<double> curve{eval_sft(m, ds, tok).mean_label_prob};
  for (int epoch = 0; epoch < 10; ++epoch) {
    cfg.seed = static_cast<std::uint64_t>(epoch);
    m = train_sft(std::move(m), ds, cfg, tok).model;
    curve.push_back(eval_sft(m, ds, tok).mean_label_prob);
  }
  for (std::size_t i = 1; i < curve.size(); ++i) {
    INFO("epoch " << i);
    CHECK(curve[i] > curve[i - 1]);
  }
}

TEST_CASE("eval tables") {
  const auto ds = data(10);
  const Model m = small_model();
  const SftEval ev = eval_sft(m, ds, tok);
  const double v = static_cast<double>(tok.vocab_size());
  CHECK(ev.mean_label_prob > 1.0 / (3.0 * v));
  CHECK(ev.mean_label_prob < 3.0 / v);
  std::size_t total = 0;
  for (const auto& ex : ds) {
    total += label_tokens(ex);
  }
  CHECK(ev.rows.size() == total);
  for (const auto& r : ev.rows) {
    CHECK(r.label_prob > 0.0);
    CHECK(r.label_prob < 1.0);
  }
  CHECK(ev.rows.back().label_char == "<eos>");

  const auto dir = testing::scratch_dir("sft_csv");
  write_heatmap_csv(ev, dir / "h.csv");
  std::ifstream in(dir / "h.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "example_id,position,label_char,label_prob");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
  }
  CHECK(rows == total);

  SftConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 5;
  const SftResult r = train_sft(small_model(), ds, cfg, tok);
  write_train_log_csv(r.log, dir / "log.csv");
  std::ifstream log(dir / "log.csv");
  std::getline(log, line);
  CHECK(line == "step,ce_term,de_term,masked_fraction,mean_label_prob,token_entropy");
}
