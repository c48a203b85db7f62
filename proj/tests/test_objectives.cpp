#include "sedlab/objectives.hpp"

#include "sedlab/rng.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace sedlab;
using sedlab::ad::Array;
using sedlab::ad::Var;

namespace {

constexpr std::size_t V = 6;

MaskPlan plan_with_tau(double tau) {
  MaskPlan plan;
  plan.tau = tau;
  plan.config.k = 2;
  plan.config.r = 0.7;
  return plan;
}

ObjectiveConfig config_for(ObjectiveKind kind) {
  ObjectiveConfig c;
  c.kind = kind;
  if (kind == ObjectiveKind::sed_sft) {
    c.mask_plan = plan_with_tau(0.6);
  }
  if (kind == ObjectiveKind::entropy_bonus) {
    c.beta = 0.3;
  }
  return c;
}

double loss_value(const Array& logits, std::span<const std::size_t> labels, const ObjectiveConfig& c) {
  return objective_graph(ad::softmax_rows(ad::constant(logits)), labels, c).total.value().item();
}

Array logits_grad(const Array& logits, std::span<const std::size_t> labels, const ObjectiveConfig& c) {
  const Var z = ad::parameter(logits);
  ad::backward(objective_graph(ad::softmax_rows(z), labels, c).total);
  return z.grad();
}

// Row softmax written out directly for the oracles below.
std::vector<double> row_softmax(const Array& z, std::size_t r) {
  std::vector<double> p(z.cols());
  double m = -INFINITY, s = 0.0;
  for (std::size_t j = 0; j < z.cols(); ++j) {
    m = std::max(m, z.at(r, j));
  }
  for (std::size_t j = 0; j < z.cols(); ++j) {
    p[j] = std::exp(z.at(r, j) - m);
    s += p[j];
  }
  for (auto& v : p) {
    v /= s;
  }
  return p;
}

double top2(std::vector<double> p) {
  std::sort(p.begin(), p.end(), std::greater<>());
  return p[0] + p[1];
}

}  // namespace

TEST_CASE("objective names and config rules") {
  CHECK(parse_objective_kind("sed") == ObjectiveKind::sed_sft);
  CHECK(parse_objective_kind("sed_sft") == ObjectiveKind::sed_sft);
  CHECK(parse_objective_kind("sed-no-mask") == ObjectiveKind::sed_sft_no_mask);
  CHECK(parse_objective_kind("dft") == ObjectiveKind::dft_style);
  CHECK(parse_objective_kind("entropy-bonus") == ObjectiveKind::entropy_bonus);
  CHECK(to_string(ObjectiveKind::ce) == "ce");
  CHECK_THROWS(parse_objective_kind("gem"));

  ObjectiveConfig c;
  CHECK(c.lambda == 1.0);
  CHECK_NOTHROW(c.validate());
  c.kind = ObjectiveKind::sed_sft;
  CHECK_THROWS(c.validate());
  c.mask_plan = plan_with_tau(0.5);
  CHECK_NOTHROW(c.validate());
  c.kind = ObjectiveKind::sed_sft_no_mask;
  CHECK_THROWS(c.validate());
  c.mask_plan.reset();
  c.lambda = -1.0;
  CHECK_THROWS(c.validate());
  c.lambda = 1.0;
  c.beta = -0.1;
  CHECK_THROWS(c.validate());
}

TEST_CASE("cross-entropy values") {
  CHECK(ce_loss(std::vector<double>{1.0, 1.0}) == 0.0);
  CHECK(ce_loss(std::vector<double>{0.5}) == doctest::Approx(0.693147180559945).epsilon(1e-14));
  CHECK(ce_loss(std::vector<double>{std::exp(-1.0), std::exp(-2.0)}) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK_THROWS(ce_loss(std::vector<double>{0.0}));
  CHECK_THROWS(ce_loss(std::vector<double>{-0.1}));
}

TEST_CASE("DE penalty shape") {
  CHECK(de_penalty(0.5) == 0.0);
  CHECK(de_penalty(1.0) == 0.25);
  CHECK(de_penalty(0.0) == 0.25);
  CHECK(std::abs(de_penalty(0.9) - 0.16) < 1e-15);
  for (double x : {0.0, 0.125, 0.25, 0.375, 0.5}) {
    CHECK(de_penalty(0.5 + x) == de_penalty(0.5 - x));
  }
}

TEST_CASE("SED-SFT loss values and reductions") {
  const std::vector<double> p{0.9, 0.6};
  const std::vector<std::uint8_t> m{1, 0};
  const LossBreakdown b = sed_sft_loss(p, m, 1.0);
  const double expected = (-std::log(0.9) + 0.16) + (-std::log(0.6));
  CHECK(std::abs(b.total - expected) < 1e-12);
  CHECK(std::abs(b.total - 0.7762) < 1e-4);
  CHECK(std::abs(b.total - (b.ce_term + 1.0 * b.de_term)) < 1e-9);
  CHECK(b.masked_fraction == 0.5);
  CHECK(b.token_count == 2);

  const std::vector<double> q{0.3, 0.7, 0.11, 0.99};
  const std::vector<std::uint8_t> zeros(4, 0), ones(4, 1);
  CHECK(sed_sft_loss(q, zeros, 1.0).total == ce_loss(q));
  CHECK(sed_sft_loss(q, ones, 0.0).total == ce_loss(q));
  CHECK(sed_sft_loss(q, zeros, 1.0).masked_fraction == 1.0);
  CHECK_THROWS(sed_sft_loss(q, m, 1.0));
}

TEST_CASE("baseline stand-ins") {
  CHECK(dft_style_loss(std::vector<double>{1.0}) == 0.0);
  CHECK(std::abs(dft_style_loss(std::vector<double>{0.5}) - 0.5 * std::log(2.0)) < 1e-15);
  CHECK_THROWS(dft_style_loss(std::vector<double>{0.0}));

  const std::vector<double> uniform(8, 0.125);
  CHECK(std::abs(entropy(uniform) - std::log(8.0)) < 1e-12);
  std::vector<double> peaked(8, 1e-15);
  peaked[3] = 1.0 - 7e-15;
  CHECK(entropy(peaked) < 1e-12);

  std::vector<TokenDistribution> d(2);
  d[0].probs = uniform;
  d[0].label_id = 1;
  d[0].label_prob = 0.125;
  d[1].probs = peaked;
  d[1].label_id = 3;
  d[1].label_prob = peaked[3];
  const std::vector<double> labels{0.125, peaked[3]};
  CHECK(entropy_bonus_loss(d, 0.0) == ce_loss(labels));
  CHECK(std::abs(entropy_bonus_loss(d, 0.5) - (ce_loss(labels) - 0.5 * std::log(8.0))) < 1e-12);
  CHECK_THROWS(entropy_bonus_loss(d, -1.0));
}

TEST_CASE("graph losses agree with the scalar formulas") {
  std::mt19937_64 gen(21);
  const Array z = testing::random_array({4, V}, gen, -3, 3);
  const std::vector<std::size_t> labels{0, 3, 5, 1};
  std::vector<double> lp;
  std::vector<std::uint8_t> mask;
  double h = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    const auto p = row_softmax(z, r);
    lp.push_back(p[labels[r]]);
    mask.push_back(top2(p) < 0.6 ? 1 : 0);
    h += entropy(p);
  }
  CHECK(std::abs(loss_value(z, labels, config_for(ObjectiveKind::ce)) - ce_loss(lp)) < 1e-12);
  const auto sed = objective_graph(ad::softmax_rows(ad::constant(z)), labels, config_for(ObjectiveKind::sed_sft));
  CHECK(std::abs(sed.total.value().item() - sed_sft_loss(lp, mask, 1.0).total) < 1e-12);
  CHECK(sed.breakdown.masked_fraction == sed_sft_loss(lp, mask, 1.0).masked_fraction);
  const std::vector<std::uint8_t> all(4, 1);
  CHECK(std::abs(loss_value(z, labels, config_for(ObjectiveKind::sed_sft_no_mask)) - sed_sft_loss(lp, all, 1.0).total) <
        1e-12);
  CHECK(std::abs(loss_value(z, labels, config_for(ObjectiveKind::dft_style)) - dft_style_loss(lp)) < 1e-12);
  CHECK(std::abs(loss_value(z, labels, config_for(ObjectiveKind::entropy_bonus)) - (ce_loss(lp) - 0.3 * h)) < 1e-12);
  CHECK(sed.breakdown.token_count == 4);
}

TEST_CASE("objective gradients on logits match central differences") {
  Rng rng(99);
  std::mt19937_64 gen(5);
  for (ObjectiveKind kind : {ObjectiveKind::ce, ObjectiveKind::sed_sft, ObjectiveKind::sed_sft_no_mask,
                             ObjectiveKind::dft_style, ObjectiveKind::entropy_bonus}) {
    const ObjectiveConfig c = config_for(kind);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Array z = testing::random_array({4, V}, gen, -3, 3);
      // Keep top-2 mass away from tau so the held mask cannot flip under the probe.
      bool near = false;
      for (std::size_t r = 0; r < 4; ++r) {
        near = near || std::abs(top2(row_softmax(z, r)) - 0.6) < 1e-3;
      }
      if (near) {
        continue;
      }
      std::vector<std::size_t> labels(4);
      for (auto& l : labels) {
        l = rng.uniform_int(V);
      }
      const Array a = logits_grad(z, labels, c);
      Array n;
      if (kind == ObjectiveKind::dft_style) {
        // The weight is a stop-gradient, so difference the CE with the weights frozen at z.
        std::vector<double> w(4);
        for (std::size_t r = 0; r < 4; ++r) {
          w[r] = row_softmax(z, r)[labels[r]];
        }
        n = testing::fd_gradient(
            [&](const Var& x) {
              Var total = ad::constant(Array::scalar(0.0));
              const Var lp = ad::log(ad::gather(ad::softmax_rows(x), labels));
              for (std::size_t r = 0; r < 4; ++r) {
                const std::vector<std::size_t> one{r};
                total = ad::sub(total, ad::scale(ad::gather(lp, one), w[r]));
              }
              return ad::sum(total);
            },
            z);
      } else {
        n = testing::fd_gradient(
            [&](const Var& x) { return objective_graph(ad::softmax_rows(x), labels, c).total; }, z);
      }
      worst = std::max(worst, testing::max_rel_error(a, n));
    }
    INFO(to_string(kind));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("DFT gradient is the confidence-weighted CE gradient") {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Array z = testing::random_array({1, V}, gen, -2, 2);
    const std::vector<std::size_t> label{2};
    const double p = row_softmax(z, 0)[2];
    const Array g_dft = logits_grad(z, label, config_for(ObjectiveKind::dft_style));
    const Array g_ce = logits_grad(z, label, config_for(ObjectiveKind::ce));
    for (std::size_t j = 0; j < V; ++j) {
      CHECK(std::abs(g_dft[j] - p * g_ce[j]) < 1e-9);
    }
  }
}

TEST_CASE("DE gradient pushes a confident label toward one half") {
  // Row where the label holds most of the mass.
  Array z({1, V}, std::vector<double>{3.0, 0.0, 0.0, 0.0, 0.0, 0.0});
  const std::vector<std::size_t> label{0};
  const double p = row_softmax(z, 0)[0];
  REQUIRE(p > 0.8);

  ObjectiveConfig ce = config_for(ObjectiveKind::ce);
  ObjectiveConfig sed = config_for(ObjectiveKind::sed_sft_no_mask);
  const Array g_ce = logits_grad(z, label, ce);
  const Array g_sed = logits_grad(z, label, sed);
  const double de_logit = g_sed[0] - g_ce[0];
  // d/dz_y (p - 1/2)^2 = 2 (p - 1/2) p (1 - p)
  CHECK(std::abs(de_logit - 2.0 * (p - 0.5) * p * (1.0 - p)) < 1e-12);
  CHECK(de_logit > 0.0);
  CHECK(g_ce[0] < 0.0);

  // Gradient with respect to the probability itself.
  const Var probs = ad::parameter(ad::softmax_rows(ad::constant(z)).value());
  ad::backward(objective_graph(probs, label, sed).total);
  CHECK(std::abs(probs.grad()[0] - (-1.0 / p + 2.0 * (p - 0.5))) < 1e-12);
}

TEST_CASE("masked rows get no DE gradient") {
  const Array z({2, V}, std::vector<double>{4, 0, 0, 0, 0, 0, 0.1, 0.2, 0, 0.1, 0, 0.2});
  const std::vector<std::size_t> labels{0, 1};
  ObjectiveConfig c = config_for(ObjectiveKind::sed_sft);
  c.mask_plan = plan_with_tau(0.6);  // first row top-2 ~0.93 -> masked, second ~0.37 -> penalized
  const auto terms = objective_graph(ad::softmax_rows(ad::constant(z)), labels, c);
  CHECK(terms.mask == std::vector<double>{0.0, 1.0});
  const Array g_sed = logits_grad(z, labels, c);
  const Array g_ce = logits_grad(z, labels, config_for(ObjectiveKind::ce));
  for (std::size_t j = 0; j < V; ++j) {
    CHECK(g_sed.at(0, j) == g_ce.at(0, j));
  }

  c.lambda = 0.0;
  CHECK(loss_value(z, labels, c) == loss_value(z, labels, config_for(ObjectiveKind::ce)));
  c.lambda = 1.0;
  c.mask_plan->config.r = 1.0;
  CHECK(loss_value(z, labels, c) == loss_value(z, labels, config_for(ObjectiveKind::ce)));
}
