#include "sedlab/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sedlab {

std::string_view to_string(OptimizerKind kind) noexcept { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") {
    return OptimizerKind::sgd;
  }
  if (name == "adam") {
    return OptimizerKind::adam;
  }
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

void Sgd::step(Model& model) {
  for (auto& p : model.mutable_parameters()) {
    if (!p.var.has_grad()) {
      continue;
    }
    auto w = p.var.mutable_value().data();
    const auto g = p.var.grad().data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr_ * g[i];
    }
  }
}

void Adam::step(Model& model) {
  auto params = model.mutable_parameters();
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.var.value().size(), 0.0);
      v_.emplace_back(p.var.value().size(), 0.0);
    }
  }
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.var.has_grad()) {
      continue;
    }
    auto w = p.var.mutable_value().data();
    const auto g = p.var.grad().data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate) {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be finite and positive");
  }
  if (kind == OptimizerKind::sgd) {
    return std::make_unique<Sgd>(learning_rate);
  }
  return std::make_unique<Adam>(learning_rate);
}

}  // namespace sedlab
