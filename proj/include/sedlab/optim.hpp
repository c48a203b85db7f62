#pragma once

#include "sedlab/model.hpp"

#include <memory>
#include <string_view>
#include <vector>

namespace sedlab {

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind kind) noexcept;
OptimizerKind parse_optimizer_kind(std::string_view name);

/// Updates model parameters from their accumulated gradients. Parameters
/// without an allocated gradient are left untouched.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(Model& model) = 0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double learning_rate) : lr_(learning_rate) {}
  void step(Model& model) override;

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(Model& model) override;

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate);

}  // namespace sedlab
