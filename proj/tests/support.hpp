#pragma once

// Shared helpers for the test binaries: seeded random arrays, an independent
// central-difference gradient, and scratch directories.

#include "sedlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testing {

using sedlab::ad::Array;
using sedlab::ad::Shape;
using sedlab::ad::Var;

inline Array random_array(Shape shape, std::mt19937_64& gen, double lo = -2.0, double hi = 2.0) {
  Array a(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : a.data()) {
    v = u(gen);
  }
  return a;
}

/// Scalar value of f at x, evaluated on a fresh constant leaf.
inline double eval_at(const std::function<Var(const Var&)>& f, const Array& x) {
  return f(sedlab::ad::constant(x)).value().item();
}

/// Central differences, computed without touching backward().
inline Array fd_gradient(const std::function<Var(const Var&)>& f, const Array& x, double eps = 1e-5) {
  Array g(x.shape());
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval_at(f, probe);
    probe[i] = orig - eps;
    const double down = eval_at(f, probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

/// Gradient of f at x from reverse mode.
inline Array analytic_gradient(const std::function<Var(const Var&)>& f, const Array& x) {
  Var leaf = sedlab::ad::parameter(x);
  sedlab::ad::backward(f(leaf));
  return leaf.has_grad() ? leaf.grad() : Array(x.shape());
}

/// max_i |a_i - b_i| / max(1, |a_i|).
inline double max_rel_error(const Array& a, const Array& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(a[i])));
  }
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sedlab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
