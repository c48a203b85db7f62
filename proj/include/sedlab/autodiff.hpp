#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major arrays
// of doubles. Graphs are built eagerly by the free functions below; calling
// backward() on a scalar result propagates gradients to every reachable node
// that requires them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedlab::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array({1}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Array({n}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  /// Rows of a rank-2 array; rank-1 arrays are treated as a single row.
  std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Value of a single-element array.
  double item() const;

  void fill(double v);
  bool all_finite() const noexcept;

  friend bool operator==(const Array&, const Array&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  sub_scalar,
  matmul,
  transpose,
  softmax_rows,
  causal_softmax_rows,
  log,
  square,
  gather,
  sum,
  mean,
  mask_mul,
  add_row,
  gelu,
  layer_norm,
  slice_cols,
  slice_rows,
  concat_cols,
  gather_rows,
  detach,
};

const char* op_name(Op op) noexcept;

struct Node {
  Array value;
  Array grad;  // allocated lazily, same shape as value
  Op op = Op::leaf;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Adds this node's gradient contribution into the parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad();
};

/// Shared handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Array& value() const { return node_->value; }
  Array& mutable_value() { return node_->value; }
  const Array& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  const Shape& shape() const { return node_->value.shape(); }
  Op op() const { return node_->op; }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad();

  Node* get() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }
  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Trainable leaf. Its grad accumulates across backward calls until zeroed.
Var parameter(Array value);
/// Leaf that never receives gradient.
Var constant(Array value);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var sub_scalar(const Var& a, double c);
/// [m x k] * [k x n] -> [m x n].
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Row-wise softmax with max subtraction. Rank-1 input is one row.
Var softmax_rows(const Var& a);
/// Square [T x T] scores; row i is normalized over columns 0..i, later columns are 0.
Var causal_softmax_rows(const Var& a);
/// Natural log with a floor of log_floor on the argument.
Var log(const Var& a);
Var square(const Var& a);
/// Rank-2 input: picks a[i, idx[i]] per row. Rank-1 input: picks a[idx[i]].
Var gather(const Var& a, std::span<const std::size_t> idx);
Var sum(const Var& a);
Var mean(const Var& a);
/// Elementwise product with a constant 0/1 (or any real) mask.
Var mask_mul(const Var& a, std::span<const double> mask);
/// [R x C] + [C] broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// tanh approximation of GELU.
Var gelu(const Var& a);
/// Row-wise layer normalization with learned gain and bias (both [C]).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var slice_cols(const Var& a, std::size_t start, std::size_t width);
Var slice_rows(const Var& a, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
/// Embedding lookup: rows table[ids[i]] stacked into [n x C].
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
/// Copy of the value with no gradient path.
Var detach(const Var& a);

inline constexpr double log_floor = 1e-12;

/// Runs reverse accumulation from a single-element loss. Interior gradients
/// are recomputed per call; leaf gradients accumulate additively.
void backward(const Var& loss);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for the scalar function f built on a parameter leaf initialized to x.
double numerical_grad_check(const std::function<Var(const Var&)>& f, const Array& x, double eps);

}  // namespace sedlab::ad
