#include "sedlab/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace sedlab::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_matrix(const Array& a) {
  return ConstMatMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                     static_cast<Eigen::Index>(a.cols()));
}

MatMap as_matrix(Array& a) {
  return MatMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                static_cast<Eigen::Index>(a.cols()));
}

[[noreturn]] void shape_fail(Op op, std::initializer_list<Shape> shapes, const std::string& what = {}) {
  std::ostringstream os;
  os << op_name(op) << ": shape mismatch";
  const char* sep = " (";
  for (const auto& s : shapes) {
    os << sep << shape_str(s);
    sep = ", ";
  }
  os << ")";
  if (!what.empty()) {
    os << ": " << what;
  }
  throw ShapeError(os.str());
}

void require_rank2(Op op, const Array& a) {
  if (a.rank() != 2) {
    shape_fail(op, {a.shape()}, "expected a rank-2 array");
  }
}

Var make_node(Op op, Array value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) {
    node->requires_grad = node->requires_grad || in.requires_grad();
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) {
      node->parents.push_back(in.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

// Gradient buffer of a parent, or nullptr when that parent takes no gradient.
Array* grad_of(Node& n, std::size_t i) {
  Node& p = *n.parents[i];
  if (!p.requires_grad) {
    return nullptr;
  }
  p.ensure_grad();
  return &p.grad;
}

void softmax_row_backward(std::span<const double> y, std::span<const double> g, std::span<double> gx) {
  double dot = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    dot += g[j] * y[j];
  }
  for (std::size_t j = 0; j < y.size(); ++j) {
    gx[j] += y[j] * (g[j] - dot);
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << "]";
  return os.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (auto d : shape_) {
    if (d == 0) {
      throw ShapeError("Array: zero-sized dimension in " + shape_str(shape_));
    }
    n *= d;
  }
  data_.assign(n, fill);
}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  std::size_t n = 1;
  for (auto d : shape_) {
    if (d == 0) {
      throw ShapeError("Array: zero-sized dimension in " + shape_str(shape_));
    }
    n *= d;
  }
  if (n != data_.size()) {
    throw ShapeError("Array: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

double Array::item() const {
  if (data_.size() != 1) {
    throw ShapeError("Array::item on array of shape " + shape_str(shape_));
  }
  return data_[0];
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Array::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::sub_scalar: return "sub_scalar";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::softmax_rows: return "softmax_rows";
    case Op::causal_softmax_rows: return "causal_softmax_rows";
    case Op::log: return "log";
    case Op::square: return "square";
    case Op::gather: return "gather";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::mask_mul: return "mask_mul";
    case Op::add_row: return "add_row";
    case Op::gelu: return "gelu";
    case Op::layer_norm: return "layer_norm";
    case Op::slice_cols: return "slice_cols";
    case Op::slice_rows: return "slice_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::gather_rows: return "gather_rows";
    case Op::detach: return "detach";
  }
  return "unknown";
}

void Node::ensure_grad() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) {
    grad = Array(value.shape(), 0.0);
  }
}

void Var::zero_grad() {
  if (node_ && node_->grad.size() > 0) {
    node_->grad.fill(0.0);
  }
}

Var parameter(Array value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = Op::leaf;
  node->requires_grad = true;
  return Var(std::move(node));
}

Var constant(Array value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = Op::constant;
  return Var(std::move(node));
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    shape_fail(Op::add, {a.shape(), b.shape()});
  }
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += b.value()[i];
  }
  return make_node(Op::add, std::move(out), {a, b}, [](Node& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Array* g = grad_of(n, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) {
          (*g)[i] += n.grad[i];
        }
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    shape_fail(Op::sub, {a.shape(), b.shape()});
  }
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= b.value()[i];
  }
  return make_node(Op::sub, std::move(out), {a, b}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += n.grad[i];
      }
    }
    if (Array* g = grad_of(n, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] -= n.grad[i];
      }
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    shape_fail(Op::mul, {a.shape(), b.shape()});
  }
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= b.value()[i];
  }
  return make_node(Op::mul, std::move(out), {a, b}, [](Node& n) {
    const Array& av = n.parents[0]->value;
    const Array& bv = n.parents[1]->value;
    if (Array* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += n.grad[i] * bv[i];
      }
    }
    if (Array* g = grad_of(n, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += n.grad[i] * av[i];
      }
    }
  });
}

Var scale(const Var& a, double c) {
  Array out = a.value();
  for (auto& v : out.data()) {
    v *= c;
  }
  return make_node(Op::scale, std::move(out), {a}, [c](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += c * n.grad[i];
      }
    }
  });
}

namespace {

Var shift(Op op, const Var& a, double c) {
  Array out = a.value();
  for (auto& v : out.data()) {
    v += c;
  }
  return make_node(op, std::move(out), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += n.grad[i];
      }
    }
  });
}

}  // namespace

Var add_scalar(const Var& a, double c) { return shift(Op::add_scalar, a, c); }
Var sub_scalar(const Var& a, double c) { return shift(Op::sub_scalar, a, -c); }

Var matmul(const Var& a, const Var& b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    shape_fail(Op::matmul, {av.shape(), bv.shape()});
  }
  Array out({av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return make_node(Op::matmul, std::move(out), {a, b}, [](Node& n) {
    const Array& av = n.parents[0]->value;
    const Array& bv = n.parents[1]->value;
    if (Array* g = grad_of(n, 0)) {
      as_matrix(*g).noalias() += as_matrix(n.grad) * as_matrix(bv).transpose();
    }
    if (Array* g = grad_of(n, 1)) {
      as_matrix(*g).noalias() += as_matrix(av).transpose() * as_matrix(n.grad);
    }
  });
}

Var transpose(const Var& a) {
  require_rank2(Op::transpose, a.value());
  const Array& av = a.value();
  Array out({av.cols(), av.rows()});
  as_matrix(out) = as_matrix(av).transpose();
  return make_node(Op::transpose, std::move(out), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      as_matrix(*g) += as_matrix(n.grad).transpose();
    }
  });
}

Var softmax_rows(const Var& a) {
  const Array& av = a.value();
  if (av.rank() != 1 && av.rank() != 2) {
    shape_fail(Op::softmax_rows, {av.shape()}, "expected rank 1 or 2");
  }
  Array out(av.shape());
  const std::size_t rows = av.rows();
  const std::size_t cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] /= z;
    }
  }
  return make_node(Op::softmax_rows, std::move(out), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const std::size_t cols = n.value.cols();
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        const std::size_t off = r * cols;
        softmax_row_backward(n.value.data().subspan(off, cols), n.grad.data().subspan(off, cols),
                             g->data().subspan(off, cols));
      }
    }
  });
}

Var causal_softmax_rows(const Var& a) {
  const Array& av = a.value();
  if (av.rank() != 2 || av.rows() != av.cols()) {
    shape_fail(Op::causal_softmax_rows, {av.shape()}, "expected a square matrix");
  }
  const std::size_t t = av.rows();
  Array out(av.shape(), 0.0);
  for (std::size_t r = 0; r < t; ++r) {
    const double* x = av.data().data() + r * t;
    double* y = out.data().data() + r * t;
    const double mx = *std::max_element(x, x + r + 1);
    double z = 0.0;
    for (std::size_t j = 0; j <= r; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j <= r; ++j) {
      y[j] /= z;
    }
  }
  return make_node(Op::causal_softmax_rows, std::move(out), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const std::size_t t = n.value.cols();
      for (std::size_t r = 0; r < t; ++r) {
        const std::size_t off = r * t;
        softmax_row_backward(n.value.data().subspan(off, r + 1), n.grad.data().subspan(off, r + 1),
                             g->data().subspan(off, r + 1));
      }
    }
  });
}

Var log(const Var& a) {
  Array out = a.value();
  for (auto& v : out.data()) {
    v = std::log(std::max(v, log_floor));
  }
  return make_node(Op::log, std::move(out), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const Array& x = n.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (x[i] > log_floor) {
          (*g)[i] += n.grad[i] / x[i];
        }
      }
    }
  });
}

Var square(const Var& a) {
  Array out = a.value();
  for (auto& v : out.data()) {
    v = v * v;
  }
  return make_node(Op::square, std::move(out), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const Array& x = n.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += 2.0 * x[i] * n.grad[i];
      }
    }
  });
}

Var gather(const Var& a, std::span<const std::size_t> idx) {
  const Array& av = a.value();
  std::vector<std::size_t> flat(idx.size());
  if (av.rank() == 2) {
    if (idx.size() != av.rows()) {
      shape_fail(Op::gather, {av.shape(), Shape{idx.size()}}, "need one index per row");
    }
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= av.cols()) {
        shape_fail(Op::gather, {av.shape()}, "index " + std::to_string(idx[r]) + " out of range");
      }
      flat[r] = r * av.cols() + idx[r];
    }
  } else if (av.rank() == 1) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= av.size()) {
        shape_fail(Op::gather, {av.shape()}, "index " + std::to_string(idx[i]) + " out of range");
      }
      flat[i] = idx[i];
    }
  } else {
    shape_fail(Op::gather, {av.shape()}, "expected rank 1 or 2");
  }
  if (flat.empty()) {
    shape_fail(Op::gather, {av.shape()}, "empty index list");
  }
  Array out({flat.size()});
  for (std::size_t i = 0; i < flat.size(); ++i) {
    out[i] = av[flat[i]];
  }
  return make_node(Op::gather, std::move(out), {a}, [flat = std::move(flat)](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < flat.size(); ++i) {
        (*g)[flat[i]] += n.grad[i];
      }
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) {
    s += v;
  }
  return make_node(Op::sum, Array::scalar(s), {a}, [](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const double gs = n.grad[0];
      for (auto& v : g->data()) {
        v += gs;
      }
    }
  });
}

Var mean(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) {
    s += v;
  }
  const double count = static_cast<double>(a.value().size());
  return make_node(Op::mean, Array::scalar(s / count), {a}, [count](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const double gs = n.grad[0] / count;
      for (auto& v : g->data()) {
        v += gs;
      }
    }
  });
}

Var mask_mul(const Var& a, std::span<const double> mask) {
  if (mask.size() != a.value().size()) {
    shape_fail(Op::mask_mul, {a.shape(), Shape{mask.size()}});
  }
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= mask[i];
  }
  return make_node(Op::mask_mul, std::move(out), {a},
                   [m = std::vector<double>(mask.begin(), mask.end())](Node& n) {
                     if (Array* g = grad_of(n, 0)) {
                       for (std::size_t i = 0; i < g->size(); ++i) {
                         (*g)[i] += n.grad[i] * m[i];
                       }
                     }
                   });
}

Var add_row(const Var& a, const Var& row) {
  const Array& av = a.value();
  const Array& rv = row.value();
  if (av.rank() != 2 || rv.rank() != 1 || rv.size() != av.cols()) {
    shape_fail(Op::add_row, {av.shape(), rv.shape()});
  }
  Array out = av;
  const std::size_t cols = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] += rv[c];
    }
  }
  return make_node(Op::add_row, std::move(out), {a, row}, [](Node& n) {
    const std::size_t cols = n.value.cols();
    const std::size_t rows = n.value.rows();
    if (Array* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        (*g)[i] += n.grad[i];
      }
    }
    if (Array* g = grad_of(n, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          (*g)[c] += n.grad[r * cols + c];
        }
      }
    }
  });
}

namespace {
constexpr double gelu_c = 0.7978845608028654;  // sqrt(2/pi)
constexpr double gelu_k = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  Array out = a.value();
  std::vector<double> tanh_cache(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    tanh_cache[i] = std::tanh(gelu_c * (x + gelu_k * x * x * x));
    out[i] = 0.5 * x * (1.0 + tanh_cache[i]);
  }
  return make_node(Op::gelu, std::move(out), {a}, [tanh_cache = std::move(tanh_cache)](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const Array& xv = n.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double x = xv[i];
        const double t = tanh_cache[i];
        const double dt = (1.0 - t * t) * gelu_c * (1.0 + 3.0 * gelu_k * x * x);
        (*g)[i] += n.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Array& xv = x.value();
  if (xv.rank() != 2 || gain.value().rank() != 1 || gain.value().size() != xv.cols() ||
      bias.value().shape() != gain.value().shape()) {
    shape_fail(Op::layer_norm, {xv.shape(), gain.shape(), bias.shape()});
  }
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Array out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  const Array& gv = gain.value();
  const Array& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      mu += in[c];
    }
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      var += (in[c] - mu) * (in[c] - mu);
    }
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (in[c] - mu) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  return make_node(Op::layer_norm, std::move(out), {x, gain, bias},
                   [xhat = std::move(xhat), rstd = std::move(rstd)](Node& n) {
                     const std::size_t cols = n.value.cols();
                     const std::size_t rows = n.value.rows();
                     const Array& gv = n.parents[1]->value;
                     if (Array* gg = grad_of(n, 1)) {
                       for (std::size_t i = 0; i < n.grad.size(); ++i) {
                         (*gg)[i % cols] += n.grad[i] * xhat[i];
                       }
                     }
                     if (Array* gb = grad_of(n, 2)) {
                       for (std::size_t i = 0; i < n.grad.size(); ++i) {
                         (*gb)[i % cols] += n.grad[i];
                       }
                     }
                     if (Array* gx = grad_of(n, 0)) {
                       std::vector<double> dh(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t off = r * cols;
                         double mean_dh = 0.0;
                         double mean_dh_h = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           dh[c] = n.grad[off + c] * gv[c];
                           mean_dh += dh[c];
                           mean_dh_h += dh[c] * xhat[off + c];
                         }
                         mean_dh /= static_cast<double>(cols);
                         mean_dh_h /= static_cast<double>(cols);
                         for (std::size_t c = 0; c < cols; ++c) {
                           (*gx)[off + c] += rstd[r] * (dh[c] - mean_dh - xhat[off + c] * mean_dh_h);
                         }
                       }
                     }
                   });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t width) {
  const Array& av = a.value();
  if (av.rank() != 2 || width == 0 || start + width > av.cols()) {
    shape_fail(Op::slice_cols, {av.shape()},
               "columns [" + std::to_string(start) + ", " + std::to_string(start + width) + ")");
  }
  Array out({av.rows(), width});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.data().data() + r * av.cols() + start, width, out.data().data() + r * width);
  }
  return make_node(Op::slice_cols, std::move(out), {a}, [start, width](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const std::size_t cols = g->cols();
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          (*g)[r * cols + start + c] += n.grad[r * width + c];
        }
      }
    }
  });
}

Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const Array& av = a.value();
  if (av.rank() != 2 || count == 0 || start + count > av.rows()) {
    shape_fail(Op::slice_rows, {av.shape()},
               "rows [" + std::to_string(start) + ", " + std::to_string(start + count) + ")");
  }
  const std::size_t cols = av.cols();
  Array out({count, cols});
  std::copy_n(av.data().data() + start * cols, count * cols, out.data().data());
  return make_node(Op::slice_rows, std::move(out), {a}, [start](Node& n) {
    if (Array* g = grad_of(n, 0)) {
      const std::size_t off = start * n.value.cols();
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        (*g)[off + i] += n.grad[i];
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no inputs");
  }
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      shape_fail(Op::concat_cols, {parts[0].shape(), p.shape()});
    }
    total += p.value().cols();
  }
  Array out({rows, total});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().data().data() + r * w, w, out.data().data() + r * total + off);
    }
    offsets.push_back(off);
    off += w;
  }
  return make_node(Op::concat_cols, std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                   [offsets = std::move(offsets)](Node& n) {
                     const std::size_t total = n.value.cols();
                     for (std::size_t p = 0; p < n.parents.size(); ++p) {
                       if (Array* g = grad_of(n, p)) {
                         const std::size_t w = g->cols();
                         for (std::size_t r = 0; r < n.value.rows(); ++r) {
                           for (std::size_t c = 0; c < w; ++c) {
                             (*g)[r * w + c] += n.grad[r * total + offsets[p] + c];
                           }
                         }
                       }
                     }
                   });
}

Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  const Array& tv = table.value();
  if (tv.rank() != 2 || ids.empty()) {
    shape_fail(Op::gather_rows, {tv.shape(), Shape{ids.size()}});
  }
  const std::size_t cols = tv.cols();
  Array out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      shape_fail(Op::gather_rows, {tv.shape()}, "row " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(tv.data().data() + ids[i] * cols, cols, out.data().data() + i * cols);
  }
  return make_node(Op::gather_rows, std::move(out), {table},
                   [ids = std::vector<std::size_t>(ids.begin(), ids.end())](Node& n) {
                     if (Array* g = grad_of(n, 0)) {
                       const std::size_t cols = n.value.cols();
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         for (std::size_t c = 0; c < cols; ++c) {
                           (*g)[ids[i] * cols + c] += n.grad[i * cols + c];
                         }
                       }
                     }
                   });
}

Var detach(const Var& a) {
  auto node = std::make_shared<Node>();
  node->value = a.value();
  node->op = Op::detach;
  return Var(std::move(node));
}

void backward(const Var& loss) {
  if (!loss || loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a single-element node, got " +
                     (loss ? shape_str(loss.shape()) : std::string("null")));
  }
  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, bool>> stack{{loss.get(), false}};
  while (!stack.empty()) {
    auto [node, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(node);
      continue;
    }
    if (!seen.insert(node).second) {
      continue;
    }
    stack.emplace_back(node, true);
    for (const auto& p : node->parents) {
      if (p->requires_grad && !seen.contains(p.get())) {
        stack.emplace_back(p.get(), false);
      }
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      if (n->grad.shape() == n->value.shape()) {
        n->grad.fill(0.0);
      } else {
        n->ensure_grad();
      }
    }
  }
  Node* root = loss.get();
  if (!root->requires_grad) {
    return;
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) {
      (*it)->backward_fn(**it);
    }
  }
}

double numerical_grad_check(const std::function<Var(const Var&)>& f, const Array& x, double eps) {
  if (!(eps > 0.0)) {
    throw std::invalid_argument("numerical_grad_check: eps must be positive");
  }
  Var leaf = parameter(x);
  Var out = f(leaf);
  if (!std::isfinite(out.value().item())) {
    throw std::domain_error("numerical_grad_check: f returned a non-finite value");
  }
  backward(out);
  leaf.get()->ensure_grad();
  const Array analytic = leaf.grad();

  auto eval_at = [&](const Array& point) {
    const double v = f(constant(point)).value().item();
    if (!std::isfinite(v)) {
      throw std::domain_error("numerical_grad_check: f returned a non-finite value");
    }
    return v;
  };

  double worst = 0.0;
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval_at(probe);
    probe[i] = x[i] - eps;
    const double down = eval_at(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sedlab::ad
