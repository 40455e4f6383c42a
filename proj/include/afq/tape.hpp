#pragma once

// Reverse-mode differentiation over dense matrix expressions.
//
// A Tape records primitive applications in creation order (which is a valid
// topological order); backward() walks it in reverse. Graphs are rebuilt for
// every evaluation, so a Graph is just a function that records onto a fresh tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "afq/errors.hpp"
#include "afq/linalg.hpp"
#include "afq/quantizer.hpp"

namespace afq {

template <typename Scalar>
class Tape;

/// Handle to a node on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Mat<Scalar>& value() const { return tape_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
using Bindings = std::map<std::string, Mat<Scalar>>;

template <typename Scalar>
using GradientMap = std::map<std::string, Mat<Scalar>>;

/// Rounding residuals of fake-quant nodes, recorded on one evaluation and
/// replayed on later ones. Replaying turns every fake-quant node into its
/// straight-through surrogate around the recorded point, whose exact derivative
/// is the STE gradient; finite differences can then check it.
template <typename Scalar>
struct QuantTrace {
  enum class Mode { Off, Record, Replay };

  struct Entry {
    Mat<Scalar> residual;  // round(x / delta) - x / delta
    Mat<Scalar> zero_residual;  // zp - z_raw
    std::vector<bool> zero_tracks;  // zp follows z_raw (rounded value inside [0, qmax])
  };

  Mode mode = Mode::Off;
  std::vector<Entry> entries;
  std::size_t cursor = 0;
  /// Smallest distance (in input units) of any pre-clamp index to 0 or 2^n - 1.
  double min_boundary_distance = std::numeric_limits<double>::infinity();
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = Mat<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream, const Matrix& self)>;

  explicit Tape(PrecisionScheme scheme = default_scheme<Scalar>()) : scheme_(scheme) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  PrecisionScheme scheme() const { return scheme_; }

  void bind(Bindings<Scalar> bindings) { bindings_ = std::move(bindings); }

  /// Named, differentiable leaf taken from the bindings.
  Var<Scalar> input(const std::string& name) {
    auto it = bindings_.find(name);
    if (it == bindings_.end()) throw UnboundLeafError("unbound leaf '" + name + "'");
    return leaf(name, it->second);
  }

  Var<Scalar> leaf(const std::string& name, Matrix value) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = true;
    node.name = name;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  Var<Scalar> constant(Matrix value) {
    Node node;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Appends a primitive application. The backward function is kept only when
  /// some input requires a gradient.
  Var<Scalar> record(Matrix value, const std::vector<Var<Scalar>>& inputs, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw std::logic_error("operands recorded on different tapes");
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(Var<Scalar> v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` to the gradient of `v` (no-op for constants).
  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& g) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0 && node.value.size() != 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 root.
  void backward(Var<Scalar> root) {
    const Matrix& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward: root must be a scalar, got " + shape_string(rv.rows(), rv.cols()));
    }
    for (auto& node : nodes_) node.grad.resize(0, 0);
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.backward && node.grad.size() != 0) node.backward(*this, node.grad, node.value);
    }
  }

  /// Gradient of a node, zeros if nothing flowed into it.
  Matrix grad(Var<Scalar> v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  GradientMap<Scalar> gradients() const {
    GradientMap<Scalar> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].name.empty()) out[nodes_[i].name] = grad(Var<Scalar>(const_cast<Tape*>(this), i));
    }
    return out;
  }

  void set_quant_trace(std::shared_ptr<QuantTrace<Scalar>> trace) { quant_trace_ = std::move(trace); }
  QuantTrace<Scalar>* quant_trace() const { return quant_trace_.get(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::string name;
    BackwardFn backward;
  };

  PrecisionScheme scheme_;
  std::vector<Node> nodes_;
  Bindings<Scalar> bindings_;
  std::shared_ptr<QuantTrace<Scalar>> quant_trace_;
};

// ---------------------------------------------------------------------------
// Primitives

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = a.tape();
  return t.record(afq::matmul(a.value(), b.value()), {a, b}, [a, b](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * b.value().transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, a.value().transpose() * g);
  });
}

/// Product with a transform matrix; promoted to double under FloatDouble.
template <typename Scalar>
Var<Scalar> transform_matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = a.tape();
  return t.record(afq::transform_matmul(a.value(), b.value(), t.scheme()), {a, b},
                  [a, b](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
                    if (tp.requires_grad(a)) tp.accumulate(a, g * b.value().transpose());
                    if (tp.requires_grad(b)) tp.accumulate(b, a.value().transpose() * g);
                  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  require_same_shape(a.value(), b.value(), "subtract");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b},
                         [a, b](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
                           if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
                           if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
                         });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  return a.tape().record(a.value() * s, {a}, [a, s](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(a, g * s);
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  return a.tape().record(a.value().transpose(), {a}, [a](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(a, g.transpose());
  });
}

namespace detail {
template <typename Scalar>
void require_row_vector(const Mat<Scalar>& x, const Mat<Scalar>& row, const char* what) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError(std::string(what) + ": expected a 1x" + std::to_string(x.cols()) + " row, got " +
                     shape_string(row.rows(), row.cols()));
  }
}
}  // namespace detail

/// x + row, the row broadcast over every row of x.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> x, Var<Scalar> row) {
  detail::require_row_vector(x.value(), row.value(), "add_row");
  Mat<Scalar> out = x.value();
  out.rowwise() += row.value().row(0);
  return x.tape().record(std::move(out), {x, row}, [x, row](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(x, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

/// x - row, the row broadcast over every row of x.
template <typename Scalar>
Var<Scalar> sub_row(Var<Scalar> x, Var<Scalar> row) {
  detail::require_row_vector(x.value(), row.value(), "sub_row");
  Mat<Scalar> out = x.value();
  out.rowwise() -= row.value().row(0);
  return x.tape().record(std::move(out), {x, row}, [x, row](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(x, g);
    if (tp.requires_grad(row)) tp.accumulate(row, -g.colwise().sum());
  });
}

/// Matrix inverse; vector-Jacobian rule grad(M) = -M^-T * upstream * M^-T.
template <typename Scalar>
Var<Scalar> inverse(Var<Scalar> m, InversionDiagnostics* diagnostics = nullptr) {
  auto& t = m.tape();
  auto result = lu_invert(m.value(), t.scheme());
  if (diagnostics) *diagnostics = result.diagnostics;
  return t.record(std::move(result.inverse), {m},
                  [m](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>& inv) {
                    const Mat<Scalar> inv_t = inv.transpose();
                    tp.accumulate(m, -(inv_t * g * inv_t));
                  });
}

/// Row-wise layer normalization with affine gamma/beta rows.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps = Scalar(1e-5)) {
  const Mat<Scalar>& xv = x.value();
  detail::require_row_vector(xv, gamma.value(), "layer_norm gamma");
  detail::require_row_vector(xv, beta.value(), "layer_norm beta");
  const Index rows = xv.rows();
  const Index cols = xv.cols();
  auto xhat = std::make_shared<Mat<Scalar>>(rows, cols);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(rows);
  Mat<Scalar> out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Scalar mean = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mean).square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)(i) = inv;
    xhat->row(i) = (xv.row(i).array() - mean) * inv;
    out.row(i) = xhat->row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, inv_std](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
                           if (tp.requires_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(*xhat).colwise().sum());
                           if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                           if (!tp.requires_grad(x)) return;
                           Mat<Scalar> dx(g.rows(), g.cols());
                           for (Index i = 0; i < g.rows(); ++i) {
                             const auto dxhat = g.row(i).cwiseProduct(gamma.value().row(0));
                             const Scalar m1 = dxhat.mean();
                             const Scalar m2 = dxhat.cwiseProduct(xhat->row(i)).mean();
                             dx.row(i) = (*inv_std)(i) * (dxhat.array() - m1 - xhat->row(i).array() * m2).matrix();
                           }
                           tp.accumulate(x, dx);
                         });
}

/// Row-wise softmax evaluated in double. With `causal`, row i only attends to columns j <= i.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x, bool causal) {
  const Mat<double> xv = x.value().template cast<double>();
  Mat<double> y = Mat<double>::Zero(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) {
    const Index width = causal ? std::min<Index>(i + 1, xv.cols()) : xv.cols();
    const double peak = xv.row(i).head(width).maxCoeff();
    double total = 0.0;
    for (Index j = 0; j < width; ++j) total += (y(i, j) = std::exp(xv(i, j) - peak));
    y.row(i).head(width) /= total;
  }
  auto probs = std::make_shared<Mat<double>>(std::move(y));
  return x.tape().record(probs->template cast<Scalar>(), {x}, [x, probs](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    const Mat<double> gd = g.template cast<double>();
    Mat<double> dx(gd.rows(), gd.cols());
    for (Index i = 0; i < gd.rows(); ++i) {
      const double dot = gd.row(i).dot(probs->row(i));
      dx.row(i) = probs->row(i).cwiseProduct((gd.row(i).array() - dot).matrix());
    }
    tp.accumulate(x, dx.template cast<Scalar>());
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  Mat<Scalar> out = x.value().cwiseMax(Scalar(0));
  return x.tape().record(std::move(out), {x}, [x](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(x, (x.value().array() > Scalar(0)).select(g, Scalar(0)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  Mat<Scalar> out = x.value().unaryExpr([](Scalar v) { return afq::sigmoid(v); });
  auto y = std::make_shared<Mat<Scalar>>(out);
  return x.tape().record(std::move(out), {x}, [x, y](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(x, g.cwiseProduct(y->cwiseProduct((Scalar(1) - y->array()).matrix())));
  });
}

/// Columns [begin, begin + count).
template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  Mat<Scalar> out = x.value().middleCols(begin, count);
  return x.tape().record(std::move(out), {x}, [x, begin, count](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    Mat<Scalar> full = Mat<Scalar>::Zero(x.rows(), x.cols());
    full.middleCols(begin, count) = g;
    tp.accumulate(x, full);
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  auto& t = parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    Index offset = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(offset, p.cols()));
      offset += p.cols();
    }
  });
}

template <typename Scalar>
Var<Scalar> frobenius_norm_sq(Var<Scalar> x) {
  Mat<Scalar> out(1, 1);
  out(0, 0) = x.value().squaredNorm();
  return x.tape().record(std::move(out), {x}, [x](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(x, (Scalar(2) * g(0, 0)) * x.value());
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  Mat<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape().record(std::move(out), {x}, [x](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    tp.accumulate(x, Mat<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

}  // namespace afq
