#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "afq/errors.hpp"

namespace afq {

/// Dense row-major matrix; the value carrier for activations, weights and transforms.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// How inversion and transform products are carried out.
///
/// `FloatDouble` keeps operands in single precision but promotes them to double
/// for each inversion or transform product and truncates the result back.
enum class PrecisionScheme { Double, Float, FloatDouble };

inline std::string_view to_string(PrecisionScheme scheme) {
  switch (scheme) {
    case PrecisionScheme::Double:
      return "double";
    case PrecisionScheme::Float:
      return "float";
    case PrecisionScheme::FloatDouble:
      return "float-double";
  }
  return "?";
}

inline PrecisionScheme parse_scheme(std::string_view text) {
  if (text == "double" || text == "Double") return PrecisionScheme::Double;
  if (text == "float" || text == "Float") return PrecisionScheme::Float;
  if (text == "float-double" || text == "FloatDouble") return PrecisionScheme::FloatDouble;
  throw ConfigError("unknown precision scheme '" + std::string(text) + "'");
}

/// Natural scheme for a storage scalar when the caller does not pick one.
template <typename Scalar>
constexpr PrecisionScheme default_scheme() {
  return std::is_same_v<Scalar, float> ? PrecisionScheme::Float : PrecisionScheme::Double;
}

struct InversionDiagnostics {
  double pivot_min_abs = 0.0;
  double condition_estimate = 0.0;  // ||M||_1 * ||M^-1||_1
  double reconstruction_error = 0.0;  // ||M M^-1 - I||_F
};

template <typename Scalar>
struct InverseResult {
  Mat<Scalar> inverse;
  InversionDiagnostics diagnostics;
};

inline std::string shape_string(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename DerivedA, typename DerivedB>
void require_same_shape(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                        std::string_view what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                     " vs " + shape_string(b.rows(), b.cols()));
  }
}

template <typename Derived>
void require_square(const Eigen::MatrixBase<Derived>& m, std::string_view what) {
  if (m.rows() != m.cols()) {
    throw ShapeError(std::string(what) + ": expected square matrix, got " +
                     shape_string(m.rows(), m.cols()));
  }
}

/// Row-major matrix product in the operand precision.
template <typename DerivedA, typename DerivedB>
Mat<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                      const Eigen::MatrixBase<DerivedB>& b) {
  static_assert(std::is_same_v<typename DerivedA::Scalar, typename DerivedB::Scalar>,
                "matmul operands must share a precision");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_string(a.rows(), a.cols()) +
                     " * " + shape_string(b.rows(), b.cols()) + ")");
  }
  Mat<typename DerivedA::Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// Product used wherever a transform matrix meets activations or weights.
/// Under FloatDouble both operands are promoted to double and the result is truncated.
template <typename DerivedA, typename DerivedB>
Mat<typename DerivedA::Scalar> transform_matmul(const Eigen::MatrixBase<DerivedA>& a,
                                                const Eigen::MatrixBase<DerivedB>& b,
                                                PrecisionScheme scheme) {
  using Scalar = typename DerivedA::Scalar;
  if (scheme == PrecisionScheme::FloatDouble && !std::is_same_v<Scalar, double>) {
    const Mat<double> wide = matmul(a.template cast<double>(), b.template cast<double>());
    return wide.template cast<Scalar>();
  }
  return matmul(a, b);
}

template <typename Derived>
typename Derived::Scalar frobenius_norm_sq(const Eigen::MatrixBase<Derived>& m) {
  return m.squaredNorm();
}

/// ||a - b||_F / max(||a||_F, 1e-30), evaluated in double.
template <typename DerivedA, typename DerivedB>
double relative_fro_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  require_same_shape(a, b, "relative_fro_error");
  const Mat<double> ad = a.template cast<double>();
  const Mat<double> bd = b.template cast<double>();
  return (ad - bd).norm() / std::max(ad.norm(), 1e-30);
}

/// |m_ii| > sum_{j != i} |m_ij| for every row.
template <typename Derived>
bool is_strictly_diagonally_dominant(const Eigen::MatrixBase<Derived>& m) {
  require_square(m, "is_strictly_diagonally_dominant");
  for (Index i = 0; i < m.rows(); ++i) {
    typename Derived::Scalar off = 0;
    for (Index j = 0; j < m.cols(); ++j) {
      if (j != i) off += std::abs(m(i, j));
    }
    if (!(std::abs(m(i, i)) > off)) return false;
  }
  return true;
}

/// Max absolute column sum.
template <typename Derived>
double one_norm(const Eigen::MatrixBase<Derived>& m) {
  if (m.size() == 0) return 0.0;
  return m.template cast<double>().cwiseAbs().colwise().sum().maxCoeff();
}

namespace detail {

template <typename Work>
struct LuFactors {
  Mat<Work> lu;  // unit-lower L below the diagonal, U on and above
  std::vector<Index> perm;  // row i of lu came from row perm[i] of the input
  double pivot_min_abs = std::numeric_limits<double>::infinity();
};

template <typename Work>
LuFactors<Work> lu_factor(Mat<Work> m) {
  const Index n = m.rows();
  const Work threshold = Work(1e3) * std::numeric_limits<Work>::epsilon() * m.norm();
  LuFactors<Work> f;
  f.perm.resize(static_cast<std::size_t>(n));
  std::iota(f.perm.begin(), f.perm.end(), Index{0});
  for (Index k = 0; k < n; ++k) {
    Index p = 0;
    m.col(k).tail(n - k).cwiseAbs().maxCoeff(&p);
    p += k;
    const Work pivot = m(p, k);
    if (!(std::abs(pivot) > threshold)) {
      throw SingularMatrixError("lu_invert: matrix is singular at working precision (pivot " +
                                    std::to_string(static_cast<double>(pivot)) + " at column " +
                                    std::to_string(k) + ")",
                                static_cast<double>(pivot));
    }
    f.pivot_min_abs = std::min(f.pivot_min_abs, static_cast<double>(std::abs(pivot)));
    if (p != k) {
      m.row(p).swap(m.row(k));
      std::swap(f.perm[static_cast<std::size_t>(p)], f.perm[static_cast<std::size_t>(k)]);
    }
    const Index rest = n - k - 1;
    if (rest == 0) continue;
    m.col(k).tail(rest) /= pivot;
    m.bottomRightCorner(rest, rest).noalias() -= m.col(k).tail(rest) * m.row(k).tail(rest);
  }
  f.lu = std::move(m);
  return f;
}

template <typename Work>
Mat<Work> lu_inverse(const LuFactors<Work>& f) {
  const Index n = f.lu.rows();
  Mat<Work> x = Mat<Work>::Zero(n, n);
  for (Index i = 0; i < n; ++i) x(i, f.perm[static_cast<std::size_t>(i)]) = Work(1);
  for (Index i = 1; i < n; ++i) {
    x.row(i).noalias() -= f.lu.row(i).head(i) * x.topRows(i);
  }
  for (Index i = n - 1; i >= 0; --i) {
    const Index rest = n - i - 1;
    if (rest > 0) x.row(i).noalias() -= f.lu.row(i).tail(rest) * x.bottomRows(rest);
    x.row(i) /= f.lu(i, i);
  }
  return x;
}

}  // namespace detail

/// Inverse by LU with partial pivoting.
///
/// The working precision is float for `Float` and double otherwise; the result is
/// truncated back to `Scalar`. Throws SingularMatrixError when a pivot falls below
/// 1e3 * eps * ||M||_F of the working precision.
template <typename Scalar>
InverseResult<Scalar> lu_invert(const Mat<Scalar>& m, PrecisionScheme scheme) {
  require_square(m, "lu_invert");
  auto run = [&](auto work_tag) {
    using Work = decltype(work_tag);
    const auto factors = detail::lu_factor<Work>(m.template cast<Work>());
    const Mat<Work> inv = detail::lu_inverse(factors);
    InverseResult<Scalar> out;
    out.inverse = inv.template cast<Scalar>();
    const Index n = m.rows();
    out.diagnostics.pivot_min_abs = n == 0 ? 0.0 : factors.pivot_min_abs;
    const Mat<double> md = m.template cast<double>();
    const Mat<double> invd = out.inverse.template cast<double>();
    out.diagnostics.condition_estimate = one_norm(md) * one_norm(invd);
    out.diagnostics.reconstruction_error = (md * invd - Mat<double>::Identity(n, n)).norm();
    return out;
  };
  if (scheme == PrecisionScheme::Float) return run(float{});
  return run(double{});
}

}  // namespace afq
