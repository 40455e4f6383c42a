#pragma once

// Learnable affine transforms: gradual mask schedule, effective matrix,
// masked Adam updates, SmoothQuant-style initialization and the alpha bound
// under which A o GM provably stays strictly diagonally dominant.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "afq/errors.hpp"
#include "afq/linalg.hpp"

namespace afq {

enum class TransformKind { Full, DiagonalOnly, PerHead };

enum class Placement { PreQkv, PreOutProj, PreFc1 };

inline constexpr Placement kPlacements[] = {Placement::PreQkv, Placement::PreOutProj, Placement::PreFc1};

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Full: return "full";
    case TransformKind::DiagonalOnly: return "diagonal-only";
    case TransformKind::PerHead: return "per-head";
  }
  return "?";
}

inline std::string to_string(Placement p) {
  switch (p) {
    case Placement::PreQkv: return "pre_qkv";
    case Placement::PreOutProj: return "pre_out_proj";
    case Placement::PreFc1: return "pre_fc1";
  }
  return "?";
}

inline TransformKind parse_transform_kind(std::string_view s) {
  if (s == "full") return TransformKind::Full;
  if (s == "diagonal-only" || s == "diagonal") return TransformKind::DiagonalOnly;
  if (s == "per-head") return TransformKind::PerHead;
  throw ConfigError("unknown transform kind '" + std::string(s) + "'");
}

struct MaskSchedule {
  int target_epochs = 20;
  double alpha = 1e-2;
  /// Band reference: the full hidden size, or head_dim for per-head masks.
  Index hidden_size = 0;
};

inline void validate(const MaskSchedule& s) {
  if (s.target_epochs < 1) throw ConfigError("mask schedule: target_epochs must be >= 1");
  if (!(s.alpha >= 0.0) || !std::isfinite(s.alpha)) throw ConfigError("mask schedule: alpha must be finite and >= 0");
  if (s.hidden_size < 1) throw ConfigError("mask schedule: hidden_size must be >= 1");
}

/// GM_e: 1 on the diagonal, alpha where 0 < |i - j| <= (e / t) * hidden_size, 0 elsewhere.
template <typename Scalar = double>
Mat<Scalar> gradual_mask(int epoch, const MaskSchedule& s) {
  validate(s);
  if (epoch < 1 || epoch > s.target_epochs) {
    throw ConfigError("gradual_mask: epoch " + std::to_string(epoch) + " outside [1, " +
                      std::to_string(s.target_epochs) + "]");
  }
  const Index d = s.hidden_size;
  const double width = static_cast<double>(epoch) / s.target_epochs * static_cast<double>(d);
  Mat<Scalar> gm(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) {
      const Index off = i > j ? i - j : j - i;
      gm(i, j) = off == 0 ? Scalar(1) : static_cast<double>(off) <= width ? static_cast<Scalar>(s.alpha) : Scalar(0);
    }
  }
  return gm;
}

/// Mask for a d x d transform of the given kind. Per-head masks apply the band
/// rule inside each head_dim block (schedule.hidden_size must be head_dim) and are
/// zero across blocks; diagonal-only masks are the identity pattern.
template <typename Scalar = double>
Mat<Scalar> transform_mask(TransformKind kind, int epoch, const MaskSchedule& s, Index dim) {
  switch (kind) {
    case TransformKind::Full: {
      if (s.hidden_size != dim) throw ShapeError("transform_mask: hidden_size must equal the transform dimension");
      return gradual_mask<Scalar>(epoch, s);
    }
    case TransformKind::DiagonalOnly:
      gradual_mask<Scalar>(epoch, s);  // range checks only
      return Mat<Scalar>::Identity(dim, dim);
    case TransformKind::PerHead: {
      if (s.hidden_size < 1 || dim % s.hidden_size != 0) {
        throw ShapeError("transform_mask: head_dim " + std::to_string(s.hidden_size) + " does not divide " +
                         std::to_string(dim));
      }
      const Mat<Scalar> block = gradual_mask<Scalar>(epoch, s);
      Mat<Scalar> gm = Mat<Scalar>::Zero(dim, dim);
      for (Index b = 0; b < dim; b += s.hidden_size) gm.block(b, b, s.hidden_size, s.hidden_size) = block;
      return gm;
    }
  }
  throw ConfigError("transform_mask: bad kind");
}

/// A* = A o GM.
template <typename Scalar>
Mat<Scalar> effective_matrix(const Mat<Scalar>& a, const Mat<Scalar>& gm) {
  require_same_shape(a, gm, "effective_matrix");
  return a.cwiseProduct(gm);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  Mat<Scalar> m;
  Mat<Scalar> v;
  int step = 0;
};

/// One Adam step on `param` for gradient `grad` (descent). Returns the applied change.
template <typename Scalar>
Mat<Scalar> adam_step(Mat<Scalar>& param, const Mat<Scalar>& grad, double lr, AdamState<Scalar>& st,
                      const AdamConfig& cfg = {}) {
  require_same_shape(param, grad, "adam_step");
  if (st.m.size() == 0) {
    st.m = Mat<Scalar>::Zero(param.rows(), param.cols());
    st.v = Mat<Scalar>::Zero(param.rows(), param.cols());
  }
  ++st.step;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  st.m = b1 * st.m + (Scalar(1) - b1) * grad;
  st.v = b2 * st.v + (Scalar(1) - b2) * grad.cwiseProduct(grad);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, st.step));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, st.step));
  const Scalar eps = static_cast<Scalar>(cfg.eps);
  const Scalar rate = static_cast<Scalar>(lr);
  Mat<Scalar> change(param.rows(), param.cols());
  for (Index k = 0; k < param.size(); ++k) {
    const Scalar mh = st.m.data()[k] / c1;
    const Scalar vh = st.v.data()[k] / c2;
    change.data()[k] = -rate * mh / (std::sqrt(vh) + eps);
  }
  param += change;
  return change;
}

/// Update of A given dL/dA*: the gradient reaching A is gm o grad_a_star, then Adam.
/// Entries where gm is zero see a zero gradient and, with zero Adam history, do not move.
template <typename Scalar>
Mat<Scalar> masked_update(const Mat<Scalar>& a, const Mat<Scalar>& gm, const Mat<Scalar>& grad_a_star, double lr,
                          AdamState<Scalar>& state, const AdamConfig& cfg = {}) {
  require_same_shape(a, gm, "masked_update");
  require_same_shape(a, grad_a_star, "masked_update");
  Mat<Scalar> next = a;
  adam_step(next, Mat<Scalar>(gm.cwiseProduct(grad_a_star)), lr, state, cfg);
  return next;
}

/// Diagonal init a_jj = act_absmax_j^e / w_absmax_j^(1 - e), both statistics floored at 1e-8.
template <typename Scalar>
Mat<Scalar> init_diagonal(const Mat<Scalar>& act_absmax, const Mat<Scalar>& w_absmax, double exponent) {
  require_same_shape(act_absmax, w_absmax, "init_diagonal");
  if (!(exponent >= 0.0 && exponent <= 1.0)) throw ConfigError("init_diagonal: exponent must be in [0, 1]");
  const Index d = act_absmax.size();
  Mat<Scalar> a = Mat<Scalar>::Zero(d, d);
  for (Index j = 0; j < d; ++j) {
    const double act = std::max(static_cast<double>(act_absmax.data()[j]), 1e-8);
    const double w = std::max(static_cast<double>(w_absmax.data()[j]), 1e-8);
    a(j, j) = static_cast<Scalar>(std::pow(act, exponent) / std::pow(w, 1.0 - exponent));
  }
  return a;
}

/// Channel-wise midpoint of the observed activation range.
template <typename Scalar>
Mat<Scalar> init_shift(const Mat<Scalar>& act_max, const Mat<Scalar>& act_min) {
  require_same_shape(act_max, act_min, "init_shift");
  for (Index k = 0; k < act_max.size(); ++k) {
    if (act_max.data()[k] < act_min.data()[k]) throw ConfigError("init_shift: act_max < act_min");
  }
  return (act_max + act_min) / Scalar(2);
}

/// Sum of the steps applied to A, divided by the learning rate, so that
/// A_e = A_0 + lr * accumulated (entrywise).
template <typename Scalar>
struct GradHistory {
  double lr = 0.0;
  Mat<Scalar> accumulated;
  int steps = 0;

  void record(const Mat<Scalar>& applied_change) {
    if (accumulated.size() == 0) accumulated = Mat<Scalar>::Zero(applied_change.rows(), applied_change.cols());
    if (lr != 0.0) accumulated += applied_change / static_cast<Scalar>(lr);
    ++steps;
  }
};

struct AlphaBoundReport {
  std::vector<double> accumulated_diag_grad;
  std::vector<double> accumulated_offdiag_grad;
  std::vector<double> bound;
  double global_bound = std::numeric_limits<double>::infinity();
};

/// Largest alpha keeping each row of A o GM dominant, with init_diag the d
/// diagonal entries of A_0:
/// bound_i = |n_ii^0 + lr * S_ii| / (lr * sum_{j != i} |S_ij|), +inf when the denominator is 0.
template <typename Scalar>
AlphaBoundReport alpha_bound(const Mat<Scalar>& init_diag, const GradHistory<Scalar>& history) {
  const Index d = init_diag.size();
  auto n0 = [&](Index i) { return static_cast<double>(init_diag.data()[i]); };
  AlphaBoundReport r;
  r.accumulated_diag_grad.assign(static_cast<std::size_t>(d), 0.0);
  r.accumulated_offdiag_grad.assign(static_cast<std::size_t>(d), 0.0);
  r.bound.assign(static_cast<std::size_t>(d), std::numeric_limits<double>::infinity());
  const bool have = history.accumulated.size() != 0;
  if (have && (history.accumulated.rows() != d || history.accumulated.cols() != d)) {
    throw ShapeError("alpha_bound: history is " + shape_string(history.accumulated.rows(), history.accumulated.cols()) +
                     ", expected " + shape_string(d, d));
  }
  for (Index i = 0; i < d; ++i) {
    const auto k = static_cast<std::size_t>(i);
    double off = 0.0;
    if (have) {
      r.accumulated_diag_grad[k] = static_cast<double>(history.accumulated(i, i));
      for (Index j = 0; j < d; ++j)
        if (j != i) off += std::abs(static_cast<double>(history.accumulated(i, j)));
    }
    r.accumulated_offdiag_grad[k] = off;
    const double denom = history.lr * off;
    if (denom > 0.0) r.bound[k] = std::abs(n0(i) + history.lr * r.accumulated_diag_grad[k]) / denom;
    r.global_bound = std::min(r.global_bound, r.bound[k]);
  }
  return r;
}

/// Default stability factor: 1 for hidden sizes up to 4096, 1e-2 beyond.
inline double default_alpha(Index hidden_size) { return hidden_size <= 4096 ? 1.0 : 1e-2; }

/// One learnable transform at a placement.
template <typename Scalar>
struct AffineTransform {
  Placement placement = Placement::PreQkv;
  TransformKind kind = TransformKind::DiagonalOnly;
  Mat<Scalar> a;      // raw matrix A
  Mat<Scalar> shift;  // 1 x d row, empty when the placement has no shift
  MaskSchedule schedule;
  int epoch = 1;      // mask epoch the effective matrix is taken at

  Index dim() const { return a.rows(); }
  bool has_shift() const { return shift.size() != 0; }
  Mat<Scalar> mask() const { return transform_mask<Scalar>(kind, epoch, schedule, dim()); }
  Mat<Scalar> effective() const { return effective_matrix(a, mask()); }
};

}  // namespace afq
