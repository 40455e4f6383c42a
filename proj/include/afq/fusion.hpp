#pragma once

// Folding learned transforms into the neighbouring LayerNorm and linear
// parameters, plus the finite-precision merge-error experiment.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "afq/errors.hpp"
#include "afq/linalg.hpp"
#include "afq/parallel.hpp"
#include "afq/quantizer.hpp"
#include "afq/random.hpp"
#include "afq/transformer.hpp"

namespace afq {

/// Block with transforms folded in. Weights of q/k/out/fc1/fc2 (and v when the
/// out-projection has no transform) sit on their quantization grid and have an
/// integer export; the v weight absorbs A_out^-1 and is kept dense otherwise.
template <typename Scalar>
struct FusedBlock {
  BlockParams<Scalar> params;
  std::optional<QuantConfig> act_quant;
  std::map<std::string, QuantizedTensor<Scalar>> exports;
};

namespace detail {

template <typename Scalar>
bool is_diagonal(const Mat<Scalar>& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      if (i != j && m(i, j) != Scalar(0)) return false;
  return true;
}

template <typename Scalar>
Mat<Scalar> clip_factor(const BlockTransforms<Scalar>& state, const std::string& key, Index rows, Index cols) {
  auto it = state.clip_raw.find(key);
  if (it == state.clip_raw.end()) return Mat<Scalar>::Ones(rows, cols);
  return it->second.unaryExpr([](Scalar v) { return sigmoid(v); });
}

}  // namespace detail

/// Quantization parameters of a transformed weight, using the learned clip factors.
template <typename Scalar>
QuantParams<Scalar> weight_qparams(const Mat<Scalar>& w, const QuantConfig& cfg, const BlockTransforms<Scalar>& state,
                                   const std::string& linear) {
  const GroupLayout layout = group_layout(cfg, w.rows(), w.cols());
  const Index gr = layout.group_rows(w.rows());
  const Index gc = layout.group_cols(w.cols());
  Mat<Scalar> hi = Mat<Scalar>::Ones(gr, gc);
  Mat<Scalar> lo = Mat<Scalar>::Ones(gr, gc);
  if (cfg.learnable_clip) {
    hi = detail::clip_factor(state, linear + ".hi", gr, gc);
    lo = detail::clip_factor(state, linear + ".lo", gr, gc);
  }
  return compute_qparams(w, cfg, hi, lo);
}

/// Folds the effective transforms (A o GM at the state's epoch) into the block.
///
/// LayerNorm placements need a diagonal effective matrix: gamma' = gamma / a_ii and
/// beta' = (beta - delta) / a_ii. The out-projection inverse goes into the v
/// projection's weight and bias. Consuming weights become Q(A* W) with bias b + delta W.
template <typename Scalar>
FusedBlock<Scalar> fuse_block(const BlockParams<Scalar>& params, const PlacementConfig& placement,
                              const BlockTransforms<Scalar>& state,
                              PrecisionScheme scheme = default_scheme<Scalar>()) {
  validate(params);
  for (Placement pl : {Placement::PreQkv, Placement::PreFc1}) {
    const auto* tr = state.find(pl);
    if (tr && !detail::is_diagonal(tr->effective())) {
      throw ConfigError(to_string(pl) + ": a non-diagonal transform after LayerNorm cannot be folded into gamma");
    }
  }

  Tape<Scalar> tape(scheme);
  const PreparedBlock<Scalar> pb = prepare_transformed(tape, params, placement, state, false);

  FusedBlock<Scalar> fb;
  fb.act_quant = placement.act_quant;
  BlockParams<Scalar>& out = fb.params;
  out = params;
  out.w_q = pb.q.w.value();
  out.b_q = pb.q.b.value();
  out.w_k = pb.k.w.value();
  out.b_k = pb.k.b.value();
  out.w_v = pb.v.w.value();
  out.b_v = pb.v.b.value();
  out.w_out = pb.out.w.value();
  out.b_out = pb.out.b.value();
  out.w_fc1 = pb.fc1.w.value();
  out.b_fc1 = pb.fc1.b.value();
  out.w_fc2 = pb.fc2.w.value();
  out.b_fc2 = pb.fc2.b.value();

  auto fold_ln = [&](const typename PreparedBlock<Scalar>::Input& in, Mat<Scalar>& gamma, Mat<Scalar>& beta) {
    if (!in.inv) return;
    const Mat<Scalar> inv_diag = in.inv->value().diagonal().transpose();
    if (in.shift) beta = beta - in.shift->value();
    gamma = gamma.cwiseProduct(inv_diag);
    beta = beta.cwiseProduct(inv_diag);
  };
  fold_ln(pb.qkv_in, out.ln1_gamma, out.ln1_beta);
  fold_ln(pb.fc1_in, out.ln2_gamma, out.ln2_beta);

  const bool out_transformed = pb.out_in.inv.has_value();
  if (out_transformed) {
    const Mat<Scalar>& inv = pb.out_in.inv->value();
    out.w_v = transform_matmul(out.w_v, inv, scheme);
    out.b_v = transform_matmul(out.b_v, inv, scheme);
  }

  if (placement.weight_quant) {
    for (const char* name : kLinearNames) {
      const std::string linear = name;
      if (linear == "v" && out_transformed) continue;
      const Mat<Scalar>& w = linear_weight(out, linear);
      // Recompute the grid from the pre-quantization product, exactly as the tape did.
      Mat<Scalar> wt = linear_weight(params, linear);
      if (const auto pl = placement_of(linear); pl && state.find(*pl)) {
        wt = transform_matmul(state.find(*pl)->effective(), wt, scheme);
      }
      const QuantParams<Scalar> qp = weight_qparams(wt, *placement.weight_quant, state, linear);
      fb.exports.emplace(linear, quantize_export(w, qp));
    }
  }
  return fb;
}

template <typename Scalar>
Mat<Scalar> fused_forward(const FusedBlock<Scalar>& fb, const Mat<Scalar>& x,
                          PrecisionScheme scheme = default_scheme<Scalar>()) {
  validate(fb.params);
  if (x.cols() != fb.params.dim()) throw ShapeError("fused_forward: input width does not match the block");
  Tape<Scalar> t(scheme);
  const auto pb = prepare_plain(t, fb.params, fb.act_quant);
  return block_apply(pb, t.constant(x)).value();
}

/// Max over batches of the relative Frobenius error between the transformed
/// block and its fused counterpart.
template <typename Scalar>
double verify_fusion(const BlockParams<Scalar>& params, const PlacementConfig& placement,
                     const BlockTransforms<Scalar>& state, const FusedBlock<Scalar>& fused,
                     const std::vector<Mat<Scalar>>& calib, PrecisionScheme scheme = default_scheme<Scalar>()) {
  const auto mode = BlockMode<Scalar>::transformed_quantized(placement, state);
  double worst = 0.0;
  for (const auto& x : calib) {
    const Mat<Scalar> a = block_forward(params, x, mode, scheme);
    const Mat<Scalar> b = fused_forward(fused, x, scheme);
    worst = std::max(worst, relative_fro_error(a, b));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Merge error

struct MergeErrorConfig {
  Index dim_in = 512;
  Index dim_out = 512;
  Index tokens = 256;
  int trials = 50;
  std::uint64_t seed = 7;
};

inline void validate(const MergeErrorConfig& c) {
  if (c.dim_in < 2 || c.dim_out < 2) throw ConfigError("merge-error: dims must be at least 2");
  if (c.tokens < 1) throw ConfigError("merge-error: tokens must be at least 1");
  if (c.trials < 1) throw ConfigError("merge-error: trials must be at least 1");
}

struct MergeErrorResult {
  PrecisionScheme scheme = PrecisionScheme::Double;
  int trials = 0;
  Index dim_in = 0, dim_out = 0, tokens = 0;
  double mean_mse = 0.0;
};

namespace detail {

/// MSE between X W and (X A^-1)(A W) for one sample under a precision scheme.
/// The reference product is taken in double from the values each scheme stores.
inline double merge_mse(const Mat<double>& a, const Mat<double>& x, const Mat<double>& w, PrecisionScheme scheme) {
  switch (scheme) {
    case PrecisionScheme::Double: {
      const Mat<double> inv = lu_invert(a, scheme).inverse;
      const Mat<double> merged = matmul(matmul(x, inv), matmul(a, w));
      return (merged - matmul(x, w)).squaredNorm() / static_cast<double>(merged.size());
    }
    case PrecisionScheme::Float: {
      const Mat<float> af = a.cast<float>(), xf = x.cast<float>(), wf = w.cast<float>();
      const Mat<float> inv = lu_invert(af, scheme).inverse;
      const Mat<float> merged = matmul(matmul(xf, inv), matmul(af, wf));
      const Mat<double> ref = matmul(Mat<double>(xf.cast<double>()), Mat<double>(wf.cast<double>()));
      return (merged.cast<double>() - ref).squaredNorm() / static_cast<double>(merged.size());
    }
    case PrecisionScheme::FloatDouble: {
      const Mat<float> xf = x.cast<float>(), wf = w.cast<float>();
      const Mat<double> inv = lu_invert(a, PrecisionScheme::Double).inverse;
      const Mat<float> xa = matmul(Mat<double>(xf.cast<double>()), inv).cast<float>();
      const Mat<float> aw = matmul(a, Mat<double>(wf.cast<double>())).cast<float>();
      const Mat<float> merged = matmul(xa, aw);
      const Mat<double> ref = matmul(Mat<double>(xf.cast<double>()), Mat<double>(wf.cast<double>()));
      return (merged.cast<double>() - ref).squaredNorm() / static_cast<double>(merged.size());
    }
  }
  return 0.0;
}

}  // namespace detail

/// Mean merge MSE over trials. A, X and W are standard normal; each trial draws
/// from its own stream derived from the master seed, so all schemes see the
/// same samples. A singular sample is redrawn once from the next stream.
inline MergeErrorResult merge_error_experiment(const MergeErrorConfig& cfg, PrecisionScheme scheme) {
  validate(cfg);
  std::vector<double> mse(static_cast<std::size_t>(cfg.trials), 0.0);
  std::vector<std::string> failures(mse.size());
  parallel_for(mse.size(), [&](std::size_t trial) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      Rng rng(derive_seed(cfg.seed, 2 * trial + static_cast<std::size_t>(attempt)));
      const Mat<double> a = normal_matrix<double>(cfg.dim_in, cfg.dim_in, rng);
      const Mat<double> x = normal_matrix<double>(cfg.tokens, cfg.dim_in, rng);
      const Mat<double> w = normal_matrix<double>(cfg.dim_in, cfg.dim_out, rng);
      try {
        mse[trial] = detail::merge_mse(a, x, w, scheme);
        return;
      } catch (const SingularMatrixError& e) {
        if (attempt == 1) failures[trial] = "trial " + std::to_string(trial) + ": " + e.what();
      }
    }
  });
  for (const auto& f : failures)
    if (!f.empty()) throw SingularMatrixError("merge-error: singular sample after resampling, " + f, 0.0);
  MergeErrorResult r;
  r.scheme = scheme;
  r.trials = cfg.trials;
  r.dim_in = cfg.dim_in;
  r.dim_out = cfg.dim_out;
  r.tokens = cfg.tokens;
  double total = 0.0;
  for (double v : mse) total += v;
  r.mean_mse = total / static_cast<double>(mse.size());
  return r;
}

}  // namespace afq
