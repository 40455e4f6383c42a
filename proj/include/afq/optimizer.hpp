#pragma once

// Block-wise calibration: per-epoch mask refresh, tape gradients of the block
// output error, masked Adam updates, SDD bookkeeping and the alpha bound.

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "afq/affine.hpp"
#include "afq/errors.hpp"
#include "afq/transformer.hpp"

namespace afq {

enum class Chaining { FullPrecision, Quantized };

inline std::string to_string(Chaining c) { return c == Chaining::FullPrecision ? "full-precision" : "quantized"; }

inline Chaining parse_chaining(std::string_view s) {
  if (s == "full-precision" || s == "fp") return Chaining::FullPrecision;
  if (s == "quantized") return Chaining::Quantized;
  throw ConfigError("unknown chaining mode '" + std::string(s) + "'");
}

struct OptimizerConfig {
  int epochs = 20;
  double lr_affine = 1e-3;
  double lr_clip = 1e-2;
  AdamConfig adam;
  /// Fixed stability factor; unset selects the default policy (1 up to hidden
  /// size 4096, 1e-2 beyond, clipped to 0.9 x alpha bound every epoch).
  std::optional<double> alpha;
  std::uint64_t seed = 42;
  Chaining next_block_input = Chaining::FullPrecision;
  double smooth_exponent = 0.5;
  /// Epoch count for the final block of a model, when it should train longer.
  std::optional<int> last_block_epochs;
};

inline void validate(const OptimizerConfig& c) {
  if (c.epochs < 1) throw ConfigError("optimizer.epochs must be >= 1");
  if (c.last_block_epochs && *c.last_block_epochs < 1) throw ConfigError("optimizer.last_block_epochs must be >= 1");
  if (!(c.lr_affine >= 0.0) || !(c.lr_clip >= 0.0)) throw ConfigError("optimizer learning rates must be >= 0");
  if (c.alpha && !(*c.alpha >= 0.0 && std::isfinite(*c.alpha))) throw ConfigError("mask.alpha must be finite and >= 0");
  if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1 && c.adam.beta2 >= 0 && c.adam.beta2 < 1 && c.adam.eps > 0)) {
    throw ConfigError("optimizer: adam betas must lie in [0, 1) and eps must be positive");
  }
  if (!(c.smooth_exponent >= 0.0 && c.smooth_exponent <= 1.0)) throw ConfigError("optimizer.smooth_exponent must be in [0, 1]");
}

struct TransformEpochRecord {
  Placement placement = Placement::PreQkv;
  double alpha = 0.0;
  bool is_sdd = true;
  double alpha_bound_global = std::numeric_limits<double>::infinity();
  double condition_estimate = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  std::vector<TransformEpochRecord> transforms;
};

struct OptimizationReport {
  std::string label;
  std::vector<EpochRecord> epochs;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<TransformEpochRecord> final_transforms;
  std::vector<std::string> warnings;
  double wall_seconds = 0.0;  // informational, never serialized
};

template <typename Scalar>
struct BlockResult {
  BlockTransforms<Scalar> transforms;
  OptimizationReport report;
};

/// "diagonal-only" when no off-diagonal entry can ever become nonzero.
inline std::string run_label(const PlacementConfig& placement, const OptimizerConfig& cfg) {
  if (cfg.alpha && *cfg.alpha == 0.0) return "diagonal-only";
  for (Placement p : kPlacements) {
    const auto k = placement.kind(p);
    if (k && *k != TransformKind::DiagonalOnly) return "affine";
  }
  return "diagonal-only";
}

namespace detail {

/// Mean over batches of ||y_fp - f_tq(x)||^2 recorded on `tape`.
template <typename Scalar>
Var<Scalar> calibration_loss(Tape<Scalar>& tape, const PreparedBlock<Scalar>& pb, const std::vector<Mat<Scalar>>& calib,
                             const std::vector<Mat<Scalar>>& targets) {
  Var<Scalar> total;
  for (std::size_t b = 0; b < calib.size(); ++b) {
    const Var<Scalar> y = block_apply(pb, tape.constant(calib[b]));
    const Var<Scalar> err = frobenius_norm_sq(tape.constant(targets[b]) - y);
    total = b == 0 ? err : total + err;
  }
  return scale(total, Scalar(1) / static_cast<Scalar>(calib.size()));
}

}  // namespace detail

template <typename Scalar>
std::vector<Mat<Scalar>> full_precision_outputs(const BlockParams<Scalar>& p, const std::vector<Mat<Scalar>>& calib,
                                                PrecisionScheme scheme) {
  std::vector<Mat<Scalar>> out;
  out.reserve(calib.size());
  for (const auto& x : calib) out.push_back(block_forward(p, x, BlockMode<Scalar>::full_precision(), scheme));
  return out;
}

/// Loss of a fixed transform set against precomputed full-precision targets.
template <typename Scalar>
double transformed_loss(const BlockParams<Scalar>& p, const std::vector<Mat<Scalar>>& calib,
                        const std::vector<Mat<Scalar>>& targets, const PlacementConfig& placement,
                        const BlockTransforms<Scalar>& state, PrecisionScheme scheme) {
  Tape<Scalar> tape(scheme);
  const auto pb = prepare_transformed(tape, p, placement, state, false);
  return static_cast<double>(detail::calibration_loss(tape, pb, calib, targets).value()(0, 0));
}

template <typename Scalar>
BlockResult<Scalar> optimize_block(const BlockParams<Scalar>& params, const std::vector<Mat<Scalar>>& calib,
                                   const PlacementConfig& placement_in, const OptimizerConfig& cfg,
                                   PrecisionScheme scheme = default_scheme<Scalar>(), std::ostream* log = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  validate(cfg);
  validate(params);
  if (calib.empty()) throw ConfigError("optimize_block: calibration set is empty");
  const PlacementConfig placement = normalized(placement_in, log);
  validate(placement, params.dim(), params.head_dim());

  const bool forced = cfg.alpha.has_value();
  const double base_alpha = forced ? *cfg.alpha : default_alpha(params.dim());
  BlockResult<Scalar> result;
  result.report.label = run_label(placement, cfg);
  auto& state = result.transforms;
  state = init_transforms(params, collect_stats(params, calib), placement, cfg.epochs, base_alpha, cfg.smooth_exponent);

  const std::size_t nt = state.transforms.size();
  std::vector<Mat<Scalar>> init_diag(nt);
  std::vector<GradHistory<Scalar>> history(nt);
  std::vector<AdamState<Scalar>> adam_a(nt), adam_shift(nt);
  std::vector<double> alpha(nt, base_alpha);
  std::map<std::string, AdamState<Scalar>> adam_clip;
  for (std::size_t i = 0; i < nt; ++i) {
    init_diag[i] = state.transforms[i].a.diagonal().transpose();
    history[i].lr = cfg.lr_affine;
  }
  const std::vector<Mat<Scalar>> targets = full_precision_outputs(params, calib, scheme);

  // Sets every transform's mask to epoch e and its stability factor, and
  // returns the per-transform records (loss and condition filled in later).
  auto configure = [&](int e, std::vector<TransformEpochRecord>& records) {
    records.clear();
    for (std::size_t i = 0; i < nt; ++i) {
      auto& tr = state.transforms[i];
      TransformEpochRecord rec;
      rec.placement = tr.placement;
      rec.alpha_bound_global = alpha_bound(init_diag[i], history[i]).global_bound;
      if (!forced) alpha[i] = std::min(base_alpha, 0.9 * rec.alpha_bound_global);
      tr.epoch = e;
      tr.schedule.alpha = alpha[i];
      rec.is_sdd = is_strictly_diagonally_dominant(tr.effective());
      if (!rec.is_sdd) {
        const std::string msg = "warning: " + to_string(tr.placement) + " epoch " + std::to_string(e) +
                                ": A o GM is not strictly diagonally dominant at alpha=" + std::to_string(alpha[i]) +
                                "; halving alpha for the rest of the block";
        result.report.warnings.push_back(msg);
        if (log) *log << msg << "\n";
        alpha[i] /= 2;
        tr.schedule.alpha = alpha[i];
      }
      rec.alpha = alpha[i];
      records.push_back(rec);
    }
  };
  auto check_loss = [&](double loss, int e) {
    if (!std::isfinite(loss)) throw DivergenceError("diverged: loss is not finite at epoch " + std::to_string(e), e);
  };

  for (int e = 1; e <= cfg.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e;
    configure(e, rec.transforms);
    Tape<Scalar> tape(scheme);
    BlockLeaves<Scalar> leaves;
    PreparedBlock<Scalar> pb;
    try {
      pb = prepare_transformed(tape, params, placement, state, true, &leaves);
    } catch (const SingularMatrixError& err) {
      throw SingularMatrixError("epoch " + std::to_string(e) + ": " + err.what(), err.pivot());
    }
    for (auto& tr : rec.transforms) tr.condition_estimate = pb.diagnostics.at(tr.placement).condition_estimate;
    const Var<Scalar> loss = detail::calibration_loss(tape, pb, calib, targets);
    rec.loss = static_cast<double>(loss.value()(0, 0));
    check_loss(rec.loss, e);
    if (log) *log << "  epoch " << e << " loss " << rec.loss << "\n";
    result.report.epochs.push_back(rec);
    tape.backward(loss);

    for (std::size_t i = 0; i < nt; ++i) {
      auto& tr = state.transforms[i];
      const Mat<Scalar> masked = tr.mask().cwiseProduct(tape.grad(leaves.a_star.at(tr.placement)));
      history[i].record(adam_step(tr.a, masked, cfg.lr_affine, adam_a[i], cfg.adam));
      if (tr.has_shift()) adam_step(tr.shift, tape.grad(leaves.shift.at(tr.placement)), cfg.lr_affine, adam_shift[i], cfg.adam);
    }
    for (auto& [key, raw] : state.clip_raw) {
      adam_step(raw, tape.grad(leaves.clips.at(key)), cfg.lr_clip, adam_clip[key], cfg.adam);
    }
  }

  configure(cfg.epochs, result.report.final_transforms);
  result.report.initial_loss = result.report.epochs.front().loss;
  try {
    result.report.final_loss = transformed_loss(params, calib, targets, placement, state, scheme);
  } catch (const SingularMatrixError& err) {
    throw SingularMatrixError("final transforms: " + std::string(err.what()), err.pivot());
  }
  check_loss(result.report.final_loss, cfg.epochs);
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Output of a block under its final transforms (used for quantized chaining).
template <typename Scalar>
std::vector<Mat<Scalar>> transformed_outputs(const BlockParams<Scalar>& p, const std::vector<Mat<Scalar>>& calib,
                                             const PlacementConfig& placement, const BlockTransforms<Scalar>& state,
                                             PrecisionScheme scheme) {
  const auto mode = BlockMode<Scalar>::transformed_quantized(normalized(placement), state);
  std::vector<Mat<Scalar>> out;
  for (const auto& x : calib) out.push_back(block_forward(p, x, mode, scheme));
  return out;
}

/// Optimizes blocks in order; block i + 1 is calibrated on block i's outputs in
/// the mode chosen by cfg.next_block_input.
template <typename Scalar>
std::vector<BlockResult<Scalar>> optimize_model(const Model<Scalar>& model, const std::vector<Mat<Scalar>>& calib,
                                                const PlacementConfig& placement, const OptimizerConfig& cfg,
                                                PrecisionScheme scheme = default_scheme<Scalar>(),
                                                std::ostream* log = nullptr) {
  if (model.blocks.empty()) throw ConfigError("optimize_model: model has no blocks");
  std::vector<BlockResult<Scalar>> results;
  std::vector<Mat<Scalar>> inputs = calib;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (log) *log << "block " << b << "\n";
    try {
      OptimizerConfig block_cfg = cfg;
      if (cfg.last_block_epochs && b + 1 == model.blocks.size()) block_cfg.epochs = *cfg.last_block_epochs;
      results.push_back(optimize_block(model.blocks[b], inputs, placement, block_cfg, scheme, log));
    } catch (const DivergenceError& e) {
      throw DivergenceError("block " + std::to_string(b) + ": " + e.what(), e.epoch());
    } catch (const SingularMatrixError& e) {
      throw SingularMatrixError("block " + std::to_string(b) + ": " + e.what(), e.pivot());
    }
    if (b + 1 == model.blocks.size()) break;
    inputs = cfg.next_block_input == Chaining::FullPrecision
                 ? full_precision_outputs(model.blocks[b], inputs, scheme)
                 : transformed_outputs(model.blocks[b], inputs, placement, results.back().transforms, scheme);
  }
  return results;
}

// ---------------------------------------------------------------------------
// Alpha sweep

template <typename Scalar>
struct SweepRow {
  double alpha = 0.0;
  bool diverged = false;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double ce_gap = std::numeric_limits<double>::quiet_NaN();
  std::string message;
  BlockTransforms<Scalar> transforms;
};

template <typename Scalar>
struct SweepResult {
  std::vector<SweepRow<Scalar>> rows;
  std::optional<double> pearson;  // (final_loss, ce_gap) over non-diverged rows, when there are >= 3
};

inline std::optional<double> pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Mean over rows of KL(softmax(fp W) || softmax(q W)): the excess cross-entropy
/// of the quantized next-token distribution relative to the full-precision one.
template <typename Scalar>
double cross_entropy_gap(const Mat<Scalar>& fp, const Mat<Scalar>& q, const Mat<double>& lm_head) {
  require_same_shape(fp, q, "cross_entropy_gap");
  const Mat<double> lf = fp.template cast<double>() * lm_head;
  const Mat<double> lq = q.template cast<double>() * lm_head;
  double total = 0.0;
  for (Index i = 0; i < lf.rows(); ++i) {
    const double mf = lf.row(i).maxCoeff();
    const double mq = lq.row(i).maxCoeff();
    const double zf = (lf.row(i).array() - mf).exp().sum();
    const double zq = (lq.row(i).array() - mq).exp().sum();
    double kl = 0.0;
    for (Index j = 0; j < lf.cols(); ++j) {
      const double lpf = lf(i, j) - mf - std::log(zf);
      const double lpq = lq(i, j) - mq - std::log(zq);
      kl += std::exp(lpf) * (lpf - lpq);
    }
    total += kl;
  }
  return total / static_cast<double>(std::max<Index>(lf.rows(), 1));
}

/// One optimization per alpha from the same initialization; each row carries
/// the final block loss and the downstream cross-entropy gap on held-out inputs
/// through a seeded random LM head.
template <typename Scalar>
SweepResult<Scalar> alpha_sweep(const BlockParams<Scalar>& params, const std::vector<Mat<Scalar>>& calib,
                                const std::vector<Mat<Scalar>>& heldout, const PlacementConfig& placement,
                                OptimizerConfig cfg, const std::vector<double>& alphas,
                                PrecisionScheme scheme = default_scheme<Scalar>(), Index vocab = 256,
                                std::ostream* log = nullptr) {
  if (alphas.empty()) throw ConfigError("alpha_sweep: no alpha values");
  if (heldout.empty()) throw ConfigError("alpha_sweep: held-out set is empty");
  Rng rng(derive_seed(cfg.seed, 0x1d4eadULL));
  const Mat<double> lm_head = normal_matrix<double>(params.dim(), vocab, rng, 1.0 / std::sqrt(double(params.dim())));
  const auto fp = full_precision_outputs(params, heldout, scheme);
  SweepResult<Scalar> out;
  for (double a : alphas) {
    SweepRow<Scalar> row;
    row.alpha = a;
    cfg.alpha = a;
    try {
      auto r = optimize_block(params, calib, placement, cfg, scheme, log);
      row.final_loss = r.report.final_loss;
      const auto q = transformed_outputs(params, heldout, placement, r.transforms, scheme);
      double gap = 0.0;
      for (std::size_t b = 0; b < q.size(); ++b) gap += cross_entropy_gap(fp[b], q[b], lm_head);
      row.ce_gap = gap / static_cast<double>(q.size());
      row.transforms = std::move(r.transforms);
    } catch (const DivergenceError& e) {
      row.diverged = true;
      row.message = e.what();
    } catch (const SingularMatrixError& e) {
      row.diverged = true;
      row.message = e.what();
    }
    out.rows.push_back(std::move(row));
  }
  std::vector<double> xs, ys;
  for (const auto& r : out.rows) {
    if (r.diverged) continue;
    xs.push_back(r.final_loss);
    ys.push_back(r.ce_gap);
  }
  out.pearson = pearson_correlation(xs, ys);
  return out;
}

}  // namespace afq
