#pragma once

// Straight-through fake-quantization primitives for the tape.
//
// Gradient convention (per element, q = round(x / delta) + zp before clamping):
//   inside [0, 2^n - 1]:  d/dx = 1,  d/ddelta = round(x/delta) - x/delta,  d/dzp = 0
//   outside:              d/dx = 0,  d/ddelta = clamp(q) - zp,             d/dzp = -delta
// The learnable variant continues through delta and zp into the clip factors
// and the group min/max statistics of x.

#include <cmath>
#include <optional>
#include <type_traits>
#include <vector>

#include "afq/quantizer.hpp"
#include "afq/tape.hpp"

namespace afq {
namespace detail {

template <typename Scalar>
struct FqForward {
  Mat<Scalar> out;
  Mat<Scalar> residual;  // r - u, r the (possibly replayed) rounded index
  Mat<Scalar> clamped;
  std::vector<bool> inside;
};

template <typename Scalar>
FqForward<Scalar> fq_forward(const Mat<Scalar>& x, const Mat<Scalar>& delta, const Mat<Scalar>& zp, Scalar qmax,
                             const GroupLayout& layout, const Mat<Scalar>* replay, double* min_distance) {
  FqForward<Scalar> f;
  f.out.resize(x.rows(), x.cols());
  f.residual.resize(x.rows(), x.cols());
  f.clamped.resize(x.rows(), x.cols());
  f.inside.assign(static_cast<std::size_t>(x.size()), false);
  for (Index i = 0; i < x.rows(); ++i) {
    const Index g = i / layout.rows_per_group;
    for (Index j = 0; j < x.cols(); ++j) {
      const Index h = j / layout.cols_per_group;
      const Scalar d = delta(g, h);
      const Scalar z = zp(g, h);
      const Scalar u = x(i, j) / d;
      // Continuous index; rounding maps it into [0, qmax] exactly when it lies in [-1/2, qmax + 1/2].
      const Scalar v = u + z;
      Scalar r, c;
      bool inside;
      if (replay) {
        r = u + (*replay)(i, j);
        inside = v >= Scalar(-0.5) && v <= qmax + Scalar(0.5);
        c = inside ? r + z : (v < Scalar(0) ? Scalar(0) : qmax);
      } else {
        r = round_half_away(u);
        const Scalar q = r + z;
        inside = q >= Scalar(0) && q <= qmax;
        c = std::clamp(q, Scalar(0), qmax);
      }
      f.out(i, j) = d * (c - z);
      f.residual(i, j) = r - u;
      f.clamped(i, j) = c;
      f.inside[static_cast<std::size_t>(i * x.cols() + j)] = inside;
      if (min_distance) {
        const double vd = static_cast<double>(v);
        const double dist = std::min(std::abs(vd + 0.5), std::abs(vd - static_cast<double>(qmax) - 0.5)) *
                            static_cast<double>(d);
        *min_distance = std::min(*min_distance, dist);
      }
    }
  }
  return f;
}

/// Index of this node's slot in the tape's quant trace, if tracing is active.
template <typename Scalar>
std::optional<std::size_t> trace_slot(Tape<Scalar>& tape) {
  auto* trace = tape.quant_trace();
  if (!trace || trace->mode == QuantTrace<Scalar>::Mode::Off) return std::nullopt;
  if (trace->mode == QuantTrace<Scalar>::Mode::Record) {
    trace->entries.emplace_back();
    return trace->entries.size() - 1;
  }
  if (trace->cursor >= trace->entries.size()) throw std::logic_error("quant trace replay ran past the recording");
  return trace->cursor++;
}

}  // namespace detail

/// Fake quantization with fixed parameters; only x receives a gradient.
template <typename Scalar>
Var<Scalar> fake_quant_ste(Var<Scalar> x, const QuantParams<Scalar>& qp) {
  validate(qp, x.rows(), x.cols());
  auto& tape = x.tape();
  auto* trace = tape.quant_trace();
  const auto slot = detail::trace_slot(tape);
  const bool replaying = slot && trace->mode == QuantTrace<Scalar>::Mode::Replay;
  const Mat<Scalar>* replay = replaying ? &trace->entries[*slot].residual : nullptr;
  auto f = detail::fq_forward(x.value(), qp.delta, qp.zero_point, static_cast<Scalar>(qp.qmax()), qp.layout, replay,
                              slot ? &trace->min_boundary_distance : nullptr);
  if (slot && !replaying) trace->entries[*slot].residual = f.residual;
  auto inside = std::make_shared<std::vector<bool>>(std::move(f.inside));
  return tape.record(std::move(f.out), {x}, [x, inside](Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
    Mat<Scalar> gx(g.rows(), g.cols());
    for (Index k = 0; k < g.size(); ++k) gx.data()[k] = (*inside)[static_cast<std::size_t>(k)] ? g.data()[k] : Scalar(0);
    tp.accumulate(x, gx);
  });
}

/// Fake quantization whose parameters are fitted to x on the fly (min/max per
/// group), optionally scaled by learnable clip factors sigmoid(hi_raw), sigmoid(lo_raw).
/// Without clip leaves the factors are exactly 1.
template <typename Scalar>
Var<Scalar> fake_quant_learnable(Var<Scalar> x, const QuantConfig& cfg,
                                 std::optional<std::type_identity_t<Var<Scalar>>> hi_raw = {},
                                 std::optional<std::type_identity_t<Var<Scalar>>> lo_raw = {}) {
  auto& tape = x.tape();
  const GroupLayout layout = group_layout(cfg, x.rows(), x.cols());
  const Index gr = layout.group_rows(x.rows());
  const Index gc = layout.group_cols(x.cols());
  auto clip_of = [&](const std::optional<Var<Scalar>>& raw) {
    if (!raw) return Mat<Scalar>(Mat<Scalar>::Ones(gr, gc));
    require_same_shape(raw->value(), Mat<Scalar>(gr, gc), "clip parameters");
    return Mat<Scalar>(raw->value().unaryExpr([](Scalar v) { return sigmoid(v); }));
  };
  const Mat<Scalar> hi = clip_of(hi_raw);
  const Mat<Scalar> lo = clip_of(lo_raw);
  auto qt = std::make_shared<detail::QParamsTrace<Scalar>>(detail::trace_qparams(x.value(), cfg, hi, lo));
  const auto& qp = qt->params;
  const Scalar qmax = static_cast<Scalar>(qp.qmax());

  auto* trace = tape.quant_trace();
  const auto slot = detail::trace_slot(tape);
  const bool replaying = slot && trace->mode == QuantTrace<Scalar>::Mode::Replay;

  auto tracks = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(gr * gc), false);
  Mat<Scalar> zp = qp.zero_point;
  if (replaying) {
    const auto& entry = trace->entries[*slot];
    *tracks = entry.zero_tracks;
    for (Index k = 0; k < zp.size(); ++k) {
      if ((*tracks)[static_cast<std::size_t>(k)]) zp.data()[k] = qt->zero_raw.data()[k] + entry.zero_residual.data()[k];
    }
  } else if (!cfg.symmetric) {
    for (Index k = 0; k < zp.size(); ++k) {
      const Scalar rounded = round_half_away(qt->zero_raw.data()[k]);
      (*tracks)[static_cast<std::size_t>(k)] = rounded >= Scalar(0) && rounded <= qmax;
    }
  }
  auto f = detail::fq_forward(x.value(), qp.delta, zp, qmax, layout,
                              replaying ? &trace->entries[*slot].residual : nullptr,
                              slot ? &trace->min_boundary_distance : nullptr);
  if (slot && !replaying) {
    auto& entry = trace->entries[*slot];
    entry.residual = f.residual;
    entry.zero_residual = qp.zero_point - qt->zero_raw;
    entry.zero_tracks = *tracks;
  }

  auto state = std::make_shared<detail::FqForward<Scalar>>(std::move(f));
  Mat<Scalar> out = state->out;
  auto zp_eff = std::make_shared<Mat<Scalar>>(std::move(zp));
  auto hi_v = std::make_shared<Mat<Scalar>>(hi);
  auto lo_v = std::make_shared<Mat<Scalar>>(lo);
  std::vector<Var<Scalar>> inputs{x};
  if (hi_raw) inputs.push_back(*hi_raw);
  if (lo_raw) inputs.push_back(*lo_raw);
  const bool symmetric = cfg.symmetric;
  const int bits = cfg.bits;

  return tape.record(
      std::move(out), inputs,
      [x, hi_raw, lo_raw, qt, state, zp_eff, tracks, hi_v, lo_v, layout, symmetric, bits, qmax](
          Tape<Scalar>& tp, const Mat<Scalar>& g, const Mat<Scalar>&) {
        const auto& qp = qt->params;
        const Index grows = qp.delta.rows();
        const Index gcols = qp.delta.cols();
        Mat<Scalar> gx = Mat<Scalar>::Zero(g.rows(), g.cols());
        Mat<Scalar> gdelta = Mat<Scalar>::Zero(grows, gcols);
        Mat<Scalar> gzp = Mat<Scalar>::Zero(grows, gcols);
        for (Index i = 0; i < g.rows(); ++i) {
          const Index a = i / layout.rows_per_group;
          for (Index j = 0; j < g.cols(); ++j) {
            const Index b = j / layout.cols_per_group;
            const Scalar up = g(i, j);
            if (state->inside[static_cast<std::size_t>(i * g.cols() + j)]) {
              gx(i, j) += up;
              gdelta(a, b) += up * state->residual(i, j);
            } else {
              gdelta(a, b) += up * (state->clamped(i, j) - (*zp_eff)(a, b));
              gzp(a, b) -= up * qp.delta(a, b);
            }
          }
        }
        Mat<Scalar> ghi = Mat<Scalar>::Zero(grows, gcols);
        Mat<Scalar> glo = Mat<Scalar>::Zero(grows, gcols);
        const Scalar floor = static_cast<Scalar>(kDeltaFloor);
        const auto& ex = qt->extrema;
        for (Index a = 0; a < grows; ++a) {
          for (Index b = 0; b < gcols; ++b) {
            const std::size_t slot = static_cast<std::size_t>(a * gcols + b);
            const Scalar d = qp.delta(a, b);
            const bool floored = !(qt->delta_raw(a, b) >= floor);
            const Scalar hv = (*hi_v)(a, b);
            const Scalar lv = (*lo_v)(a, b);
            if (symmetric) {
              const Scalar half = static_cast<Scalar>((Index{1} << (bits - 1)) - 1);
              const Scalar gdr = floored ? Scalar(0) : gdelta(a, b);
              ghi(a, b) = gdr * ex.absmax(a, b) / half;
              const Index at = ex.argabsmax[slot];
              const Scalar sign = x.value().data()[at] < Scalar(0) ? Scalar(-1) : Scalar(1);
              gx.data()[at] += gdr * hv / half * sign;
            } else {
              const Scalar gz = (*tracks)[slot] ? gzp(a, b) : Scalar(0);
              const Scalar z = qt->zero_raw(a, b);
              const Scalar gd_total = gdelta(a, b) - gz * z / d;
              const Scalar gdr = floored ? Scalar(0) : gd_total;
              const Scalar mx = ex.max(a, b);
              const Scalar mn = ex.min(a, b);
              ghi(a, b) = gdr * mx / qmax;
              glo(a, b) = -gdr * mn / qmax - gz * mn / d;
              gx.data()[ex.argmax[slot]] += gdr * hv / qmax;
              gx.data()[ex.argmin[slot]] += -gdr * lv / qmax - gz * lv / d;
            }
          }
        }
        tp.accumulate(x, gx);
        if (hi_raw) tp.accumulate(*hi_raw, ghi.cwiseProduct(hi_v->cwiseProduct((Scalar(1) - hi_v->array()).matrix())));
        if (lo_raw) tp.accumulate(*lo_raw, glo.cwiseProduct(lo_v->cwiseProduct((Scalar(1) - lo_v->array()).matrix())));
      });
}

}  // namespace afq
