#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "afq/errors.hpp"
#include "afq/linalg.hpp"

namespace afq {

enum class Granularity { PerTensor, PerChannel, PerGroup };

inline std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::PerTensor:
      return "per-tensor";
    case Granularity::PerChannel:
      return "per-channel";
    case Granularity::PerGroup:
      return "per-group";
  }
  return "?";
}

inline Granularity parse_granularity(std::string_view text) {
  if (text == "per-tensor") return Granularity::PerTensor;
  if (text == "per-channel" || text == "per-output-channel") return Granularity::PerChannel;
  if (text == "per-group") return Granularity::PerGroup;
  throw ConfigError("unknown granularity '" + std::string(text) + "'");
}

/// Quantizer settings. Matrices are laid out [in x out]; per-channel means one
/// group per output column, per-group splits each column into runs of
/// `group_size` consecutive input rows.
struct QuantConfig {
  int bits = 4;
  Granularity granularity = Granularity::PerChannel;
  Index group_size = 0;
  bool symmetric = false;
  bool learnable_clip = false;
};

inline constexpr double kDeltaFloor = 1e-8;

/// Raw (pre-sigmoid) clip value that starts at sigmoid^-1(1 - 1e-4), i.e. almost the full range.
inline const double kClipInitRaw = std::log((1.0 - 1e-4) / 1e-4);

inline void validate(const QuantConfig& cfg) {
  if (cfg.bits < 2 || cfg.bits > 16) {
    throw ConfigError("quantization bits must lie in [2, 16], got " + std::to_string(cfg.bits));
  }
  if (cfg.granularity == Granularity::PerGroup && cfg.group_size <= 0) {
    throw ConfigError("per-group quantization needs a positive group_size");
  }
}

/// Size of one quantization group, in rows and columns of the quantized matrix.
struct GroupLayout {
  Index rows_per_group = 1;
  Index cols_per_group = 1;

  Index group_rows(Index rows) const { return rows / rows_per_group; }
  Index group_cols(Index cols) const { return cols / cols_per_group; }
  bool operator==(const GroupLayout&) const = default;
};

inline GroupLayout group_layout(const QuantConfig& cfg, Index rows, Index cols) {
  validate(cfg);
  switch (cfg.granularity) {
    case Granularity::PerTensor:
      return {rows, cols};
    case Granularity::PerChannel:
      return {rows, 1};
    case Granularity::PerGroup:
      if (rows % cfg.group_size != 0) {
        throw ConfigError("group_size " + std::to_string(cfg.group_size) +
                          " does not divide the grouped axis length " + std::to_string(rows));
      }
      return {cfg.group_size, 1};
  }
  return {rows, cols};
}

inline Index max_level(int bits) { return (Index{1} << bits) - 1; }

/// Round half away from zero.
template <typename Scalar>
Scalar round_half_away(Scalar v) {
  return std::round(v);
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

/// Per-group step size, zero point and clip factors. Every parameter tensor has
/// shape [rows / rows_per_group, cols / cols_per_group].
template <typename Scalar>
struct QuantParams {
  Mat<Scalar> delta;
  Mat<Scalar> zero_point;  // integral values
  Mat<Scalar> clip_lo;
  Mat<Scalar> clip_hi;
  int bits = 4;
  bool symmetric = false;
  GroupLayout layout;

  Index qmax() const { return max_level(bits); }
};

template <typename Scalar>
void validate(const QuantParams<Scalar>& qp, Index rows, Index cols) {
  if (qp.bits < 2 || qp.bits > 16) throw ConfigError("invalid quantization bits");
  if (qp.layout.rows_per_group <= 0 || qp.layout.cols_per_group <= 0 || rows % qp.layout.rows_per_group != 0 ||
      cols % qp.layout.cols_per_group != 0 || qp.delta.rows() != qp.layout.group_rows(rows) ||
      qp.delta.cols() != qp.layout.group_cols(cols)) {
    throw ShapeError("quantization parameters do not match a " + shape_string(rows, cols) + " tensor");
  }
  require_same_shape(qp.delta, qp.zero_point, "quant params");
  const Scalar qmax = static_cast<Scalar>(qp.qmax());
  for (Index i = 0; i < qp.delta.size(); ++i) {
    const Scalar d = qp.delta.data()[i];
    const Scalar z = qp.zero_point.data()[i];
    if (!(d > 0)) throw ConfigError("quantization step size must be positive");
    if (!(z >= 0 && z <= qmax) || z != std::round(z)) {
      throw ConfigError("zero point must be an integer in [0, 2^n - 1]");
    }
  }
}

/// Per-group extremes with the flat index of the element that attains each.
template <typename Scalar>
struct GroupExtrema {
  Mat<Scalar> max, min, absmax;
  std::vector<Index> argmax, argmin, argabsmax;
};

template <typename Scalar>
GroupExtrema<Scalar> group_extrema(const Mat<Scalar>& x, const GroupLayout& layout) {
  const Index gr = layout.group_rows(x.rows());
  const Index gc = layout.group_cols(x.cols());
  GroupExtrema<Scalar> e;
  e.max.resize(gr, gc);
  e.min.resize(gr, gc);
  e.absmax.resize(gr, gc);
  e.argmax.assign(static_cast<std::size_t>(gr * gc), 0);
  e.argmin = e.argmax;
  e.argabsmax = e.argmax;
  for (Index g = 0; g < gr; ++g) {
    for (Index h = 0; h < gc; ++h) {
      const std::size_t slot = static_cast<std::size_t>(g * gc + h);
      bool first = true;
      for (Index i = g * layout.rows_per_group; i < (g + 1) * layout.rows_per_group; ++i) {
        for (Index j = h * layout.cols_per_group; j < (h + 1) * layout.cols_per_group; ++j) {
          const Scalar v = x(i, j);
          const Index flat = i * x.cols() + j;
          if (first || v > e.max(g, h)) {
            e.max(g, h) = v;
            e.argmax[slot] = flat;
          }
          if (first || v < e.min(g, h)) {
            e.min(g, h) = v;
            e.argmin[slot] = flat;
          }
          if (first || std::abs(v) > e.absmax(g, h)) {
            e.absmax(g, h) = std::abs(v);
            e.argabsmax[slot] = flat;
          }
          first = false;
        }
      }
    }
  }
  return e;
}

namespace detail {

/// compute_qparams plus the intermediate values the differentiable path needs.
template <typename Scalar>
struct QParamsTrace {
  QuantParams<Scalar> params;
  GroupExtrema<Scalar> extrema;
  Mat<Scalar> zero_raw;  // -clip_lo * min / delta before rounding (asymmetric only)
  Mat<Scalar> delta_raw;  // delta before the floor
};

template <typename Scalar>
QParamsTrace<Scalar> trace_qparams(const Mat<Scalar>& x, const QuantConfig& cfg, const Mat<Scalar>& clip_hi,
                                   const Mat<Scalar>& clip_lo) {
  if (x.size() == 0) throw ShapeError("compute_qparams: empty tensor");
  QParamsTrace<Scalar> t;
  const GroupLayout layout = group_layout(cfg, x.rows(), x.cols());
  t.extrema = group_extrema(x, layout);
  const Index gr = t.extrema.max.rows();
  const Index gc = t.extrema.max.cols();
  require_same_shape(clip_hi, t.extrema.max, "compute_qparams clip_hi");
  require_same_shape(clip_lo, t.extrema.max, "compute_qparams clip_lo");
  auto& qp = t.params;
  qp.bits = cfg.bits;
  qp.symmetric = cfg.symmetric;
  qp.layout = layout;
  qp.clip_hi = clip_hi;
  qp.clip_lo = clip_lo;
  qp.delta.resize(gr, gc);
  qp.zero_point.resize(gr, gc);
  t.zero_raw = Mat<Scalar>::Zero(gr, gc);
  t.delta_raw.resize(gr, gc);
  const Scalar qmax = static_cast<Scalar>(max_level(cfg.bits));
  const Scalar floor = static_cast<Scalar>(kDeltaFloor);
  for (Index g = 0; g < gr; ++g) {
    for (Index h = 0; h < gc; ++h) {
      if (cfg.symmetric) {
        const Scalar half = static_cast<Scalar>((Index{1} << (cfg.bits - 1)) - 1);
        const Scalar d = clip_hi(g, h) * t.extrema.absmax(g, h) / half;
        t.delta_raw(g, h) = d;
        qp.delta(g, h) = d < floor ? floor : d;
        qp.zero_point(g, h) = static_cast<Scalar>(Index{1} << (cfg.bits - 1));
      } else {
        const Scalar d = (clip_hi(g, h) * t.extrema.max(g, h) - clip_lo(g, h) * t.extrema.min(g, h)) / qmax;
        t.delta_raw(g, h) = d;
        const Scalar delta = d < floor ? floor : d;
        qp.delta(g, h) = delta;
        const Scalar z = -(clip_lo(g, h) * t.extrema.min(g, h)) / delta;
        t.zero_raw(g, h) = z;
        qp.zero_point(g, h) = std::clamp(round_half_away(z), Scalar(0), qmax);
      }
    }
  }
  return t;
}

}  // namespace detail

/// Min/max fitting of step size and zero point, per group, with multiplicative clip factors.
template <typename Scalar>
QuantParams<Scalar> compute_qparams(const Mat<Scalar>& x, const QuantConfig& cfg, const Mat<Scalar>& clip_hi,
                                    const Mat<Scalar>& clip_lo) {
  return detail::trace_qparams(x, cfg, clip_hi, clip_lo).params;
}

template <typename Scalar>
QuantParams<Scalar> compute_qparams(const Mat<Scalar>& x, const QuantConfig& cfg) {
  const GroupLayout layout = group_layout(cfg, x.rows(), x.cols());
  const Mat<Scalar> ones = Mat<Scalar>::Ones(layout.group_rows(x.rows()), layout.group_cols(x.cols()));
  return compute_qparams(x, cfg, ones, ones);
}

/// Quantize-dequantize: delta * (clamp(round(x / delta) + zp, 0, 2^n - 1) - zp), per group.
template <typename Scalar>
Mat<Scalar> fake_quant(const Mat<Scalar>& x, const QuantParams<Scalar>& qp) {
  validate(qp, x.rows(), x.cols());
  const Scalar qmax = static_cast<Scalar>(qp.qmax());
  Mat<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Index g = i / qp.layout.rows_per_group;
    for (Index j = 0; j < x.cols(); ++j) {
      const Index h = j / qp.layout.cols_per_group;
      const Scalar d = qp.delta(g, h);
      const Scalar zp = qp.zero_point(g, h);
      const Scalar c = std::clamp(round_half_away(x(i, j) / d) + zp, Scalar(0), qmax);
      out(i, j) = d * (c - zp);
    }
  }
  return out;
}

using CodeMatrix = Eigen::Matrix<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Integer grid indices plus the parameters needed to dequantize them.
template <typename Scalar>
struct QuantizedTensor {
  CodeMatrix codes;
  QuantParams<Scalar> qparams;

  Index rows() const { return codes.rows(); }
  Index cols() const { return codes.cols(); }
};

template <typename Scalar>
QuantizedTensor<Scalar> quantize_export(const Mat<Scalar>& x, const QuantParams<Scalar>& qp) {
  validate(qp, x.rows(), x.cols());
  const Scalar qmax = static_cast<Scalar>(qp.qmax());
  QuantizedTensor<Scalar> out;
  out.qparams = qp;
  out.codes.resize(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Index g = i / qp.layout.rows_per_group;
    for (Index j = 0; j < x.cols(); ++j) {
      const Index h = j / qp.layout.cols_per_group;
      const Scalar c = std::clamp(round_half_away(x(i, j) / qp.delta(g, h)) + qp.zero_point(g, h), Scalar(0), qmax);
      out.codes(i, j) = static_cast<std::uint16_t>(c);
    }
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> dequantize(const QuantizedTensor<Scalar>& qt) {
  const auto& qp = qt.qparams;
  validate(qp, qt.rows(), qt.cols());
  Mat<Scalar> out(qt.rows(), qt.cols());
  for (Index i = 0; i < qt.rows(); ++i) {
    const Index g = i / qp.layout.rows_per_group;
    for (Index j = 0; j < qt.cols(); ++j) {
      const Index h = j / qp.layout.cols_per_group;
      out(i, j) = qp.delta(g, h) * (static_cast<Scalar>(qt.codes(i, j)) - qp.zero_point(g, h));
    }
  }
  return out;
}

}  // namespace afq
