#pragma once

// Machine-readable outputs: run reports (JSON and per-epoch CSV), alpha sweep
// tables, merge-error rows and matrix CSV dumps. Wall time is never written.

#include <charconv>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "afq/fusion.hpp"
#include "afq/optimizer.hpp"

namespace afq {

/// Shortest decimal that round-trips; "inf", "-inf" and "nan" for non-finite values.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

/// JSON has no infinities; unbounded values are written as null.
inline nlohmann::json json_number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline nlohmann::json transform_record_json(const TransformEpochRecord& r) {
  return {{"placement", to_string(r.placement)},
          {"alpha", r.alpha},
          {"is_sdd", r.is_sdd},
          {"alpha_bound_global", json_number(r.alpha_bound_global)},
          {"condition_estimate", json_number(r.condition_estimate)}};
}

}  // namespace detail

inline nlohmann::json report_json(const OptimizationReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    nlohmann::json ts = nlohmann::json::array();
    for (const auto& t : e.transforms) ts.push_back(detail::transform_record_json(t));
    epochs.push_back({{"epoch", e.epoch}, {"loss", detail::json_number(e.loss)}, {"transforms", ts}});
  }
  nlohmann::json final_ts = nlohmann::json::array();
  for (const auto& t : r.final_transforms) final_ts.push_back(detail::transform_record_json(t));
  return {{"label", r.label},
          {"initial_loss", detail::json_number(r.initial_loss)},
          {"final_loss", detail::json_number(r.final_loss)},
          {"epochs", epochs},
          {"final_transforms", final_ts},
          {"warnings", r.warnings}};
}

/// {"label", "blocks": [per-block report]}; the run label is "affine" if any block is.
inline std::string run_report_json(const std::vector<OptimizationReport>& blocks) {
  nlohmann::json j;
  std::string label = "diagonal-only";
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    nlohmann::json rj = report_json(blocks[b]);
    rj["block"] = b;
    arr.push_back(std::move(rj));
    if (blocks[b].label == "affine") label = "affine";
  }
  j["label"] = label;
  j["blocks"] = arr;
  return j.dump(2) + "\n";
}

/// One row per (block, epoch, transform); epochs without transforms get one row with an empty placement.
inline std::string run_report_csv(const std::vector<OptimizationReport>& blocks) {
  std::string out = "block,epoch,loss,placement,alpha,is_sdd,alpha_bound_global,condition_estimate\n";
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (const auto& e : blocks[b].epochs) {
      const std::string head = std::to_string(b) + "," + std::to_string(e.epoch) + "," + format_double(e.loss) + ",";
      if (e.transforms.empty()) out += head + ",,,,\n";
      for (const auto& t : e.transforms) {
        out += head + to_string(t.placement) + "," + format_double(t.alpha) + "," + (t.is_sdd ? "1" : "0") + "," +
               format_double(t.alpha_bound_global) + "," + format_double(t.condition_estimate) + "\n";
      }
    }
  }
  return out;
}

template <typename Scalar>
std::string sweep_csv(const SweepResult<Scalar>& s) {
  std::string out = "alpha,final_block_loss,downstream_ce_gap,diverged\n";
  for (const auto& r : s.rows) {
    out += format_double(r.alpha) + "," + format_double(r.final_loss) + "," + format_double(r.ce_gap) + "," +
           (r.diverged ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string merge_error_csv(const std::vector<MergeErrorResult>& rows) {
  std::string out = "scheme,dim_in,dim_out,tokens,trials,mean_mse\n";
  for (const auto& r : rows) {
    out += std::string(to_string(r.scheme)) + "," + std::to_string(r.dim_in) + "," + std::to_string(r.dim_out) + "," +
           std::to_string(r.tokens) + "," + std::to_string(r.trials) + "," + format_double(r.mean_mse) + "\n";
  }
  return out;
}

/// Plain numeric CSV, one matrix row per line, no header.
template <typename Derived>
std::string matrix_csv(const Eigen::MatrixBase<Derived>& m) {
  std::string out;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out += ",";
      out += format_double(static_cast<double>(m(i, j)));
    }
    out += "\n";
  }
  return out;
}

/// Heatmap view of a transform: |A*| entries, optionally divided by the largest |diagonal| entry.
template <typename Scalar>
Mat<double> heatmap(const AffineTransform<Scalar>& t, bool normalize) {
  Mat<double> m = t.effective().template cast<double>().cwiseAbs();
  if (normalize) {
    const double d = m.diagonal().maxCoeff();
    if (d > 0) m /= d;
  }
  return m;
}

}  // namespace afq
