#pragma once

// End-to-end quantization run: model and calibration from a RunConfig,
// block-wise optimization, fusion, and the artifact files of a run directory.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "afq/config.hpp"
#include "afq/container.hpp"
#include "afq/fusion.hpp"
#include "afq/model_io.hpp"
#include "afq/optimizer.hpp"
#include "afq/report.hpp"

namespace afq {

/// Calls f with a scalar tag (double{} or float{}) matching the precision scheme.
template <typename F>
decltype(auto) with_scalar(PrecisionScheme scheme, F&& f) {
  if (scheme == PrecisionScheme::Double) return f(double{});
  return f(float{});
}

template <typename Scalar>
Model<Scalar> load_or_make_model(const RunConfig& cfg, const std::optional<std::filesystem::path>& model_path) {
  if (model_path) return model_from_tensors<Scalar>(load_container(*model_path));
  return cast_model<Scalar>(random_model<double>(cfg.model.seed, cfg.model.hidden, cfg.model.heads, cfg.model.blocks));
}

template <typename Scalar>
std::vector<Mat<Scalar>> calibration_for(const RunConfig& cfg, Index hidden) {
  std::vector<Mat<Scalar>> out;
  for (const auto& x : load_calibration(cfg.calibration, hidden)) out.push_back(x.template cast<Scalar>());
  return out;
}

template <typename Scalar>
struct PipelineRun {
  Model<Scalar> model;
  PlacementConfig placement;  // after normalization
  std::vector<BlockResult<Scalar>> blocks;
  std::vector<FusedBlock<Scalar>> fused;
  std::optional<std::string> fuse_error;  // set when a transform cannot be folded
};

template <typename Scalar>
PipelineRun<Scalar> run_pipeline(const RunConfig& cfg, const std::optional<std::filesystem::path>& model_path,
                                 std::ostream* log = nullptr) {
  validate(cfg);
  PipelineRun<Scalar> run;
  run.model = load_or_make_model<Scalar>(cfg, model_path);
  const Index hidden = run.model.blocks.front().dim();
  const auto calib = calibration_for<Scalar>(cfg, hidden);
  run.placement = normalized(cfg.placement, log);
  run.blocks = optimize_model(run.model, calib, run.placement, cfg.optimizer, cfg.precision, log);
  try {
    for (std::size_t b = 0; b < run.blocks.size(); ++b) {
      run.fused.push_back(fuse_block(run.model.blocks[b], run.placement, run.blocks[b].transforms, cfg.precision));
    }
  } catch (const ConfigError& e) {
    run.fused.clear();
    run.fuse_error = e.what();
  }
  return run;
}

template <typename Scalar>
std::vector<OptimizationReport> reports_of(const std::vector<BlockResult<Scalar>>& blocks) {
  std::vector<OptimizationReport> out;
  for (const auto& b : blocks) out.push_back(b.report);
  return out;
}

template <typename Scalar>
std::vector<BlockTransforms<Scalar>> transforms_of(const std::vector<BlockResult<Scalar>>& blocks) {
  std::vector<BlockTransforms<Scalar>> out;
  for (const auto& b : blocks) out.push_back(b.transforms);
  return out;
}

/// report.json, report.csv, transforms.afqt, config.json and (when fusable) fused.afqt.
template <typename Scalar>
void write_run_dir(const std::filesystem::path& dir, const RunConfig& cfg, const PipelineRun<Scalar>& run) {
  std::filesystem::create_directories(dir);
  const auto reports = reports_of(run.blocks);
  write_text(dir / "report.json", run_report_json(reports));
  write_text(dir / "report.csv", run_report_csv(reports));
  write_text(dir / "config.json", dump_run_config(cfg));
  save_container(dir / "transforms.afqt", transforms_tensors(transforms_of(run.blocks)));
  if (!run.fuse_error) save_container(dir / "fused.afqt", fused_tensors(run.fused));
}

}  // namespace afq
