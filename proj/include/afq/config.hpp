#pragma once

// Run configuration (JSON) and calibration sources.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>

#include "afq/linalg.hpp"
#include "afq/optimizer.hpp"
#include "afq/quantizer.hpp"
#include "afq/transformer.hpp"

namespace afq {

struct ModelConfig {
  Index hidden = 64;
  Index heads = 4;
  Index blocks = 1;
  std::uint64_t seed = 42;
};

struct SyntheticCalibration {
  std::uint64_t seed = 42;
  Index batches = 8;
  Index tokens = 128;
};

/// Pre-tokenized ids (a container holding a u16 tensor "ids" of shape
/// [batches, tokens]) embedded through a seeded random table.
struct FileCalibration {
  std::filesystem::path path;
  std::uint64_t embedding_seed = 0;
  Index vocab = 65536;
};

using CalibrationSource = std::variant<SyntheticCalibration, FileCalibration>;

struct RunConfig {
  ModelConfig model;
  CalibrationSource calibration = SyntheticCalibration{};
  PlacementConfig placement;
  OptimizerConfig optimizer;
  PrecisionScheme precision = PrecisionScheme::Double;
};

/// Parses and validates a config document. Unknown keys and type errors raise
/// ConfigError naming the field path, e.g. "optimizer.lr_affine".
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON form (every field spelled out, keys sorted).
std::string dump_run_config(const RunConfig& cfg);

void validate(const RunConfig& cfg);

/// Embedding row of one token id; a pure function of (seed, id, width).
Mat<double> embedding_row(std::uint64_t seed, std::uint64_t id, Index width);

/// Calibration batches of width `hidden`, in double; callers cast as needed.
std::vector<Mat<double>> load_calibration(const CalibrationSource& src, Index hidden);

/// Seeded standard-normal batches.
std::vector<Mat<double>> synthetic_calibration(const SyntheticCalibration& src, Index hidden);

}  // namespace afq
