#pragma once

// Invariant suites shared by `afq check` and the acceptance runner. Each suite
// returns its worst observed metric plus the seeds of any failing cases.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "afq/config.hpp"
#include "afq/fusion.hpp"
#include "afq/graph.hpp"
#include "afq/optimizer.hpp"
#include "afq/quantizer.hpp"
#include "afq/random.hpp"
#include "afq/tape_quant.hpp"

namespace afq {

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::vector<std::string> lines;     // human-readable metrics
  std::vector<std::string> failures;  // one entry per failing case, naming its seed

  void fail(std::string what) {
    passed = false;
    failures.push_back(std::move(what));
  }
};

// ---------------------------------------------------------------------------
// Toy fixture

struct ToyFixture {
  Index hidden = 64;
  Index heads = 4;
  Index tokens = 128;
  Index batches = 8;
  std::uint64_t block_seed = 42;
  std::uint64_t calib_seed = 42;
};

template <typename Scalar = double>
BlockParams<Scalar> fixture_block(const ToyFixture& f) {
  Rng rng(f.block_seed);
  return random_block<Scalar>(rng, f.hidden, f.heads);
}

template <typename Scalar = double>
std::vector<Mat<Scalar>> fixture_calibration(const ToyFixture& f) {
  std::vector<Mat<Scalar>> out;
  for (const auto& x : synthetic_calibration({f.calib_seed, f.batches, f.tokens}, f.hidden)) {
    out.push_back(x.template cast<Scalar>());
  }
  return out;
}

/// Full transforms after both LayerNorms and per-head before the out projection.
inline PlacementConfig full_affine_placement() {
  PlacementConfig p;
  p.pre_qkv = TransformKind::Full;
  p.pre_out_proj = TransformKind::PerHead;
  p.pre_fc1 = TransformKind::Full;
  return p;
}

/// Random invertible transforms: SDD matrices at every configured placement
/// (masks fully open with alpha = 1) and random shifts where enabled.
template <typename Scalar>
BlockTransforms<Scalar> random_transforms(const BlockParams<Scalar>& p, const PlacementConfig& placement, Rng& rng) {
  BlockTransforms<Scalar> out;
  const Index d = p.dim();
  for (Placement pl : kPlacements) {
    const auto kind = placement.kind(pl);
    if (!kind) continue;
    AffineTransform<Scalar> t;
    t.placement = pl;
    t.kind = *kind;
    t.schedule.target_epochs = 1;
    t.schedule.alpha = 1.0;
    t.schedule.hidden_size = *kind == TransformKind::PerHead ? p.head_dim() : d;
    t.epoch = 1;
    t.a = random_sdd_matrix<Scalar>(d, rng, 0.3);
    t.a /= static_cast<Scalar>(1 + 0.3 * static_cast<double>(d));
    if (placement.shift(pl)) t.shift = normal_matrix<Scalar>(1, d, rng, 0.1);
    out.transforms.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suites

/// check_gradient over random graphs mixing matmul, inverse, layer norm,
/// softmax and learnable fake quantization. Graphs whose fake-quant inputs sit
/// within 10 eps of a clamp switch are redrawn.
inline SuiteResult grad_suite(int graphs = 100, std::uint64_t seed = 2024) {
  SuiteResult r;
  r.name = "grad";
  const double eps = 1e-6;
  double worst = 0.0;
  int redraws = 0;
  for (int g = 0; g < graphs; ++g) {
    bool done = false;
    for (int attempt = 0; attempt < 50 && !done; ++attempt) {
      const std::uint64_t s = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(g)), static_cast<std::uint64_t>(attempt));
      Rng rng(s);
      std::uniform_int_distribution<int> dim(3, 6);
      const Index n = dim(rng), d = dim(rng), k = dim(rng);
      QuantConfig qc;
      qc.bits = std::uniform_int_distribution<int>(2, 8)(rng);
      qc.granularity = (s & 1) ? Granularity::PerChannel : Granularity::PerTensor;
      qc.symmetric = (s >> 1) & 1;
      qc.learnable_clip = true;
      const bool causal = (s >> 2) & 1;
      const Graph<double> graph = [qc, causal](Tape<double>& t) {
        const auto h = layer_norm(t.input("X"), t.input("g"), t.input("b"));
        const auto a = t.input("A");
        const auto xa = transform_matmul(h, inverse(a));
        const auto w = fake_quant_learnable(transform_matmul(a, t.input("W")), qc, t.input("hi"),
                                            qc.symmetric ? std::nullopt : std::optional<Var<double>>(t.input("lo")));
        const auto y = matmul(xa, w);
        const auto p = softmax_rows(matmul(y, transpose(y)), causal);
        return frobenius_norm_sq(matmul(p, y) - t.input("T"));
      };
      const Index groups = qc.granularity == Granularity::PerChannel ? k : 1;
      Bindings<double> b{{"X", normal_matrix<double>(n, d, rng)},
                         {"g", normal_matrix<double>(1, d, rng, 0.2) + Mat<double>::Ones(1, d)},
                         {"b", normal_matrix<double>(1, d, rng, 0.2)},
                         {"A", random_sdd_matrix<double>(d, rng, 0.3)},
                         {"W", normal_matrix<double>(d, k, rng, 0.5)},
                         {"T", normal_matrix<double>(n, k, rng)},
                         {"hi", Mat<double>::Constant(1, groups, 2.0) + normal_matrix<double>(1, groups, rng, 0.3)}};
      if (!qc.symmetric) b["lo"] = Mat<double>::Constant(1, groups, 2.0) + normal_matrix<double>(1, groups, rng, 0.3);
      double graph_worst = 0.0;
      bool near_boundary = false;
      for (const auto& [leaf, value] : b) {
        if (leaf == "T") continue;
        const auto rep = check_gradient_report(graph, b, leaf, eps);
        if (rep.min_boundary_distance <= 10 * eps) {
          near_boundary = true;
          break;
        }
        graph_worst = std::max(graph_worst, rep.max_relative_error);
      }
      if (near_boundary) {
        ++redraws;
        continue;
      }
      done = true;
      worst = std::max(worst, graph_worst);
      if (!(graph_worst < 1e-4)) {
        std::ostringstream os;
        os << "graph " << g << " seed " << s << ": max relative error " << graph_worst;
        r.fail(os.str());
      }
    }
    if (!done) r.fail("graph " + std::to_string(g) + ": no draw away from clamp boundaries");
  }
  std::ostringstream os;
  os << "graphs " << graphs << " max_relative_error " << worst << " boundary_redraws " << redraws;
  r.lines.push_back(os.str());
  return r;
}

/// Quantizer properties on random scalars: fake_quant is idempotent, lands on
/// its grid, and moves in-range values by at most delta / 2.
inline SuiteResult quant_suite(Index scalars = 100000, std::uint64_t seed = 11) {
  SuiteResult r;
  r.name = "quant";
  const Index cols = 40;
  const Index rows = (scalars + cols - 1) / cols;
  std::size_t combos = 0;
  for (int bits : {2, 3, 4, 8}) {
    for (Granularity g : {Granularity::PerTensor, Granularity::PerChannel, Granularity::PerGroup}) {
      for (bool symmetric : {false, true}) {
        ++combos;
        QuantConfig cfg;
        cfg.bits = bits;
        cfg.granularity = g;
        cfg.group_size = g == Granularity::PerGroup ? 25 : 0;
        cfg.symmetric = symmetric;
        const std::uint64_t s = derive_seed(seed, combos);
        Rng rng(s);
        Mat<double> x = normal_matrix<double>(rows - rows % 25, cols, rng, 3.0);
        x.col(0).array() += 5.0;  // skewed channel exercises the zero point
        const auto qp = compute_qparams(x, cfg);
        const Mat<double> q = fake_quant(x, qp);
        const Mat<double> qq = fake_quant(q, qp);
        const double qmax = static_cast<double>(qp.qmax());
        Index bad_idem = 0, bad_grid = 0, bad_err = 0;
        for (Index i = 0; i < x.rows(); ++i) {
          for (Index j = 0; j < x.cols(); ++j) {
            const Index gi = i / qp.layout.rows_per_group, gj = j / qp.layout.cols_per_group;
            const double delta = qp.delta(gi, gj), zp = qp.zero_point(gi, gj);
            if (qq(i, j) != q(i, j)) ++bad_idem;
            const double level = q(i, j) / delta + zp;
            if (std::abs(level - std::round(level)) > 1e-6 || level < -1e-6 || level > qmax + 1e-6) ++bad_grid;
            const double lo = -zp * delta, hi = (qmax - zp) * delta;
            if (x(i, j) >= lo && x(i, j) <= hi && std::abs(q(i, j) - x(i, j)) > delta / 2 * (1 + 1e-12)) ++bad_err;
          }
        }
        if (bad_idem + bad_grid + bad_err > 0) {
          std::ostringstream os;
          os << "bits " << bits << " " << to_string(g) << (symmetric ? " symmetric" : " asymmetric") << " seed " << s
             << ": idempotence " << bad_idem << ", grid " << bad_grid << ", error bound " << bad_err;
          r.fail(os.str());
        }
      }
    }
  }
  r.lines.push_back("configurations " + std::to_string(combos) + " scalars_each " +
                    std::to_string((rows - rows % 25) * cols));
  return r;
}

/// Without quantization, transformed blocks match the full-precision block and
/// fused blocks match the transformed block.
inline SuiteResult equiv_suite(int sets = 100, std::uint64_t seed = 5, double tol = 1e-8) {
  SuiteResult r;
  r.name = "equiv";
  double worst_tq = 0.0, worst_fused = 0.0;
  for (int i = 0; i < sets; ++i) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
    Rng rng(s);
    const Index heads = (i % 2) ? 4 : 2;
    const auto p = random_block<double>(rng, 32, heads);
    const Mat<double> x = normal_matrix<double>(16, 32, rng);
    const Mat<double> fp = block_forward(p, x, BlockMode<double>::full_precision());

    PlacementConfig full = full_affine_placement();
    full.weight_quant.reset();
    const auto tf = random_transforms(p, full, rng);
    const double e_full = relative_fro_error(block_forward(p, x, BlockMode<double>::transformed_quantized(full, tf)), fp);

    PlacementConfig diag;
    diag.weight_quant.reset();
    const auto td = random_transforms(p, diag, rng);
    const Mat<double> yt = block_forward(p, x, BlockMode<double>::transformed_quantized(diag, td));
    const double e_diag = relative_fro_error(yt, fp);
    const auto fused = fuse_block(p, diag, td);
    const double e_fused = relative_fro_error(fused_forward(fused, x), yt);

    worst_tq = std::max({worst_tq, e_full, e_diag});
    worst_fused = std::max(worst_fused, e_fused);
    if (!(e_full < tol && e_diag < tol && e_fused < tol)) {
      std::ostringstream os;
      os << "set " << i << " seed " << s << ": transformed " << std::max(e_full, e_diag) << ", fused " << e_fused;
      r.fail(os.str());
    }
  }
  std::ostringstream os;
  os << "sets " << sets << " max_transformed_vs_fp " << worst_tq << " max_fused_vs_transformed " << worst_fused;
  r.lines.push_back(os.str());
  return r;
}

struct SddStress {
  int violations = 0;
  bool diverged = false;
  double forced_alpha = 0.0;
  double min_bound = std::numeric_limits<double>::infinity();
};

/// Forces alpha far above the reported bound with an aggressive learning rate.
inline SddStress sdd_stress() {
  ToyFixture f;
  f.hidden = 16;
  f.tokens = 32;
  f.batches = 2;
  const auto p = fixture_block(f);
  const auto calib = fixture_calibration(f);
  OptimizerConfig cfg;
  cfg.epochs = 10;
  cfg.lr_affine = 0.1;
  cfg.alpha = 1.0;
  SddStress out;
  out.forced_alpha = *cfg.alpha;
  try {
    const auto res = optimize_block(p, calib, full_affine_placement(), cfg);
    for (const auto& e : res.report.epochs) {
      for (const auto& t : e.transforms) {
        out.violations += t.is_sdd ? 0 : 1;
        out.min_bound = std::min(out.min_bound, t.alpha_bound_global);
      }
    }
  } catch (const DivergenceError&) {
    out.diverged = true;
  } catch (const SingularMatrixError&) {
    out.diverged = true;
  }
  return out;
}

/// Default alpha policy keeps every effective matrix SDD at every epoch, on the
/// seed-42 block with full transforms, across calibration seeds.
inline SuiteResult sdd_suite(int seeds = 10, bool with_stress = true) {
  SuiteResult r;
  r.name = "sdd";
  int records = 0;
  for (int i = 0; i < seeds; ++i) {
    ToyFixture f;
    f.calib_seed = derive_seed(42, static_cast<std::uint64_t>(i));
    const auto p = fixture_block(f);
    const auto calib = fixture_calibration(f);
    OptimizerConfig cfg;
    try {
      const auto res = optimize_block(p, calib, full_affine_placement(), cfg);
      for (const auto& e : res.report.epochs) {
        for (const auto& t : e.transforms) {
          ++records;
          if (!t.is_sdd) {
            r.fail("calibration seed " + std::to_string(f.calib_seed) + " epoch " + std::to_string(e.epoch) + " " +
                   to_string(t.placement) + ": not SDD");
          }
        }
      }
    } catch (const std::exception& e) {
      r.fail("calibration seed " + std::to_string(f.calib_seed) + ": " + e.what());
    }
  }
  r.lines.push_back("seeds " + std::to_string(seeds) + " sdd_records " + std::to_string(records));
  if (with_stress) {
    const SddStress st = sdd_stress();
    std::ostringstream os;
    os << "stress forced_alpha " << st.forced_alpha << " min_reported_bound " << st.min_bound << " violations "
       << st.violations << " diverged " << (st.diverged ? 1 : 0);
    r.lines.push_back(os.str());
    if (st.violations == 0 && !st.diverged) r.fail("stress: forcing alpha above the bound produced no violation");
  }
  return r;
}

inline SuiteResult run_suite(const std::string& name) {
  if (name == "grad") return grad_suite();
  if (name == "quant") return quant_suite();
  if (name == "equiv") return equiv_suite();
  if (name == "sdd") return sdd_suite();
  throw ConfigError("unknown suite '" + name + "' (expected grad, sdd, equiv or quant)");
}

}  // namespace afq
