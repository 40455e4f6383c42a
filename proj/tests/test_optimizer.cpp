#include "doctest.h"

#include <cmath>
#include <limits>
#include <string>

#include "afq/checks.hpp"
#include "afq/optimizer.hpp"

using afq::Index;
using afq::Mat;
using afq::OptimizerConfig;
using afq::PlacementConfig;
using afq::TransformKind;

namespace {

afq::ToyFixture small_fixture() {
  afq::ToyFixture f;
  f.hidden = 32;
  f.tokens = 32;
  f.batches = 2;
  return f;
}

OptimizerConfig short_run(int epochs = 5) {
  OptimizerConfig c;
  c.epochs = epochs;
  c.lr_affine = 1e-2;
  return c;
}

bool offdiag_zero(const Mat<double>& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      if (i != j && m(i, j) != 0.0) return false;
  return true;
}

std::vector<double> losses(const afq::OptimizationReport& r) {
  std::vector<double> out;
  for (const auto& e : r.epochs) out.push_back(e.loss);
  out.push_back(r.final_loss);
  return out;
}

}  // namespace

TEST_CASE("zero learning rate leaves transforms and loss unchanged") {
  const auto f = small_fixture();
  const auto p = afq::fixture_block(f);
  const auto calib = afq::fixture_calibration(f);
  PlacementConfig pl = afq::full_affine_placement();
  pl.weight_quant->learnable_clip = true;
  OptimizerConfig c = short_run();
  c.lr_affine = 0;
  c.lr_clip = 0;
  const auto r = afq::optimize_block(p, calib, pl, c);
  const auto init = afq::init_transforms(p, afq::collect_stats(p, calib), afq::normalized(pl), c.epochs, 1.0, c.smooth_exponent);
  for (std::size_t i = 0; i < init.transforms.size(); ++i) {
    CHECK(r.transforms.transforms[i].a == init.transforms[i].a);
    CHECK(r.transforms.transforms[i].shift == init.transforms[i].shift);
  }
  for (const auto& [key, raw] : r.transforms.clip_raw) CHECK(raw == init.clip_raw.at(key));
  for (double l : losses(r.report)) CHECK(l == r.report.initial_loss);
}

TEST_CASE("alpha 0 keeps every transform diagonal") {
  const auto f = small_fixture();
  OptimizerConfig c = short_run();
  c.alpha = 0.0;
  const auto r = afq::optimize_block(afq::fixture_block(f), afq::fixture_calibration(f), afq::full_affine_placement(), c);
  for (const auto& t : r.transforms.transforms) CHECK(offdiag_zero(t.a));
  CHECK(r.report.label == "diagonal-only");
}

TEST_CASE("alpha 0 reproduces the diagonal-only trajectory exactly") {
  const auto f = small_fixture();
  const auto p = afq::fixture_block(f);
  const auto calib = afq::fixture_calibration(f);
  OptimizerConfig c = short_run(8);
  c.alpha = 0.0;
  const auto affine = afq::optimize_block(p, calib, afq::full_affine_placement(), c);
  PlacementConfig diag;
  diag.pre_out_proj = TransformKind::DiagonalOnly;
  const auto base = afq::optimize_block(p, calib, diag, c);
  CHECK(losses(affine.report) == losses(base.report));
  for (std::size_t i = 0; i < base.transforms.transforms.size(); ++i) {
    CHECK(affine.transforms.transforms[i].effective() == base.transforms.transforms[i].effective());
  }
}

TEST_CASE("seed-42 toy block: default learning rate, alpha 1e-2, 20 epochs lowers the loss") {
  const auto r = afq::optimize_block(afq::fixture_block(afq::ToyFixture{}), afq::fixture_calibration(afq::ToyFixture{}),
                                     PlacementConfig{}, [] {
                                       OptimizerConfig c;
                                       c.alpha = 1e-2;
                                       return c;
                                     }());
  CHECK(r.report.epochs.size() == 20);
  CHECK(r.report.final_loss < r.report.initial_loss);
  CHECK(r.report.label == "affine");
}

TEST_CASE("report has one record per epoch per transform") {
  const auto f = small_fixture();
  const auto r = afq::optimize_block(afq::fixture_block(f), afq::fixture_calibration(f), afq::full_affine_placement(), short_run(4));
  REQUIRE(r.report.epochs.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(r.report.epochs[e].epoch == static_cast<int>(e) + 1);
    CHECK(r.report.epochs[e].transforms.size() == 3);
    for (const auto& t : r.report.epochs[e].transforms) {
      CHECK(t.is_sdd);
      CHECK(t.condition_estimate >= 1.0);
    }
  }
  CHECK(r.report.initial_loss == r.report.epochs.front().loss);
}

TEST_CASE("default alpha policy keeps effective matrices SDD") {
  const auto f = small_fixture();
  const auto r = afq::optimize_block(afq::fixture_block(f), afq::fixture_calibration(f), afq::full_affine_placement(), short_run(10));
  for (const auto& e : r.report.epochs)
    for (const auto& t : e.transforms) {
      CHECK(t.is_sdd);
      CHECK(t.alpha <= 1.0);
      if (std::isfinite(t.alpha_bound_global)) CHECK(t.alpha < t.alpha_bound_global);
    }
  for (const auto& t : r.transforms.transforms) CHECK(afq::is_strictly_diagonally_dominant(t.effective()));
}

TEST_CASE("forcing alpha above the bound is reported, not fatal") {
  const auto st = afq::sdd_stress();
  CHECK((st.violations > 0 || st.diverged));
  CHECK(st.min_bound < st.forced_alpha);
}

TEST_CASE("non-finite loss raises a divergence error with its epoch") {
  const auto f = small_fixture();
  auto p = afq::fixture_block(f);
  p.b_fc2(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    afq::optimize_block(p, afq::fixture_calibration(f), PlacementConfig{}, short_run());
    FAIL("expected divergence");
  } catch (const afq::DivergenceError& e) {
    CHECK(e.epoch() == 1);
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
  }
}

TEST_CASE("optimizer validation") {
  const auto f = small_fixture();
  OptimizerConfig c = short_run();
  c.epochs = 0;
  CHECK_THROWS_AS(afq::optimize_block(afq::fixture_block(f), afq::fixture_calibration(f), PlacementConfig{}, c),
                  afq::ConfigError);
  CHECK_THROWS_AS(afq::optimize_block(afq::fixture_block(f), {}, PlacementConfig{}, short_run()), afq::ConfigError);
}

TEST_CASE("determinism: identical runs give identical reports") {
  const auto f = small_fixture();
  const auto a = afq::optimize_block(afq::fixture_block(f), afq::fixture_calibration(f), afq::full_affine_placement(), short_run());
  const auto b = afq::optimize_block(afq::fixture_block(f), afq::fixture_calibration(f), afq::full_affine_placement(), short_run());
  CHECK(losses(a.report) == losses(b.report));
  for (std::size_t i = 0; i < a.transforms.transforms.size(); ++i) CHECK(a.transforms.transforms[i].a == b.transforms.transforms[i].a);
}

TEST_CASE("optimize_model chaining") {
  const auto f = small_fixture();
  const auto calib = afq::fixture_calibration(f);
  afq::Model<double> one{{afq::fixture_block(f)}};
  const auto single = afq::optimize_model(one, calib, PlacementConfig{}, short_run());
  const auto direct = afq::optimize_block(one.blocks[0], calib, PlacementConfig{}, short_run());
  CHECK(losses(single.at(0).report) == losses(direct.report));

  afq::Model<double> twin{{one.blocks[0], one.blocks[0]}};
  const auto fp = afq::optimize_model(twin, calib, PlacementConfig{}, short_run());
  const auto second = afq::optimize_block(one.blocks[0], afq::full_precision_outputs(one.blocks[0], calib, afq::PrecisionScheme::Double),
                                          PlacementConfig{}, short_run());
  CHECK(losses(fp.at(1).report) == losses(second.report));

  const auto model = afq::random_model<double>(42, 32, 4, 2);
  OptimizerConfig q = short_run();
  q.next_block_input = afq::Chaining::Quantized;
  const auto rq = afq::optimize_model(model, calib, PlacementConfig{}, q);
  const auto rf = afq::optimize_model(model, calib, PlacementConfig{}, short_run());
  CHECK(rq.at(0).report.initial_loss == rf.at(0).report.initial_loss);
  CHECK(rq.at(1).report.initial_loss != rf.at(1).report.initial_loss);

  OptimizerConfig longer = short_run();
  longer.last_block_epochs = 7;
  const auto rl = afq::optimize_model(model, calib, PlacementConfig{}, longer);
  CHECK(rl.at(0).report.epochs.size() == 5);
  CHECK(rl.at(1).report.epochs.size() == 7);
}

TEST_CASE("alpha_sweep examples") {
  const auto f = small_fixture();
  const auto p = afq::fixture_block(f);
  const auto calib = afq::fixture_calibration(f);
  auto held = f;
  held.calib_seed = 7;
  const auto heldout = afq::fixture_calibration(held);

  const auto one = afq::alpha_sweep(p, calib, heldout, afq::full_affine_placement(), short_run(), {0.0});
  REQUIRE(one.rows.size() == 1);
  CHECK(offdiag_zero(one.rows[0].transforms.transforms[0].a));
  CHECK_FALSE(one.pearson.has_value());

  const auto dup = afq::alpha_sweep(p, calib, heldout, afq::full_affine_placement(), short_run(), {1e-2, 1e-2});
  CHECK(dup.rows[0].final_loss == dup.rows[1].final_loss);
  CHECK(dup.rows[0].ce_gap == dup.rows[1].ce_gap);

  const auto three = afq::alpha_sweep(p, calib, heldout, afq::full_affine_placement(), short_run(), {0.0, 1e-2, 1.0});
  CHECK(three.rows.size() == 3);
  REQUIRE(three.pearson.has_value());
  CHECK(std::abs(*three.pearson) <= 1.0);
  for (const auto& r : three.rows) CHECK(r.ce_gap >= 0.0);

  CHECK_THROWS_AS(afq::alpha_sweep(p, calib, heldout, afq::full_affine_placement(), short_run(), {}), afq::ConfigError);
}

TEST_CASE("pearson_correlation oracle") {
  CHECK(*afq::pearson_correlation({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
  CHECK(*afq::pearson_correlation({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
  CHECK_FALSE(afq::pearson_correlation({1, 2}, {1, 2}).has_value());
  CHECK_FALSE(afq::pearson_correlation({1, 1, 1}, {1, 2, 3}).has_value());
}

TEST_CASE("cross_entropy_gap is zero for identical outputs") {
  afq::Rng rng(3);
  const Mat<double> y = afq::normal_matrix<double>(5, 8, rng);
  const Mat<double> head = afq::normal_matrix<double>(8, 11, rng);
  CHECK(afq::cross_entropy_gap(y, y, head) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(afq::cross_entropy_gap(y, Mat<double>(y * 1.5), head) > 0.0);
}
