#include "doctest.h"

#include "afq/checks.hpp"
#include "afq/fusion.hpp"

using afq::Index;
using afq::Mat;
using afq::PlacementConfig;
using afq::PrecisionScheme;
using afq::TransformKind;

namespace {

PlacementConfig qkv_only(TransformKind kind, bool shift) {
  PlacementConfig pl;
  pl.pre_qkv = kind;
  pl.pre_out_proj.reset();
  pl.pre_fc1.reset();
  pl.shift_qkv = shift;
  pl.shift_fc1 = false;
  pl.weight_quant.reset();
  return pl;
}

afq::BlockTransforms<double> diag_qkv(const Mat<double>& diag, const Mat<double>& shift) {
  afq::AffineTransform<double> t;
  t.placement = afq::Placement::PreQkv;
  t.kind = TransformKind::DiagonalOnly;
  t.a = diag.transpose().asDiagonal();
  t.shift = shift;
  t.schedule.target_epochs = 1;
  t.schedule.alpha = 1.0;
  t.schedule.hidden_size = diag.cols();
  afq::BlockTransforms<double> st;
  st.transforms.push_back(t);
  return st;
}

afq::BlockParams<double> tiny_block() {
  afq::Rng rng(9);
  return afq::random_block<double>(rng, 2, 1, 0);
}

Mat<double> row2(double a, double b) {
  Mat<double> m(1, 2);
  m << a, b;
  return m;
}

}  // namespace

TEST_CASE("diagonal transform scales the rows of the following weights") {
  const auto p = tiny_block();
  const auto st = diag_qkv(row2(2.0, 0.5), Mat<double>());
  const auto fb = afq::fuse_block(p, qkv_only(TransformKind::DiagonalOnly, false), st);
  const std::pair<const Mat<double>*, const Mat<double>*> ws[] = {
      {&p.w_q, &fb.params.w_q}, {&p.w_k, &fb.params.w_k}, {&p.w_v, &fb.params.w_v}};
  for (const auto& [orig, fused] : ws) {
    CHECK((*fused).row(0) == Mat<double>(2.0 * orig->row(0)));
    CHECK((*fused).row(1) == Mat<double>(0.5 * orig->row(1)));
  }
  CHECK(fb.params.ln1_gamma == row2(p.ln1_gamma(0, 0) / 2.0, p.ln1_gamma(0, 1) / 0.5));
}

TEST_CASE("layer norm fold example") {
  auto p = tiny_block();
  p.ln1_gamma = row2(1.0, 0.5);
  p.ln1_beta = row2(0.0, 0.0);
  const auto st = diag_qkv(row2(2.0, 0.5), row2(1.0, 0.0));
  const auto fb = afq::fuse_block(p, qkv_only(TransformKind::DiagonalOnly, true), st);
  CHECK(fb.params.ln1_gamma(0, 0) == doctest::Approx(0.5));
  CHECK(fb.params.ln1_gamma(0, 1) == doctest::Approx(1.0));
  CHECK(fb.params.ln1_beta(0, 0) == doctest::Approx(-0.5));
  CHECK(fb.params.ln1_beta(0, 1) == doctest::Approx(0.0));

  afq::Rng rng(1);
  const std::vector<Mat<double>> calib{afq::normal_matrix<double>(6, 2, rng)};
  CHECK(afq::verify_fusion(p, qkv_only(TransformKind::DiagonalOnly, true), st, fb, calib) < 1e-12);
}

TEST_CASE("identity transforms fuse to the original parameters exactly") {
  const auto f = [] {
    afq::ToyFixture t;
    t.hidden = 16;
    return t;
  }();
  const auto p = afq::fixture_block(f);
  PlacementConfig pl;
  pl.weight_quant.reset();
  pl.shift_qkv = pl.shift_fc1 = false;
  afq::BlockTransforms<double> st;
  for (afq::Placement where : afq::kPlacements) {
    afq::AffineTransform<double> t;
    t.placement = where;
    t.kind = *pl.kind(where);
    t.a = Mat<double>::Identity(16, 16);
    t.schedule.target_epochs = 1;
    t.schedule.alpha = 1.0;
    t.schedule.hidden_size = t.kind == TransformKind::PerHead ? p.head_dim() : 16;
    st.transforms.push_back(t);
  }
  const auto fb = afq::fuse_block(p, pl, st);
  bool same = true;
  afq::BlockParams<double> orig = p;
  std::vector<Mat<double>> a, b;
  afq::visit_tensors(orig, [&](const std::string&, Mat<double>& m) { a.push_back(m); });
  afq::BlockParams<double> fused = fb.params;
  afq::visit_tensors(fused, [&](const std::string&, Mat<double>& m) { b.push_back(m); });
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i] == b[i];
  CHECK(same);
  const auto calib = afq::fixture_calibration(f);
  CHECK(afq::fused_forward(fb, calib[0]) == afq::block_forward(p, calib[0], afq::BlockMode<double>::full_precision()));
}

TEST_CASE("a full transform after a layer norm cannot be folded") {
  const auto p = tiny_block();
  afq::Rng rng(2);
  PlacementConfig pl = qkv_only(TransformKind::Full, false);
  const auto st = afq::random_transforms(p, pl, rng);
  CHECK_THROWS_AS(afq::fuse_block(p, pl, st), afq::ConfigError);
}

TEST_CASE("random diagonal transforms with 4-bit weights fuse within 1e-8") {
  afq::ToyFixture f;
  f.hidden = 32;
  f.tokens = 16;
  f.batches = 2;
  const auto p = afq::fixture_block(f);
  const auto calib = afq::fixture_calibration(f);
  PlacementConfig pl;
  for (std::uint64_t s = 0; s < 10; ++s) {
    afq::Rng rng(afq::derive_seed(77, s));
    const auto st = afq::random_transforms(p, pl, rng);
    const auto fb = afq::fuse_block(p, pl, st);
    CAPTURE(s);
    CHECK(afq::verify_fusion(p, pl, st, fb, calib) < 1e-8);
    CHECK(afq::parameter_count(fb.params) == afq::parameter_count(p));
  }
}

TEST_CASE("seed-42 optimized block fuses within 1e-6 and exports its quantized grid") {
  const afq::ToyFixture f;
  const auto p = afq::fixture_block(f);
  const auto calib = afq::fixture_calibration(f);
  afq::OptimizerConfig c;
  c.epochs = 5;
  const PlacementConfig pl;
  const auto r = afq::optimize_block(p, calib, pl, c);
  const auto fb = afq::fuse_block(p, pl, r.transforms);
  CHECK(afq::verify_fusion(p, pl, r.transforms, fb, calib) < 1e-6);
  CHECK(afq::parameter_count(fb.params) == afq::parameter_count(p));

  CHECK(fb.exports.count("v") == 0);  // the out-projection inverse is folded into v
  for (const char* name : {"q", "k", "out", "fc1", "fc2"}) {
    REQUIRE(fb.exports.count(name) == 1);
    const auto& q = fb.exports.at(name);
    const Mat<double>& w = afq::linear_weight(fb.params, name);
    CAPTURE(name);
    CHECK((afq::dequantize(q) - w).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, w.cwiseAbs().maxCoeff()));
    CHECK(q.codes.maxCoeff() <= 15);
  }
}

TEST_CASE("fusion in float stays within float tolerance") {
  afq::ToyFixture f;
  f.hidden = 32;
  f.tokens = 16;
  f.batches = 2;
  const auto p = afq::fixture_block<float>(f);
  const auto calib = afq::fixture_calibration<float>(f);
  const PlacementConfig pl;
  afq::Rng rng(3);
  const auto st = afq::random_transforms(p, pl, rng);
  const auto fb = afq::fuse_block(p, pl, st);
  CHECK(afq::verify_fusion(p, pl, st, fb, calib) < 1e-3);
}

TEST_CASE("merge error: deterministic, ordered by precision, validated") {
  afq::MergeErrorConfig cfg;
  cfg.dim_in = 64;
  cfg.dim_out = 48;
  cfg.tokens = 32;
  cfg.trials = 4;
  const auto d = afq::merge_error_experiment(cfg, PrecisionScheme::Double);
  const auto fd = afq::merge_error_experiment(cfg, PrecisionScheme::FloatDouble);
  const auto fl = afq::merge_error_experiment(cfg, PrecisionScheme::Float);
  CHECK(d.mean_mse < fd.mean_mse);
  CHECK(fd.mean_mse < fl.mean_mse);
  CHECK(d.trials == 4);
  CHECK(d.dim_out == 48);
  CHECK(afq::merge_error_experiment(cfg, PrecisionScheme::Float).mean_mse == fl.mean_mse);

  afq::MergeErrorConfig other = cfg;
  other.seed = 8;
  CHECK(afq::merge_error_experiment(other, PrecisionScheme::Float).mean_mse != fl.mean_mse);

  afq::MergeErrorConfig bad = cfg;
  bad.dim_in = 1;
  CHECK_THROWS_AS(afq::merge_error_experiment(bad, PrecisionScheme::Double), afq::ConfigError);
  bad = cfg;
  bad.trials = 0;
  CHECK_THROWS_AS(afq::merge_error_experiment(bad, PrecisionScheme::Double), afq::ConfigError);
}

TEST_CASE("merge_mse is zero for the identity transform") {
  afq::Rng rng(4);
  const Mat<double> x = afq::normal_matrix<double>(8, 6, rng);
  const Mat<double> w = afq::normal_matrix<double>(6, 5, rng);
  const Mat<double> eye = Mat<double>::Identity(6, 6);
  for (auto s : {PrecisionScheme::Double, PrecisionScheme::Float, PrecisionScheme::FloatDouble}) {
    CHECK(afq::detail::merge_mse(eye, x, w, s) < 1e-12);
  }
}
