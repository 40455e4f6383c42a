#include "doctest.h"

#include <cmath>
#include <string>

#include "afq/graph.hpp"
#include "afq/random.hpp"
#include "afq/tape.hpp"
#include "afq/tape_quant.hpp"

using afq::Bindings;
using afq::Graph;
using afq::Mat;
using afq::Tape;
using afq::Var;

namespace {

using G = Graph<double>;
using B = Bindings<double>;

Mat<double> m(std::initializer_list<std::initializer_list<double>> rows) {
  Mat<double> out(static_cast<afq::Index>(rows.size()), static_cast<afq::Index>(rows.begin()->size()));
  afq::Index i = 0;
  for (const auto& r : rows) {
    afq::Index j = 0;
    for (double v : r) out(i, j++) = v;
    ++i;
  }
  return out;
}

afq::QuantParams<double> per_tensor(double delta, double zp, int bits, afq::Index rows, afq::Index cols) {
  afq::QuantParams<double> qp;
  qp.delta = Mat<double>::Constant(1, 1, delta);
  qp.zero_point = Mat<double>::Constant(1, 1, zp);
  qp.clip_hi = qp.clip_lo = Mat<double>::Ones(1, 1);
  qp.bits = bits;
  qp.layout = {rows, cols};
  return qp;
}

// Scalar readout that weights every entry differently so gradient bugs cannot cancel.
Var<double> readout(Var<double> x) {
  auto& t = x.tape();
  Mat<double> w(x.rows(), x.cols());
  for (afq::Index k = 0; k < w.size(); ++k) w.data()[k] = std::sin(0.7 * static_cast<double>(k) + 0.3);
  return afq::sum(afq::hadamard(x, t.constant(w)));
}

}  // namespace

TEST_CASE("forward examples") {
  const G norm = [](Tape<double>& t) { return afq::frobenius_norm_sq(t.input("X")); };
  CHECK(afq::forward(norm, B{{"X", Mat<double>::Zero(3, 2)}})(0, 0) == 0.0);

  const G cancel = [](Tape<double>& t) {
    auto x = t.input("X");
    return afq::matmul(x, t.constant(Mat<double>::Identity(x.cols(), x.cols()))) - x;
  };
  afq::Rng rng(1);
  CHECK(afq::forward(cancel, B{{"X", afq::normal_matrix<double>(3, 4, rng)}}).isZero(0.0));

  const G xw = [](Tape<double>& t) { return afq::frobenius_norm_sq(afq::matmul(t.input("X"), t.input("W"))); };
  CHECK(afq::forward(xw, B{{"X", m({{1, 1}})}, {"W", m({{1}, {1}})}})(0, 0) == 4.0);
}

TEST_CASE("forward errors") {
  const G xw = [](Tape<double>& t) { return afq::matmul(t.input("X"), t.input("W")); };
  CHECK_THROWS_AS(afq::forward(xw, B{{"X", m({{1, 1}})}}), afq::UnboundLeafError);
  CHECK_THROWS_AS(afq::forward(xw, B{{"X", m({{1, 1}})}, {"W", m({{1, 1}})}}), afq::ShapeError);
  CHECK_THROWS_AS(afq::backward(xw, B{{"X", m({{1, 1}})}, {"W", m({{1, 1}, {1, 1}})}}), afq::ShapeError);
}

TEST_CASE("backward examples") {
  const G quad = [](Tape<double>& t) { return afq::frobenius_norm_sq(t.input("A")); };
  const Mat<double> a = m({{1, -2}, {3, 0.5}});
  CHECK(afq::backward(quad, B{{"A", a}}).at("A") == 2 * a);

  const G inv = [](Tape<double>& t) { return afq::sum(afq::inverse(t.input("A"))); };
  CHECK(afq::backward(inv, B{{"A", m({{2}})}}).at("A")(0, 0) == doctest::Approx(-0.25));

  // STE pass-through: w inside the clamp range, off rounding boundaries.
  const auto qp = per_tensor(0.25, 8, 4, 2, 2);
  const G fq = [&](Tape<double>& t) { return afq::frobenius_norm_sq(afq::fake_quant_ste(t.input("w"), qp)); };
  const Mat<double> w = m({{0.3, -0.9}, {1.1, 0.05}});
  const Mat<double> q = afq::fake_quant(w, qp);
  CHECK(afq::backward(fq, B{{"w", w}}).at("w") == 2 * q);
  const auto report = afq::check_gradient_report(fq, B{{"w", w}}, "w", 1e-6);
  CHECK(report.max_relative_error < 1e-6);
  CHECK(report.min_boundary_distance > 1e-5);
}

TEST_CASE("fake_quant_ste forward examples") {
  const auto run = [](double x, const afq::QuantParams<double>& qp) {
    const G g = [&](Tape<double>& t) { return afq::fake_quant_ste(t.input("x"), qp); };
    return afq::forward(g, B{{"x", Mat<double>::Constant(1, 1, x)}})(0, 0);
  };
  CHECK(run(0.0, per_tensor(0.5, 3, 3, 1, 1)) == 0.0);
  CHECK(run(1.4, per_tensor(1, 0, 2, 1, 1)) == 1.0);
  CHECK(run(5.0, per_tensor(1, 0, 2, 1, 1)) == 3.0);
  const G bad = [](Tape<double>& t) { return afq::fake_quant_ste(t.input("x"), per_tensor(-1, 0, 2, 1, 1)); };
  CHECK_THROWS_AS(afq::forward(bad, B{{"x", Mat<double>::Zero(1, 1)}}), afq::ConfigError);
}

TEST_CASE("check_gradient examples") {
  afq::Rng rng(4);
  const G quad = [](Tape<double>& t) { return afq::frobenius_norm_sq(t.input("A")); };
  CHECK(afq::check_gradient(quad, B{{"A", afq::normal_matrix<double>(3, 3, rng)}}, "A", 1e-5) < 1e-6);

  const G inv = [](Tape<double>& t) { return readout(afq::inverse(t.input("A"))); };
  CHECK(afq::check_gradient(inv, B{{"A", afq::random_sdd_matrix<double>(4, rng)}}, "A", 1e-5) < 1e-4);

  const G constant = [](Tape<double>& t) {
    t.input("A");
    return afq::frobenius_norm_sq(t.constant(Mat<double>::Ones(2, 2)));
  };
  CHECK(afq::check_gradient(constant, B{{"A", Mat<double>::Ones(2, 2)}}, "A", 1e-5) == 0.0);
}

TEST_CASE("backward rejects a non-scalar root") {
  Tape<double> t;
  auto x = t.leaf("x", Mat<double>::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(x), afq::ShapeError);
}

TEST_CASE("property: every smooth primitive passes check_gradient across 100 seeds") {
  struct Case {
    std::string name;
    G graph;
  };
  const Case cases[] = {
      {"matmul", [](Tape<double>& t) { return readout(afq::matmul(t.input("X"), t.input("W"))); }},
      {"transform_matmul", [](Tape<double>& t) { return readout(afq::transform_matmul(t.input("X"), t.input("W"))); }},
      {"add", [](Tape<double>& t) { return afq::frobenius_norm_sq(t.input("X") + t.input("Y")); }},
      {"subtract", [](Tape<double>& t) { return afq::frobenius_norm_sq(t.input("X") - t.input("Y")); }},
      {"hadamard", [](Tape<double>& t) { return readout(afq::hadamard(t.input("X"), t.input("Y"))); }},
      {"scale", [](Tape<double>& t) { return readout(afq::scale(t.input("X"), -1.7)); }},
      {"transpose", [](Tape<double>& t) { return readout(afq::transpose(t.input("X"))); }},
      {"add_row", [](Tape<double>& t) { return afq::frobenius_norm_sq(afq::add_row(t.input("X"), t.input("r"))); }},
      {"sub_row", [](Tape<double>& t) { return afq::frobenius_norm_sq(afq::sub_row(t.input("X"), t.input("r"))); }},
      {"inverse", [](Tape<double>& t) { return readout(afq::inverse(t.input("S"))); }},
      {"layer_norm", [](Tape<double>& t) { return readout(afq::layer_norm(t.input("X"), t.input("r"), t.input("b"))); }},
      {"softmax", [](Tape<double>& t) { return readout(afq::softmax_rows(t.input("X"), false)); }},
      {"softmax_causal", [](Tape<double>& t) { return readout(afq::softmax_rows(t.input("X"), true)); }},
      {"relu", [](Tape<double>& t) { return readout(afq::relu(t.input("X"))); }},
      {"sigmoid", [](Tape<double>& t) { return readout(afq::sigmoid(t.input("X"))); }},
      {"slice_concat", [](Tape<double>& t) {
         auto x = t.input("X");
         return readout(afq::concat_cols<double>({afq::slice_cols(x, 2, 2), afq::slice_cols(x, 0, 2), t.input("Y")}));
       }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      afq::Rng rng(afq::derive_seed(99, seed));
      B b{{"X", afq::normal_matrix<double>(4, 4, rng)},
          {"Y", afq::normal_matrix<double>(4, 4, rng)},
          {"W", afq::normal_matrix<double>(4, 3, rng)},
          {"r", afq::normal_matrix<double>(1, 4, rng)},
          {"b", afq::normal_matrix<double>(1, 4, rng)},
          {"S", afq::random_sdd_matrix<double>(4, rng)}};
      const auto grads = afq::backward(c.graph, b);
      for (const auto& [leaf, g] : grads) {
        CHECK(g.rows() == b.at(leaf).rows());
        CHECK(g.cols() == b.at(leaf).cols());
        worst = std::max(worst, afq::check_gradient(c.graph, b, leaf, 1e-6));
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("property: inverse gradient through an X A^-1 Q(A W) composition") {
  const auto cfg = [] {
    afq::QuantConfig c;
    c.bits = 4;
    c.granularity = afq::Granularity::PerChannel;
    return c;
  }();
  const G g = [&](Tape<double>& t) {
    auto a = t.input("A");
    auto lhs = afq::matmul(t.input("X"), afq::inverse(a));
    auto w = afq::fake_quant_learnable(afq::matmul(a, t.input("W")), cfg);
    return afq::frobenius_norm_sq(afq::matmul(lhs, w) - t.input("Y"));
  };
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    afq::Rng rng(afq::derive_seed(7, seed));
    B b{{"A", afq::random_sdd_matrix<double>(5, rng)},
        {"X", afq::normal_matrix<double>(6, 5, rng)},
        {"W", afq::normal_matrix<double>(5, 3, rng)},
        {"Y", afq::normal_matrix<double>(6, 3, rng)}};
    const double eps = 1e-7;
    const auto report = afq::check_gradient_report(g, b, "A", eps);
    if (report.min_boundary_distance <= 10 * eps) continue;
    ++checked;
    CHECK(report.max_relative_error < 1e-4);
  }
  CHECK(checked >= 10);
}

TEST_CASE("property: learnable fake-quant gradients reach clip parameters") {
  afq::QuantConfig cfg;
  cfg.bits = 3;
  cfg.granularity = afq::Granularity::PerChannel;
  cfg.learnable_clip = true;
  for (bool symmetric : {false, true}) {
    cfg.symmetric = symmetric;
    const G g = [&](Tape<double>& t) {
      auto w = afq::fake_quant_learnable(t.input("W"), cfg, t.input("hi"), t.input("lo"));
      return afq::frobenius_norm_sq(afq::matmul(t.input("X"), w) - t.input("Y"));
    };
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      afq::Rng rng(afq::derive_seed(13, seed));
      B b{{"W", afq::normal_matrix<double>(6, 4, rng)},
          {"X", afq::normal_matrix<double>(5, 6, rng)},
          {"Y", afq::normal_matrix<double>(5, 4, rng)},
          {"hi", afq::normal_matrix<double>(1, 4, rng, 0.5) + Mat<double>::Constant(1, 4, 1.5)},
          {"lo", afq::normal_matrix<double>(1, 4, rng, 0.5) + Mat<double>::Constant(1, 4, 1.5)}};
      const double eps = 1e-7;
      bool ok = true;
      for (const char* leaf : {"W", "hi", "lo"}) {
        const auto report = afq::check_gradient_report(g, b, leaf, eps);
        if (report.min_boundary_distance <= 10 * eps) {
          ok = false;
          break;
        }
        CAPTURE(leaf);
        CHECK(report.max_relative_error < 1e-4);
      }
      checked += ok ? 1 : 0;
      const auto grads = afq::backward(g, b);
      CHECK(grads.at("hi").cwiseAbs().maxCoeff() > 0);
    }
    CHECK(checked >= 5);
  }
}

TEST_CASE("property: STE region") {
  const auto qp = per_tensor(0.5, 2, 3, 2, 4);
  const Mat<double> x = m({{-3.1, -0.6, 0.2, 1.3}, {2.6, 9.0, -1.2, 0.1}});
  const Mat<double> up = m({{1, 2, 3, 4}, {5, 6, 7, 8}});
  const G g = [&](Tape<double>& t) { return afq::sum(afq::hadamard(afq::fake_quant_ste(t.input("x"), qp), t.constant(up))); };
  const Mat<double> grad = afq::backward(g, B{{"x", x}}).at("x");
  for (afq::Index i = 0; i < x.rows(); ++i) {
    for (afq::Index j = 0; j < x.cols(); ++j) {
      const double q = afq::round_half_away(x(i, j) / 0.5) + 2;
      const bool inside = q >= 0 && q <= 7;
      CHECK(grad(i, j) == (inside ? up(i, j) : 0.0));
    }
  }
}

TEST_CASE("property: determinism") {
  const G g = [](Tape<double>& t) {
    auto a = t.input("A");
    auto h = afq::layer_norm(afq::matmul(t.input("X"), afq::inverse(a)), t.input("r"), t.input("b"));
    return readout(afq::softmax_rows(afq::matmul(h, afq::transpose(h)), true));
  };
  afq::Rng rng(21);
  B b{{"A", afq::random_sdd_matrix<double>(6, rng)},
      {"X", afq::normal_matrix<double>(5, 6, rng)},
      {"r", afq::normal_matrix<double>(1, 6, rng)},
      {"b", afq::normal_matrix<double>(1, 6, rng)}};
  const auto first = afq::backward(g, b);
  const auto second = afq::backward(g, b);
  for (const auto& [name, grad] : first) CHECK(second.at(name) == grad);
}

TEST_CASE("float tape agrees with double tape") {
  afq::Rng rng(31);
  const Mat<double> a = afq::random_sdd_matrix<double>(4, rng);
  const Mat<double> x = afq::normal_matrix<double>(3, 4, rng);
  const Graph<float> gf = [](Tape<float>& t) { return afq::frobenius_norm_sq(afq::matmul(t.input("X"), afq::inverse(t.input("A")))); };
  const G gd = [](Tape<double>& t) { return afq::frobenius_norm_sq(afq::matmul(t.input("X"), afq::inverse(t.input("A")))); };
  const auto f = afq::backward(gf, Bindings<float>{{"A", a.cast<float>()}, {"X", x.cast<float>()}});
  const auto d = afq::backward(gd, B{{"A", a}, {"X", x}});
  CHECK(afq::relative_fro_error(d.at("A"), f.at("A").cast<double>()) < 1e-4);
}
