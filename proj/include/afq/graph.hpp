#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>

#include "afq/tape.hpp"

namespace afq {

/// An expression graph: records itself onto the tape it is given, reading its
/// leaves with tape.input(name), and returns the root.
template <typename Scalar>
using Graph = std::function<Var<Scalar>(Tape<Scalar>&)>;

template <typename Scalar>
Mat<Scalar> forward(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings,
                    PrecisionScheme scheme = default_scheme<Scalar>()) {
  Tape<Scalar> tape(scheme);
  tape.bind(bindings);
  return graph(tape).value();
}

/// Gradients of a scalar root with respect to every bound leaf the graph reads.
template <typename Scalar>
GradientMap<Scalar> backward(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings,
                             PrecisionScheme scheme = default_scheme<Scalar>()) {
  Tape<Scalar> tape(scheme);
  tape.bind(bindings);
  const Var<Scalar> root = graph(tape);
  tape.backward(root);
  return tape.gradients();
}

struct GradientCheck {
  double max_relative_error = 0.0;
  /// Closest approach of any fake-quant pre-clamp index to a clamp boundary, in input units.
  double min_boundary_distance = std::numeric_limits<double>::infinity();
};

/// Compares the analytic gradient of `leaf` with central differences
/// (L(x + eps) - L(x - eps)) / (2 eps), entry by entry.
///
/// Fake-quant nodes are replayed as their straight-through surrogate around the
/// base point, so the comparison is meaningful as long as no perturbation
/// crosses a clamp boundary; callers check `min_boundary_distance > 10 * eps`.
/// Entry errors use max(|a|, |n|, 1e-3 * max over entries, 1e-12) as denominator.
template <typename Scalar>
GradientCheck check_gradient_report(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings,
                                    const std::string& leaf, Scalar eps,
                                    PrecisionScheme scheme = default_scheme<Scalar>()) {
  if (!(eps > 0)) throw ConfigError("check_gradient: eps must be positive");
  auto trace = std::make_shared<QuantTrace<Scalar>>();
  trace->mode = QuantTrace<Scalar>::Mode::Record;
  Mat<Scalar> analytic;
  {
    Tape<Scalar> tape(scheme);
    tape.bind(bindings);
    tape.set_quant_trace(trace);
    const Var<Scalar> root = graph(tape);
    tape.backward(root);
    const auto grads = tape.gradients();
    auto it = grads.find(leaf);
    if (it == grads.end()) throw UnboundLeafError("check_gradient: graph does not read leaf '" + leaf + "'");
    analytic = it->second;
  }
  GradientCheck report;
  report.min_boundary_distance = trace->min_boundary_distance;
  trace->mode = QuantTrace<Scalar>::Mode::Replay;

  auto evaluate = [&](const Bindings<Scalar>& b) {
    trace->cursor = 0;
    Tape<Scalar> tape(scheme);
    tape.bind(b);
    tape.set_quant_trace(trace);
    return static_cast<double>(graph(tape).value()(0, 0));
  };

  Bindings<Scalar> work = bindings;
  Mat<Scalar>& x = work.at(leaf);
  Mat<double> numeric(x.rows(), x.cols());
  for (Index k = 0; k < x.size(); ++k) {
    const Scalar saved = x.data()[k];
    x.data()[k] = saved + eps;
    const double plus = evaluate(work);
    x.data()[k] = saved - eps;
    const double minus = evaluate(work);
    x.data()[k] = saved;
    numeric.data()[k] = (plus - minus) / (2.0 * static_cast<double>(eps));
  }

  const Mat<double> a = analytic.template cast<double>();
  const double scale = std::max(a.size() ? a.cwiseAbs().maxCoeff() : 0.0,
                                numeric.size() ? numeric.cwiseAbs().maxCoeff() : 0.0);
  for (Index k = 0; k < a.size(); ++k) {
    const double av = a.data()[k];
    const double nv = numeric.data()[k];
    const double denom = std::max({std::abs(av), std::abs(nv), 1e-3 * scale, 1e-12});
    report.max_relative_error = std::max(report.max_relative_error, std::abs(av - nv) / denom);
  }
  return report;
}

template <typename Scalar>
double check_gradient(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings, const std::string& leaf,
                      Scalar eps, PrecisionScheme scheme = default_scheme<Scalar>()) {
  return check_gradient_report(graph, bindings, leaf, eps, scheme).max_relative_error;
}

}  // namespace afq
