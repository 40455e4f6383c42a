#pragma once

#include <cstdint>
#include <random>

#include "afq/linalg.hpp"

namespace afq {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; derives independent stream seeds from (master, index).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Standard-normal entries drawn in double and rounded to Scalar, row-major order.
template <typename Scalar>
Mat<Scalar> normal_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<Scalar> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(dist(rng));
  return m;
}

/// Standard-normal off-diagonals with the diagonal set to 1 + row-abs-sum of the rest.
template <typename Scalar>
Mat<Scalar> random_sdd_matrix(Index n, Rng& rng, double offdiag_scale = 1.0) {
  Mat<Scalar> m = normal_matrix<Scalar>(n, n, rng, offdiag_scale);
  for (Index i = 0; i < n; ++i) {
    m(i, i) = 0;
    m(i, i) = Scalar(1) + m.row(i).cwiseAbs().sum();
  }
  return m;
}

}  // namespace afq
