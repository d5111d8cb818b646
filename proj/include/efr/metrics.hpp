#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "efr/error.hpp"
#include "efr/lie_rotation.hpp"

namespace efr {

namespace detail {

inline Matrix sample_covariance(const Matrix& x, const Vector& mean) {
  const Matrix centered = x.rowwise() - mean.transpose();
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

inline Matrix psd_sqrt(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

}  // namespace detail

/// Frechet distance between Gaussian fits of two sample batches (rows are
/// samples): |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}). The cross term
/// uses tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), which is symmetric and PSD.
inline double frechet_gaussian_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() < 2 || b.rows() < 2) throw InvalidInputError("frechet distance needs at least 2 samples per batch");
  if (a.cols() != b.cols()) throw ShapeError("sample dimensions differ");
  const Vector mu_a = a.colwise().mean().transpose();
  const Vector mu_b = b.colwise().mean().transpose();
  const Matrix cov_a = detail::sample_covariance(a, mu_a);
  const Matrix cov_b = detail::sample_covariance(b, mu_b);
  const Matrix sqrt_a = detail::psd_sqrt(cov_a);
  Matrix inner = sqrt_a * cov_b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = detail::psd_sqrt(inner).trace();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
  return std::max(0.0, value);
}

}  // namespace efr
