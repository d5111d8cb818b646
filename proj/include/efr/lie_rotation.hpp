#pragma once

// Rotations in SO(d) parameterized by unconstrained d x d matrices through
// the skew projection P -> P - P^T followed by the matrix exponential, plus
// the exact derivatives needed to optimize the unconstrained parameter.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "efr/error.hpp"

namespace efr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr Index kMaxRotationDim = 512;

/// Unconstrained generator of a rotation. Any finite matrix is valid.
class SkewParamMatrix {
 public:
  explicit SkewParamMatrix(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols()) {
      throw ShapeError("skew parameter must be square, got " + std::to_string(entries_.rows()) +
                       "x" + std::to_string(entries_.cols()));
    }
    if (entries_.rows() < 2 || entries_.rows() > kMaxRotationDim) {
      throw ShapeError("skew parameter dimension out of range: " + std::to_string(entries_.rows()));
    }
    if (!entries_.allFinite()) throw InvalidInputError("skew parameter has non-finite entries");
  }

  static SkewParamMatrix zero(Index dim) { return SkewParamMatrix(Matrix::Zero(dim, dim)); }

  const Matrix& entries() const { return entries_; }
  Index dim() const { return entries_.rows(); }

 private:
  Matrix entries_;
};

/// Element of so(d). Only the strict upper triangle is stored, so S + S^T = 0
/// holds exactly for every materialized matrix.
class SkewMatrix {
 public:
  explicit SkewMatrix(Index dim) : dim_(dim), upper_(static_cast<std::size_t>(dim * (dim - 1) / 2), 0.0) {}

  /// Takes the strict upper triangle of `m`; the lower triangle is ignored.
  static SkewMatrix from_upper(const Matrix& m) {
    if (m.rows() != m.cols()) throw ShapeError("skew matrix must be square");
    SkewMatrix s(m.rows());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = i + 1; j < m.cols(); ++j) s.upper_[s.offset(i, j)] = m(i, j);
    return s;
  }

  Index dim() const { return dim_; }

  double operator()(Index i, Index j) const {
    if (i == j) return 0.0;
    return i < j ? upper_[offset(i, j)] : -upper_[offset(j, i)];
  }

  Matrix dense() const {
    Matrix m = Matrix::Zero(dim_, dim_);
    for (Index i = 0; i < dim_; ++i)
      for (Index j = i + 1; j < dim_; ++j) {
        const double v = upper_[offset(i, j)];
        m(i, j) = v;
        m(j, i) = -v;
      }
    return m;
  }

  SkewMatrix scaled(double factor) const {
    SkewMatrix s = *this;
    for (double& v : s.upper_) v *= factor;
    return s;
  }

 private:
  std::size_t offset(Index i, Index j) const {
    // row-major strict upper triangle
    return static_cast<std::size_t>(i * dim_ - i * (i + 1) / 2 + (j - i - 1));
  }

  Index dim_;
  std::vector<double> upper_;
};

/// ||R^T R - I||_F
inline double orthogonality_residual(const Matrix& r) {
  return (r.transpose() * r - Matrix::Identity(r.rows(), r.cols())).norm();
}

class RotationMatrix {
 public:
  static constexpr double kOrthoTol = 1e-10;
  static constexpr double kDetTol = 1e-8;

  /// Validates R^T R = I and det R = 1.
  explicit RotationMatrix(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols()) throw ShapeError("rotation must be square");
    if (!entries_.allFinite()) throw InvalidInputError("rotation has non-finite entries");
    if (efr::orthogonality_residual(entries_) >= kOrthoTol)
      throw InvalidInputError("matrix is not orthogonal");
    if (std::abs(determinant() - 1.0) >= kDetTol)
      throw InvalidInputError("rotation determinant is not +1");
  }

  static RotationMatrix identity(Index dim) { return RotationMatrix(Matrix::Identity(dim, dim)); }

  const Matrix& matrix() const { return entries_; }
  Index dim() const { return entries_.rows(); }
  double orthogonality_residual() const { return efr::orthogonality_residual(entries_); }
  double determinant() const { return entries_.partialPivLu().determinant(); }
  RotationMatrix transpose() const { return RotationMatrix(entries_.transpose()); }

  friend RotationMatrix operator*(const RotationMatrix& a, const RotationMatrix& b) {
    return RotationMatrix(a.entries_ * b.entries_);
  }

 private:
  Matrix entries_;
};

namespace detail {

inline constexpr int kTaylorTerms = 18;

/// Scaling and squaring with a truncated Taylor series: halve until the
/// 1-norm is below 0.5, sum 18 terms, square back. The zero matrix maps to
/// the identity exactly.
inline Matrix expm_taylor(const Matrix& a) {
  const Index n = a.rows();
  Matrix result = Matrix::Identity(n, n);
  if (n == 0) return result;
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  double scale = 1.0;
  while (norm1 * scale >= 0.5) {
    scale *= 0.5;
    ++squarings;
  }
  const Matrix scaled = a * scale;
  Matrix term = Matrix::Identity(n, n);
  for (int k = 1; k <= kTaylorTerms; ++k) {
    term = (term * scaled) / static_cast<double>(k);
    result += term;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

/// Frechet derivative of exp at `a` in direction `e`: the top-right block of
/// exp([[a, e], [0, a]]).
inline Matrix expm_frechet(const Matrix& a, const Matrix& e) {
  const Index n = a.rows();
  Matrix block = Matrix::Zero(2 * n, 2 * n);
  block.topLeftCorner(n, n) = a;
  block.topRightCorner(n, n) = e;
  block.bottomRightCorner(n, n) = a;
  return expm_taylor(block).topRightCorner(n, n);
}

}  // namespace detail

/// P - P^T.
inline SkewMatrix skew_project(const SkewParamMatrix& param) {
  const Matrix& p = param.entries();
  Matrix upper = Matrix::Zero(p.rows(), p.cols());
  for (Index i = 0; i < p.rows(); ++i)
    for (Index j = i + 1; j < p.cols(); ++j) upper(i, j) = p(i, j) - p(j, i);
  return SkewMatrix::from_upper(upper);
}

inline RotationMatrix matrix_exp(const SkewMatrix& s) {
  Matrix r = detail::expm_taylor(s.dense());
  // exp of a skew matrix is in SO(d); a failure here is an internal bug.
  const double residual = orthogonality_residual(r);
  if (residual >= RotationMatrix::kOrthoTol) {
    throw std::logic_error("matrix_exp lost orthogonality: residual " + std::to_string(residual));
  }
  return RotationMatrix(std::move(r));
}

inline Matrix exp_directional_derivative(const SkewMatrix& s, const Matrix& direction) {
  if (direction.rows() != s.dim() || direction.cols() != s.dim())
    throw ShapeError("direction shape does not match skew matrix");
  if (!direction.allFinite()) throw InvalidInputError("direction has non-finite entries");
  return detail::expm_frechet(s.dense(), direction);
}

inline RotationMatrix rotation_from_param(const SkewParamMatrix& param) {
  return matrix_exp(skew_project(param));
}

/// Chain rule through R = exp(P - P^T). Given G = dL/dR returns dL/dP.
///
/// The adjoint of E -> Dexp(A)[E] under the Frobenius pairing is
/// G -> Dexp(A^T)[G], and A^T = -A for skew A. The skew projection's adjoint
/// is H -> H - H^T.
inline Matrix grad_through_rotation(const SkewParamMatrix& param, const Matrix& upstream) {
  if (upstream.rows() != param.dim() || upstream.cols() != param.dim())
    throw ShapeError("upstream gradient shape does not match parameter");
  const Matrix a = skew_project(param).dense();
  const Matrix h = detail::expm_frechet(-a, upstream);
  return h - h.transpose();
}

/// Rotation by `angle` radians in the (i, j) coordinate plane.
inline RotationMatrix plane_rotation(Index dim, Index i, Index j, double angle) {
  Matrix r = Matrix::Identity(dim, dim);
  r(i, i) = std::cos(angle);
  r(j, j) = std::cos(angle);
  r(i, j) = -std::sin(angle);
  r(j, i) = std::sin(angle);
  return RotationMatrix(std::move(r));
}

}  // namespace efr
