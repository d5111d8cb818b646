#pragma once

// Cosine-similarity graphs and the self-rotated instance-wise InfoNCE loss,
// with exact gradients with respect to target features and the rotation.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "efr/error.hpp"
#include "efr/lie_rotation.hpp"

namespace efr {

/// N x d batch of feature vectors, one per row. Every row has positive norm.
class FeatureBatch {
 public:
  explicit FeatureBatch(Matrix rows) : rows_(std::move(rows)) {
    if (rows_.rows() < 1) throw ShapeError("feature batch must have at least one row");
    if (!rows_.allFinite()) throw InvalidInputError("feature batch has non-finite entries");
    for (Index i = 0; i < rows_.rows(); ++i) {
      if (!(rows_.row(i).norm() > 0.0))
        throw InvalidInputError("feature row " + std::to_string(i) + " has zero norm");
    }
  }

  const Matrix& rows() const { return rows_; }
  Index size() const { return rows_.rows(); }
  Index dim() const { return rows_.cols(); }

 private:
  Matrix rows_;
};

/// Applies x -> R x to every row.
inline FeatureBatch rotate_rows(const FeatureBatch& batch, const RotationMatrix& r) {
  if (r.dim() != batch.dim()) throw ShapeError("rotation dimension does not match features");
  return FeatureBatch(batch.rows() * r.matrix().transpose());
}

/// Symmetric N x N matrix of cosine similarities with unit diagonal.
class SimilarityGraph {
 public:
  static constexpr double kTol = 1e-12;

  explicit SimilarityGraph(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols()) throw ShapeError("similarity graph must be square");
    if (!entries_.allFinite()) throw InvalidInputError("similarity graph has non-finite entries");
    for (Index i = 0; i < entries_.rows(); ++i) {
      if (std::abs(entries_(i, i) - 1.0) > kTol)
        throw InvalidInputError("similarity graph diagonal must be 1");
      for (Index j = 0; j < entries_.cols(); ++j) {
        if (std::abs(entries_(i, j) - entries_(j, i)) > kTol)
          throw InvalidInputError("similarity graph must be symmetric");
        if (std::abs(entries_(i, j)) > 1.0 + kTol)
          throw InvalidInputError("similarity out of [-1, 1]");
      }
    }
  }

  const Matrix& entries() const { return entries_; }
  Index size() const { return entries_.rows(); }

 private:
  Matrix entries_;
};

struct InstanceLossConfig {
  double tau = 0.07;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidInputError("temperature must be positive");
  }
};

inline double cosine_sim(const Vector& x, const Vector& y) {
  if (x.size() != y.size()) throw ShapeError("cosine_sim: vector sizes differ");
  const double nx = x.norm();
  const double ny = y.norm();
  if (!(nx > 0.0) || !(ny > 0.0)) throw InvalidInputError("cosine_sim: zero-norm vector");
  return std::clamp(x.dot(y) / (nx * ny), -1.0, 1.0);
}

inline SimilarityGraph pairwise_similarity(const FeatureBatch& batch) {
  const Index n = batch.size();
  Matrix g(n, n);
  for (Index i = 0; i < n; ++i) {
    g(i, i) = 1.0;
    for (Index j = i + 1; j < n; ++j) {
      const double s = cosine_sim(batch.rows().row(i).transpose(), batch.rows().row(j).transpose());
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return SimilarityGraph(std::move(g));
}

/// Loss value together with dL/d(target rows) and dL/dR.
struct AlignmentGradient {
  double loss = 0.0;
  Matrix d_target;
  Matrix d_rotation;
};

namespace detail {

inline Matrix normalized_rows(const Matrix& m, Vector* norms = nullptr) {
  Vector n = m.rowwise().norm();
  if (norms) *norms = n;
  return n.cwiseInverse().asDiagonal() * m;
}

inline void check_pair(const FeatureBatch& src, const FeatureBatch& tgt, Index rot_dim) {
  if (src.size() != tgt.size())
    throw ShapeError("batch sizes differ: " + std::to_string(src.size()) + " vs " +
                     std::to_string(tgt.size()));
  if (src.dim() != tgt.dim() || src.dim() != rot_dim)
    throw ShapeError("feature dimensions differ from each other or from the rotation");
}

}  // namespace detail

/// Instance-wise InfoNCE between source rows and rotated target rows:
/// sum_i -log softmax_j(sim(s_i, R t_j) / tau)[i]. The rotation is applied to
/// the target only. Gradients are with respect to the unrotated target rows
/// and to R itself.
inline AlignmentGradient instance_alignment_with_rotation(const FeatureBatch& src,
                                                          const FeatureBatch& tgt,
                                                          const RotationMatrix& rotation,
                                                          const InstanceLossConfig& cfg) {
  cfg.validate();
  detail::check_pair(src, tgt, rotation.dim());
  const Index n = src.size();
  const Matrix& r = rotation.matrix();

  const Matrix rotated = tgt.rows() * r.transpose();  // row j = R t_j
  const Matrix src_hat = detail::normalized_rows(src.rows());
  Vector rot_norms;
  const Matrix rot_hat = detail::normalized_rows(rotated, &rot_norms);
  if (!(rot_norms.minCoeff() > 0.0)) throw InvalidInputError("rotated target row has zero norm");

  const Matrix sim = src_hat * rot_hat.transpose();
  const Matrix logits = sim / cfg.tau;

  // dL/dsim = (softmax - I) / tau, row-wise
  Matrix d_sim(n, n);
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double m = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Index j = 0; j < n; ++j) sum += std::exp(logits(i, j) - m);
    const double log_sum = std::log(sum);
    loss += (m - logits(i, i)) + log_sum;
    for (Index j = 0; j < n; ++j) {
      const double p = std::exp(logits(i, j) - m - log_sum);
      d_sim(i, j) = (p - (i == j ? 1.0 : 0.0)) / cfg.tau;
    }
  }

  // sim_ij = s^_i . y^_j, y^_j = y_j / |y_j|
  Matrix d_rot_hat = d_sim.transpose() * src_hat;  // row j = sum_i d_sim_ij s^_i
  Matrix d_rotated(n, rotated.cols());
  for (Index j = 0; j < n; ++j) {
    const auto yh = rot_hat.row(j);
    const double radial = d_rot_hat.row(j).dot(yh);
    d_rotated.row(j) = (d_rot_hat.row(j) - radial * yh) / rot_norms(j);
  }

  AlignmentGradient out;
  out.loss = loss;
  out.d_target = d_rotated * r;                     // row j = (R^T g_j)^T
  out.d_rotation = d_rotated.transpose() * tgt.rows();  // sum_j g_j t_j^T
  return out;
}

inline double instance_alignment_loss(const FeatureBatch& src, const FeatureBatch& tgt,
                                      const SkewParamMatrix& param, const InstanceLossConfig& cfg) {
  return instance_alignment_with_rotation(src, tgt, rotation_from_param(param), cfg).loss;
}

struct InstanceAlignmentGrad {
  Matrix d_target;
  Matrix d_param;
};

inline InstanceAlignmentGrad instance_alignment_grad(const FeatureBatch& src, const FeatureBatch& tgt,
                                                     const SkewParamMatrix& param,
                                                     const InstanceLossConfig& cfg) {
  AlignmentGradient g = instance_alignment_with_rotation(src, tgt, rotation_from_param(param), cfg);
  return {std::move(g.d_target), grad_through_rotation(param, g.d_rotation)};
}

}  // namespace efr
