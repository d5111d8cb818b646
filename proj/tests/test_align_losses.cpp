#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "efr/align_losses.hpp"
#include "efr/gradcheck.hpp"
#include "efr/nets.hpp"

using namespace efr;

namespace {

Matrix random_matrix(Index r, Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.reshaped()) v = scale * rng.normal();
  return m;
}

RotationMatrix random_rotation(Index d, Rng& rng) {
  return rotation_from_param(SkewParamMatrix(random_matrix(d, d, rng)));
}

/// Direct transcription of the loss, without stabilization or caching.
double naive_loss(const Matrix& src, const Matrix& tgt, const Matrix& r, double tau) {
  const Matrix rotated = tgt * r.transpose();
  double total = 0.0;
  for (Index i = 0; i < src.rows(); ++i) {
    double denom = 0.0;
    for (Index j = 0; j < src.rows(); ++j)
      denom += std::exp(cosine_sim(src.row(i).transpose(), rotated.row(j).transpose()) / tau);
    total -= std::log(std::exp(cosine_sim(src.row(i).transpose(), rotated.row(i).transpose()) / tau) / denom);
  }
  return total;
}

}  // namespace

TEST(CosineSim, ClosedForms) {
  Vector x(2), y(2), z(2);
  x << 1, 0;
  y << 1, 1;
  z << 0, 3;
  EXPECT_DOUBLE_EQ(cosine_sim(x, x), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(x, z), 0.0);
  EXPECT_NEAR(cosine_sim(x, y), 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(CosineSim, ZeroVectorIsRejected) {
  Vector x = Vector::Zero(3), y = Vector::Ones(3);
  EXPECT_THROW(cosine_sim(x, y), InvalidInputError);
}

TEST(CosineSim, RotationInvariant) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    const RotationMatrix r = random_rotation(5, rng);
    const Vector x = random_matrix(5, 1, rng), y = random_matrix(5, 1, rng);
    EXPECT_LT(std::abs(cosine_sim(r.matrix() * x, r.matrix() * y) - cosine_sim(x, y)), 1e-12);
  }
}

TEST(FeatureBatch, RejectsZeroRowsAndNonFinite) {
  Matrix m = Matrix::Ones(3, 2);
  m.row(1).setZero();
  EXPECT_THROW(FeatureBatch{m}, InvalidInputError);
  m.row(1) << 1.0, std::numeric_limits<double>::infinity();
  EXPECT_THROW(FeatureBatch{m}, InvalidInputError);
  EXPECT_THROW(FeatureBatch{Matrix(0, 2)}, ShapeError);
}

TEST(PairwiseSimilarity, IdenticalRowsGiveAllOnes) {
  Matrix m(3, 4);
  m.rowwise() = Eigen::RowVector4d(1, -2, 0.5, 3);
  EXPECT_LT((pairwise_similarity(FeatureBatch(m)).entries() - Matrix::Ones(3, 3)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PairwiseSimilarity, OrthogonalRowsGiveIdentity) {
  Matrix m(2, 2);
  m << 2, 0, 0, 5;
  EXPECT_TRUE(pairwise_similarity(FeatureBatch(m)).entries().isIdentity(0.0));
}

TEST(PairwiseSimilarity, MatchesDirectRecomputation) {
  Rng rng(2);
  const Matrix m = random_matrix(3, 4, rng);
  const Matrix g = pairwise_similarity(FeatureBatch(m)).entries();
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) {
      const double direct = m.row(i).dot(m.row(j)) / (m.row(i).norm() * m.row(j).norm());
      EXPECT_NEAR(g(i, j), direct, 1e-15);
      EXPECT_EQ(g(i, j), g(j, i));
    }
  EXPECT_TRUE(g.diagonal().isOnes(0.0));
}

TEST(PairwiseSimilarity, UnchangedByRotatingTheBatch) {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    const FeatureBatch b(random_matrix(6, 4, rng));
    const RotationMatrix r = random_rotation(4, rng);
    EXPECT_LT((pairwise_similarity(rotate_rows(b, r)).entries() - pairwise_similarity(b).entries()).cwiseAbs().maxCoeff(),
              1e-10);
  }
}

TEST(SimilarityGraph, ValidatesInvariants) {
  Matrix g = Matrix::Identity(2, 2);
  g(0, 1) = 0.5;
  EXPECT_THROW(SimilarityGraph{g}, InvalidInputError);  // asymmetric
  g(1, 0) = 0.5;
  g(0, 0) = 0.9;
  EXPECT_THROW(SimilarityGraph{g}, InvalidInputError);  // diagonal
  EXPECT_THROW(SimilarityGraph{Matrix::Identity(2, 3)}, ShapeError);
}

TEST(InstanceLoss, SingleRowIsExactlyZero) {
  Rng rng(4);
  const FeatureBatch s(random_matrix(1, 3, rng)), t(random_matrix(1, 3, rng));
  const SkewParamMatrix p(random_matrix(3, 3, rng));
  EXPECT_EQ(instance_alignment_loss(s, t, p, {}), 0.0);
  const auto g = instance_alignment_grad(s, t, p, {});
  EXPECT_TRUE(g.d_target.isZero(0.0));
  EXPECT_TRUE(g.d_param.isZero(0.0));
}

TEST(InstanceLoss, TwoOrthogonalUnitRowsAtUnitTemperature) {
  const FeatureBatch b(Matrix::Identity(2, 2));
  const double loss = instance_alignment_loss(b, b, SkewParamMatrix::zero(2), InstanceLossConfig{1.0});
  const double expected = 2.0 * -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(loss, expected, 1e-15);
  EXPECT_NEAR(loss, 0.62652, 1e-5);
}

TEST(InstanceLoss, MatchesNaiveFormula) {
  Rng rng(5);
  for (double tau : {0.07, 0.5, 2.0}) {
    const Matrix s = random_matrix(6, 4, rng), t = random_matrix(6, 4, rng), p = random_matrix(4, 4, rng);
    const double got = instance_alignment_loss(FeatureBatch(s), FeatureBatch(t), SkewParamMatrix(p), {tau});
    const double want = naive_loss(s, t, rotation_from_param(SkewParamMatrix(p)).matrix(), tau);
    EXPECT_NEAR(got, want, 1e-10 * std::max(1.0, std::abs(want))) << "tau=" << tau;
  }
}

TEST(InstanceLoss, SymmetricShiftOfParamDoesNotChangeLoss) {
  Rng rng(6);
  const FeatureBatch s(random_matrix(5, 3, rng)), t(random_matrix(5, 3, rng));
  const Matrix p = random_matrix(3, 3, rng), a = random_matrix(3, 3, rng);
  EXPECT_EQ(instance_alignment_loss(s, t, SkewParamMatrix(p), {}),
            instance_alignment_loss(s, t, SkewParamMatrix(p + a + a.transpose()), {}));
}

TEST(InstanceLoss, NonNegativeAndFinite) {
  Rng rng(7);
  for (int k = 0; k < 100; ++k) {
    const Index n = 1 + static_cast<Index>(rng.below(8));
    const FeatureBatch s(random_matrix(n, 3, rng)), t(random_matrix(n, 3, rng));
    const double tau = 0.01 + rng.uniform();
    const double loss = instance_alignment_loss(s, t, SkewParamMatrix(random_matrix(3, 3, rng)), {tau});
    EXPECT_GE(loss, 0.0);
    EXPECT_TRUE(std::isfinite(loss));
  }
}

TEST(InstanceLoss, TinyTemperatureStaysFinite) {
  Rng rng(8);
  const FeatureBatch s(random_matrix(8, 4, rng)), t(random_matrix(8, 4, rng));
  EXPECT_TRUE(std::isfinite(instance_alignment_loss(s, t, SkewParamMatrix::zero(4), {1e-4})));
}

TEST(InstanceLoss, PermutationEquivariant) {
  Rng rng(9);
  const Matrix s = random_matrix(6, 3, rng), t = random_matrix(6, 3, rng);
  const SkewParamMatrix p(random_matrix(3, 3, rng));
  std::vector<Index> perm{3, 0, 5, 1, 4, 2};
  Matrix sp(6, 3), tp(6, 3);
  for (Index i = 0; i < 6; ++i) {
    sp.row(i) = s.row(perm[static_cast<std::size_t>(i)]);
    tp.row(i) = t.row(perm[static_cast<std::size_t>(i)]);
  }
  EXPECT_NEAR(instance_alignment_loss(FeatureBatch(s), FeatureBatch(t), p, {}),
              instance_alignment_loss(FeatureBatch(sp), FeatureBatch(tp), p, {}), 1e-12);
}

TEST(InstanceLoss, RotatingBothSidesEqualsRotatingTargetByRelativeRotation) {
  Rng rng(10);
  for (int k = 0; k < 30; ++k) {
    const FeatureBatch s(random_matrix(5, 4, rng)), t(random_matrix(5, 4, rng));
    const RotationMatrix r1 = random_rotation(4, rng), r2 = random_rotation(4, rng);
    const InstanceLossConfig cfg{0.3};
    const double both = instance_alignment_with_rotation(rotate_rows(s, r1), rotate_rows(t, r2),
                                                         RotationMatrix::identity(4), cfg).loss;
    const double single = instance_alignment_with_rotation(s, t, RotationMatrix(r1.matrix().transpose() * r2.matrix()), cfg).loss;
    EXPECT_NEAR(both, single, 1e-10);
  }
}

TEST(InstanceLoss, ShapeMismatchThrows) {
  Rng rng(11);
  const FeatureBatch s(random_matrix(3, 2, rng)), t(random_matrix(4, 2, rng)), u(random_matrix(3, 3, rng));
  EXPECT_THROW(instance_alignment_loss(s, t, SkewParamMatrix::zero(2), {}), ShapeError);
  EXPECT_THROW(instance_alignment_loss(s, u, SkewParamMatrix::zero(2), {}), ShapeError);
  EXPECT_THROW(instance_alignment_loss(s, s, SkewParamMatrix::zero(3), {}), ShapeError);
  EXPECT_THROW(instance_alignment_loss(s, s, SkewParamMatrix::zero(2), {0.0}), InvalidInputError);
}

TEST(InstanceLossGrad, MatchesFiniteDifferences) {
  Rng rng(12);
  const Index n = 4, d = 3;
  for (int k = 0; k < 25; ++k) {
    const FeatureBatch s(random_matrix(n, d, rng));
    const Matrix t = random_matrix(n, d, rng), p = random_matrix(d, d, rng, 0.5);
    const InstanceLossConfig cfg{0.5};
    auto f = [&](const Vector& x) {
      return instance_alignment_loss(s, FeatureBatch(x.head(n * d).reshaped(n, d)),
                                     SkewParamMatrix(x.tail(d * d).reshaped(d, d)), cfg);
    };
    const auto g = instance_alignment_grad(s, FeatureBatch(t), SkewParamMatrix(p), cfg);
    Vector x(n * d + d * d), a(n * d + d * d);
    x << t.reshaped(), p.reshaped();
    a << g.d_target.reshaped(), g.d_param.reshaped();
    const auto report = gradcheck::check(f, a, x);
    EXPECT_TRUE(report.passed) << "instance " << k << " max " << report.max_relative_error;
  }
}

TEST(InstanceLossGrad, AlignedConfigurationHasSmallerGradientThanMisaligned) {
  // Mutually orthogonal rows, target already aligned by R = I, small tau.
  const Matrix s = Matrix::Identity(4, 4);
  const InstanceLossConfig cfg{0.05};
  const auto aligned = instance_alignment_grad(FeatureBatch(s), FeatureBatch(s), SkewParamMatrix::zero(4), cfg);
  Matrix shuffled = s;
  shuffled.row(0).swap(shuffled.row(1));
  shuffled.row(0) += 0.3 * s.row(2);
  shuffled.row(1) += 0.3 * s.row(3);
  const auto misaligned =
      instance_alignment_grad(FeatureBatch(s), FeatureBatch(shuffled), SkewParamMatrix::zero(4), cfg);
  const double n_aligned = std::hypot(aligned.d_target.norm(), aligned.d_param.norm());
  const double n_mis = std::hypot(misaligned.d_target.norm(), misaligned.d_param.norm());
  EXPECT_LT(n_aligned, n_mis);
}
