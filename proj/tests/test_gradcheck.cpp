#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "efr/gradcheck.hpp"
#include "efr/gradcheck_suites.hpp"

using namespace efr;
using gradcheck::Vector;

TEST(FiniteDiff, ConstantGivesZero) {
  const Vector g = gradcheck::finite_diff([](const Vector&) { return 3.0; }, Vector::Ones(4));
  EXPECT_TRUE(g.isZero(0.0));
}

TEST(FiniteDiff, LinearIsExactUpToRoundoff) {
  Vector a(3);
  a << 1.5, -2.0, 0.25;
  const Vector g = gradcheck::finite_diff([&](const Vector& x) { return a.dot(x); }, Vector::Zero(3));
  EXPECT_LT((g - a).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(FiniteDiff, QuadraticHasNoTruncationError) {
  Vector x(2);
  x << 0.7, -1.3;
  const Vector g = gradcheck::finite_diff([](const Vector& v) { return v.squaredNorm(); }, x);
  EXPECT_LT((g - 2.0 * x).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(FiniteDiff, NonFiniteValueNamesTheCoordinate) {
  auto f = [](const Vector& x) { return x(2) > 0.0 ? std::numeric_limits<double>::quiet_NaN() : 0.0; };
  try {
    gradcheck::finite_diff(f, Vector::Zero(4));
    FAIL() << "expected EvaluationError";
  } catch (const EvaluationError& e) {
    EXPECT_EQ(e.coordinate(), 2);
  }
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  EXPECT_THROW(gradcheck::finite_diff([](const Vector&) { return 0.0; }, Vector::Zero(1), 0.0), InvalidInputError);
}

TEST(Check, CorrectGradientPasses) {
  auto f = [](const Vector& x) { return std::sin(x(0)) * std::exp(x(1)); };
  Vector x(2);
  x << 0.4, -0.2;
  Vector g(2);
  g << std::cos(x(0)) * std::exp(x(1)), std::sin(x(0)) * std::exp(x(1));
  const auto r = gradcheck::check(f, g, x);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.checked, 2);
}

TEST(Check, NegatedCoordinateFails) {
  auto f = [](const Vector& x) { return x.squaredNorm(); };
  Vector x(3);
  x << 1.0, 2.0, 3.0;
  Vector g = 2.0 * x;
  g(1) = -g(1);
  const auto r = gradcheck::check(f, g, x);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_index, 1);
  EXPECT_NEAR(r.max_relative_error, 1.0, 1e-6);
}

TEST(Check, SizeMismatchThrows) {
  EXPECT_THROW(gradcheck::check([](const Vector&) { return 0.0; }, Vector::Zero(2), Vector::Zero(3)), ShapeError);
}

TEST(Suites, AnalyticSuitesPassOnASmallSample) {
  gradcheck::SuiteOptions o;
  o.instances = 10;
  for (const char* target : {"ins", "dis", "rotation"}) {
    const auto reports = gradcheck::run_suites(target, o);
    ASSERT_EQ(reports.size(), 1u);
    EXPECT_TRUE(reports[0].passed()) << target << " max " << reports[0].max_relative_error;
    EXPECT_EQ(reports[0].instances, 10);
  }
}

TEST(Suites, SignFlipIsDetected) {
  gradcheck::SuiteOptions o;
  o.instances = 3;
  o.flip_sign = true;
  for (const auto& r : gradcheck::run_suites("all", o)) {
    EXPECT_FALSE(r.passed()) << r.target;
    EXPECT_EQ(r.failures, 3) << r.target;
  }
}

TEST(Suites, UnknownTargetThrows) {
  EXPECT_THROW(gradcheck::run_suites("bogus", {}), InvalidInputError);
}

TEST(Suites, AllRunsEveryTarget) {
  gradcheck::SuiteOptions o;
  o.instances = 1;
  const auto reports = gradcheck::run_suites("all", o);
  ASSERT_EQ(reports.size(), gradcheck::suite_names().size());
  for (std::size_t i = 0; i < reports.size(); ++i) EXPECT_EQ(reports[i].target, gradcheck::suite_names()[i]);
}
