#pragma once

// Central finite differences as an independent oracle for analytic gradients.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>

#include "efr/error.hpp"

namespace efr::gradcheck {

using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using ScalarFunction = std::function<double(const Vector&)>;

inline constexpr double kDefaultStep = 1e-6;
inline constexpr double kDefaultRtol = 1e-5;
inline constexpr double kDenominatorFloor = 1e-12;
/// Coordinates where both gradients are below this magnitude are skipped.
inline constexpr double kSkipMagnitude = 1e-10;

struct GradientReport {
  double max_relative_error = 0.0;
  Index worst_index = -1;
  bool passed = true;
  double step_size = kDefaultStep;
  double tolerance = kDefaultRtol;
  Index checked = 0;
  Index skipped = 0;
};

inline Vector finite_diff(const ScalarFunction& f, const Vector& x, double h = kDefaultStep) {
  if (!(h > 0.0)) throw InvalidInputError("finite difference step must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double fp = f(probe);
    probe(i) = x(i) - h;
    const double fm = f(probe);
    probe(i) = x(i);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw EvaluationError("non-finite function value probing coordinate " + std::to_string(i), i);
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(kDenominatorFloor, std::abs(analytic) + std::abs(numeric));
}

/// Compares an analytic gradient against central differences coordinate by
/// coordinate and reports the worst relative error.
inline GradientReport check(const ScalarFunction& f, const Vector& analytic, const Vector& x,
                            double h = kDefaultStep, double rtol = kDefaultRtol) {
  if (analytic.size() != x.size()) throw ShapeError("analytic gradient size does not match x");
  const Vector numeric = finite_diff(f, x, h);
  GradientReport report;
  report.step_size = h;
  report.tolerance = rtol;
  for (Index i = 0; i < x.size(); ++i) {
    if (std::abs(analytic(i)) < kSkipMagnitude && std::abs(numeric(i)) < kSkipMagnitude) {
      ++report.skipped;
      continue;
    }
    ++report.checked;
    const double err = relative_error(analytic(i), numeric(i));
    if (report.worst_index < 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_relative_error < rtol;
  return report;
}

}  // namespace efr::gradcheck
