#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>

#include "efr/error.hpp"

namespace efr {

struct AdamConfig {
  double lr = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double epsilon = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;

  static AdamState zeros(Eigen::Index n) { return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0}; }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update in place. With beta1 = 0 the first moment
/// is the current gradient.
inline void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  ++state.step;
  const double t = static_cast<double>(state.step);
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  params.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.epsilon);
}

}  // namespace efr
