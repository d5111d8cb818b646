#pragma once

// Synthetic 2D distributions: the source ring and controlled target shifts.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "efr/lie_rotation.hpp"
#include "efr/rng.hpp"

namespace efr {

struct Preset {
  std::string name;
  std::string description;
  /// 2x2 linear map and offset applied to ring samples.
  Eigen::Matrix2d transform = Eigen::Matrix2d::Identity();
  Eigen::Vector2d offset = Eigen::Vector2d::Zero();
  /// Pretraining quality gate on the Frechet Gaussian distance.
  double quality_gate = 0.5;

  static constexpr int kComponents = 8;
  static constexpr double kRadius = 2.0;
  /// Components are elongated along x so that a rotation of the whole
  /// mixture is visible even though the ring itself is 8-fold symmetric.
  static constexpr double kSigmaMajor = 0.3;
  static constexpr double kSigmaMinor = 0.08;

  Matrix sample(Index n, Rng& rng) const {
    Matrix out(n, 2);
    for (Index i = 0; i < n; ++i) {
      const auto c = static_cast<int>(rng.below(kComponents));
      const double angle = 2.0 * std::numbers::pi * c / kComponents;
      Eigen::Vector2d p(kRadius * std::cos(angle) + kSigmaMajor * rng.normal(),
                        kRadius * std::sin(angle) + kSigmaMinor * rng.normal());
      out.row(i) = (transform * p + offset).transpose();
    }
    return out;
  }
};

inline const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = [] {
    const double q = std::numbers::pi / 4.0;
    Eigen::Matrix2d rot;
    rot << std::cos(q), -std::sin(q), std::sin(q), std::cos(q);
    std::vector<Preset> p;
    p.push_back({"gauss2d-ring", "8-component Gaussian mixture on a ring of radius 2 (source domain)",
                 Eigen::Matrix2d::Identity(), Eigen::Vector2d::Zero(), 0.5});
    p.push_back({"rotated-mixture", "source ring rotated by 45 degrees", rot, Eigen::Vector2d::Zero(), 0.5});
    p.push_back({"scaled-mixture", "source ring scaled by 1.5", 1.5 * Eigen::Matrix2d::Identity(),
                 Eigen::Vector2d::Zero(), 0.5});
    p.push_back({"shifted-mixture", "source ring shifted by (1, 0.5)", Eigen::Matrix2d::Identity(),
                 Eigen::Vector2d(1.0, 0.5), 0.5});
    return p;
  }();
  return all;
}

inline std::optional<Preset> find_preset(std::string_view name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  return std::nullopt;
}

inline std::string preset_names() {
  std::string s;
  for (const auto& p : presets()) {
    if (!s.empty()) s += ", ";
    s += p.name;
  }
  return s;
}

}  // namespace efr
