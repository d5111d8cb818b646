#pragma once

// Two-layer tanh MLPs standing in for the generator and discriminator, and
// the adversarial losses with hand-written backprop.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "efr/error.hpp"
#include "efr/lie_rotation.hpp"
#include "efr/rng.hpp"

namespace efr {

/// x -> W2 tanh(W1 x + b1) + b2, parameters stored flat as
/// [W1 (col-major) | b1 | W2 (col-major) | b2]. Batches are row-per-sample.
class TwoLayerMlp {
 public:
  struct Cache {
    Matrix input;
    Matrix hidden;  // tanh activations, B x hidden_dim
    Matrix output;
  };

  TwoLayerMlp(Index input_dim, Index hidden_dim, Index output_dim)
      : in_(input_dim), hid_(hidden_dim), out_(output_dim), params_(Vector::Zero(param_count(input_dim, hidden_dim, output_dim))) {
    if (in_ < 1 || hid_ < 1 || out_ < 1) throw ShapeError("layer sizes must be positive");
  }

  TwoLayerMlp(Index input_dim, Index hidden_dim, Index output_dim, Vector params)
      : TwoLayerMlp(input_dim, hidden_dim, output_dim) {
    set_params(std::move(params));
  }

  static Index param_count(Index in, Index hid, Index out) { return hid * in + hid + out * hid + out; }

  /// Weights ~ N(0, 1/fan_in), zero biases.
  void init_random(Rng& rng) {
    params_.setZero();
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in_));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hid_));
    for (double& v : w1().reshaped()) v = s1 * rng.normal();
    for (double& v : w2().reshaped()) v = s2 * rng.normal();
  }

  Index input_dim() const { return in_; }
  Index hidden_dim() const { return hid_; }
  Index output_dim() const { return out_; }

  const Vector& params() const { return params_; }
  void set_params(Vector p) {
    if (p.size() != params_.size()) throw ShapeError("parameter vector has wrong length");
    if (!p.allFinite()) throw InvalidInputError("non-finite network parameters");
    params_ = std::move(p);
  }

  Eigen::Map<Matrix> w1() { return {params_.data(), hid_, in_}; }
  Eigen::Map<Vector> b1() { return {params_.data() + hid_ * in_, hid_}; }
  Eigen::Map<Matrix> w2() { return {params_.data() + hid_ * in_ + hid_, out_, hid_}; }
  Eigen::Map<Vector> b2() { return {params_.data() + hid_ * in_ + hid_ + out_ * hid_, out_}; }
  Eigen::Map<const Matrix> w1() const { return {params_.data(), hid_, in_}; }
  Eigen::Map<const Vector> b1() const { return {params_.data() + hid_ * in_, hid_}; }
  Eigen::Map<const Matrix> w2() const { return {params_.data() + hid_ * in_ + hid_, out_, hid_}; }
  Eigen::Map<const Vector> b2() const { return {params_.data() + hid_ * in_ + hid_ + out_ * hid_, out_}; }

  Cache forward(const Matrix& x) const {
    if (x.cols() != in_) throw ShapeError("input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(in_));
    Cache c;
    c.input = x;
    c.hidden = ((x * w1().transpose()).rowwise() + b1().transpose()).array().tanh().matrix();
    c.output = (c.hidden * w2().transpose()).rowwise() + b2().transpose();
    return c;
  }

  struct Backward {
    Vector d_params;
    Matrix d_input;
  };

  /// Backprop of d_output (B x out) plus an optional extra gradient arriving
  /// directly at the hidden activations (B x hidden).
  Backward backward(const Cache& c, const Matrix& d_output, const Matrix* d_hidden_extra = nullptr) const {
    Backward b;
    b.d_params = Vector::Zero(params_.size());
    Eigen::Map<Matrix> dw1(b.d_params.data(), hid_, in_);
    Eigen::Map<Vector> db1(b.d_params.data() + hid_ * in_, hid_);
    Eigen::Map<Matrix> dw2(b.d_params.data() + hid_ * in_ + hid_, out_, hid_);
    Eigen::Map<Vector> db2(b.d_params.data() + hid_ * in_ + hid_ + out_ * hid_, out_);

    dw2 = d_output.transpose() * c.hidden;
    db2 = d_output.colwise().sum().transpose();
    Matrix d_hidden = d_output * w2();
    if (d_hidden_extra) d_hidden += *d_hidden_extra;
    const Matrix d_pre = d_hidden.cwiseProduct((1.0 - c.hidden.array().square()).matrix());
    dw1 = d_pre.transpose() * c.input;
    db1 = d_pre.colwise().sum().transpose();
    b.d_input = d_pre * w1();
    return b;
  }

  friend bool operator==(const TwoLayerMlp& a, const TwoLayerMlp& b) {
    return a.in_ == b.in_ && a.hid_ == b.hid_ && a.out_ == b.out_ && a.params_ == b.params_;
  }

 private:
  Index in_, hid_, out_;
  Vector params_;
};

struct NetworkSizes {
  Index noise_dim = 8;
  Index feature_dim = 16;  // hidden layer, the rotated feature space
  Index sample_dim = 2;
  Index disc_hidden = 32;
};

/// Noise z (k) -> hidden features (d) -> sample (m).
struct ToyGenerator {
  TwoLayerMlp net;

  explicit ToyGenerator(const NetworkSizes& s = {}) : net(s.noise_dim, s.feature_dim, s.sample_dim) {}
  explicit ToyGenerator(TwoLayerMlp n) : net(std::move(n)) {}

  Index feature_dim() const { return net.hidden_dim(); }
  Matrix sample(const Matrix& noise) const { return net.forward(noise).output; }
  friend bool operator==(const ToyGenerator&, const ToyGenerator&) = default;
};

/// Sample (m) -> hidden (h) -> logit.
struct ToyDiscriminator {
  TwoLayerMlp net;

  explicit ToyDiscriminator(const NetworkSizes& s = {}) : net(s.sample_dim, s.disc_hidden, 1) {}
  explicit ToyDiscriminator(TwoLayerMlp n) : net(std::move(n)) {
    if (net.output_dim() != 1) throw ShapeError("discriminator must output one logit");
  }

  Vector probability(const Matrix& x) const {
    return net.forward(x).output.col(0).unaryExpr([](double l) { return 1.0 / (1.0 + std::exp(-l)); });
  }
  friend bool operator==(const ToyDiscriminator&, const ToyDiscriminator&) = default;
};

inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.reshaped()) v = rng.normal();
  return m;
}

enum class GanLossForm {
  /// D: -log D(x) - log(1 - D(G(z))); G: -log D(G(z)).
  NonSaturating,
  /// D: log(1 - D(x)) + log D(G(z)) exactly as printed in the source
  /// formulation; G unchanged.
  Literal,
};

inline constexpr double kProbClamp = 1e-7;

struct GanLosses {
  double loss_g = 0.0;
  double loss_d = 0.0;
};

/// Loss values plus the gradient of each loss with respect to both players.
struct GanGradients {
  GanLosses losses;
  Vector g_of_loss_g;  // d loss_g / d generator
  Vector d_of_loss_g;  // d loss_g / d discriminator
  Vector g_of_loss_d;
  Vector d_of_loss_d;
  TwoLayerMlp::Cache gen_cache;  // for callers that add hidden-feature terms
  Matrix d_fake_of_loss_g;       // d loss_g / d G(z)
  Matrix d_fake_of_loss_d;
};

namespace detail {

inline double sigmoid(double l) { return 1.0 / (1.0 + std::exp(-l)); }

/// Clamped probability and d p_clamped / d logit.
inline std::pair<double, double> clamped_prob(double logit) {
  const double p = sigmoid(logit);
  if (p < kProbClamp) return {kProbClamp, 0.0};
  if (p > 1.0 - kProbClamp) return {1.0 - kProbClamp, 0.0};
  return {p, p * (1.0 - p)};
}

}  // namespace detail

inline GanGradients gan_forward_backward(const ToyGenerator& gen, const ToyDiscriminator& disc,
                                         const Matrix& real, const Matrix& noise,
                                         GanLossForm form = GanLossForm::NonSaturating) {
  if (real.cols() != gen.net.output_dim() || real.cols() != disc.net.input_dim())
    throw ShapeError("real samples do not match network dimensions");
  if (real.rows() < 1 || noise.rows() < 1) throw ShapeError("empty batch");
  GanGradients out;
  out.gen_cache = gen.net.forward(noise);
  const Matrix& fake = out.gen_cache.output;
  const auto real_cache = disc.net.forward(real);
  const auto fake_cache = disc.net.forward(fake);
  const double inv_real = 1.0 / static_cast<double>(real.rows());
  const double inv_fake = 1.0 / static_cast<double>(fake.rows());

  Matrix dlogit_g_fake(fake.rows(), 1);
  Matrix dlogit_d_fake(fake.rows(), 1);
  Matrix dlogit_d_real(real.rows(), 1);
  for (Index i = 0; i < fake.rows(); ++i) {
    const auto [p, dp] = detail::clamped_prob(fake_cache.output(i, 0));
    out.losses.loss_g -= std::log(p) * inv_fake;
    dlogit_g_fake(i, 0) = -dp / p * inv_fake;
    if (form == GanLossForm::NonSaturating) {
      out.losses.loss_d -= std::log(1.0 - p) * inv_fake;
      dlogit_d_fake(i, 0) = dp / (1.0 - p) * inv_fake;
    } else {
      out.losses.loss_d += std::log(p) * inv_fake;
      dlogit_d_fake(i, 0) = dp / p * inv_fake;
    }
  }
  for (Index i = 0; i < real.rows(); ++i) {
    const auto [p, dp] = detail::clamped_prob(real_cache.output(i, 0));
    if (form == GanLossForm::NonSaturating) {
      out.losses.loss_d -= std::log(p) * inv_real;
      dlogit_d_real(i, 0) = -dp / p * inv_real;
    } else {
      out.losses.loss_d += std::log(1.0 - p) * inv_real;
      dlogit_d_real(i, 0) = -dp / (1.0 - p) * inv_real;
    }
  }

  const auto bg_fake = disc.net.backward(fake_cache, dlogit_g_fake);
  out.d_of_loss_g = bg_fake.d_params;
  out.d_fake_of_loss_g = bg_fake.d_input;
  out.g_of_loss_g = gen.net.backward(out.gen_cache, out.d_fake_of_loss_g).d_params;

  const auto bd_fake = disc.net.backward(fake_cache, dlogit_d_fake);
  const auto bd_real = disc.net.backward(real_cache, dlogit_d_real);
  out.d_of_loss_d = bd_fake.d_params + bd_real.d_params;
  out.d_fake_of_loss_d = bd_fake.d_input;
  out.g_of_loss_d = gen.net.backward(out.gen_cache, out.d_fake_of_loss_d).d_params;
  return out;
}

inline GanLosses gan_losses(const ToyGenerator& gen, const ToyDiscriminator& disc, const Matrix& real,
                            const Matrix& noise, GanLossForm form = GanLossForm::NonSaturating) {
  return gan_forward_backward(gen, disc, real, noise, form).losses;
}

}  // namespace efr
