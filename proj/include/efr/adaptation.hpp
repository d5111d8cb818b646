#pragma once

// Desk-scale few-shot adaptation: a frozen source generator, a trainable
// target generator and discriminator, a learnable feature rotation, and the
// combined adversarial + alignment + sliced-GW objective.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "efr/adam.hpp"
#include "efr/align_losses.hpp"
#include "efr/error.hpp"
#include "efr/lie_rotation.hpp"
#include "efr/metrics.hpp"
#include "efr/nets.hpp"
#include "efr/ot_solver.hpp"
#include "efr/presets.hpp"
#include "efr/rng.hpp"

namespace efr {

struct LossConfig {
  std::string preset = "rotated-mixture";
  double lambda1 = 0.6;
  double lambda2 = 0.4;
  double tau = 0.07;
  int t_slices = 16;
  double epsilon = 0.05;
  int outer_iters = 50;
  int inner_iters = 100;
  /// Perturbed solver starts per training step. The solver's own default is
  /// sized for one-off solves; here it runs every iteration.
  int coupling_restarts = 1;
  bool per_slice_coupling = false;
  int batch_size = 8;
  int iterations = 1000;
  double lr = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  std::uint64_t seed = 0;
  int n_shot = 10;
  bool rotate = true;
  GanLossForm gan_loss = GanLossForm::NonSaturating;

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why, key); };
    if (!(lambda1 >= 0.0)) fail("lambda1", "must be >= 0");
    if (!(lambda2 >= 0.0)) fail("lambda2", "must be >= 0");
    if (!(tau > 0.0)) fail("tau", "must be > 0");
    if (t_slices < 1) fail("t_slices", "must be >= 1");
    if (!(epsilon > 0.0)) fail("epsilon", "must be > 0");
    if (outer_iters < 0) fail("outer_iters", "must be >= 0");
    if (inner_iters < 1) fail("inner_iters", "must be >= 1");
    if (coupling_restarts < 0) fail("coupling_restarts", "must be >= 0");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (iterations < 0) fail("iterations", "must be >= 0");
    if (!(lr > 0.0)) fail("lr", "must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0, 1)");
    if (n_shot < 1) fail("n_shot", "must be >= 1");
    if (!find_preset(preset)) fail("preset", "unknown preset '" + preset + "'; available: " + preset_names());
  }

  AdamConfig adam() const { return {lr, beta1, beta2, 1e-8}; }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;

  CouplingSolverConfig solver(std::uint64_t solver_seed) const {
    CouplingSolverConfig c;
    c.epsilon = epsilon;
    c.outer_iters = outer_iters;
    c.inner_iters = inner_iters;
    c.restarts = coupling_restarts;
    c.seed = solver_seed;
    return c;
  }
};

/// Everything needed to resume training bit-exactly.
struct TrainState {
  ToyGenerator gen;
  ToyDiscriminator disc;
  Matrix rotation_param;
  AdamState adam_gen;  // generator parameters followed by vec(rotation_param)
  AdamState adam_disc;
  std::int64_t step = 0;
  Rng rng{0};

  static TrainState fresh(const NetworkSizes& sizes, std::uint64_t seed) {
    TrainState s{ToyGenerator(sizes), ToyDiscriminator(sizes), Matrix::Zero(sizes.feature_dim, sizes.feature_dim),
                 {}, {}, 0, Rng(seed)};
    Rng init = s.rng.split(0x494e4954ULL);
    s.gen.net.init_random(init);
    s.disc.net.init_random(init);
    s.reset_optimizers();
    return s;
  }

  void reset_optimizers() {
    adam_gen = AdamState::zeros(gen.net.params().size() + rotation_param.size());
    adam_disc = AdamState::zeros(disc.net.params().size());
  }

  SkewParamMatrix skew_param() const { return SkewParamMatrix(rotation_param); }

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

struct LossTerms {
  double loss_g = 0.0;
  double loss_d = 0.0;
  double loss_ins = 0.0;
  double loss_dis = 0.0;
};

/// Per-step random inputs. Projections and coupling are held constant when
/// differentiating.
struct StepInputs {
  Matrix real;
  Matrix noise;
  ProjectionSet projections;
  std::optional<CouplingMatrix> coupling;
  std::uint64_t solver_seed = 0;
};

struct TotalLoss {
  double total = 0.0;
  LossTerms terms;
  /// d(L_G + l1 L_ins + l2 L_dis)/d generator: what the generator step uses.
  Vector gen_player_grad;
  /// dL_D/d discriminator: what the discriminator step uses.
  Vector disc_player_grad;
  /// d(l1 L_ins + l2 L_dis)/d rotation parameter.
  Matrix rotation_grad;
  /// dL/d generator and dL/d discriminator for the full scalar L.
  Vector gen_full_grad;
  Vector disc_full_grad;
  std::optional<CouplingMatrix> coupling;
};

/// L = L_G + L_D + lambda1 L_ins + lambda2 L_dis with L_ins and L_dis
/// evaluated on the hidden features of the source and target generators fed
/// the same noise. The rotation acts on target features only.
inline TotalLoss total_loss(const TrainState& state, const ToyGenerator& source, const StepInputs& in,
                            const LossConfig& cfg) {
  if (source.feature_dim() != state.gen.feature_dim() || state.rotation_param.rows() != state.gen.feature_dim())
    throw ShapeError("source/target feature dimensions or rotation size disagree");
  GanGradients gan = gan_forward_backward(state.gen, state.disc, in.real, in.noise, cfg.gan_loss);

  TotalLoss out;
  out.terms.loss_g = gan.losses.loss_g;
  out.terms.loss_d = gan.losses.loss_d;

  const Index d = state.gen.feature_dim();
  const bool need_features = cfg.lambda1 != 0.0 || cfg.lambda2 != 0.0;
  Matrix d_hidden = Matrix::Zero(in.noise.rows(), d);
  out.rotation_grad = Matrix::Zero(d, d);
  if (need_features) {
    const FeatureBatch src(source.net.forward(in.noise).hidden);
    const FeatureBatch tgt(gan.gen_cache.hidden);
    const SkewParamMatrix param = state.skew_param();
    const RotationMatrix rotation = cfg.rotate ? rotation_from_param(param) : RotationMatrix::identity(d);

    const AlignmentGradient ins = instance_alignment_with_rotation(src, tgt, rotation, InstanceLossConfig{cfg.tau});
    SlicedGradient dis;
    if (cfg.per_slice_coupling) {
      dis = sliced_gw_per_slice_coupling(src, tgt, rotation, in.projections, cfg.solver(in.solver_seed));
    } else {
      if (!in.coupling) {
        out.coupling = solve_coupling(pairwise_similarity(src), pairwise_similarity(tgt), cfg.solver(in.solver_seed)).coupling;
      } else {
        out.coupling = in.coupling;
      }
      dis = sliced_gw_with_rotation(src, tgt, rotation, in.projections, *out.coupling);
    }
    out.terms.loss_ins = ins.loss;
    out.terms.loss_dis = dis.loss;
    d_hidden = cfg.lambda1 * ins.d_target + cfg.lambda2 * dis.d_target;
    if (cfg.rotate) {
      out.rotation_grad = grad_through_rotation(param, cfg.lambda1 * ins.d_rotation + cfg.lambda2 * dis.d_rotation);
    }
  }

  out.total = (out.terms.loss_g + out.terms.loss_d) + cfg.lambda1 * out.terms.loss_ins +
              cfg.lambda2 * out.terms.loss_dis;

  const Vector feature_grad = state.gen.net.backward(gan.gen_cache, Matrix::Zero(in.noise.rows(), gan.gen_cache.output.cols()), &d_hidden).d_params;
  out.gen_player_grad = gan.g_of_loss_g + feature_grad;
  out.gen_full_grad = out.gen_player_grad + gan.g_of_loss_d;
  out.disc_player_grad = gan.d_of_loss_d;
  out.disc_full_grad = gan.d_of_loss_d + gan.d_of_loss_g;
  return out;
}

struct MetricRow {
  std::int64_t step = 0;
  double loss_g = 0.0;
  double loss_d = 0.0;
  double loss_ins = 0.0;
  double loss_dis = 0.0;
  double ortho_residual = 0.0;
  double coupling_violation = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

inline constexpr const char* kMetricHeader =
    "step,loss_g,loss_d,loss_ins,loss_dis,ortho_residual,coupling_violation";

/// CSV with 17 significant digits.
inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << kMetricHeader << '\n';
  for (const auto& r : rows)
    os << r.step << ',' << r.loss_g << ',' << r.loss_d << ',' << r.loss_ins << ',' << r.loss_dis << ','
       << r.ortho_residual << ',' << r.coupling_violation << '\n';
  return os.str();
}

namespace detail {

inline Matrix draw_rows(const Matrix& pool, Index count, Rng& rng) {
  Matrix out(count, pool.cols());
  const auto n = static_cast<std::uint64_t>(pool.rows());
  if (static_cast<std::uint64_t>(count) <= n) {
    // partial Fisher-Yates
    std::vector<Index> idx(pool.rows());
    for (Index i = 0; i < pool.rows(); ++i) idx[static_cast<std::size_t>(i)] = i;
    for (Index i = 0; i < count; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(n - static_cast<std::uint64_t>(i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
      out.row(i) = pool.row(idx[static_cast<std::size_t>(i)]);
    }
  } else {
    for (Index i = 0; i < count; ++i) out.row(i) = pool.row(static_cast<Index>(rng.below(n)));
  }
  return out;
}

enum Stream : std::uint64_t { kNoise = 1, kReal = 2, kProjection = 3, kSolver = 4 };

inline StepInputs step_inputs(const Rng& root, std::int64_t step, const Matrix& real_pool, const LossConfig& cfg,
                              Index noise_dim, Index feature_dim) {
  const Rng it = root.split(static_cast<std::uint64_t>(step));
  Rng noise_rng = it.split(kNoise);
  Rng real_rng = it.split(kReal);
  Rng proj_rng = it.split(kProjection);
  Rng solver_rng = it.split(kSolver);
  return StepInputs{draw_rows(real_pool, cfg.batch_size, real_rng),
                    standard_normal(cfg.batch_size, noise_dim, noise_rng),
                    sample_projections(cfg.t_slices, feature_dim, proj_rng.next_u64()), std::nullopt,
                    solver_rng.next_u64()};
}

inline std::string describe(const LossTerms& t) {
  std::ostringstream os;
  os.precision(17);
  os << "loss_g=" << t.loss_g << " loss_d=" << t.loss_d << " loss_ins=" << t.loss_ins << " loss_dis=" << t.loss_dis;
  return os.str();
}

}  // namespace detail

struct AdaptationResult {
  std::vector<MetricRow> log;
  TrainState final_state;
};

inline constexpr double kLiveOrthoTol = 1e-9;

/// Few-shot adaptation from a source checkpoint. Each iteration takes one
/// discriminator step, then solves the coupling and takes one joint
/// generator + rotation step.
inline AdaptationResult run_adaptation(const TrainState& source, const Matrix& shots, const LossConfig& cfg) {
  cfg.validate();
  if (shots.rows() < 1 || shots.cols() != source.gen.net.output_dim())
    throw ShapeError("shots must be a non-empty matrix with one sample per row of dimension " +
                     std::to_string(source.gen.net.output_dim()));
  TrainState state = source;
  state.rotation_param.setZero();
  state.reset_optimizers();
  state.step = 0;
  state.rng = Rng(cfg.seed);

  const Index d = state.gen.feature_dim();
  const Index gen_size = state.gen.net.params().size();
  const AdamConfig adam = cfg.adam();
  AdaptationResult result;
  result.log.reserve(static_cast<std::size_t>(cfg.iterations));

  for (int it = 0; it < cfg.iterations; ++it) {
    const std::int64_t step = state.step + 1;
    StepInputs in = detail::step_inputs(state.rng, step, shots, cfg, state.gen.net.input_dim(), d);

    // discriminator
    const GanGradients dg = gan_forward_backward(state.gen, state.disc, in.real, in.noise, cfg.gan_loss);
    Vector disc_params = state.disc.net.params();
    adam_step(disc_params, dg.d_of_loss_d, state.adam_disc, adam);
    state.disc.net.set_params(std::move(disc_params));

    // generator + rotation
    const TotalLoss tl = total_loss(state, source.gen, in, cfg);
    if (!std::isfinite(tl.total)) {
      throw NonFiniteLossError("non-finite loss at step " + std::to_string(step) + ": " + detail::describe(tl.terms));
    }
    Vector joint(gen_size + d * d);
    joint << state.gen.net.params(), state.rotation_param.reshaped();
    Vector joint_grad(gen_size + d * d);
    joint_grad << tl.gen_player_grad, tl.rotation_grad.reshaped();
    adam_step(joint, joint_grad, state.adam_gen, adam);
    state.gen.net.set_params(joint.head(gen_size));
    state.rotation_param = joint.tail(d * d).reshaped(d, d);
    state.step = step;

    const double ortho = rotation_from_param(state.skew_param()).orthogonality_residual();
    if (ortho >= kLiveOrthoTol)
      throw std::logic_error("rotation left SO(d) at step " + std::to_string(step));
    result.log.push_back({step, tl.terms.loss_g, tl.terms.loss_d, tl.terms.loss_ins, tl.terms.loss_dis, ortho,
                          tl.coupling ? tl.coupling->marginal_violation() : 0.0});
  }
  result.final_state = std::move(state);
  return result;
}

struct PretrainConfig {
  std::uint64_t seed = 0;
  NetworkSizes sizes{};
  Index samples = 10000;
  /// The Gaussian-fit gate is satisfied by a blob with the right moments, so
  /// training always runs at least this long before the gate may stop it.
  int min_steps = 3000;
  int max_steps = 8000;
  int batch_size = 64;
  double lr = 0.002;
  double beta1 = 0.5;
  double beta2 = 0.99;
  int eval_every = 250;
  Index eval_samples = 5000;
};

struct PretrainResult {
  TrainState checkpoint;
  std::vector<MetricRow> log;
  double frechet = 0.0;
  bool gate_met = false;
};

inline Matrix generate(const ToyGenerator& gen, Index n, Rng& rng) {
  return gen.sample(standard_normal(n, gen.net.input_dim(), rng));
}

/// Trains a source GAN on abundant samples from `preset` until the Frechet
/// Gaussian distance over `eval_samples` drops below the preset's gate.
inline PretrainResult run_pretrain(const Preset& preset, const PretrainConfig& cfg) {
  TrainState state = TrainState::fresh(cfg.sizes, cfg.seed);
  Rng data_rng = state.rng.split(0x44415441ULL);
  const Matrix pool = preset.sample(cfg.samples, data_rng);
  const Matrix reference = pool.topRows(std::min(cfg.eval_samples, pool.rows()));
  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};

  PretrainResult out;
  auto evaluate = [&] {
    Rng eval_rng = state.rng.split(0x4556414cULL);
    return frechet_gaussian_distance(generate(state.gen, reference.rows(), eval_rng), reference);
  };
  out.frechet = evaluate();
  for (int step = 1; step <= cfg.max_steps && (step <= cfg.min_steps || !(out.frechet < preset.quality_gate)); ++step) {
    const Rng it = state.rng.split(static_cast<std::uint64_t>(step));
    Rng real_rng = it.split(detail::kReal);
    Rng noise_rng = it.split(detail::kNoise);
    const Matrix real = detail::draw_rows(pool, cfg.batch_size, real_rng);
    const Matrix noise = standard_normal(cfg.batch_size, cfg.sizes.noise_dim, noise_rng);

    const GanGradients dg = gan_forward_backward(state.gen, state.disc, real, noise);
    Vector dp = state.disc.net.params();
    adam_step(dp, dg.d_of_loss_d, state.adam_disc, adam);
    state.disc.net.set_params(std::move(dp));

    const GanGradients gg = gan_forward_backward(state.gen, state.disc, real, noise);
    Vector joint(state.gen.net.params().size() + state.rotation_param.size());
    joint << state.gen.net.params(), state.rotation_param.reshaped();
    Vector grad = Vector::Zero(joint.size());
    grad.head(gg.g_of_loss_g.size()) = gg.g_of_loss_g;
    adam_step(joint, grad, state.adam_gen, adam);
    state.gen.net.set_params(joint.head(gg.g_of_loss_g.size()));
    state.step = step;
    if (!std::isfinite(gg.losses.loss_g) || !std::isfinite(gg.losses.loss_d))
      throw NonFiniteLossError("non-finite loss during pretraining at step " + std::to_string(step));
    out.log.push_back({step, gg.losses.loss_g, gg.losses.loss_d, 0.0, 0.0, 0.0, 0.0});
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) out.frechet = evaluate();
  }
  out.gate_met = out.frechet < preset.quality_gate;
  out.checkpoint = std::move(state);
  return out;
}

struct EvalConfig {
  int batches = 2;
  int batch_size = 2000;
  int t_slices = 64;
  std::uint64_t seed = 0;
};

namespace detail {

/// 1D GW cost between two equal-size sorted samples under the monotone or
/// anti-monotone matching, with c(a, b) = |a - b| and uniform weights.
/// With u = a - matched(b) the pair sum collapses to 2 (mean(u^2) - mean(u)^2).
inline double sorted_matching_gw(const std::vector<double>& a, const std::vector<double>& b, bool reversed) {
  const std::size_t n = a.size();
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double matched = reversed ? -b[n - 1 - i] : b[i];
    const double u = a[i] - matched;
    sum += u;
    sum_sq += u * u;
  }
  const double mean = sum / static_cast<double>(n);
  return 2.0 * std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean);
}

}  // namespace detail

/// Sliced GW score between samples (rows): for each projection the 1D GW
/// cost is taken as the better of the two sorted matchings, then averaged.
inline double sliced_gw_sorted(const Matrix& a, const Matrix& b, const ProjectionSet& proj) {
  if (a.rows() != b.rows() || a.rows() < 2) throw ShapeError("sample sets must have equal size >= 2");
  if (a.cols() != b.cols() || a.cols() != proj.dim()) throw ShapeError("sample and projection dimensions differ");
  double total = 0.0;
  std::vector<double> pa(static_cast<std::size_t>(a.rows())), pb(pa.size());
  for (Index t = 0; t < proj.count(); ++t) {
    Eigen::Map<Vector>(pa.data(), a.rows()) = a * proj.vectors().row(t).transpose();
    Eigen::Map<Vector>(pb.data(), b.rows()) = b * proj.vectors().row(t).transpose();
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    total += std::min(detail::sorted_matching_gw(pa, pb, false), detail::sorted_matching_gw(pa, pb, true));
  }
  return total / static_cast<double>(proj.count());
}

/// Held-out score of a generator against reference samples from the target
/// distribution, in sample space. Lower is better.
inline double eval_sliced_gw(const ToyGenerator& gen, const Matrix& reference, const EvalConfig& cfg) {
  if (reference.cols() != gen.net.output_dim()) throw ShapeError("reference dimension does not match generator");
  Rng root(cfg.seed, 0x53434f52ULL);
  double total = 0.0;
  for (int b = 0; b < cfg.batches; ++b) {
    const Rng it = root.split(static_cast<std::uint64_t>(b));
    Rng noise_rng = it.split(detail::kNoise);
    Rng ref_rng = it.split(detail::kReal);
    Rng proj_rng = it.split(detail::kProjection);
    const Matrix fake = generate(gen, cfg.batch_size, noise_rng);
    const Matrix real = detail::draw_rows(reference, cfg.batch_size, ref_rng);
    total += sliced_gw_sorted(real, fake, sample_projections(cfg.t_slices, reference.cols(), proj_rng.next_u64()));
  }
  return total / static_cast<double>(cfg.batches);
}

struct RecoveryConfig {
  int steps = 2000;
  int restarts = 4;
  double lr = 0.01;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double tau = 0.07;
  /// Cosine decay of the step size from lr to lr * final_lr_fraction.
  double final_lr_fraction = 1e-3;
  /// Restarts after the first draw their initial parameter from N(0, init_scale^2).
  double init_scale = 0.5;
  std::uint64_t seed = 0;
};

struct RecoveryResult {
  RotationMatrix recovered;
  double error = 0.0;  // ||R Q - I||_F for the selected restart
  std::size_t best_restart = 0;
  std::vector<std::vector<double>> loss_curves;
  std::vector<double> final_losses;
  std::vector<double> restart_errors;
};

/// Plants target features Q s_i and minimizes L_ins over the rotation alone.
/// The restart with the lowest final loss is selected; the loss is minimized
/// near R = Q^T.
inline RecoveryResult rotation_recovery_eval(const FeatureBatch& src, const RotationMatrix& planted,
                                             const RecoveryConfig& cfg) {
  if (planted.dim() != src.dim()) throw ShapeError("planted rotation dimension does not match features");
  if (cfg.restarts < 1 || cfg.steps < 0) throw InvalidInputError("need at least one restart");
  const Index d = src.dim();
  const FeatureBatch tgt = rotate_rows(src, planted);
  const InstanceLossConfig loss_cfg{cfg.tau};
  AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  Rng root(cfg.seed, 0x52454356ULL);

  RecoveryResult out{RotationMatrix::identity(d), 0.0, 0, {}, {}, {}};
  double best_loss = std::numeric_limits<double>::infinity();
  for (int r = 0; r < cfg.restarts; ++r) {
    Rng init = root.split(static_cast<std::uint64_t>(r));
    Vector param = Vector::Zero(d * d);
    if (r > 0)
      for (double& v : param) v = cfg.init_scale * init.normal();
    AdamState opt = AdamState::zeros(d * d);
    std::vector<double> curve;
    curve.reserve(static_cast<std::size_t>(cfg.steps));
    for (int s = 0; s < cfg.steps; ++s) {
      const SkewParamMatrix p(param.reshaped(d, d));
      const AlignmentGradient g = instance_alignment_with_rotation(src, tgt, rotation_from_param(p), loss_cfg);
      curve.push_back(g.loss);
      const double progress = cfg.steps > 1 ? static_cast<double>(s) / (cfg.steps - 1) : 1.0;
      adam.lr = cfg.lr * (cfg.final_lr_fraction +
                          (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
      const Vector grad = grad_through_rotation(p, g.d_rotation).reshaped();
      adam_step(param, grad, opt, adam);
    }
    const RotationMatrix rot = rotation_from_param(SkewParamMatrix(param.reshaped(d, d)));
    const double final_loss = instance_alignment_with_rotation(src, tgt, rot, loss_cfg).loss;
    const double err = (rot.matrix() * planted.matrix() - Matrix::Identity(d, d)).norm();
    out.loss_curves.push_back(std::move(curve));
    out.final_losses.push_back(final_loss);
    out.restart_errors.push_back(err);
    if (final_loss < best_loss) {
      best_loss = final_loss;
      out.best_restart = static_cast<std::size_t>(r);
      out.recovered = rot;
      out.error = err;
    }
  }
  return out;
}

}  // namespace efr
