#pragma once

// Randomized finite-difference suites for every hand-written gradient.

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "efr/adaptation.hpp"
#include "efr/align_losses.hpp"
#include "efr/gradcheck.hpp"
#include "efr/lie_rotation.hpp"
#include "efr/nets.hpp"
#include "efr/ot_solver.hpp"
#include "efr/rng.hpp"

namespace efr::gradcheck {

struct SuiteOptions {
  int instances = 100;
  double step = kDefaultStep;
  double rtol = kDefaultRtol;
  std::uint64_t seed = 0;
  /// Negates every analytic gradient; a correct build must then fail.
  bool flip_sign = false;
};

struct SuiteReport {
  std::string target;
  int instances = 0;
  int failures = 0;
  double max_relative_error = 0.0;
  int worst_instance = -1;
  Index checked = 0;
  bool passed() const { return instances > 0 && failures == 0; }
};

namespace detail {

using efr::Matrix;

inline Vector flat(const Matrix& m) { return m.reshaped(); }

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.reshaped()) v = scale * rng.normal();
  return m;
}

inline void record(SuiteReport& suite, int instance, const GradientReport& r) {
  ++suite.instances;
  suite.checked += r.checked;
  if (!r.passed) ++suite.failures;
  if (suite.worst_instance < 0 || r.max_relative_error > suite.max_relative_error) {
    suite.max_relative_error = r.max_relative_error;
    suite.worst_instance = instance;
  }
}

inline Vector maybe_flip(Vector g, const SuiteOptions& o) { return o.flip_sign ? Vector(-g) : g; }

}  // namespace detail

/// Instance alignment loss w.r.t. target features and the rotation parameter.
inline SuiteReport check_instance_alignment(const SuiteOptions& o) {
  SuiteReport suite{"ins"};
  const Rng root(o.seed, 0x494e53ULL);
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = root.split(static_cast<std::uint64_t>(k));
    const Index n = 4, d = 3;
    const FeatureBatch src(detail::random_matrix(n, d, rng));
    const Matrix tgt = detail::random_matrix(n, d, rng);
    const Matrix param = detail::random_matrix(d, d, rng, 0.5);
    const InstanceLossConfig cfg{0.5};

    auto f = [&](const Vector& x) {
      return instance_alignment_loss(src, FeatureBatch(x.head(n * d).reshaped(n, d)),
                                     SkewParamMatrix(x.tail(d * d).reshaped(d, d)), cfg);
    };
    Vector x(n * d + d * d);
    x << detail::flat(tgt), detail::flat(param);
    const auto g = instance_alignment_grad(src, FeatureBatch(tgt), SkewParamMatrix(param), cfg);
    Vector analytic(x.size());
    analytic << detail::flat(g.d_target), detail::flat(g.d_param);
    detail::record(suite, k, check(f, detail::maybe_flip(analytic, o), x, o.step, o.rtol));
  }
  return suite;
}

/// Sliced GW loss with projections and coupling held fixed.
inline SuiteReport check_sliced_gw(const SuiteOptions& o) {
  SuiteReport suite{"dis"};
  const Rng root(o.seed, 0x444953ULL);
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = root.split(static_cast<std::uint64_t>(k));
    const Index n = 4, d = 3;
    const FeatureBatch src(detail::random_matrix(n, d, rng));
    const Matrix tgt = detail::random_matrix(n, d, rng);
    const Matrix param = detail::random_matrix(d, d, rng, 0.5);
    const ProjectionSet proj = sample_projections(5, d, rng.next_u64());
    CouplingSolverConfig solver;
    solver.restarts = 0;
    const CouplingMatrix coupling =
        solve_coupling(pairwise_similarity(src), pairwise_similarity(FeatureBatch(tgt)), solver).coupling;

    auto f = [&](const Vector& x) {
      return sliced_gw_loss(src, FeatureBatch(x.head(n * d).reshaped(n, d)),
                            SkewParamMatrix(x.tail(d * d).reshaped(d, d)), proj, coupling);
    };
    Vector x(n * d + d * d);
    x << detail::flat(tgt), detail::flat(param);
    const auto g = sliced_gw_grad(src, FeatureBatch(tgt), SkewParamMatrix(param), proj, coupling);
    Vector analytic(x.size());
    analytic << detail::flat(g.d_target), detail::flat(g.d_param);
    detail::record(suite, k, check(f, detail::maybe_flip(analytic, o), x, o.step, o.rtol));
  }
  return suite;
}

/// Small networks keep every coordinate's gradient well above the round-off
/// floor of central differences at h = 1e-6 (about 1e-10 for losses near 1).
inline constexpr NetworkSizes kSmallNets{3, 4, 2, 5};

/// Both adversarial losses w.r.t. both players' parameters, alternating the
/// two discriminator loss forms.
inline SuiteReport check_gan(const SuiteOptions& o, const NetworkSizes& sizes = kSmallNets) {
  SuiteReport suite{"gan"};
  const Rng root(o.seed, 0x47414eULL);
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = root.split(static_cast<std::uint64_t>(k));
    ToyGenerator gen(sizes);
    ToyDiscriminator disc(sizes);
    gen.net.init_random(rng);
    disc.net.init_random(rng);
    const Matrix real = standard_normal(4, sizes.sample_dim, rng);
    const Matrix noise = standard_normal(4, sizes.noise_dim, rng);
    const GanLossForm form = (k % 2 == 0) ? GanLossForm::NonSaturating : GanLossForm::Literal;
    const Index gn = gen.net.params().size();
    Vector x(gn + disc.net.params().size());
    x << gen.net.params(), disc.net.params();

    const GanGradients grads = gan_forward_backward(gen, disc, real, noise, form);
    GradientReport merged;
    for (bool generator_loss : {true, false}) {
      auto f = [&](const Vector& p) {
        ToyGenerator g2 = gen;
        ToyDiscriminator d2 = disc;
        g2.net.set_params(p.head(gn));
        d2.net.set_params(p.tail(p.size() - gn));
        const GanLosses l = gan_losses(g2, d2, real, noise, form);
        return generator_loss ? l.loss_g : l.loss_d;
      };
      Vector analytic(x.size());
      if (generator_loss)
        analytic << grads.g_of_loss_g, grads.d_of_loss_g;
      else
        analytic << grads.g_of_loss_d, grads.d_of_loss_d;
      const GradientReport r = check(f, detail::maybe_flip(analytic, o), x, o.step, o.rtol);
      merged.checked += r.checked;
      merged.skipped += r.skipped;
      if (merged.worst_index < 0 || r.max_relative_error > merged.max_relative_error) {
        merged.max_relative_error = r.max_relative_error;
        merged.worst_index = r.worst_index;
      }
      merged.passed = merged.passed && r.passed;
    }
    detail::record(suite, k, merged);
  }
  return suite;
}

/// Chain rule through the exponential: f(P) = <G, exp(P - P^T)>.
inline SuiteReport check_rotation(const SuiteOptions& o) {
  SuiteReport suite{"rotation"};
  const Rng root(o.seed, 0x524f54ULL);
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = root.split(static_cast<std::uint64_t>(k));
    const Index d = 2 + static_cast<Index>(rng.below(5));
    const Matrix param = detail::random_matrix(d, d, rng, 0.7);
    const Matrix upstream = detail::random_matrix(d, d, rng);
    auto f = [&](const Vector& x) {
      return (upstream.cwiseProduct(rotation_from_param(SkewParamMatrix(x.reshaped(d, d))).matrix())).sum();
    };
    const Vector analytic = detail::flat(grad_through_rotation(SkewParamMatrix(param), upstream));
    detail::record(suite, k, check(f, detail::maybe_flip(analytic, o), detail::flat(param), o.step, o.rtol));
  }
  return suite;
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"ins", "dis", "gan", "rotation"};
  return names;
}

/// `target` is one of suite_names() or "all".
inline std::vector<SuiteReport> run_suites(const std::string& target, const SuiteOptions& o) {
  static const std::map<std::string, std::function<SuiteReport(const SuiteOptions&)>> suites = {
      {"ins", check_instance_alignment},
      {"dis", check_sliced_gw},
      {"gan", [](const SuiteOptions& opts) { return check_gan(opts); }},
      {"rotation", check_rotation},
  };
  std::vector<SuiteReport> out;
  if (target == "all") {
    for (const auto& name : suite_names()) out.push_back(suites.at(name)(o));
    return out;
  }
  const auto it = suites.find(target);
  if (it == suites.end()) throw InvalidInputError("unknown gradcheck target '" + target + "'");
  out.push_back(it->second(o));
  return out;
}

}  // namespace efr::gradcheck
