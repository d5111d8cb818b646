#pragma once

// Gromov-Wasserstein objective over similarity graphs, an entropic
// mirror-descent coupling solver with uniform marginals, random projection
// sampling, and the sliced GW loss with analytic gradients.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "efr/align_losses.hpp"
#include "efr/error.hpp"
#include "efr/lie_rotation.hpp"
#include "efr/rng.hpp"

namespace efr {

/// Nonnegative N x N transport plan with every row and column summing to 1/N.
class CouplingMatrix {
 public:
  static constexpr double kMarginalTol = 1e-8;

  explicit CouplingMatrix(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols() || entries_.rows() < 1)
      throw ShapeError("coupling must be square and non-empty");
    if (!entries_.allFinite()) throw InvalidInputError("coupling has non-finite entries");
    if (entries_.minCoeff() < 0.0) throw InvalidInputError("coupling has negative entries");
    if (marginal_violation() > kMarginalTol)
      throw InvalidInputError("coupling marginals are not uniform: violation " +
                              std::to_string(marginal_violation()));
  }

  static CouplingMatrix diagonal(Index n) {
    return CouplingMatrix(Matrix(Vector::Constant(n, 1.0 / static_cast<double>(n)).asDiagonal()));
  }

  static CouplingMatrix uniform(Index n) {
    const double v = 1.0 / static_cast<double>(n * n);
    return CouplingMatrix(Matrix::Constant(n, n, v));
  }

  /// Scaled permutation: row i sends all its mass to column perm[i].
  static CouplingMatrix permutation(const std::vector<Index>& perm) {
    const Index n = static_cast<Index>(perm.size());
    Matrix m = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) m(i, perm[static_cast<std::size_t>(i)]) = 1.0 / static_cast<double>(n);
    return CouplingMatrix(std::move(m));
  }

  const Matrix& entries() const { return entries_; }
  Index size() const { return entries_.rows(); }

  /// max over rows and columns of |sum - 1/N|.
  double marginal_violation() const { return max_marginal_violation(entries_); }

  static double max_marginal_violation(const Matrix& m) {
    const double target = 1.0 / static_cast<double>(m.rows());
    const double rows = (m.rowwise().sum().array() - target).abs().maxCoeff();
    const double cols = (m.colwise().sum().array() - target).abs().maxCoeff();
    return std::max(rows, cols);
  }

 private:
  Matrix entries_;
};

/// T x d matrix of unit projection directions.
class ProjectionSet {
 public:
  ProjectionSet(Matrix vectors, std::uint64_t seed) : vectors_(std::move(vectors)), seed_(seed) {
    if (vectors_.rows() < 1 || vectors_.cols() < 1) throw ShapeError("projection set is empty");
    for (Index t = 0; t < vectors_.rows(); ++t) {
      if (std::abs(vectors_.row(t).norm() - 1.0) > 1e-12)
        throw InvalidInputError("projection " + std::to_string(t) + " is not a unit vector");
    }
  }

  const Matrix& vectors() const { return vectors_; }
  Index count() const { return vectors_.rows(); }
  Index dim() const { return vectors_.cols(); }
  std::uint64_t seed() const { return seed_; }

 private:
  Matrix vectors_;
  std::uint64_t seed_;
};

namespace detail {

inline void check_square_same(const Matrix& a, const Matrix& b, const Matrix& plan) {
  if (a.rows() != a.cols() || b.rows() != b.cols() || a.rows() != b.rows() ||
      plan.rows() != a.rows() || plan.cols() != a.rows())
    throw ShapeError("GW inputs must all be N x N with the same N");
}

/// C[i,k] = sum_{j,l} (a_ij - b_kl)^2 plan_jl, via the square expansion.
inline Matrix gw_pseudo_cost(const Matrix& a, const Matrix& b, const Matrix& plan) {
  const Vector p = plan.rowwise().sum();
  const Vector q = plan.colwise().sum().transpose();
  const Vector ca = a.cwiseAbs2() * p;
  const Vector cb = b.cwiseAbs2() * q;
  Matrix c = -2.0 * (a * plan * b.transpose());
  c.colwise() += ca;
  c.rowwise() += cb.transpose();
  return c;
}

/// sum_{i,j,k,l} (a_ij - b_kl)^2 plan_ik plan_jl, clamped at 0 against roundoff.
inline double gw_objective(const Matrix& a, const Matrix& b, const Matrix& plan) {
  check_square_same(a, b, plan);
  return std::max(0.0, gw_pseudo_cost(a, b, plan).cwiseProduct(plan).sum());
}

inline double log_sum_exp(const Eigen::Ref<const Vector>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

/// Rounds a positive matrix onto the uniform-marginal polytope (rescale rows
/// and columns down, then add a rank-one correction).
inline Matrix round_to_uniform_marginals(Matrix f) {
  const Index n = f.rows();
  const double target = 1.0 / static_cast<double>(n);
  const Vector rs = f.rowwise().sum();
  for (Index i = 0; i < n; ++i)
    if (rs(i) > target) f.row(i) *= target / rs(i);
  const Vector cs = f.colwise().sum().transpose();
  for (Index j = 0; j < n; ++j)
    if (cs(j) > target) f.col(j) *= target / cs(j);
  const Vector err_r = (Vector::Constant(n, target) - f.rowwise().sum()).cwiseMax(0.0);
  const Vector err_c = (Vector::Constant(n, target) - f.colwise().sum().transpose()).cwiseMax(0.0);
  const double mass = err_r.sum();
  if (mass > 0.0) f += err_r * err_c.transpose() / mass;
  return f;
}

struct SinkhornResult {
  Matrix plan;
  double violation;
};

/// Log-domain Sinkhorn scaling of exp(log_kernel) to uniform marginals.
/// Stops early once the row marginals are within 1e-14.
inline SinkhornResult sinkhorn_log(const Matrix& log_kernel, int iterations) {
  const Index n = log_kernel.rows();
  const double log_target = -std::log(static_cast<double>(n));
  const double target = 1.0 / static_cast<double>(n);
  Vector f = Vector::Zero(n);
  Vector g = Vector::Zero(n);
  double violation = std::numeric_limits<double>::infinity();
  for (int it = 0; it < iterations; ++it) {
    for (Index i = 0; i < n; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j) m = std::max(m, log_kernel(i, j) + g(j));
      double sum = 0.0;
      for (Index j = 0; j < n; ++j) sum += std::exp(log_kernel(i, j) + g(j) - m);
      f(i) = log_target - m - std::log(sum);
    }
    for (Index j = 0; j < n; ++j) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < n; ++i) m = std::max(m, log_kernel(i, j) + f(i));
      double sum = 0.0;
      for (Index i = 0; i < n; ++i) sum += std::exp(log_kernel(i, j) + f(i) - m);
      g(j) = log_target - m - std::log(sum);
    }
    if ((it + 1) % 4 != 0 && it + 1 != iterations) continue;
    // Columns are exact after the g update; rows carry the residual.
    violation = 0.0;
    for (Index i = 0; i < n; ++i) {
      double row = 0.0;
      for (Index j = 0; j < n; ++j) row += std::exp(log_kernel(i, j) + f(i) + g(j));
      violation = std::max(violation, std::abs(row - target));
    }
    if (violation < 1e-13) break;
  }
  Matrix plan(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) plan(i, j) = std::exp(log_kernel(i, j) + f(i) + g(j));
  violation = CouplingMatrix::max_marginal_violation(plan);
  return {std::move(plan), violation};
}

}  // namespace detail

inline double gw_objective(const SimilarityGraph& gs, const SimilarityGraph& gt,
                           const CouplingMatrix& coupling) {
  return detail::gw_objective(gs.entries(), gt.entries(), coupling.entries());
}

struct CouplingSolverConfig {
  double epsilon = 0.05;
  int outer_iters = 50;
  int inner_iters = 100;
  /// Times a rejected mirror step is retried with doubled epsilon.
  int max_backtracks = 8;
  /// Extra runs from seeded log-normal perturbations of the uniform plan.
  /// The uniform plan is a stationary point whenever the graphs' row sums
  /// are constant (always for N = 2), so it cannot be the only start.
  int restarts = 32;
  double restart_spread = 1.0;
  std::uint64_t seed = 0;
  /// Replace the final plan by its nearest scaled permutation when that
  /// lowers the objective.
  bool polish_to_vertex = true;
};

struct CouplingSolution {
  CouplingMatrix coupling;
  double objective;
  /// Objective at the initial plan followed by one entry per accepted step.
  std::vector<double> objective_history;
  /// Largest Sinkhorn marginal violation seen before rounding.
  double sinkhorn_violation;
  /// Set when Sinkhorn did not reach the marginal tolerance within inner_iters.
  std::optional<std::string> warning;
};

namespace detail {

/// Relative decrease below which mirror descent is considered converged.
inline constexpr double kStallTol = 1e-10;

/// Scaled permutation closest to `plan`, built greedily from the largest
/// remaining entry.
inline Matrix nearest_permutation(const Matrix& plan) {
  const Index n = plan.rows();
  std::vector<bool> row_used(static_cast<std::size_t>(n)), col_used(static_cast<std::size_t>(n));
  Matrix out = Matrix::Zero(n, n);
  for (Index k = 0; k < n; ++k) {
    Index bi = -1, bj = -1;
    for (Index i = 0; i < n; ++i) {
      if (row_used[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < n; ++j) {
        if (col_used[static_cast<std::size_t>(j)]) continue;
        if (bi < 0 || plan(i, j) > plan(bi, bj)) {
          bi = i;
          bj = j;
        }
      }
    }
    row_used[static_cast<std::size_t>(bi)] = true;
    col_used[static_cast<std::size_t>(bj)] = true;
    out(bi, bj) = 1.0 / static_cast<double>(n);
  }
  return out;
}

/// Entropic mirror descent from `plan`. Each outer step scales
/// exp(-C/eps) * plan back to uniform marginals; steps that would increase
/// the objective are retried with a larger eps and dropped if they still do.
inline CouplingSolution mirror_descent(const Matrix& a, const Matrix& b, Matrix plan,
                                       const CouplingSolverConfig& cfg) {
  double objective = gw_objective(a, b, plan);
  std::vector<double> history{objective};
  double worst_violation = 0.0;

  for (int outer = 0; outer < cfg.outer_iters; ++outer) {
    const Matrix cost = gw_pseudo_cost(a, b, plan);
    const Matrix log_plan = plan.array().log().matrix();
    double step_eps = cfg.epsilon;
    bool accepted = false;
    for (int attempt = 0; attempt <= cfg.max_backtracks; ++attempt, step_eps *= 2.0) {
      const Matrix log_kernel = log_plan - cost / step_eps;
      SinkhornResult s = sinkhorn_log(log_kernel, cfg.inner_iters);
      worst_violation = std::max(worst_violation, s.violation);
      Matrix candidate = round_to_uniform_marginals(std::move(s.plan));
      const double cand_obj = gw_objective(a, b, candidate);
      if (cand_obj <= objective) {
        const bool stalled = objective - cand_obj <= kStallTol * std::max(1.0, objective);
        plan = std::move(candidate);
        objective = cand_obj;
        history.push_back(objective);
        accepted = !stalled;
        break;
      }
    }
    if (!accepted) break;
  }

  // Entropic steps approach a vertex only geometrically; finish the move
  // when the nearest vertex is already better.
  if (cfg.polish_to_vertex) {
    Matrix vertex = nearest_permutation(plan);
    const double vertex_obj = gw_objective(a, b, vertex);
    if (vertex_obj < objective) {
      plan = std::move(vertex);
      objective = vertex_obj;
      history.push_back(objective);
    }
  }

  CouplingSolution out{CouplingMatrix(std::move(plan)), objective, std::move(history), worst_violation,
                       std::nullopt};
  if (worst_violation > CouplingMatrix::kMarginalTol) {
    out.warning = "sinkhorn marginal violation " + std::to_string(worst_violation) + " after " +
                  std::to_string(cfg.inner_iters) + " inner iterations (rounded to feasibility)";
  }
  return out;
}

/// Runs mirror descent from the uniform plan and from `cfg.restarts`
/// perturbed starts; returns the run with the lowest final objective.
inline CouplingSolution solve_coupling_raw(const Matrix& a, const Matrix& b,
                                           const CouplingSolverConfig& cfg) {
  if (!(cfg.epsilon > 0.0)) throw InvalidInputError("epsilon must be positive");
  if (cfg.outer_iters < 0 || cfg.inner_iters < 1 || cfg.restarts < 0)
    throw InvalidInputError("solver iteration counts must be non-negative");
  const Index n = a.rows();
  const Matrix uniform = Matrix::Constant(n, n, 1.0 / static_cast<double>(n * n));
  check_square_same(a, b, uniform);

  CouplingSolution best = mirror_descent(a, b, uniform, cfg);
  Rng rng(cfg.seed, /*stream=*/0x4757ULL);
  for (int r = 0; r < cfg.restarts; ++r) {
    Matrix log_start(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) log_start(i, j) = cfg.restart_spread * rng.normal();
    Matrix start = round_to_uniform_marginals(sinkhorn_log(log_start, cfg.inner_iters).plan);
    CouplingSolution run = mirror_descent(a, b, std::move(start), cfg);
    if (run.objective < best.objective) best = std::move(run);
  }
  return best;
}

}  // namespace detail

inline CouplingSolution solve_coupling(const SimilarityGraph& gs, const SimilarityGraph& gt,
                                       const CouplingSolverConfig& cfg = {}) {
  return detail::solve_coupling_raw(gs.entries(), gt.entries(), cfg);
}

struct BruteForceCoupling {
  CouplingMatrix coupling;
  double objective;
  std::vector<Index> permutation;
};

/// Exhaustive search over the N! scaled permutation couplings, N <= 6. The
/// result upper-bounds the continuous optimum and equals it whenever a
/// permutation is optimal (identical or relabeled graphs).
inline BruteForceCoupling brute_force_coupling(const SimilarityGraph& gs, const SimilarityGraph& gt) {
  const Index n = gs.size();
  if (n > 6) throw SizeError("brute_force_coupling supports N <= 6, got " + std::to_string(n));
  if (gt.size() != n) throw ShapeError("graph sizes differ");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::vector<Index> best_perm = perm;
  double best = std::numeric_limits<double>::infinity();
  do {
    const CouplingMatrix c = CouplingMatrix::permutation(perm);
    const double v = gw_objective(gs, gt, c);
    if (v < best) {
      best = v;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {CouplingMatrix::permutation(best_perm), best, best_perm};
}

/// Directions drawn uniformly on the unit sphere (normalized Gaussians).
inline ProjectionSet sample_projections(Index t_count, Index dim, std::uint64_t seed) {
  if (t_count < 1 || dim < 1) throw InvalidInputError("projection count and dimension must be >= 1");
  Rng rng(seed, /*stream=*/0x5052'4f4aULL);
  Matrix v(t_count, dim);
  for (Index t = 0; t < t_count; ++t) {
    double norm = 0.0;
    do {
      for (Index k = 0; k < dim; ++k) v(t, k) = rng.normal();
      norm = v.row(t).norm();
    } while (!(norm > 0.0));
    v.row(t) /= norm;
  }
  return ProjectionSet(std::move(v), seed);
}

/// Sliced GW value with dL/d(target rows) and dL/dR.
struct SlicedGradient {
  double loss = 0.0;
  Matrix d_target;
  Matrix d_rotation;
};

namespace detail {

/// |x_i - x_j|: the 1D ground metric used to compare projected scalars.
inline Matrix abs_diff_matrix(const Vector& x) {
  const Index n = x.size();
  Matrix m(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) m(i, j) = std::abs(x(i) - x(j));
  return m;
}

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }

/// Loss and gradient for one slice with respect to the projected target b.
inline double slice_term(const Vector& a_proj, const Vector& b_proj, const Matrix& plan, Vector* d_b) {
  const Matrix a = abs_diff_matrix(a_proj);
  const Matrix b = abs_diff_matrix(b_proj);
  const double value = gw_objective(a, b, plan);
  if (d_b) {
    // dL/dB_kl = -2 [(plan^T A plan)_kl - B_kl q_k q_l]
    const Vector q = plan.colwise().sum().transpose();
    const Matrix d_bmat = -2.0 * (plan.transpose() * a * plan - b.cwiseProduct(q * q.transpose()));
    const Index n = b_proj.size();
    d_b->setZero(n);
    for (Index k = 0; k < n; ++k)
      for (Index l = 0; l < n; ++l)
        (*d_b)(k) += (d_bmat(k, l) + d_bmat(l, k)) * sign(b_proj(k) - b_proj(l));
  }
  return value;
}

inline void check_sliced_shapes(const FeatureBatch& src, const FeatureBatch& tgt, const RotationMatrix& r,
                                const ProjectionSet& proj) {
  detail::check_pair(src, tgt, r.dim());
  if (proj.dim() != src.dim()) throw ShapeError("projection dimension does not match features");
}

}  // namespace detail

/// (1/T) sum_t sum_{ijkl} (|a_i - a_j| - |b_k - b_l|)^2 plan_ik plan_jl with
/// a = S pi_t and b = (T R^T) pi_t. A fixed coupling is shared by all slices
/// and treated as a constant for the gradient.
inline SlicedGradient sliced_gw_with_rotation(const FeatureBatch& src, const FeatureBatch& tgt,
                                              const RotationMatrix& rotation, const ProjectionSet& proj,
                                              const CouplingMatrix& coupling, bool with_gradient = true) {
  detail::check_sliced_shapes(src, tgt, rotation, proj);
  if (coupling.size() != src.size()) throw ShapeError("coupling size does not match batch");
  const Matrix& r = rotation.matrix();
  const Matrix rotated = tgt.rows() * r.transpose();
  const Matrix a_all = src.rows() * proj.vectors().transpose();  // N x T
  const Matrix b_all = rotated * proj.vectors().transpose();
  const double inv_t = 1.0 / static_cast<double>(proj.count());

  SlicedGradient out;
  Matrix d_rotated = Matrix::Zero(rotated.rows(), rotated.cols());
  Vector d_b;
  double total = 0.0;
  for (Index t = 0; t < proj.count(); ++t) {
    total += detail::slice_term(a_all.col(t), b_all.col(t), coupling.entries(), with_gradient ? &d_b : nullptr);
    if (with_gradient) d_rotated += d_b * proj.vectors().row(t);
  }
  out.loss = total * inv_t;
  if (with_gradient) {
    d_rotated *= inv_t;
    out.d_target = d_rotated * r;
    out.d_rotation = d_rotated.transpose() * tgt.rows();
  }
  return out;
}

/// Per-slice variant: each slice solves its own coupling from the projected
/// distance matrices and holds it constant for the gradient.
inline SlicedGradient sliced_gw_per_slice_coupling(const FeatureBatch& src, const FeatureBatch& tgt,
                                                   const RotationMatrix& rotation, const ProjectionSet& proj,
                                                   const CouplingSolverConfig& solver) {
  detail::check_sliced_shapes(src, tgt, rotation, proj);
  const Matrix& r = rotation.matrix();
  const Matrix rotated = tgt.rows() * r.transpose();
  const Matrix a_all = src.rows() * proj.vectors().transpose();
  const Matrix b_all = rotated * proj.vectors().transpose();
  const double inv_t = 1.0 / static_cast<double>(proj.count());

  SlicedGradient out;
  Matrix d_rotated = Matrix::Zero(rotated.rows(), rotated.cols());
  Vector d_b;
  double total = 0.0;
  for (Index t = 0; t < proj.count(); ++t) {
    const Matrix plan = detail::solve_coupling_raw(detail::abs_diff_matrix(a_all.col(t)),
                                                   detail::abs_diff_matrix(b_all.col(t)), solver)
                            .coupling.entries();
    total += detail::slice_term(a_all.col(t), b_all.col(t), plan, &d_b);
    d_rotated += d_b * proj.vectors().row(t);
  }
  out.loss = total * inv_t;
  d_rotated *= inv_t;
  out.d_target = d_rotated * r;
  out.d_rotation = d_rotated.transpose() * tgt.rows();
  return out;
}

inline double sliced_gw_loss(const FeatureBatch& src, const FeatureBatch& tgt, const SkewParamMatrix& param,
                             const ProjectionSet& proj, const CouplingMatrix& coupling) {
  return sliced_gw_with_rotation(src, tgt, rotation_from_param(param), proj, coupling, false).loss;
}

struct SlicedGwGrad {
  Matrix d_target;
  Matrix d_param;
};

inline SlicedGwGrad sliced_gw_grad(const FeatureBatch& src, const FeatureBatch& tgt, const SkewParamMatrix& param,
                                   const ProjectionSet& proj, const CouplingMatrix& coupling) {
  SlicedGradient g = sliced_gw_with_rotation(src, tgt, rotation_from_param(param), proj, coupling);
  return {std::move(g.d_target), grad_through_rotation(param, g.d_rotation)};
}

}  // namespace efr
