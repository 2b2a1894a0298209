#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtopt/linalg.hpp"
#include "mtopt/rng.hpp"
#include "mtopt/types.hpp"

namespace mtopt {

enum class Method {
  Baseline,
  PCGrad,
  GradVac,
  GradDrop,
  RGW,
  MGDA,
  CAGrad,
  NashMTL,
  AlignedMTL,
  IMTL,
  Uncertainty,
  GradNorm,
  FAMO,
  RLW,
  DWA,
  CosReg,
};

enum class MethodKind { Baseline, Direction, Weighting, Regularizer };

constexpr MethodKind method_kind(Method m) {
  switch (m) {
    case Method::Baseline:
      return MethodKind::Baseline;
    case Method::PCGrad:
    case Method::GradVac:
    case Method::GradDrop:
    case Method::RGW:
    case Method::MGDA:
    case Method::CAGrad:
    case Method::NashMTL:
    case Method::AlignedMTL:
    case Method::IMTL:
      return MethodKind::Direction;
    case Method::Uncertainty:
    case Method::GradNorm:
    case Method::FAMO:
    case Method::RLW:
    case Method::DWA:
      return MethodKind::Weighting;
    case Method::CosReg:
      return MethodKind::Regularizer;
  }
  return MethodKind::Baseline;
}

constexpr const char* method_name(Method m) {
  switch (m) {
    case Method::Baseline:
      return "baseline";
    case Method::PCGrad:
      return "pcgrad";
    case Method::GradVac:
      return "gradvac";
    case Method::GradDrop:
      return "graddrop";
    case Method::RGW:
      return "rgw";
    case Method::MGDA:
      return "mgda";
    case Method::CAGrad:
      return "cagrad";
    case Method::NashMTL:
      return "nash";
    case Method::AlignedMTL:
      return "alignedmtl";
    case Method::IMTL:
      return "imtl";
    case Method::Uncertainty:
      return "uncertainty";
    case Method::GradNorm:
      return "gradnorm";
    case Method::FAMO:
      return "famo";
    case Method::RLW:
      return "rlw";
    case Method::DWA:
      return "dwa";
    case Method::CosReg:
      return "cosreg";
  }
  return "unknown";
}

inline std::optional<Method> parse_method(const std::string& name) {
  static const Method all[] = {
      Method::Baseline, Method::PCGrad,  Method::GradVac,     Method::GradDrop,
      Method::RGW,      Method::MGDA,    Method::CAGrad,      Method::NashMTL,
      Method::AlignedMTL, Method::IMTL,  Method::Uncertainty, Method::GradNorm,
      Method::FAMO,     Method::RLW,     Method::DWA,         Method::CosReg,
  };
  for (const Method m : all)
    if (name == method_name(m)) return m;
  return std::nullopt;
}

/// Methods that are re-run on feature-level gradients in the benchmark grid.
constexpr bool has_level_axis(Method m) {
  switch (m) {
    case Method::PCGrad:
    case Method::GradVac:
    case Method::GradDrop:
    case Method::RGW:
    case Method::MGDA:
    case Method::CAGrad:
    case Method::NashMTL:
    case Method::AlignedMTL:
    case Method::CosReg:
      return true;
    default:
      return false;
  }
}

/// All tunables in one place; every field has the library default.
template <class Scalar>
struct Hyper {
  Scalar lr = Scalar(0.05);  // trainer step size
  int monitor_cadence = 10;  // snapshot every k iterations, 0 disables

  Scalar gradvac_beta = Scalar(0.01);

  Scalar cagrad_c = Scalar(0.5);
  int cagrad_iters = 100;
  Scalar cagrad_step = Scalar(0.05);

  Scalar nash_damping = Scalar(0.5);
  int nash_iters = 200;
  Scalar nash_tol = Scalar(1e-6);

  Scalar aligned_rank_tol = Scalar(1e-9);

  int minnorm_iters = 1000;
  Scalar minnorm_tol = Scalar(1e-8);

  Scalar gradnorm_gamma = Scalar(1.5);
  Scalar gradnorm_lr = Scalar(0.025);

  Scalar dwa_temperature = Scalar(2);

  Scalar uncertainty_lr = Scalar(-1);  // negative: fall back to lr

  Scalar famo_lr = Scalar(0.025);
  Scalar famo_eps = Scalar(1e-8);

  Scalar cosreg_lambda = Scalar(0.1);
  Scalar cosreg_fd_step = Scalar(1e-5);
};

/// Per-run persistent state shared by all combiners. A state is owned by a
/// single run; ops take it by value and hand the successor back.
template <class Scalar>
struct CombinerState {
  Method method = Method::Baseline;
  MatrixX<Scalar> ema_targets;                        // GradVac targets, T x T
  std::optional<LossVector<Scalar>> initial_losses;   // GradNorm baseline
  std::vector<LossVector<Scalar>> loss_history;       // DWA, oldest first, size <= 2
  VectorX<Scalar> log_weights;                        // FAMO xi
  VectorX<Scalar> log_variances;                      // Uncertainty s
  GradWeights<Scalar> balancer_weights;               // GradNorm w, sum = T
  Rng rng;
  long step_counter = 0;
};

template <class Scalar>
CombinerState<Scalar> make_combiner_state(Method method, Eigen::Index tasks,
                                          std::uint64_t seed) {
  CombinerState<Scalar> s;
  s.method = method;
  s.ema_targets = MatrixX<Scalar>::Zero(tasks, tasks);
  s.log_weights = VectorX<Scalar>::Zero(tasks);
  s.log_variances = VectorX<Scalar>::Zero(tasks);
  s.balancer_weights = {VectorX<Scalar>::Ones(tasks), WeightConstraint::SumT};
  s.rng = Rng(seed);
  return s;
}

template <class Scalar>
struct CombineResult {
  std::optional<UpdateDirection<Scalar>> direction;
  std::optional<GradWeights<Scalar>> loss_weights;
  CombinerState<Scalar> state;
  // Effective combination coefficients over tasks whenever the output
  // direction equals G * applied (empty otherwise, e.g. GradDrop).
  VectorX<Scalar> applied;
  // GradDrop only: surviving sign (+1/-1) per coordinate.
  VectorX<Scalar> kept_sign;
  bool converged = true;
  bool degenerate = false;
};

namespace detail {

template <class Scalar>
VectorX<Scalar> softmax(const VectorX<Scalar>& z) {
  VectorX<Scalar> e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

constexpr double kZeroNorm = 1e-12;

}  // namespace detail

template <class Scalar>
struct PcgradSurgery {
  MatrixX<Scalar> surgered;  // column i = g_i after all projections
  MatrixX<Scalar> coeffs;    // surgered.col(i) = G * coeffs.col(i)
};

/// PCGrad surgery: each task's gradient is projected off every other task's
/// gradient it conflicts with, visiting the others in a freshly shuffled
/// order. Projections always use the unmodified g_j.
template <class Scalar>
PcgradSurgery<Scalar> pcgrad_surgery(const TaskGradients<Scalar>& g, Rng& rng) {
  const Eigen::Index t = g.tasks();
  const MatrixX<Scalar>& m = g.entries;
  const VectorX<Scalar> sq = m.colwise().squaredNorm();

  PcgradSurgery<Scalar> out{m, MatrixX<Scalar>::Identity(t, t)};
  std::vector<Eigen::Index> others;
  for (Eigen::Index i = 0; i < t; ++i) {
    others.clear();
    for (Eigen::Index j = 0; j < t; ++j)
      if (j != i) others.push_back(j);
    rng.shuffle(others);
    for (const Eigen::Index j : others) {
      if (sq(j) < Scalar(detail::kZeroNorm * detail::kZeroNorm)) continue;
      const Scalar dot = out.surgered.col(i).dot(m.col(j));
      if (dot < Scalar(0)) {
        const Scalar c = dot / sq(j);
        out.surgered.col(i) -= c * m.col(j);
        out.coeffs(j, i) -= c;
      }
    }
  }
  return out;
}

template <class Scalar>
CombineResult<Scalar> combine_pcgrad(const TaskGradients<Scalar>& g, CombinerState<Scalar> state) {
  const auto surgery = pcgrad_surgery(g, state.rng);
  CombineResult<Scalar> out;
  out.applied = surgery.coeffs.rowwise().sum();
  out.direction = g.entries * out.applied;
  out.state = std::move(state);
  return out;
}

/// GradVac: pulls g_i toward g_j whenever their cosine falls below the
/// per-pair EMA target, then refreshes the target with the observed cosine.
/// With all targets at zero the correction reduces to the PCGrad projection.
template <class Scalar>
CombineResult<Scalar> combine_gradvac(const TaskGradients<Scalar>& g, Scalar beta,
                                      CombinerState<Scalar> state) {
  const Eigen::Index t = g.tasks();
  const MatrixX<Scalar>& m = g.entries;
  const VectorX<Scalar> norms = m.colwise().norm();
  const Scalar lo = Scalar(-1) + Scalar(1e-6), hi = Scalar(1) - Scalar(1e-6);

  MatrixX<Scalar> surgered = m;
  MatrixX<Scalar> coeffs = MatrixX<Scalar>::Identity(t, t);
  for (Eigen::Index i = 0; i < t; ++i) {
    for (Eigen::Index j = 0; j < t; ++j) {
      if (j == i) continue;
      if (norms(i) < Scalar(detail::kZeroNorm) || norms(j) < Scalar(detail::kZeroNorm)) continue;
      const Scalar phi =
          std::clamp(m.col(i).dot(m.col(j)) / (norms(i) * norms(j)), Scalar(-1), Scalar(1));
      const Scalar target = std::clamp(state.ema_targets(i, j), lo, hi);
      if (phi < target) {
        const Scalar root_phi = std::sqrt(std::max(Scalar(0), Scalar(1) - phi * phi));
        const Scalar root_target = std::sqrt(Scalar(1) - target * target);
        const Scalar c =
            norms(i) * (target * root_phi - phi * root_target) / (norms(j) * root_target);
        surgered.col(i) += c * m.col(j);
        coeffs(j, i) += c;
      }
      state.ema_targets(i, j) = std::clamp((Scalar(1) - beta) * target + beta * phi, lo, hi);
    }
  }

  CombineResult<Scalar> out;
  out.applied = coeffs.rowwise().sum();
  out.direction = m * out.applied;
  out.state = std::move(state);
  return out;
}

/// GradDrop: per coordinate, the positive-sign purity P decides (against a
/// uniform draw) whether the positive or the negative task entries survive.
template <class Scalar>
CombineResult<Scalar> combine_graddrop(const TaskGradients<Scalar>& g,
                                       CombinerState<Scalar> state) {
  const Eigen::Index d = g.dim();
  const MatrixX<Scalar>& m = g.entries;

  CombineResult<Scalar> out;
  UpdateDirection<Scalar> dir(d);
  out.kept_sign.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const Scalar ssum = m.row(j).sum();
    const Scalar asum = m.row(j).cwiseAbs().sum();
    const Scalar purity =
        asum < Scalar(detail::kZeroNorm) ? Scalar(0.5) : Scalar(0.5) * (Scalar(1) + ssum / asum);
    const bool keep_positive = purity > Scalar(state.rng.uniform01());
    out.kept_sign(j) = keep_positive ? Scalar(1) : Scalar(-1);
    Scalar kept = 0;
    for (Eigen::Index i = 0; i < m.cols(); ++i) {
      const Scalar e = m(j, i);
      if ((keep_positive && e > Scalar(0)) || (!keep_positive && e < Scalar(0))) kept += e;
    }
    dir(j) = kept;
  }
  out.direction = std::move(dir);
  out.state = std::move(state);
  return out;
}

enum class RandomWeighting { RGW, RLW };

/// Softmax of a fresh standard-normal draw. RGW emits the weighted gradient
/// sum for the shared level only; RLW emits loss weights for all parameters.
template <class Scalar>
CombineResult<Scalar> combine_random_weighting(const TaskGradients<Scalar>& g,
                                               RandomWeighting mode, CombinerState<Scalar> state) {
  const Eigen::Index t = g.tasks();
  VectorX<Scalar> z(t);
  for (Eigen::Index i = 0; i < t; ++i) z(i) = Scalar(state.rng.normal());
  VectorX<Scalar> w = detail::softmax(z);

  CombineResult<Scalar> out;
  out.applied = w;
  if (mode == RandomWeighting::RGW) {
    out.direction = g.entries * w;
  } else {
    out.loss_weights = GradWeights<Scalar>{w, WeightConstraint::Simplex};
  }
  out.state = std::move(state);
  return out;
}

/// MGDA: min-norm point of the gradient hull via Frank-Wolfe.
template <class Scalar>
CombineResult<Scalar> combine_mgda(const TaskGradients<Scalar>& g, CombinerState<Scalar> state,
                                   int max_iters = 1000, Scalar tol = Scalar(1e-8)) {
  auto mn = min_norm_point(g, max_iters, tol);
  CombineResult<Scalar> out;
  out.applied = mn.weights.values;
  out.direction = std::move(mn.direction);
  out.converged = mn.converged;
  out.state = std::move(state);
  return out;
}

/// CAGrad: g0 plus a correction bounded by c*||g0||; the worst-case weighting
/// is found by projected gradient descent on the dual objective.
template <class Scalar>
CombineResult<Scalar> combine_cagrad(const TaskGradients<Scalar>& g, Scalar c,
                                     CombinerState<Scalar> state, int iters = 100,
                                     Scalar step = Scalar(0.05)) {
  const Eigen::Index t = g.tasks();
  const MatrixX<Scalar>& m = g.entries;
  const VectorX<Scalar> mean = m.rowwise().mean();

  CombineResult<Scalar> out;
  if (c == Scalar(0)) {
    out.applied = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));
    out.direction = mean;
    out.state = std::move(state);
    return out;
  }

  const GramMatrix<Scalar> k = gram(g);
  const VectorX<Scalar> b = k * VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));
  const Scalar sphi = c * mean.norm();  // sqrt(phi) = c * ||g0||
  VectorX<Scalar> w = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));
  for (int it = 0; it < iters; ++it) {
    const VectorX<Scalar> kw = k * w;
    const Scalar gw_norm = std::sqrt(std::max(w.dot(kw), Scalar(0)));
    VectorX<Scalar> grad = b;
    if (gw_norm > Scalar(detail::kZeroNorm)) grad += (sphi / gw_norm) * kw;
    w = simplex_project(VectorX<Scalar>(w - step * grad)).values;
  }

  const VectorX<Scalar> gw = m * w;
  const Scalar nrm = gw.norm();
  if (nrm < Scalar(detail::kZeroNorm)) {
    out.applied = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));
    out.direction = mean;
  } else {
    out.applied = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t)) + (sphi / nrm) * w;
    out.direction = mean + (sphi / nrm) * gw;
  }
  out.state = std::move(state);
  return out;
}

/// Nash bargaining weights: the positive solution of K alpha = 1/alpha,
/// found by a damped fixed point. Falls back to uniform weights (flagged)
/// when the iteration does not reach the residual tolerance.
template <class Scalar>
CombineResult<Scalar> combine_nash(const TaskGradients<Scalar>& g, Scalar damping,
                                   CombinerState<Scalar> state, int max_iters = 200,
                                   Scalar tol = Scalar(1e-6)) {
  const Eigen::Index t = g.tasks();
  const GramMatrix<Scalar> k = gram(g);

  CombineResult<Scalar> degenerate_out;
  if (k.cwiseAbs().maxCoeff() < Scalar(detail::kZeroNorm)) {
    // all gradients vanish: the system K alpha = 1/alpha has no bounded root
    degenerate_out.applied = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));
    degenerate_out.direction = g.entries * degenerate_out.applied;
    degenerate_out.converged = false;
    degenerate_out.state = std::move(state);
    return degenerate_out;
  }

  VectorX<Scalar> alpha(t);
  for (Eigen::Index i = 0; i < t; ++i)
    alpha(i) = Scalar(1) / std::sqrt(std::max(k(i, i), Scalar(detail::kZeroNorm)));

  bool converged = false;
  for (int it = 0; it < max_iters; ++it) {
    const VectorX<Scalar> q = k * alpha;
    const Scalar residual = (q - alpha.cwiseInverse()).template lpNorm<Eigen::Infinity>();
    if (residual <= tol) {
      converged = true;
      break;
    }
    alpha = (Scalar(1) - damping) * alpha +
            damping * q.cwiseMax(Scalar(1e-8)).cwiseInverse();
  }
  if (!converged) alpha = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));

  CombineResult<Scalar> out;
  out.applied = alpha;
  out.direction = g.entries * alpha;
  out.converged = converged;
  out.state = std::move(state);
  return out;
}

template <class Scalar>
struct AlignedBalance {
  MatrixX<Scalar> weight_matrix;  // T x T, G_hat = G * weight_matrix
  Scalar sigma_min = 0;
  int rank = 0;
  bool degenerate = false;
};

/// Condition-number-1 rebalancing: project the Gram spectrum so every kept
/// singular value of G_hat equals the smallest one.
template <class Scalar>
AlignedBalance<Scalar> aligned_balance(const GramMatrix<Scalar>& k, Scalar rank_tol) {
  const Eigen::Index t = k.rows();
  const Eigh<Scalar> eig = jacobi_eigh(k);
  const Scalar lmax = eig.eigenvalues(0);

  AlignedBalance<Scalar> out;
  if (!(lmax > Scalar(0))) {
    out.weight_matrix = MatrixX<Scalar>::Zero(t, t);
    out.degenerate = true;
    return out;
  }
  VectorX<Scalar> inv_sqrt = VectorX<Scalar>::Zero(t);
  Scalar smallest_kept = lmax;
  for (Eigen::Index i = 0; i < t; ++i) {
    if (eig.eigenvalues(i) > rank_tol * lmax) {
      inv_sqrt(i) = Scalar(1) / std::sqrt(eig.eigenvalues(i));
      smallest_kept = eig.eigenvalues(i);
      ++out.rank;
    }
  }
  out.sigma_min = std::sqrt(smallest_kept);
  out.weight_matrix = out.sigma_min * eig.eigenvectors * inv_sqrt.asDiagonal() *
                      eig.eigenvectors.transpose();
  return out;
}

template <class Scalar>
CombineResult<Scalar> combine_alignedmtl(const TaskGradients<Scalar>& g, Scalar rank_tol,
                                         CombinerState<Scalar> state) {
  const auto bal = aligned_balance(gram(g), rank_tol);
  CombineResult<Scalar> out;
  out.applied = bal.weight_matrix.rowwise().sum();  // G_hat * 1 = G * applied
  out.direction = g.entries * out.applied;
  out.degenerate = bal.degenerate;
  out.state = std::move(state);
  return out;
}

/// IMTL-G: weights summing to one that make the combined gradient project
/// equally onto every task's unit gradient. Uniform fallback (flagged) when
/// the reduced system is singular, which includes identical gradients.
template <class Scalar>
CombineResult<Scalar> combine_imtl(const TaskGradients<Scalar>& g, CombinerState<Scalar> state) {
  const Eigen::Index t = g.tasks();
  const MatrixX<Scalar>& m = g.entries;
  const VectorX<Scalar> norms = m.colwise().norm();

  CombineResult<Scalar> out;
  out.state = std::move(state);
  const auto uniform = [&](bool flagged) {
    out.applied = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));
    out.direction = m * out.applied;
    out.converged = !flagged;
    out.degenerate = flagged;
  };
  if (norms.minCoeff() < Scalar(detail::kZeroNorm)) {
    uniform(true);
    return out;
  }

  MatrixX<Scalar> units = m;
  for (Eigen::Index i = 0; i < t; ++i) units.col(i) /= norms(i);
  // D beta = -U^T g_1 with D_{ki} = <u_1 - u_{k+1}, g_{i+1} - g_1>.
  MatrixX<Scalar> dg(m.rows(), t - 1), du(m.rows(), t - 1);
  for (Eigen::Index i = 1; i < t; ++i) {
    dg.col(i - 1) = m.col(i) - m.col(0);
    du.col(i - 1) = units.col(0) - units.col(i);
  }
  const MatrixX<Scalar> a = du.transpose() * dg;
  const VectorX<Scalar> rhs = -du.transpose() * m.col(0);
  try {
    const VectorX<Scalar> beta = solve_linear(a, rhs);
    VectorX<Scalar> alpha(t);
    alpha(0) = Scalar(1) - beta.sum();
    alpha.tail(t - 1) = beta;
    out.applied = alpha;
    out.direction = m * alpha;
  } catch (const SingularSystem&) {
    uniform(true);
  }
  return out;
}

/// GradNorm: one subgradient step on sum_i |w_i*||g_i|| - target_i| with the
/// targets held fixed, then renormalization to sum w = T.
template <class Scalar>
CombineResult<Scalar> weights_gradnorm(const TaskGradients<Scalar>& g,
                                       const LossVector<Scalar>& losses, Scalar gamma,
                                       Scalar lr_w, CombinerState<Scalar> state) {
  const Eigen::Index t = g.tasks();
  if (!state.initial_losses) {
    state.initial_losses = losses.cwiseMax(Scalar(1e-8));
  }
  const VectorX<Scalar> norms = g.entries.colwise().norm();
  VectorX<Scalar> w = state.balancer_weights.values;

  const VectorX<Scalar> scaled = w.cwiseProduct(norms);
  const Scalar mean_norm = scaled.mean();
  VectorX<Scalar> ratios = losses.cwiseQuotient(*state.initial_losses);
  const Scalar mean_ratio = ratios.mean();
  if (mean_ratio > Scalar(detail::kZeroNorm))
    ratios /= mean_ratio;
  else
    ratios.setOnes();

  for (Eigen::Index i = 0; i < t; ++i) {
    const Scalar target = mean_norm * std::pow(ratios(i), gamma);
    const Scalar diff = scaled(i) - target;
    const Scalar sign = diff > Scalar(0) ? Scalar(1) : (diff < Scalar(0) ? Scalar(-1) : Scalar(0));
    w(i) -= lr_w * sign * norms(i);
  }
  const Scalar total = w.sum();
  if (std::abs(total) < Scalar(detail::kZeroNorm))
    w.setOnes();
  else
    w *= Scalar(t) / total;

  state.balancer_weights = {w, WeightConstraint::SumT};
  CombineResult<Scalar> out;
  out.applied = w;
  out.loss_weights = state.balancer_weights;
  out.state = std::move(state);
  return out;
}

/// DWA: softmax of the loss descent rates, scaled to sum to T. All-ones until
/// two loss vectors have been recorded.
template <class Scalar>
CombineResult<Scalar> weights_dwa(Scalar temperature, CombinerState<Scalar> state) {
  const Eigen::Index t = state.log_weights.size();
  VectorX<Scalar> w;
  if (state.loss_history.size() < 2) {
    w = VectorX<Scalar>::Ones(t);
  } else {
    const LossVector<Scalar>& older = state.loss_history.front();
    const LossVector<Scalar>& newer = state.loss_history.back();
    VectorX<Scalar> rates(t);
    for (Eigen::Index i = 0; i < t; ++i)
      rates(i) = older(i) <= Scalar(detail::kZeroNorm) ? Scalar(1) : newer(i) / older(i);
    w = Scalar(t) * detail::softmax(VectorX<Scalar>(rates / temperature));
  }
  CombineResult<Scalar> out;
  out.applied = w;
  out.loss_weights = GradWeights<Scalar>{std::move(w), WeightConstraint::SumT};
  out.state = std::move(state);
  return out;
}

/// Homoscedastic-uncertainty weighting: weights exp(-s_i) from the current
/// log-variances, followed by one gradient step on sum_i exp(-s_i) L_i + s_i.
template <class Scalar>
CombineResult<Scalar> weights_uncertainty(const LossVector<Scalar>& losses, Scalar lr_s,
                                          CombinerState<Scalar> state) {
  const VectorX<Scalar> w = (-state.log_variances.array()).exp().matrix();
  const VectorX<Scalar> grad = VectorX<Scalar>::Ones(losses.size()) - w.cwiseProduct(losses);
  state.log_variances =
      (state.log_variances - lr_s * grad).cwiseMax(Scalar(-10)).cwiseMin(Scalar(10));

  CombineResult<Scalar> out;
  out.applied = w;
  out.loss_weights = GradWeights<Scalar>{w, WeightConstraint::Positive};
  out.state = std::move(state);
  return out;
}

/// FAMO weights for the upcoming step: softmax(xi) divided by the shifted
/// losses, renormalized to the simplex.
template <class Scalar>
GradWeights<Scalar> famo_weights(const LossVector<Scalar>& losses,
                                 const CombinerState<Scalar>& state, Scalar eps = Scalar(1e-8)) {
  const VectorX<Scalar> w = detail::softmax(state.log_weights);
  VectorX<Scalar> c = w.cwiseQuotient((losses.array() + eps).matrix());
  c /= c.sum();
  return {std::move(c), WeightConstraint::Simplex};
}

/// FAMO logit update from the observed log-loss improvements; the softmax
/// Jacobian makes constant improvement vectors a no-op.
template <class Scalar>
void famo_update(const LossVector<Scalar>& losses_prev, const LossVector<Scalar>& losses_new,
                 Scalar lr_xi, Scalar eps, CombinerState<Scalar>& state) {
  const VectorX<Scalar> delta = ((losses_prev.array() + eps).log() -
                                 (losses_new.array() + eps).log())
                                    .matrix();
  const VectorX<Scalar> w = detail::softmax(state.log_weights);
  state.log_weights += lr_xi * (w.cwiseProduct(delta) - w * w.dot(delta));
}

template <class Scalar>
CombineResult<Scalar> weights_famo(const LossVector<Scalar>& losses_prev,
                                   const LossVector<Scalar>& losses_new, Scalar lr_xi,
                                   Scalar eps, CombinerState<Scalar> state) {
  CombineResult<Scalar> out;
  out.loss_weights = famo_weights(losses_prev, state, eps);
  out.applied = out.loss_weights->values;
  famo_update(losses_prev, losses_new, lr_xi, eps, state);
  out.state = std::move(state);
  return out;
}

/// Sum over task pairs of squared cosine similarity between gradient columns.
/// Pairs touching a near-zero gradient contribute nothing.
template <class Scalar>
Scalar cosine_penalty(const MatrixX<Scalar>& g) {
  const Eigen::Index t = g.cols();
  const VectorX<Scalar> sq = g.colwise().squaredNorm();
  Scalar total = 0;
  for (Eigen::Index i = 0; i < t; ++i) {
    for (Eigen::Index j = i + 1; j < t; ++j) {
      if (sq(i) < Scalar(detail::kZeroNorm * detail::kZeroNorm) ||
          sq(j) < Scalar(detail::kZeroNorm * detail::kZeroNorm))
        continue;
      const Scalar dot = g.col(i).dot(g.col(j));
      total += dot * dot / (sq(i) * sq(j));
    }
  }
  return total;
}

/// Gradient of lambda * cosine_penalty(grads_at(theta)) w.r.t. theta by
/// central finite differences, one coordinate at a time. grads_at must return
/// the d x T gradient matrix at the given shared-parameter vector.
template <class Scalar, class GradsFn>
VectorX<Scalar> cosreg_gradient(GradsFn&& grads_at, const VectorX<Scalar>& theta, Scalar lambda,
                                Scalar fd_step) {
  VectorX<Scalar> out(theta.size());
  VectorX<Scalar> probe = theta;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    probe(k) = theta(k) + fd_step;
    const Scalar up = cosine_penalty<Scalar>(grads_at(probe));
    probe(k) = theta(k) - fd_step;
    const Scalar down = cosine_penalty<Scalar>(grads_at(probe));
    probe(k) = theta(k);
    out(k) = lambda * (up - down) / (Scalar(2) * fd_step);
  }
  return out;
}

/// Uniform entry point used by the trainer and the harness. Bumps the step
/// counter, keeps the DWA history, and captures the GradNorm loss baseline.
/// FAMO returns the weights for the imminent step; its logit update happens
/// separately once the post-step losses are known (famo_update).
template <class Scalar>
CombineResult<Scalar> combine(Method method, const TaskGradients<Scalar>& g,
                              const LossVector<Scalar>& losses, const Hyper<Scalar>& hp,
                              CombinerState<Scalar> state) {
  state.step_counter += 1;
  switch (method) {
    case Method::Baseline:
    case Method::CosReg: {
      // Vanilla summed gradient; CosReg's regularizer term is added by the
      // trainer, which owns the loss closures.
      CombineResult<Scalar> out;
      out.applied = VectorX<Scalar>::Ones(g.tasks());
      out.direction = g.entries * out.applied;
      out.state = std::move(state);
      return out;
    }
    case Method::PCGrad:
      return combine_pcgrad(g, std::move(state));
    case Method::GradVac:
      return combine_gradvac(g, hp.gradvac_beta, std::move(state));
    case Method::GradDrop:
      return combine_graddrop(g, std::move(state));
    case Method::RGW:
      return combine_random_weighting(g, RandomWeighting::RGW, std::move(state));
    case Method::RLW:
      return combine_random_weighting(g, RandomWeighting::RLW, std::move(state));
    case Method::MGDA:
      return combine_mgda(g, std::move(state), hp.minnorm_iters, hp.minnorm_tol);
    case Method::CAGrad:
      return combine_cagrad(g, hp.cagrad_c, std::move(state), hp.cagrad_iters, hp.cagrad_step);
    case Method::NashMTL:
      return combine_nash(g, hp.nash_damping, std::move(state), hp.nash_iters, hp.nash_tol);
    case Method::AlignedMTL:
      return combine_alignedmtl(g, hp.aligned_rank_tol, std::move(state));
    case Method::IMTL:
      return combine_imtl(g, std::move(state));
    case Method::GradNorm:
      return weights_gradnorm(g, losses, hp.gradnorm_gamma, hp.gradnorm_lr, std::move(state));
    case Method::DWA: {
      auto out = weights_dwa(hp.dwa_temperature, std::move(state));
      out.state.loss_history.push_back(losses);
      if (out.state.loss_history.size() > 2)
        out.state.loss_history.erase(out.state.loss_history.begin());
      return out;
    }
    case Method::Uncertainty: {
      const Scalar lr_s = hp.uncertainty_lr < Scalar(0) ? hp.lr : hp.uncertainty_lr;
      return weights_uncertainty(losses, lr_s, std::move(state));
    }
    case Method::FAMO: {
      CombineResult<Scalar> out;
      out.loss_weights = famo_weights(losses, state, hp.famo_eps);
      out.applied = out.loss_weights->values;
      out.state = std::move(state);
      return out;
    }
  }
  throw std::logic_error("unknown method");
}

}  // namespace mtopt
