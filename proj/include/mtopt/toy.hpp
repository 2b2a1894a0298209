#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtopt/combiners.hpp"
#include "mtopt/monitors.hpp"
#include "mtopt/rng.hpp"
#include "mtopt/types.hpp"

namespace mtopt {

enum class Activation { Identity, Tanh };

/// Planted multi-task regression: targets are generated by a known shared map
/// W* and per-task heads v*_i whose supports overlap by a controllable
/// fraction. Training starts from the planted backbone with zero heads, so
/// every noise-free problem is realizable from the initial basin.
template <class Scalar>
struct ToyProblem {
  Eigen::Index input_dim = 0;    // n
  Eigen::Index feature_dim = 0;  // m
  Eigen::Index task_count = 0;   // T
  Eigen::Index sample_count = 0; // N
  Activation activation = Activation::Tanh;
  Scalar overlap = 0;            // rho in [0,1]
  Scalar noise = 0;              // sigma
  std::uint64_t seed = 0;

  MatrixX<Scalar> data;           // N x n, standard normal
  MatrixX<Scalar> targets;        // N x T
  MatrixX<Scalar> planted_shared; // m x n (W*)
  MatrixX<Scalar> planted_heads;  // m x T (v*_i columns)
  MatrixX<Scalar> init_shared;    // initial W
  MatrixX<Scalar> init_heads;     // initial heads
  std::vector<std::vector<Eigen::Index>> supports;
};

namespace detail {

/// Support of task i: a block of round(rho * s) coordinates shared by every
/// task plus private coordinates from task i's slice of the remainder, where
/// s = ceil(m/T). rho = 0 gives disjoint supports, rho = 1 identical ones.
inline std::vector<std::vector<Eigen::Index>> planted_supports(Eigen::Index m, Eigen::Index t,
                                                               double rho) {
  const Eigen::Index s = (m + t - 1) / t;
  const auto shared = static_cast<Eigen::Index>(std::llround(rho * static_cast<double>(s)));
  std::vector<std::vector<Eigen::Index>> supports(static_cast<std::size_t>(t));
  const Eigen::Index rest = m - shared;
  for (Eigen::Index i = 0; i < t; ++i) {
    auto& sup = supports[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < shared; ++j) sup.push_back(j);
    const Eigen::Index lo = shared + (i * rest) / t;
    const Eigen::Index hi = shared + ((i + 1) * rest) / t;
    for (Eigen::Index j = lo; j < hi && static_cast<Eigen::Index>(sup.size()) < s; ++j)
      sup.push_back(j);
  }
  return supports;
}

}  // namespace detail

template <class Scalar>
MatrixX<Scalar> activate(const MatrixX<Scalar>& pre, Activation act) {
  if (act == Activation::Identity) return pre;
  return pre.array().tanh().matrix();
}

/// head_scale multiplies the planted head magnitudes; small values keep the
/// backbone drift (and with it the learned heads' support leakage) small.
template <class Scalar>
ToyProblem<Scalar> make_problem(std::uint64_t seed, Eigen::Index n, Eigen::Index m,
                                Eigen::Index t, Eigen::Index samples, Scalar rho, Scalar sigma,
                                Activation act = Activation::Tanh,
                                Scalar head_scale = Scalar(1)) {
  if (n < 1 || m < 1 || samples < 1 || t < 2) throw std::invalid_argument("bad problem sizes");
  if (rho < Scalar(0) || rho > Scalar(1)) throw std::invalid_argument("overlap must be in [0,1]");
  if (sigma < Scalar(0)) throw std::invalid_argument("noise must be >= 0");
  if (m < t && rho == Scalar(0)) throw InfeasibleDisjointSupports{};

  Rng rng(seed);
  ToyProblem<Scalar> pb;
  pb.input_dim = n;
  pb.feature_dim = m;
  pb.task_count = t;
  pb.sample_count = samples;
  pb.activation = act;
  pb.overlap = rho;
  pb.noise = sigma;
  pb.seed = seed;

  pb.data.resize(samples, n);
  for (Eigen::Index r = 0; r < samples; ++r)
    for (Eigen::Index c = 0; c < n; ++c) pb.data(r, c) = Scalar(rng.normal());

  // W*: orthonormal rows when they fit (unit-variance pre-activations keep
  // tanh out of saturation), otherwise 1/sqrt(n)-scaled gaussian rows.
  pb.planted_shared.resize(m, n);
  if (m <= n) {
    MatrixX<Scalar> raw(n, m);
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < m; ++c) raw(r, c) = Scalar(rng.normal());
    const MatrixX<Scalar> q =
        Eigen::HouseholderQR<MatrixX<Scalar>>(raw).householderQ() * MatrixX<Scalar>::Identity(n, m);
    pb.planted_shared = q.transpose();
  } else {
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(n));
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index c = 0; c < n; ++c) pb.planted_shared(r, c) = scale * Scalar(rng.normal());
  }

  pb.supports = detail::planted_supports(m, t, static_cast<double>(rho));
  pb.planted_heads = MatrixX<Scalar>::Zero(m, t);
  const auto draw_value = [&rng, head_scale] {
    const Scalar sign = rng.uniform01() < 0.5 ? Scalar(-1) : Scalar(1);
    return sign * head_scale * Scalar(0.7 + 0.6 * rng.uniform01());
  };
  // Coordinates in the common block carry one value shared by every task, so
  // fully overlapping tasks are identical tasks; private coordinates draw
  // per-task values.
  const Eigen::Index shared_block =
      static_cast<Eigen::Index>(std::llround(static_cast<double>(rho) *
                                             static_cast<double>((m + t - 1) / t)));
  for (Eigen::Index j = 0; j < shared_block; ++j) {
    const Scalar v = draw_value();
    for (Eigen::Index i = 0; i < t; ++i) pb.planted_heads(j, i) = v;
  }
  for (Eigen::Index i = 0; i < t; ++i) {
    for (const Eigen::Index j : pb.supports[static_cast<std::size_t>(i)]) {
      if (j >= shared_block) pb.planted_heads(j, i) = draw_value();
    }
  }

  const MatrixX<Scalar> features = activate(MatrixX<Scalar>(pb.data * pb.planted_shared.transpose()), act);
  pb.targets = features * pb.planted_heads;
  if (sigma > Scalar(0)) {
    for (Eigen::Index r = 0; r < samples; ++r)
      for (Eigen::Index c = 0; c < t; ++c) pb.targets(r, c) += sigma * Scalar(rng.normal());
  }

  pb.init_shared = pb.planted_shared;
  pb.init_heads = MatrixX<Scalar>::Zero(m, t);
  return pb;
}

/// One forward pass; everything the per-step gradients need.
template <class Scalar>
struct Forward {
  MatrixX<Scalar> features;   // Z = act(X W^T), N x m
  MatrixX<Scalar> act_prime;  // act'(X W^T), N x m
  MatrixX<Scalar> residuals;  // Z V - Y, N x T
  LossVector<Scalar> losses;  // mean squared error per task
};

template <class Scalar>
Forward<Scalar> forward(const ToyProblem<Scalar>& pb, const MatrixX<Scalar>& shared,
                        const MatrixX<Scalar>& heads) {
  Forward<Scalar> fw;
  const MatrixX<Scalar> pre = pb.data * shared.transpose();
  fw.features = activate(pre, pb.activation);
  if (pb.activation == Activation::Identity)
    fw.act_prime = MatrixX<Scalar>::Ones(pre.rows(), pre.cols());
  else
    fw.act_prime = (Scalar(1) - fw.features.array().square()).matrix();
  fw.residuals = fw.features * heads - pb.targets;
  fw.losses = fw.residuals.array().square().colwise().mean().transpose();
  return fw;
}

template <class Scalar>
LossVector<Scalar> task_losses(const ToyProblem<Scalar>& pb, const MatrixX<Scalar>& shared,
                               const MatrixX<Scalar>& heads) {
  const MatrixX<Scalar> z = activate(MatrixX<Scalar>(pb.data * shared.transpose()), pb.activation);
  const MatrixX<Scalar> r = z * heads - pb.targets;
  return r.array().square().colwise().mean().transpose();
}

template <class Scalar>
TaskGradients<Scalar> grads_param_from(const ToyProblem<Scalar>& pb, const Forward<Scalar>& fw,
                                       const MatrixX<Scalar>& heads) {
  const Eigen::Index m = pb.feature_dim, n = pb.input_dim, t = pb.task_count;
  const Scalar inv = Scalar(2) / Scalar(pb.sample_count);
  MatrixX<Scalar> out(m * n, t);
  for (Eigen::Index i = 0; i < t; ++i) {
    // dL_i/dW = (2/N) * [(r_i v_i^T) .* act'(U)]^T X
    const MatrixX<Scalar> du =
        (fw.residuals.col(i) * heads.col(i).transpose()).cwiseProduct(fw.act_prime);
    const MatrixX<Scalar> gw = inv * du.transpose() * pb.data;
    out.col(i) = Eigen::Map<const VectorX<Scalar>>(gw.data(), m * n);
  }
  return {std::move(out), GradientLevel::ParameterLevel};
}

/// Batch-averaged gradient of each task loss w.r.t. the shared features:
/// (2/N) * sum_k r_ik * v_i, one length-m column per task.
template <class Scalar>
TaskGradients<Scalar> grads_feature_from(const ToyProblem<Scalar>& pb, const Forward<Scalar>& fw,
                                         const MatrixX<Scalar>& heads) {
  const Eigen::Index t = pb.task_count;
  const Scalar inv = Scalar(2) / Scalar(pb.sample_count);
  MatrixX<Scalar> out(pb.feature_dim, t);
  for (Eigen::Index i = 0; i < t; ++i) out.col(i) = inv * fw.residuals.col(i).sum() * heads.col(i);
  return {std::move(out), GradientLevel::FeatureLevel};
}

template <class Scalar>
TaskGradients<Scalar> grads_param(const ToyProblem<Scalar>& pb, const MatrixX<Scalar>& shared,
                                  const MatrixX<Scalar>& heads) {
  return grads_param_from(pb, forward(pb, shared, heads), heads);
}

template <class Scalar>
TaskGradients<Scalar> grads_feature(const ToyProblem<Scalar>& pb, const MatrixX<Scalar>& shared,
                                    const MatrixX<Scalar>& heads) {
  return grads_feature_from(pb, forward(pb, shared, heads), heads);
}

/// dL_i/dv_i columns (each head only sees its own task).
template <class Scalar>
MatrixX<Scalar> head_gradients(const ToyProblem<Scalar>& pb, const Forward<Scalar>& fw) {
  return (Scalar(2) / Scalar(pb.sample_count)) * fw.features.transpose() * fw.residuals;
}

template <class Scalar>
struct TrainState {
  MatrixX<Scalar> shared;
  MatrixX<Scalar> heads;
  long iteration = 0;
  Scalar lr = Scalar(0.05);
  CombinerState<Scalar> combiner;
};

template <class Scalar>
TrainState<Scalar> make_train_state(const ToyProblem<Scalar>& pb, Method method,
                                    std::uint64_t seed, Scalar lr) {
  TrainState<Scalar> st;
  st.shared = pb.init_shared;
  st.heads = pb.init_heads;
  st.lr = lr;
  st.combiner = make_combiner_state<Scalar>(method, pb.task_count, seed);
  return st;
}

namespace detail {

/// (rep) GradDrop: the per-feature sign masks are applied row-wise to the
/// parameter-level task gradients before summing (the chain-rule image of
/// masking the feature gradient).
template <class Scalar>
VectorX<Scalar> graddrop_pullback(const ToyProblem<Scalar>& pb, const MatrixX<Scalar>& gp,
                                  const MatrixX<Scalar>& gf, const VectorX<Scalar>& kept_sign) {
  const Eigen::Index m = pb.feature_dim, n = pb.input_dim, t = pb.task_count;
  VectorX<Scalar> out = VectorX<Scalar>::Zero(m * n);
  for (Eigen::Index i = 0; i < t; ++i) {
    Eigen::Map<const MatrixX<Scalar>> gi(gp.col(i).data(), m, n);
    Eigen::Map<MatrixX<Scalar>> acc(out.data(), m, n);
    for (Eigen::Index j = 0; j < m; ++j) {
      const Scalar e = gf(j, i);
      const bool keep = (kept_sign(j) > Scalar(0) && e > Scalar(0)) ||
                        (kept_sign(j) < Scalar(0) && e < Scalar(0));
      if (keep) acc.row(j) += gi.row(j);
    }
  }
  return out;
}

}  // namespace detail

/// One optimizer step. Manipulation methods move the shared weights along the
/// combined direction and leave the heads' own gradients untouched; balancing
/// methods scale both the shared contributions and the head gradients.
/// Feature-level runs of manipulation methods are pulled back to parameter
/// space through their effective combination weights (sign masks for
/// GradDrop). Emits a snapshot every hp.monitor_cadence iterations.
template <class Scalar>
std::optional<InterferenceSnapshot> train_step(const ToyProblem<Scalar>& pb,
                                               TrainState<Scalar>& st, Method method,
                                               GradientLevel level, const Hyper<Scalar>& hp) {
  const Eigen::Index m = pb.feature_dim, n = pb.input_dim;

  const Forward<Scalar> fw = forward(pb, st.shared, st.heads);
  if (!fw.losses.allFinite()) throw DivergenceDetected(st.iteration);
  const LossVector<Scalar> losses = fw.losses;
  const TaskGradients<Scalar> gp = grads_param_from(pb, fw, st.heads);
  const TaskGradients<Scalar> gf = grads_feature_from(pb, fw, st.heads);
  const MatrixX<Scalar> head_g = head_gradients(pb, fw);

  VectorX<Scalar> shared_step;
  VectorX<Scalar> head_scale = VectorX<Scalar>::Ones(pb.task_count);
  VectorX<Scalar> applied;

  const MethodKind kind = method_kind(method);
  switch (kind) {
    case MethodKind::Baseline: {
      shared_step = gp.entries.rowwise().sum();
      break;
    }
    case MethodKind::Direction: {
      const TaskGradients<Scalar>& sel = level == GradientLevel::FeatureLevel ? gf : gp;
      auto res = combine(method, sel, losses, hp, std::move(st.combiner));
      st.combiner = std::move(res.state);
      applied = res.applied;
      if (level == GradientLevel::ParameterLevel) {
        shared_step = *res.direction;
      } else if (method == Method::GradDrop) {
        shared_step = detail::graddrop_pullback(pb, gp.entries, gf.entries, res.kept_sign);
      } else {
        shared_step = gp.entries * res.applied;
      }
      break;
    }
    case MethodKind::Weighting: {
      auto res = combine(method, gp, losses, hp, std::move(st.combiner));
      st.combiner = std::move(res.state);
      applied = res.loss_weights->values;
      shared_step = gp.entries * applied;
      head_scale = applied;
      break;
    }
    case MethodKind::Regularizer: {
      const MatrixX<Scalar> heads_now = st.heads;
      auto grads_at = [&](const VectorX<Scalar>& theta) {
        const Eigen::Map<const MatrixX<Scalar>> w(theta.data(), m, n);
        if (level == GradientLevel::FeatureLevel)
          return grads_feature(pb, MatrixX<Scalar>(w), heads_now).entries;
        return grads_param(pb, MatrixX<Scalar>(w), heads_now).entries;
      };
      const Eigen::Map<const VectorX<Scalar>> theta(st.shared.data(), m * n);
      shared_step = gp.entries.rowwise().sum() +
                    cosreg_gradient<Scalar>(grads_at, VectorX<Scalar>(theta), hp.cosreg_lambda,
                                            hp.cosreg_fd_step);
      st.combiner.step_counter += 1;
      break;
    }
  }

  st.shared -= st.lr * Eigen::Map<const MatrixX<Scalar>>(shared_step.data(), m, n);
  for (Eigen::Index i = 0; i < pb.task_count; ++i)
    st.heads.col(i) -= st.lr * head_scale(i) * head_g.col(i);
  st.iteration += 1;

  if (method == Method::FAMO) {
    const LossVector<Scalar> fresh = task_losses(pb, st.shared, st.heads);
    if (fresh.allFinite()) famo_update(losses, fresh, hp.famo_lr, hp.famo_eps, st.combiner);
  }

  if (hp.monitor_cadence > 0 && st.iteration % hp.monitor_cadence == 0) {
    InterferenceSnapshot snap;
    snap.iteration = st.iteration;
    snap.gds = static_cast<double>(gds(gp));
    snap.gms = static_cast<double>(gms(gp));
    snap.fd = static_cast<double>(fd_entropy(gf).value);
    snap.losses = losses.template cast<double>();
    if (applied.size() > 0) snap.applied_weights = applied.template cast<double>();
    return snap;
  }
  return std::nullopt;
}

template <class Scalar>
Trajectory train_run(const ToyProblem<Scalar>& pb, Method method, GradientLevel level, int iters,
                     std::uint64_t seed, const Hyper<Scalar>& hp) {
  TrainState<Scalar> st = make_train_state(pb, method, seed, hp.lr);
  Trajectory traj;
  traj.method_label = method_name(method);
  traj.level = level;
  traj.seed = seed;
  for (int t = 0; t < iters; ++t) {
    auto snap = train_step(pb, st, method, level, hp);
    if (snap) traj.snapshots.push_back(std::move(*snap));
  }
  const LossVector<Scalar> fin = task_losses(pb, st.shared, st.heads);
  if (!fin.allFinite()) throw DivergenceDetected(st.iteration);
  traj.final_losses = fin.template cast<double>();

  if (hp.monitor_cadence > 0 &&
      (traj.snapshots.empty() || traj.snapshots.back().iteration != iters)) {
    InterferenceSnapshot snap;
    snap.iteration = iters;
    snap.gds = static_cast<double>(gds(grads_param(pb, st.shared, st.heads)));
    snap.gms = static_cast<double>(gms(grads_param(pb, st.shared, st.heads)));
    snap.fd = static_cast<double>(fd_entropy(grads_feature(pb, st.shared, st.heads)).value);
    snap.losses = traj.final_losses;
    traj.snapshots.push_back(std::move(snap));
  }
  return traj;
}

}  // namespace mtopt
