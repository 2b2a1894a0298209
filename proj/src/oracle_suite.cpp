#include <chrono>
#include <cmath>
#include <ostream>

#include <Eigen/SVD>

#include "mtopt/harness.hpp"

namespace mtopt::harness {

namespace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr int kTaskChoices[] = {2, 3, 4, 7};

TaskGradients<double> random_gradients(Rng& rng, Eigen::Index d, Eigen::Index t,
                                       GradientLevel level = GradientLevel::ParameterLevel) {
  Matrix m(d, t);
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < t; ++c) m(r, c) = rng.normal();
  return {std::move(m), level};
}

Vector random_simplex(Rng& rng, Eigen::Index t) {
  Vector v(t);
  for (Eigen::Index i = 0; i < t; ++i) v(i) = -std::log(1.0 - rng.uniform01());
  return v / v.sum();
}

struct Check {
  const char* name;
  bool ok = true;
  double worst = 0.0;  // largest observed violation/deviation
  int flagged = 0;     // instances that took a flagged fallback

  void record(double violation) { worst = std::max(worst, violation); }
  void finish(double limit) { ok = worst <= limit; }
};

void print(std::ostream& out, const Check& c, double seconds, int instances) {
  out << (c.ok ? "[PASS] " : "[FAIL] ") << c.name << ": worst " << c.worst << " over "
      << instances << " instances";
  if (c.flagged > 0) out << " (" << c.flagged << " flagged fallbacks)";
  out << " [" << seconds << "s]\n";
}

}  // namespace

bool combiner_oracle_suite(int instances, std::ostream& out) {
  const Hyper<double> hp;
  bool all_ok = true;
  const auto timed = [&](auto&& body, Check& check, double limit) {
    const auto start = std::chrono::steady_clock::now();
    body(check);
    check.finish(limit);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    print(out, check, secs, instances);
    all_ok = all_ok && check.ok;
  };

  // PCGrad: after surgery neither task ascends the other's loss (T = 2).
  {
    Check c{"pcgrad pairwise non-negativity"};
    timed(
        [&](Check& chk) {
          Rng rng(101);
          for (int k = 0; k < instances; ++k) {
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), 2);
            auto s = pcgrad_surgery(g, rng);
            chk.record(-s.surgered.col(0).dot(g.entries.col(1)));
            chk.record(-s.surgered.col(1).dot(g.entries.col(0)));
          }
        },
        c, 1e-10);
  }

  // MGDA: no random simplex point beats the Frank-Wolfe solution, and the
  // first-order gap is closed.
  {
    Check c{"mgda min-norm vs 1000 random simplex points"};
    timed(
        [&](Check& chk) {
          Rng rng(202);
          for (int k = 0; k < instances; ++k) {
            const Eigen::Index t = kTaskChoices[k % 4];
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), t);
            const auto mn = min_norm_point(g, hp.minnorm_iters, 1e-8);
            const double norm2 = mn.direction.squaredNorm();
            const Matrix kk = gram(g);
            const double gap =
                norm2 - (kk * mn.weights.values).minCoeff() - 1e-6 * (1.0 + norm2);
            chk.record(gap);
            for (int b = 0; b < 1000; ++b) {
              const Vector beta = random_simplex(rng, t);
              const double other = (g.entries * beta).squaredNorm();
              chk.record(norm2 - other * (1.0 + 1e-9) - 1e-12);
            }
          }
        },
        c, 0.0);
  }

  // CAGrad: trust-region constraint, and the exact mean at c = 0.
  {
    Check c{"cagrad constraint and c=0 identity"};
    timed(
        [&](Check& chk) {
          Rng rng(303);
          const double cs[] = {0.2, 0.5, 0.8};
          for (int k = 0; k < instances; ++k) {
            const Eigen::Index t = kTaskChoices[k % 4];
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), t);
            auto state = make_combiner_state<double>(Method::CAGrad, t, 7);
            const double cc = cs[k % 3];
            const auto res = combine_cagrad(g, cc, state, hp.cagrad_iters, hp.cagrad_step);
            const Vector mean = g.entries.rowwise().mean();
            chk.record((*res.direction - mean).norm() - cc * mean.norm() * (1.0 + 1e-6));
            const auto id = combine_cagrad(g, 0.0, state, hp.cagrad_iters, hp.cagrad_step);
            chk.record((*id.direction - mean).cwiseAbs().maxCoeff());
          }
        },
        c, 0.0);
  }

  // Nash bargaining: converged instances satisfy the residual; fallbacks are
  // flagged and counted.
  {
    Check c{"nash fixed-point residual (converged instances)"};
    timed(
        [&](Check& chk) {
          Rng rng(404);
          for (int k = 0; k < instances; ++k) {
            const Eigen::Index t = kTaskChoices[k % 4];
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), t);
            auto state = make_combiner_state<double>(Method::NashMTL, t, 7);
            const auto res = combine_nash(g, hp.nash_damping, state, hp.nash_iters, hp.nash_tol);
            if (!res.converged) {
              ++chk.flagged;
              continue;
            }
            const Matrix kk = gram(g);
            const Vector q = kk * res.applied;
            chk.record((q - res.applied.cwiseInverse()).cwiseAbs().maxCoeff() - 1e-6);
            chk.record(-res.applied.minCoeff());
          }
        },
        c, 0.0);
  }

  // Aligned-MTL: all kept singular values of the rebalanced gradient matrix
  // coincide (checked through Eigen's SVD, an independent route).
  {
    Check c{"alignedmtl equal singular values"};
    timed(
        [&](Check& chk) {
          Rng rng(505);
          for (int k = 0; k < instances; ++k) {
            const Eigen::Index t = kTaskChoices[k % 4];
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), t);
            const auto bal = aligned_balance(gram(g), hp.aligned_rank_tol);
            if (bal.degenerate || bal.rank == 0) {
              ++chk.flagged;
              continue;
            }
            const Matrix ghat = g.entries * bal.weight_matrix;
            Eigen::JacobiSVD<Matrix> svd(ghat);
            const auto& sv = svd.singularValues();
            chk.record((sv(0) - sv(bal.rank - 1)) / sv(0) - 1e-6);
          }
        },
        c, 0.0);
  }

  // IMTL-G: equal projections onto every task's unit gradient.
  {
    Check c{"imtl equal projections"};
    timed(
        [&](Check& chk) {
          Rng rng(606);
          for (int k = 0; k < instances; ++k) {
            const Eigen::Index t = kTaskChoices[k % 4];
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), t);
            auto state = make_combiner_state<double>(Method::IMTL, t, 7);
            const auto res = combine_imtl(g, state);
            if (res.degenerate) {
              ++chk.flagged;
              continue;
            }
            const Vector& dir = *res.direction;
            const double ref = dir.dot(g.entries.col(0)) / g.entries.col(0).norm();
            for (Eigen::Index i = 1; i < t; ++i) {
              const double proj = dir.dot(g.entries.col(i)) / g.entries.col(i).norm();
              chk.record(std::abs(proj - ref) - 1e-8 * (1.0 + dir.norm()));
            }
          }
        },
        c, 0.0);
  }

  // GradNorm and DWA renormalize to sum w = T every step.
  {
    Check c{"gradnorm/dwa weight sums equal T"};
    timed(
        [&](Check& chk) {
          Rng rng(707);
          for (int k = 0; k < instances; ++k) {
            const Eigen::Index t = kTaskChoices[k % 4];
            const auto g = random_gradients(rng, 4 + Eigen::Index(rng.below(61)), t);
            Vector losses(t);
            for (Eigen::Index i = 0; i < t; ++i) losses(i) = 0.1 + rng.uniform01();
            auto gn = make_combiner_state<double>(Method::GradNorm, t, 7);
            for (int step = 0; step < 3; ++step) {
              auto res = weights_gradnorm(g, losses, hp.gradnorm_gamma, hp.gradnorm_lr, gn);
              gn = res.state;
              chk.record(std::abs(res.loss_weights->values.sum() - double(t)) - 1e-9);
            }
            auto dwa = make_combiner_state<double>(Method::DWA, t, 7);
            for (int step = 0; step < 4; ++step) {
              Vector noisy = losses;
              for (Eigen::Index i = 0; i < t; ++i) noisy(i) *= 0.8 + 0.4 * rng.uniform01();
              auto res = combine(Method::DWA, g, noisy, hp, dwa);
              dwa = res.state;
              chk.record(std::abs(res.loss_weights->values.sum() - double(t)) - 1e-9);
            }
          }
        },
        c, 0.0);
  }

  return all_ok;
}

}  // namespace mtopt::harness
