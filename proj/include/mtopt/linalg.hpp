#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "mtopt/types.hpp"

namespace mtopt {

/// Pairwise inner products of the task gradients: K_ij = <g_i, g_j>.
template <class Scalar>
GramMatrix<Scalar> gram(const TaskGradients<Scalar>& g) {
  return g.entries.transpose() * g.entries;
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
/// Idempotent: points already on the simplex are fixed.
template <class Scalar>
GradWeights<Scalar> simplex_project(const VectorX<Scalar>& y) {
  const Eigen::Index n = y.size();
  std::vector<Scalar> u(y.data(), y.data() + n);
  std::sort(u.begin(), u.end(), std::greater<Scalar>());
  Scalar csum = 0;
  Scalar theta = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    csum += u[static_cast<std::size_t>(j)];
    const Scalar cand = (csum - Scalar(1)) / Scalar(j + 1);
    if (u[static_cast<std::size_t>(j)] > cand) theta = cand;
  }
  VectorX<Scalar> x = (y.array() - theta).cwiseMax(Scalar(0)).matrix();
  return {std::move(x), WeightConstraint::Simplex};
}

template <class Scalar>
struct MinNormPoint {
  GradWeights<Scalar> weights;
  UpdateDirection<Scalar> direction;  // G * weights
  bool converged = false;
  int iterations = 0;
};

/// Frank-Wolfe solver (with away steps) for the shortest vector in the convex
/// hull of the columns of G, i.e. min ||G a||^2 over the simplex. Runs in Gram
/// space (O(T^2) per step) with the exact line search along each chosen vertex
/// direction; away steps make the convergence linear on this quadratic, so the
/// first-order gap actually reaches tol. Starts from, and breaks ties at, the
/// uniform weighting.
template <class Scalar>
MinNormPoint<Scalar> min_norm_point(const TaskGradients<Scalar>& g, int max_iters = 1000,
                                    Scalar tol = Scalar(1e-8)) {
  const Eigen::Index t = g.tasks();
  const GramMatrix<Scalar> k = gram(g);
  VectorX<Scalar> alpha = VectorX<Scalar>::Constant(t, Scalar(1) / Scalar(t));

  MinNormPoint<Scalar> out;
  for (int it = 0; it < max_iters; ++it) {
    out.iterations = it;
    const VectorX<Scalar> q = k * alpha;
    const Scalar value = alpha.dot(q);  // ||G alpha||^2
    Eigen::Index toward = 0;
    const Scalar qmin = q.minCoeff(&toward);
    // First-order optimality: min_i <G alpha, g_i> >= ||G alpha||^2 - tol*(1+||G alpha||^2).
    const Scalar fw_gap = value - qmin;
    if (fw_gap <= tol * (Scalar(1) + value)) {
      out.converged = true;
      break;
    }
    Eigen::Index away = -1;
    Scalar qmax = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index i = 0; i < t; ++i) {
      if (alpha(i) > Scalar(0) && q(i) > qmax) {
        qmax = q(i);
        away = i;
      }
    }

    if (away < 0 || fw_gap >= qmax - value) {
      // toward step: (1 - gamma) alpha + gamma e_toward
      const Scalar den = value - Scalar(2) * qmin + k(toward, toward);
      const Scalar gamma =
          den <= Scalar(0) ? Scalar(1) : std::clamp(fw_gap / den, Scalar(0), Scalar(1));
      alpha *= (Scalar(1) - gamma);
      alpha(toward) += gamma;
    } else {
      // away step: (1 + gamma) alpha - gamma e_away, capped where alpha_away hits 0
      const Scalar spread = Scalar(1) - alpha(away);
      const Scalar gmax = spread <= Scalar(0) ? Scalar(1) : alpha(away) / spread;
      const Scalar den = value - Scalar(2) * qmax + k(away, away);
      const Scalar gamma =
          den <= Scalar(0) ? gmax : std::clamp((qmax - value) / den, Scalar(0), gmax);
      alpha *= (Scalar(1) + gamma);
      alpha(away) -= gamma;
      alpha = alpha.cwiseMax(Scalar(0));
      alpha /= alpha.sum();
    }
  }
  out.direction = g.entries * alpha;
  out.weights = {std::move(alpha), WeightConstraint::Simplex};
  return out;
}

template <class Scalar>
struct Eigh {
  VectorX<Scalar> eigenvalues;   // descending
  MatrixX<Scalar> eigenvectors;  // orthonormal columns, K = V diag(l) V^T
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Stops once the
/// off-diagonal Frobenius mass drops below tol * ||K||_F.
template <class Scalar>
Eigh<Scalar> jacobi_eigh(const MatrixX<Scalar>& k, Scalar tol = Scalar(1e-10)) {
  const Eigen::Index n = k.rows();
  MatrixX<Scalar> a = k;
  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);
  const Scalar stop = tol * std::max(k.norm(), std::numeric_limits<Scalar>::min());

  int sweeps = 0;
  for (; sweeps < 64 && n > 1; ++sweeps) {
    Scalar off2 = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off2 += a(p, q) * a(p, q);
    if (std::sqrt(Scalar(2) * off2) <= stop) break;

    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (std::abs(apq) <= std::numeric_limits<Scalar>::min()) continue;
        const Scalar tau = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar tt = (tau >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                          (std::abs(tau) + std::sqrt(Scalar(1) + tau * tau));
        const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + tt * tt);
        const Scalar s = tt * c;
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar aip = a(i, p), aiq = a(i, q);
          a(i, p) = c * aip - s * aiq;
          a(i, q) = s * aip + c * aiq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar api = a(p, i), aqi = a(q, i);
          a(p, i) = c * api - s * aqi;
          a(q, i) = s * api + c * aqi;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar vip = v(i, p), viq = v(i, q);
          v(i, p) = c * vip - s * viq;
          v(i, q) = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

  Eigh<Scalar> out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.eigenvalues(i) = a(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i)]);
    out.eigenvectors.col(i) = v.col(idx[static_cast<std::size_t>(i)]);
  }
  out.sweeps = sweeps;
  return out;
}

/// Gaussian elimination with partial pivoting plus one refinement pass.
/// Throws SingularSystem when a pivot falls below 1e-12 * max|A|.
template <class Scalar>
VectorX<Scalar> solve_linear(const MatrixX<Scalar>& a, const VectorX<Scalar>& b) {
  const Eigen::Index n = a.rows();
  const Scalar anorm = a.cwiseAbs().maxCoeff();
  if (!(anorm > Scalar(0))) throw SingularSystem{};
  const Scalar pivot_floor = Scalar(1e-12) * anorm;

  MatrixX<Scalar> lu = a;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);

  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index piv = col;
    Scalar best = std::abs(lu(col, col));
    for (Eigen::Index r = col + 1; r < n; ++r) {
      if (std::abs(lu(r, col)) > best) {
        best = std::abs(lu(r, col));
        piv = r;
      }
    }
    if (best < pivot_floor) throw SingularSystem{};
    if (piv != col) {
      lu.row(piv).swap(lu.row(col));
      std::swap(perm[static_cast<std::size_t>(piv)], perm[static_cast<std::size_t>(col)]);
    }
    for (Eigen::Index r = col + 1; r < n; ++r) {
      const Scalar f = lu(r, col) / lu(col, col);
      lu(r, col) = f;
      for (Eigen::Index c = col + 1; c < n; ++c) lu(r, c) -= f * lu(col, c);
    }
  }

  auto lu_solve = [&](const VectorX<Scalar>& rhs) {
    VectorX<Scalar> x(n);
    for (Eigen::Index i = 0; i < n; ++i) x(i) = rhs(perm[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < i; ++j) x(i) -= lu(i, j) * x(j);
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      for (Eigen::Index j = i + 1; j < n; ++j) x(i) -= lu(i, j) * x(j);
      x(i) /= lu(i, i);
    }
    return x;
  };

  VectorX<Scalar> x = lu_solve(b);
  x += lu_solve(VectorX<Scalar>(b - a * x));
  return x;
}

}  // namespace mtopt
