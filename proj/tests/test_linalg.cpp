#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mtopt/linalg.hpp"
#include "oracles.hpp"

using namespace mtopt;
using testing::random_matrix;
using testing::random_simplex_point;
using testing::random_vector;

namespace {

TaskGradients<double> cols2(std::initializer_list<double> a, std::initializer_list<double> b) {
  MatrixX<double> m(static_cast<Eigen::Index>(a.size()), 2);
  Eigen::Index i = 0;
  for (const double v : a) m(i++, 0) = v;
  i = 0;
  for (const double v : b) m(i++, 1) = v;
  return {m, GradientLevel::ParameterLevel};
}

}  // namespace

TEST_CASE("gram of orthonormal, scaled and identical columns") {
  const auto id = gram(cols2({1, 0}, {0, 1}));
  CHECK(id.isApprox(MatrixX<double>::Identity(2, 2)));

  const auto scaled = gram(cols2({2, 0}, {0, 1}));
  CHECK(scaled(0, 0) == doctest::Approx(4.0));
  CHECK(scaled(1, 1) == doctest::Approx(1.0));
  CHECK(scaled(0, 1) == doctest::Approx(0.0));

  const auto rank1 = gram(cols2({1, 2, 3}, {1, 2, 3}));
  const double n2 = 14.0;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) CHECK(rank1(r, c) == doctest::Approx(n2));
}

TEST_CASE("trace identity: <Ma,Mb> equals sum((M^T M) o (a x b))") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = 1 + Eigen::Index(rng.below(50));
    const Eigen::Index t = 2 + Eigen::Index(rng.below(7));
    const MatrixX<double> m = random_matrix(rng, d, t);
    const VectorX<double> a = random_vector(rng, t);
    const VectorX<double> b = random_vector(rng, t);
    const double lhs = (m * a).dot(m * b);
    const double rhs = ((m.transpose() * m).cwiseProduct(a * b.transpose())).sum();
    const double scale = std::max((m * a).norm() * (m * b).norm(), 1e-300);
    CHECK(std::abs(lhs - rhs) / scale <= 1e-10);
  }
}

TEST_CASE("norm sub-multiplicativity with the Frobenius norm") {
  Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = 1 + Eigen::Index(rng.below(40));
    const Eigen::Index t = 2 + Eigen::Index(rng.below(7));
    const MatrixX<double> m = random_matrix(rng, d, t);
    const VectorX<double> a = random_vector(rng, t);
    CHECK((m * a).norm() <= m.norm() * a.norm() * (1.0 + 1e-12));
  }
}

TEST_CASE("simplex projection: worked examples") {
  VectorX<double> y(2);
  y << 0.3, 0.7;
  CHECK(simplex_project(y).values.isApprox(y));  // fixed point

  y << 0.6, 0.6;
  const auto even = simplex_project(y);
  CHECK(even.values(0) == doctest::Approx(0.5));  // KKT threshold 0.1
  CHECK(even.values(1) == doctest::Approx(0.5));

  y << 2.0, 0.0;
  const auto corner = simplex_project(y);
  CHECK(corner.values(0) == doctest::Approx(1.0));  // KKT threshold 1
  CHECK(corner.values(1) == doctest::Approx(0.0));
}

TEST_CASE("simplex projection: feasibility and idempotence") {
  Rng rng(44);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index t = 2 + Eigen::Index(rng.below(9));
    const auto w = simplex_project(VectorX<double>(3.0 * random_vector(rng, t)));
    CHECK(w.constraint == WeightConstraint::Simplex);
    CHECK(satisfies_constraint(w));
    const auto again = simplex_project(w.values);
    CHECK((again.values - w.values).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("min-norm point: worked examples") {
  const auto ortho = min_norm_point(cols2({1, 0}, {0, 1}));
  CHECK(ortho.converged);
  CHECK(ortho.weights.values(0) == doctest::Approx(0.5));
  CHECK(ortho.direction(0) == doctest::Approx(0.5));
  CHECK(ortho.direction(1) == doctest::Approx(0.5));

  // degenerate hull: both columns equal, tie resolves to uniform weights
  const auto same = min_norm_point(cols2({1, 2}, {1, 2}));
  CHECK(same.weights.values(0) == doctest::Approx(0.5));
  CHECK(same.direction(0) == doctest::Approx(1.0));
  CHECK(same.direction(1) == doctest::Approx(2.0));

  // collinear hull: endpoint optimal
  const auto line = min_norm_point(cols2({1, 0}, {3, 0}));
  CHECK(line.weights.values(0) == doctest::Approx(1.0));
  CHECK(line.direction(0) == doctest::Approx(1.0));
}

TEST_CASE("min-norm point matches the T=2 grid oracle") {
  Rng rng(45);
  for (int trial = 0; trial < 25; ++trial) {
    const auto g = make_task_gradients(random_matrix(rng, 6, 2), GradientLevel::ParameterLevel);
    const auto mn = min_norm_point(g);
    const auto oracle = testing::grid_min_norm_t2(g.entries);
    const double got = mn.direction.squaredNorm();
    const double best = (g.entries * oracle).squaredNorm();
    CHECK(got <= best + 1e-6);
  }
}

TEST_CASE("min-norm point beats random simplex points and closes the FW gap") {
  Rng rng(46);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index t = 2 + Eigen::Index(rng.below(6));
    const auto g = make_task_gradients(random_matrix(rng, 12, t), GradientLevel::ParameterLevel);
    const auto mn = min_norm_point(g);
    const double norm2 = mn.direction.squaredNorm();
    for (int b = 0; b < 1000; ++b) {
      const VectorX<double> beta = random_simplex_point(rng, t);
      CHECK(norm2 <= (g.entries * beta).squaredNorm() * (1.0 + 1e-9) + 1e-12);
    }
    const GramMatrix<double> k = gram(g);
    CHECK((k * mn.weights.values).minCoeff() >= norm2 - 1e-8 * (1.0 + norm2) - 1e-12);
  }
}

TEST_CASE("jacobi eigendecomposition: worked examples") {
  const auto id = jacobi_eigh(MatrixX<double>(MatrixX<double>::Identity(2, 2)));
  CHECK(id.eigenvalues(0) == doctest::Approx(1.0));
  CHECK(id.eigenvalues(1) == doctest::Approx(1.0));

  MatrixX<double> k(2, 2);
  k << 2, 1, 1, 2;
  const auto sym = jacobi_eigh(k);  // characteristic polynomial roots 3 and 1
  CHECK(sym.eigenvalues(0) == doctest::Approx(3.0));
  CHECK(sym.eigenvalues(1) == doctest::Approx(1.0));

  k << 4, 0, 0, 1;
  const auto diag = jacobi_eigh(k);
  CHECK(diag.eigenvalues(0) == doctest::Approx(4.0));
  CHECK(diag.eigenvalues(1) == doctest::Approx(1.0));
  CHECK(std::abs(diag.eigenvectors(0, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(diag.eigenvectors(1, 1)) == doctest::Approx(1.0));
}

TEST_CASE("jacobi eigendecomposition: reconstruction and orthonormality") {
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index t = 2 + Eigen::Index(rng.below(9));
    const MatrixX<double> m = random_matrix(rng, t + 2, t);
    const MatrixX<double> k = m.transpose() * m;  // PSD
    const auto eig = jacobi_eigh(k);
    const MatrixX<double> rebuilt =
        eig.eigenvectors * eig.eigenvalues.asDiagonal() * eig.eigenvectors.transpose();
    CHECK((rebuilt - k).norm() <= 1e-8 * (1.0 + k.norm()));
    const MatrixX<double> vtv = eig.eigenvectors.transpose() * eig.eigenvectors;
    CHECK((vtv - MatrixX<double>::Identity(t, t)).norm() <= 1e-8);
    for (Eigen::Index i = 1; i < t; ++i) CHECK(eig.eigenvalues(i - 1) >= eig.eigenvalues(i));
    CHECK(eig.eigenvalues(t - 1) >= -1e-8 * std::max(1.0, eig.eigenvalues(0)));
  }
}

TEST_CASE("linear solve: examples and singular systems") {
  MatrixX<double> a = MatrixX<double>::Identity(2, 2);
  VectorX<double> b(2);
  b << 3, 4;
  CHECK(solve_linear(a, b).isApprox(b));

  a << 2, 0, 0, 1;
  b << 1, 1;
  const auto x = solve_linear(a, b);
  CHECK(x(0) == doctest::Approx(0.5));
  CHECK(x(1) == doctest::Approx(1.0));

  a << 1, 1, 1, 1;
  CHECK_THROWS_AS(solve_linear(a, b), SingularSystem);
  a.setZero();
  CHECK_THROWS_AS(solve_linear(a, b), SingularSystem);
}

TEST_CASE("linear solve: residual bound on random systems") {
  Rng rng(48);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index t = 2 + Eigen::Index(rng.below(9));
    MatrixX<double> a = random_matrix(rng, t, t);
    a += 0.5 * double(t) * MatrixX<double>::Identity(t, t);  // keep well conditioned
    const VectorX<double> b = random_vector(rng, t);
    const auto x = solve_linear(a, b);
    const double resid = (a * x - b).cwiseAbs().maxCoeff();
    CHECK(resid <= 1e-8 * (1.0 + b.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("kernels instantiate for float") {
  MatrixX<float> m(3, 2);
  m << 1.f, 0.f, 0.f, 2.f, 0.f, 0.f;
  const TaskGradients<float> g{m, GradientLevel::ParameterLevel};
  const auto k = gram(g);
  CHECK(k(0, 0) == doctest::Approx(1.f));
  CHECK(k(1, 1) == doctest::Approx(4.f));
  VectorX<float> y(2);
  y << 0.6f, 0.6f;
  CHECK(simplex_project(y).values.sum() == doctest::Approx(1.f));
  const auto mn = min_norm_point(g, 100, 1e-5f);
  CHECK(mn.weights.values.sum() == doctest::Approx(1.f));
}
