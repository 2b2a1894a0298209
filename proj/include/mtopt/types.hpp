#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtopt {

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Per-task losses L_1..L_T.
template <class Scalar>
using LossVector = VectorX<Scalar>;

/// Combined update direction for the shared parameters (or features).
template <class Scalar>
using UpdateDirection = VectorX<Scalar>;

/// K = G^T G, the T x T matrix of pairwise gradient inner products.
template <class Scalar>
using GramMatrix = MatrixX<Scalar>;

/// Which space a gradient matrix lives in: shared-parameter coordinates or
/// shared-representation (feature) coordinates.
enum class GradientLevel { ParameterLevel, FeatureLevel };

enum class WeightConstraint { Unconstrained, Simplex, SumT, Positive };

struct SingularSystem : std::runtime_error {
  SingularSystem() : std::runtime_error("linear system is singular to working precision") {}
};

struct WrongGradientLevel : std::runtime_error {
  WrongGradientLevel() : std::runtime_error("operation requires feature-level gradients") {}
};

struct DivergenceDetected : std::runtime_error {
  long iteration;
  explicit DivergenceDetected(long it)
      : std::runtime_error("non-finite loss at iteration " + std::to_string(it)), iteration(it) {}
};

struct ItemSetMismatch : std::runtime_error {
  ItemSetMismatch() : std::runtime_error("rankings do not cover the same item set") {}
};

struct EmptyTrajectory : std::runtime_error {
  EmptyTrajectory() : std::runtime_error("trajectory has no snapshots") {}
};

struct InfeasibleDisjointSupports : std::runtime_error {
  InfeasibleDisjointSupports()
      : std::runtime_error("disjoint planted supports need feature_dim >= task_count") {}
};

/// d x T matrix whose columns are the per-task gradients g_i.
template <class Scalar>
struct TaskGradients {
  MatrixX<Scalar> entries;
  GradientLevel level = GradientLevel::ParameterLevel;

  Eigen::Index dim() const { return entries.rows(); }
  Eigen::Index tasks() const { return entries.cols(); }
};

template <class Scalar>
TaskGradients<Scalar> make_task_gradients(MatrixX<Scalar> entries, GradientLevel level) {
  if (entries.rows() < 1 || entries.cols() < 2)
    throw std::invalid_argument("task gradients need d >= 1 and T >= 2");
  if (!entries.allFinite()) throw std::invalid_argument("task gradients must be finite");
  return TaskGradients<Scalar>{std::move(entries), level};
}

/// Length-T weighting of the tasks, tagged with the constraint it satisfies.
template <class Scalar>
struct GradWeights {
  VectorX<Scalar> values;
  WeightConstraint constraint = WeightConstraint::Unconstrained;
};

template <class Scalar>
bool satisfies_constraint(const GradWeights<Scalar>& w, Scalar tol = Scalar(1e-9)) {
  switch (w.constraint) {
    case WeightConstraint::Simplex:
      return (w.values.array() >= -tol).all() && std::abs(w.values.sum() - Scalar(1)) <= tol;
    case WeightConstraint::SumT:
      return std::abs(w.values.sum() - Scalar(w.values.size())) <= tol;
    case WeightConstraint::Positive:
      return (w.values.array() > Scalar(0)).all();
    case WeightConstraint::Unconstrained:
      return true;
  }
  return true;
}

}  // namespace mtopt
