#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mtopt/types.hpp"

namespace mtopt {

/// Gradient direction similarity: mean pairwise cosine over ordered pairs
/// i != j. Pairs touching a near-zero gradient contribute 0.
template <class Scalar>
Scalar gds(const TaskGradients<Scalar>& g) {
  const Eigen::Index t = g.tasks();
  const VectorX<Scalar> norms = g.entries.colwise().norm();
  Scalar total = 0;
  for (Eigen::Index i = 0; i < t; ++i) {
    for (Eigen::Index j = i + 1; j < t; ++j) {
      if (norms(i) < Scalar(1e-12) || norms(j) < Scalar(1e-12)) continue;
      const Scalar cosine = std::clamp(
          g.entries.col(i).dot(g.entries.col(j)) / (norms(i) * norms(j)), Scalar(-1), Scalar(1));
      total += Scalar(2) * cosine;
    }
  }
  return total / Scalar(t * (t - 1));
}

/// Gradient magnitude similarity: mean pairwise 2|gi||gj| / (|gi|^2 + |gj|^2).
/// Two vanished gradients count as perfectly matched, a one-sided zero as 0.
template <class Scalar>
Scalar gms(const TaskGradients<Scalar>& g) {
  const Eigen::Index t = g.tasks();
  const VectorX<Scalar> norms = g.entries.colwise().norm();
  Scalar total = 0;
  for (Eigen::Index i = 0; i < t; ++i) {
    for (Eigen::Index j = i + 1; j < t; ++j) {
      const bool zi = norms(i) < Scalar(1e-12), zj = norms(j) < Scalar(1e-12);
      if (zi && zj)
        total += Scalar(2);
      else if (!zi && !zj)
        total += Scalar(2) * std::min(Scalar(1), Scalar(2) * norms(i) * norms(j) /
                                                     (norms(i) * norms(i) + norms(j) * norms(j)));
    }
  }
  return total / Scalar(t * (t - 1));
}

template <class Scalar>
struct FdEntropy {
  Scalar value = 0;
  bool degenerate = false;  // every location had vanishing total saliency
};

/// Feature-disentanglement entropy: per feature location, the entropy of the
/// task-saliency distribution p_ij = |G_ji| / sum_k |G_jk|, averaged over the
/// locations with non-vanishing total saliency. 0 means each location serves
/// a single task; ln T means uniform mixing.
template <class Scalar>
FdEntropy<Scalar> fd_entropy(const TaskGradients<Scalar>& g) {
  if (g.level != GradientLevel::FeatureLevel) throw WrongGradientLevel{};
  const Eigen::Index d = g.dim(), t = g.tasks();
  Scalar total = 0;
  Eigen::Index included = 0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const Scalar denom = g.entries.row(j).cwiseAbs().sum();
    if (denom < Scalar(1e-12)) continue;
    Scalar h = 0;
    for (Eigen::Index i = 0; i < t; ++i) {
      const Scalar p = std::abs(g.entries(j, i)) / denom;
      if (p > Scalar(0)) h -= p * std::log(p);
    }
    total += h;
    ++included;
  }
  if (included == 0) return {Scalar(0), true};
  return {total / Scalar(included), false};
}

/// Trailing moving average with a shrinking head window; output length equals
/// input length so curves stay aligned with iteration indices.
template <class Scalar>
std::vector<Scalar> moving_average(const std::vector<Scalar>& series, std::size_t window) {
  std::vector<Scalar> out(series.size());
  Scalar acc = 0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    acc += series[i];
    if (i >= window) acc -= series[i - window];
    out[i] = acc / Scalar(std::min(i + 1, window));
  }
  return out;
}

inline std::size_t default_smoothing_window(std::size_t len) {
  return std::max<std::size_t>(1, len / 10);
}

/// One monitoring record; losses/weights are taken at the monitored iterate.
struct InterferenceSnapshot {
  long iteration = 0;
  double gds = 0;
  double gms = 0;
  double fd = 0;
  Eigen::VectorXd losses;
  Eigen::VectorXd applied_weights;  // empty when the method reports none
};

struct Trajectory {
  std::string method_label;
  GradientLevel level = GradientLevel::ParameterLevel;
  std::uint64_t seed = 0;
  std::vector<InterferenceSnapshot> snapshots;
  Eigen::VectorXd final_losses;
};

enum class MetricField { Gds, Gms, Fd };

inline double snapshot_field(const InterferenceSnapshot& s, MetricField f) {
  switch (f) {
    case MetricField::Gds:
      return s.gds;
    case MetricField::Gms:
      return s.gms;
    case MetricField::Fd:
      return s.fd;
  }
  return 0;
}

inline std::vector<double> metric_series(const Trajectory& traj, MetricField f) {
  std::vector<double> out;
  out.reserve(traj.snapshots.size());
  for (const auto& s : traj.snapshots) out.push_back(snapshot_field(s, f));
  return out;
}

inline double tail_mean(const std::vector<double>& series, std::size_t tail) {
  if (series.empty()) throw EmptyTrajectory{};
  const std::size_t take = std::min(tail, series.size());
  return std::accumulate(series.end() - static_cast<std::ptrdiff_t>(take), series.end(), 0.0) /
         static_cast<double>(take);
}

/// Mean of the last `tail` recorded values of the chosen metric.
inline double trajectory_score(const Trajectory& traj, MetricField f, std::size_t tail = 50) {
  return tail_mean(metric_series(traj, f), tail);
}

/// Items ordered by descending score; score ties fall back to label order so
/// every ranking is a total order.
struct Ranking {
  std::vector<std::string> items;
  std::vector<double> scores;
  std::vector<std::size_t> order;  // order[r] = index of the item at rank r
};

inline Ranking make_ranking(std::vector<std::string> items, std::vector<double> scores) {
  Ranking r{std::move(items), std::move(scores), {}};
  r.order.resize(r.items.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
    if (r.scores[a] != r.scores[b]) return r.scores[a] > r.scores[b];
    return r.items[a] < r.items[b];
  });
  return r;
}

struct RankingSimilarity {
  double raw = 0;        // fraction of pairs ordered identically
  double converted = 0;  // max(raw, 1 - raw), in [0.5, 1]
};

/// Fraction of item pairs on which two rankings agree. Requires the same item
/// set; the converted score folds reversals onto [0.5, 1.0].
inline RankingSimilarity ranking_similarity(const Ranking& r1, const Ranking& r2) {
  const std::size_t n = r1.items.size();
  if (n != r2.items.size() || n < 2) throw ItemSetMismatch{};

  // position of each of r1's items within both rankings
  std::vector<std::size_t> pos1(n), pos2(n);
  for (std::size_t rank = 0; rank < n; ++rank) pos1[r1.order[rank]] = rank;
  std::vector<std::size_t> map2(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool found = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (r2.items[j] == r1.items[i]) {
        map2[i] = j;
        found = true;
        break;
      }
    }
    if (!found) throw ItemSetMismatch{};
  }
  std::vector<std::size_t> rank2(n);
  for (std::size_t rank = 0; rank < n; ++rank) rank2[r2.order[rank]] = rank;
  for (std::size_t i = 0; i < n; ++i) pos2[i] = rank2[map2[i]];

  std::size_t agree = 0, pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      ++pairs;
      if ((pos1[i] < pos1[j]) == (pos2[i] < pos2[j])) ++agree;
    }
  }
  RankingSimilarity out;
  out.raw = static_cast<double>(agree) / static_cast<double>(pairs);
  out.converted = std::max(out.raw, 1.0 - out.raw);
  return out;
}

}  // namespace mtopt
