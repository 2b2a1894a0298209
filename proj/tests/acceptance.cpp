// Acceptance suite: one self-contained check per shipping criterion, each
// printed as a single [PASS]/[FAIL] line with its measured runtime. Exits
// non-zero if any criterion fails. Run from the build directory:
//
//   ./acceptance [--out DIR]
//
// The end-to-end sweep criterion writes its artifacts under DIR (default
// ./acceptance_out).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mtopt/harness.hpp"

using namespace mtopt;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

std::vector<Criterion> results;

void run_criterion(const std::string& name, double time_budget,
                   const std::function<bool(std::string&)>& body) {
  Criterion c;
  c.name = name;
  const auto start = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = false;
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (ok && time_budget > 0 && c.seconds > time_budget) {
    ok = false;
    detail += " [exceeded " + std::to_string(time_budget) + "s budget]";
  }
  c.passed = ok;
  c.detail = detail;
  std::printf("[%s] %s: %s [%.2fs]\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str(),
              c.seconds);
  std::fflush(stdout);
  results.push_back(std::move(c));
}

MatrixX<double> random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  MatrixX<double> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

double smoothed_tail_score(const Trajectory& traj, MetricField field) {
  const auto series = metric_series(traj, field);
  const auto smoothed = moving_average(series, default_smoothing_window(series.size()));
  return tail_mean(smoothed, 50);
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream body;
    body << in.rdbuf();
    files[fs::relative(entry.path(), root).string()] = body.str();
  }
  return files;
}

// ---------------------------------------------------------------------------

bool criterion_trace_identity(std::string& detail) {
  Rng rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = 1 + Eigen::Index(rng.below(50));
    const Eigen::Index t = 2 + Eigen::Index(rng.below(7));
    const MatrixX<double> m = random_matrix(rng, d, t);
    const VectorX<double> a = random_matrix(rng, t, 1);
    const VectorX<double> b = random_matrix(rng, t, 1);
    const double lhs = (m * a).dot(m * b);
    const double rhs = ((m.transpose() * m).cwiseProduct(a * b.transpose())).sum();
    const double scale = std::max((m * a).norm() * (m * b).norm(), 1e-300);
    worst = std::max(worst, std::abs(lhs - rhs) / scale);
  }
  std::ostringstream s;
  s << "100 random (M,a,b) triples, worst relative error " << worst << " (limit 1e-10)";
  detail = s.str();
  return worst <= 1e-10;
}

bool criterion_combiner_oracles(std::string& detail) {
  std::ostringstream log;
  const bool ok = harness::combiner_oracle_suite(500, log);
  std::cout << log.str();
  detail = ok ? "500 random instances per check, all within tolerance"
              : "see oracle lines above";
  return ok;
}

bool criterion_gradient_checks(std::string& detail) {
  double worst_param = 0, worst_feature = 0;
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const auto act = trial % 2 == 0 ? Activation::Tanh : Activation::Identity;
    const Eigen::Index t = 2 + trial % 3;
    const auto pb = make_problem<double>(500 + trial, 5, 6, t, 24, 0.5, 0.1, act);
    const MatrixX<double> shared = 0.5 * random_matrix(rng, 6, 5);
    const MatrixX<double> heads = 0.5 * random_matrix(rng, 6, t);
    const auto gp = grads_param(pb, shared, heads);
    const auto gf = grads_feature(pb, shared, heads);

    for (Eigen::Index task = 0; task < t; ++task) {
      // parameter level: perturb every shared weight
      MatrixX<double> probe = shared;
      MatrixX<double> fd(6, 5);
      for (Eigen::Index r = 0; r < 6; ++r) {
        for (Eigen::Index c = 0; c < 5; ++c) {
          probe(r, c) = shared(r, c) + 1e-5;
          const double up = task_losses(pb, probe, heads)(task);
          probe(r, c) = shared(r, c) - 1e-5;
          const double down = task_losses(pb, probe, heads)(task);
          probe(r, c) = shared(r, c);
          fd(r, c) = (up - down) / 2e-5;
        }
      }
      const Eigen::Map<const MatrixX<double>> analytic(gp.entries.col(task).data(), 6, 5);
      worst_param = std::max(worst_param, (analytic - fd).cwiseAbs().maxCoeff() /
                                              (1e-12 + fd.cwiseAbs().maxCoeff()));

      // feature level: common shift of each feature coordinate across the batch
      const MatrixX<double> z0 =
          activate(MatrixX<double>(pb.data * shared.transpose()), pb.activation);
      for (Eigen::Index coord = 0; coord < 6; ++coord) {
        const auto shifted = [&](double delta) {
          MatrixX<double> z = z0;
          z.col(coord).array() += delta;
          const MatrixX<double> r = z * heads - pb.targets;
          return r.array().square().colwise().mean()(task);
        };
        const double fdz = (shifted(1e-5) - shifted(-1e-5)) / 2e-5;
        worst_feature = std::max(worst_feature, std::abs(gf.entries(coord, task) - fdz) /
                                                    (1e-12 + std::abs(fdz)));
      }
    }
  }

  // CosReg: central differences at the working step vs a 4-point stencil at
  // half the step, on the real toy regularizer
  const auto pb = make_problem<double>(321, 4, 6, 2, 16, 0.5, 0.1, Activation::Tanh);
  const MatrixX<double> heads = 0.5 * random_matrix(rng, 6, 2);
  const MatrixX<double> shared = pb.planted_shared;
  const auto grads_at = [&](const VectorX<double>& theta) {
    const Eigen::Map<const MatrixX<double>> w(theta.data(), 6, 4);
    return grads_param(pb, MatrixX<double>(w), heads).entries;
  };
  const Eigen::Map<const VectorX<double>> theta(shared.data(), 24);
  const VectorX<double> reg =
      cosreg_gradient<double>(grads_at, VectorX<double>(theta), 0.1, 1e-5);
  double worst_cosreg = 0;
  for (Eigen::Index k = 0; k < 24; ++k) {
    const auto slice = [&](double x) {
      VectorX<double> p = theta;
      p(k) = x;
      return 0.1 * cosine_penalty<double>(grads_at(p));
    };
    const double h = 5e-6;
    const double oracle =
        (-slice(theta(k) + 2 * h) + 8 * slice(theta(k) + h) - 8 * slice(theta(k) - h) +
         slice(theta(k) - 2 * h)) /
        (12 * h);
    worst_cosreg =
        std::max(worst_cosreg, std::abs(reg(k) - oracle) / std::max(1e-6, std::abs(oracle)));
  }

  std::ostringstream s;
  s << "50 instances: worst rel err param " << worst_param << ", feature " << worst_feature
    << " (limit 1e-5); cosreg vs stencil " << worst_cosreg << " (limit 1e-4)";
  detail = s.str();
  return worst_param < 1e-5 && worst_feature < 1e-5 && worst_cosreg <= 1e-4;
}

bool criterion_metric_bounds(std::string& detail) {
  Rng rng(88);
  bool ok = true;
  for (int trial = 0; trial < 200 && ok; ++trial) {
    const Eigen::Index t = 2 + Eigen::Index(rng.below(6));
    const Eigen::Index d = 1 + Eigen::Index(rng.below(24));
    MatrixX<double> m = random_matrix(rng, d, t);
    const TaskGradients<double> gp{m, GradientLevel::ParameterLevel};
    const TaskGradients<double> gf{m, GradientLevel::FeatureLevel};
    const double ds = gds(gp), ms = gms(gp), fe = fd_entropy(gf).value;
    ok = ok && ds >= -1.0 - 1e-12 && ds <= 1.0 + 1e-12;
    ok = ok && ms >= 0.0 && ms <= 1.0 + 1e-12;
    ok = ok && fe >= 0.0 && fe <= std::log(double(t)) + 1e-12;

    // permutation invariance (all metrics)
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(t));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    MatrixX<double> shuffled(d, t);
    for (Eigen::Index i = 0; i < t; ++i) shuffled.col(i) = m.col(perm[std::size_t(i)]);
    ok = ok && std::abs(gds(TaskGradients<double>{shuffled, GradientLevel::ParameterLevel}) - ds) <= 1e-10;
    ok = ok && std::abs(gms(TaskGradients<double>{shuffled, GradientLevel::ParameterLevel}) - ms) <= 1e-10;
    ok = ok && std::abs(fd_entropy(TaskGradients<double>{shuffled, GradientLevel::FeatureLevel}).value - fe) <= 1e-10;

    // gds: single-column positive rescale; gms: common rescale; fd: row rescale
    MatrixX<double> scaled = m;
    scaled.col(Eigen::Index(rng.below(std::uint64_t(t)))) *= 0.05 + 8.0 * rng.uniform01();
    ok = ok && std::abs(gds(TaskGradients<double>{scaled, GradientLevel::ParameterLevel}) - ds) <= 1e-10;
    MatrixX<double> common = m * (0.05 + 8.0 * rng.uniform01());
    ok = ok && std::abs(gms(TaskGradients<double>{common, GradientLevel::ParameterLevel}) - ms) <= 1e-10;
    MatrixX<double> rows = m;
    for (Eigen::Index j = 0; j < d; ++j) rows.row(j) *= 0.05 + 8.0 * rng.uniform01();
    ok = ok && std::abs(fd_entropy(TaskGradients<double>{rows, GradientLevel::FeatureLevel}).value - fe) <= 1e-10;
  }
  detail = ok ? "bounds and invariances hold on 200 random instances"
              : "bound or invariance violated";
  return ok;
}

bool criterion_ranking(std::string& detail) {
  // independent oracle: positional pair enumeration over label sequences
  const auto oracle = [](const std::vector<std::string>& o1, const std::vector<std::string>& o2) {
    const auto pos = [](const std::vector<std::string>& v, const std::string& s) {
      return std::size_t(std::find(v.begin(), v.end(), s) - v.begin());
    };
    std::size_t agree = 0, pairs = 0;
    for (std::size_t i = 0; i < o1.size(); ++i)
      for (std::size_t j = i + 1; j < o1.size(); ++j) {
        ++pairs;
        if ((pos(o1, o1[i]) < pos(o1, o1[j])) == (pos(o2, o1[i]) < pos(o2, o1[j]))) ++agree;
      }
    return double(agree) / double(pairs);
  };

  bool ok = true;
  long compared = 0;
  for (int n = 2; n <= 5 && ok; ++n) {
    std::vector<std::string> labels;
    for (int i = 0; i < n; ++i) labels.push_back(std::string(1, char('a' + i)));
    std::vector<std::vector<std::string>> perms;
    std::vector<std::string> work = labels;
    do {
      perms.push_back(work);
    } while (std::next_permutation(work.begin(), work.end()));

    for (const auto& p1 : perms) {
      for (const auto& p2 : perms) {
        std::vector<double> s1(static_cast<std::size_t>(n));
        std::vector<double> s2(static_cast<std::size_t>(n));
        for (int k = 0; k < n; ++k) {
          s1[std::size_t(std::find(labels.begin(), labels.end(), p1[std::size_t(k)]) -
                         labels.begin())] = double(n - k);
          s2[std::size_t(std::find(labels.begin(), labels.end(), p2[std::size_t(k)]) -
                         labels.begin())] = double(n - k);
        }
        const auto sim = ranking_similarity(make_ranking(labels, s1), make_ranking(labels, s2));
        const double want = oracle(p1, p2);
        ok = ok && std::abs(sim.raw - want) <= 1e-12;
        ok = ok && sim.converted >= 0.5 && sim.converted <= 1.0;
        ok = ok && std::abs(sim.converted - std::max(want, 1.0 - want)) <= 1e-12;
        ++compared;
      }
    }
    // fully reversed ranking converts to 1.0
    std::vector<double> fwd(static_cast<std::size_t>(n));
    std::vector<double> rev(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      fwd[std::size_t(k)] = double(n - k);
      rev[std::size_t(k)] = double(k);
    }
    const auto flipped = ranking_similarity(make_ranking(labels, fwd), make_ranking(labels, rev));
    ok = ok && std::abs(flipped.raw) <= 1e-12 && std::abs(flipped.converted - 1.0) <= 1e-12;
  }
  std::ostringstream s;
  s << compared << " permutation pairs vs the pair-enumeration oracle, n <= 5";
  detail = s.str();
  return ok;
}

bool criterion_disentanglement(std::string& detail) {
  Hyper<double> hp;
  hp.lr = 0.1;
  hp.monitor_cadence = 10;
  const double ln2 = std::log(2.0);
  std::ostringstream s;
  bool ok = true;
  for (const double rho : {0.0, 1.0}) {
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
      const auto pb =
          make_problem<double>(seed, 32, 32, 2, 512, rho, 0.0, Activation::Tanh, 0.05);
      const auto traj =
          train_run(pb, Method::Baseline, GradientLevel::ParameterLevel, 2000, seed, hp);
      const double score = smoothed_tail_score(traj, MetricField::Fd) / ln2;
      const bool pass = rho == 0.0 ? score < 0.1 : score > 0.5;
      ok = ok && pass;
      s << "rho=" << rho << " seed " << seed << ": fd/ln2=" << std::round(score * 1e4) / 1e4
        << (pass ? " " : " <-VIOLATION ");
    }
  }
  detail = s.str() + "(need < 0.1 at rho=0, > 0.5 at rho=1)";
  return ok;
}

bool criterion_monitoring_neutrality(std::string& detail) {
  const auto pb = make_problem<double>(42, 6, 8, 3, 48, 0.5, 0.05);
  const Method methods[] = {Method::Baseline, Method::PCGrad,  Method::GradVac,
                            Method::GradDrop, Method::RGW,     Method::MGDA,
                            Method::CAGrad,   Method::NashMTL, Method::AlignedMTL,
                            Method::IMTL,     Method::Uncertainty, Method::GradNorm,
                            Method::FAMO,     Method::RLW,     Method::DWA,
                            Method::CosReg};
  bool ok = true;
  int runs = 0;
  for (const Method m : methods) {
    std::vector<GradientLevel> levels = {GradientLevel::ParameterLevel};
    if (has_level_axis(m)) levels.push_back(GradientLevel::FeatureLevel);
    for (const GradientLevel level : levels) {
      Hyper<double> on;
      on.lr = 0.03;
      on.monitor_cadence = 5;
      Hyper<double> off = on;
      off.monitor_cadence = 0;
      auto st_on = make_train_state(pb, m, 9, on.lr);
      auto st_off = make_train_state(pb, m, 9, off.lr);
      for (int step = 0; step < 25 && ok; ++step) {
        train_step(pb, st_on, m, level, on);
        train_step(pb, st_off, m, level, off);
        const auto lon = task_losses(pb, st_on.shared, st_on.heads);
        const auto loff = task_losses(pb, st_off.shared, st_off.heads);
        ok = ok && (lon - loff).cwiseAbs().maxCoeff() == 0.0;
      }
      ++runs;
    }
  }
  std::ostringstream s;
  s << runs << " method/level runs, loss trajectories bit-identical with monitors on vs off";
  detail = s.str();
  return ok;
}

bool criterion_end_to_end_sweep(fs::path out_root, std::string& detail) {
  harness::RunConfig cfg;
  cfg.problem.seed = 1;
  cfg.problem.inputs = 8;
  cfg.problem.features = 14;
  cfg.problem.tasks = 7;
  cfg.problem.samples = 64;
  cfg.problem.overlap = 0.5;
  cfg.problem.noise = 0.05;
  cfg.problem.head_scale = 1.0;
  cfg.iters = 500;
  cfg.cadence = 10;
  cfg.seeds = {1, 2, 3};
  cfg.hyper.lr = 0.05;

  std::ostringstream out, err;
  cfg.out_dir = (out_root / "sweep_a").string();
  fs::remove_all(cfg.out_dir);
  if (harness::sweep_command(cfg, out, err) != 0) {
    detail = "sweep failed: " + err.str();
    return false;
  }
  std::ifstream manifest(fs::path(cfg.out_dir) / "manifest.txt");
  std::string line;
  int ok_cells = 0, total_cells = 0;
  while (std::getline(manifest, line)) {
    if (line.rfind("cell ", 0) != 0) continue;
    ++total_cells;
    if (line.find("| ok") != std::string::npos) ++ok_cells;
  }
  if (total_cells != 24 || ok_cells != 24) {
    detail = "expected 24/24 completed cells, got " + std::to_string(ok_cells) + "/" +
             std::to_string(total_cells);
    return false;
  }
  if (harness::report_command(cfg.out_dir, out, err) != 0) {
    detail = "report failed: " + err.str();
    return false;
  }
  // Table-3-shaped report: 3 indicator rows x (T + 1) performance columns
  std::ifstream rep(fs::path(cfg.out_dir) / "report.csv");
  std::getline(rep, line);
  int cols = int(std::count(line.begin(), line.end(), ','));
  int rows = 0;
  while (std::getline(rep, line))
    if (!line.empty()) ++rows;
  if (rows != 3 || cols != 8) {
    detail = "report shape " + std::to_string(rows) + "x" + std::to_string(cols) +
             ", expected 3x8";
    return false;
  }

  // byte-identical rerun
  cfg.out_dir = (out_root / "sweep_b").string();
  fs::remove_all(cfg.out_dir);
  if (harness::sweep_command(cfg, out, err) != 0 ||
      harness::report_command(cfg.out_dir, out, err) != 0) {
    detail = "rerun failed: " + err.str();
    return false;
  }
  auto tree_a = read_tree(out_root / "sweep_a");
  auto tree_b = read_tree(out_root / "sweep_b");
  // the provenance dump records the differing output directories; ignore it
  tree_a.erase("config.txt");
  tree_b.erase("config.txt");
  for (auto& [rel, body] : tree_a) {
    if (rel.find("config.txt") != std::string::npos) continue;
    const auto it = tree_b.find(rel);
    if (it == tree_b.end() || it->second != body) {
      detail = "rerun differs at " + rel;
      return false;
    }
  }
  detail = "24/24 cells, 3x8 report, rerun byte-identical";
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out_root = "acceptance_out";
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--out") out_root = argv[i + 1];
  fs::create_directories(out_root);

  run_criterion("1. inner-product trace identity", 1.0, criterion_trace_identity);
  run_criterion("2. combiner oracles (500 instances each)", 60.0, criterion_combiner_oracles);
  run_criterion("3. analytic gradients vs finite differences", 30.0, criterion_gradient_checks);
  run_criterion("4. metric bounds and invariances", 10.0, criterion_metric_bounds);
  run_criterion("5. ranking similarity vs pair oracle", 10.0, criterion_ranking);
  run_criterion("6. planted disentanglement experiment", 120.0, criterion_disentanglement);
  run_criterion("7. monitoring neutrality", 60.0, criterion_monitoring_neutrality);
  run_criterion("8. end-to-end benchmark sweep", 600.0, [&](std::string& d) {
    return criterion_end_to_end_sweep(out_root, d);
  });

  int failed = 0;
  for (const auto& c : results)
    if (!c.passed) ++failed;
  std::printf("SUMMARY: %zu/%zu criteria passed\n", results.size() - std::size_t(failed),
              results.size());
  return failed > 0 ? 1 : 0;
}
