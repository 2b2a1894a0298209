#include "mtopt/harness.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;

namespace mtopt::harness {

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(int v) { return std::to_string(v); }

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

GradientLevel parse_level(const std::string& s) {
  if (s == "param") return GradientLevel::ParameterLevel;
  if (s == "feature") return GradientLevel::FeatureLevel;
  throw std::invalid_argument("level must be 'param' or 'feature', got '" + s + "'");
}

std::string level_name(GradientLevel l) {
  return l == GradientLevel::ParameterLevel ? "param" : "feature";
}

void list_methods(std::ostream& err) {
  err << "registered methods:";
  for (const auto& name : default_roster()) err << " " << name;
  err << " baseline\n";
}

}  // namespace

std::vector<std::string> default_roster() {
  return {"pcgrad", "gradvac", "graddrop", "rgw",  "mgda", "cagrad", "nash", "alignedmtl",
          "imtl",   "uncertainty", "gradnorm", "famo", "rlw",  "dwa",    "cosreg"};
}

std::vector<Cell> sweep_cells(const std::vector<std::string>& methods, std::string* bad_name) {
  std::vector<Cell> cells;
  const auto& list = methods.empty() ? default_roster() : methods;
  for (const auto& name : list) {
    const auto m = parse_method(name);
    if (!m) {
      if (bad_name) *bad_name = name;
      return {};
    }
    cells.push_back({*m, GradientLevel::ParameterLevel});
    if (has_level_axis(*m)) cells.push_back({*m, GradientLevel::FeatureLevel});
  }
  return cells;
}

std::string cell_label(const Cell& c) {
  std::string base = method_name(c.method);
  return c.level == GradientLevel::FeatureLevel ? "(rep) " + base : base;
}

std::string cell_dirname(const Cell& c) {
  std::string base = method_name(c.method);
  if (!has_level_axis(c.method)) return base;
  return base + (c.level == GradientLevel::FeatureLevel ? "_feature" : "_param");
}

// --------------------------------------------------------------------------
// config file: flat `key = value` lines, '#' comments
// --------------------------------------------------------------------------

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_u64 = [&] { return static_cast<std::uint64_t>(std::stoull(value)); };
  auto as_double = [&] { return std::stod(value); };

  if (key == "problem.seed") cfg.problem.seed = as_u64();
  else if (key == "problem.inputs") cfg.problem.inputs = as_int();
  else if (key == "problem.features") cfg.problem.features = as_int();
  else if (key == "problem.tasks") cfg.problem.tasks = as_int();
  else if (key == "problem.samples") cfg.problem.samples = as_int();
  else if (key == "problem.overlap") cfg.problem.overlap = as_double();
  else if (key == "problem.noise") cfg.problem.noise = as_double();
  else if (key == "problem.head_scale") cfg.problem.head_scale = as_double();
  else if (key == "problem.activation") {
    if (value == "identity") cfg.problem.activation = Activation::Identity;
    else if (value == "tanh") cfg.problem.activation = Activation::Tanh;
    else throw std::invalid_argument("activation must be 'identity' or 'tanh'");
  } else if (key == "method") cfg.method = value;
  else if (key == "level") { parse_level(value); cfg.level = value; }
  else if (key == "iters") cfg.iters = as_int();
  else if (key == "cadence") cfg.cadence = as_int();
  else if (key == "jobs") cfg.jobs = as_int();
  else if (key == "out") cfg.out_dir = value;
  else if (key == "seeds") {
    cfg.seeds.clear();
    for (const auto& tok : split(value, ','))
      if (!trim(tok).empty()) cfg.seeds.push_back(std::stoull(trim(tok)));
    if (cfg.seeds.empty()) throw std::invalid_argument("seeds list is empty");
  } else if (key == "methods") {
    cfg.methods.clear();
    for (const auto& tok : split(value, ','))
      if (!trim(tok).empty()) cfg.methods.push_back(trim(tok));
  } else if (key == "hp.lr") cfg.hyper.lr = as_double();
  else if (key == "hp.gradvac_beta") cfg.hyper.gradvac_beta = as_double();
  else if (key == "hp.cagrad_c") cfg.hyper.cagrad_c = as_double();
  else if (key == "hp.cagrad_iters") cfg.hyper.cagrad_iters = as_int();
  else if (key == "hp.cagrad_step") cfg.hyper.cagrad_step = as_double();
  else if (key == "hp.nash_damping") cfg.hyper.nash_damping = as_double();
  else if (key == "hp.nash_iters") cfg.hyper.nash_iters = as_int();
  else if (key == "hp.nash_tol") cfg.hyper.nash_tol = as_double();
  else if (key == "hp.aligned_rank_tol") cfg.hyper.aligned_rank_tol = as_double();
  else if (key == "hp.minnorm_iters") cfg.hyper.minnorm_iters = as_int();
  else if (key == "hp.minnorm_tol") cfg.hyper.minnorm_tol = as_double();
  else if (key == "hp.gradnorm_gamma") cfg.hyper.gradnorm_gamma = as_double();
  else if (key == "hp.gradnorm_lr") cfg.hyper.gradnorm_lr = as_double();
  else if (key == "hp.dwa_temperature") cfg.hyper.dwa_temperature = as_double();
  else if (key == "hp.uncertainty_lr") cfg.hyper.uncertainty_lr = as_double();
  else if (key == "hp.famo_lr") cfg.hyper.famo_lr = as_double();
  else if (key == "hp.famo_eps") cfg.hyper.famo_eps = as_double();
  else if (key == "hp.cosreg_lambda") cfg.hyper.cosreg_lambda = as_double();
  else if (key == "hp.cosreg_fd_step") cfg.hyper.cosreg_fd_step = as_double();
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
    apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string render_config(const RunConfig& cfg) {
  std::ostringstream o;
  o << "problem.seed = " << fmt(cfg.problem.seed) << "\n";
  o << "problem.inputs = " << fmt(cfg.problem.inputs) << "\n";
  o << "problem.features = " << fmt(cfg.problem.features) << "\n";
  o << "problem.tasks = " << fmt(cfg.problem.tasks) << "\n";
  o << "problem.samples = " << fmt(cfg.problem.samples) << "\n";
  o << "problem.overlap = " << fmt(cfg.problem.overlap) << "\n";
  o << "problem.noise = " << fmt(cfg.problem.noise) << "\n";
  o << "problem.head_scale = " << fmt(cfg.problem.head_scale) << "\n";
  o << "problem.activation = "
    << (cfg.problem.activation == Activation::Tanh ? "tanh" : "identity") << "\n";
  o << "method = " << cfg.method << "\n";
  o << "level = " << cfg.level << "\n";
  o << "iters = " << fmt(cfg.iters) << "\n";
  o << "cadence = " << fmt(cfg.cadence) << "\n";
  o << "jobs = " << fmt(cfg.jobs) << "\n";
  o << "out = " << cfg.out_dir << "\n";
  o << "seeds = ";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) o << (i ? "," : "") << fmt(cfg.seeds[i]);
  o << "\n";
  if (!cfg.methods.empty()) {
    o << "methods = ";
    for (std::size_t i = 0; i < cfg.methods.size(); ++i) o << (i ? "," : "") << cfg.methods[i];
    o << "\n";
  }
  const Hyper<double>& h = cfg.hyper;
  o << "hp.lr = " << fmt(h.lr) << "\n";
  o << "hp.gradvac_beta = " << fmt(h.gradvac_beta) << "\n";
  o << "hp.cagrad_c = " << fmt(h.cagrad_c) << "\n";
  o << "hp.cagrad_iters = " << fmt(h.cagrad_iters) << "\n";
  o << "hp.cagrad_step = " << fmt(h.cagrad_step) << "\n";
  o << "hp.nash_damping = " << fmt(h.nash_damping) << "\n";
  o << "hp.nash_iters = " << fmt(h.nash_iters) << "\n";
  o << "hp.nash_tol = " << fmt(h.nash_tol) << "\n";
  o << "hp.aligned_rank_tol = " << fmt(h.aligned_rank_tol) << "\n";
  o << "hp.minnorm_iters = " << fmt(h.minnorm_iters) << "\n";
  o << "hp.minnorm_tol = " << fmt(h.minnorm_tol) << "\n";
  o << "hp.gradnorm_gamma = " << fmt(h.gradnorm_gamma) << "\n";
  o << "hp.gradnorm_lr = " << fmt(h.gradnorm_lr) << "\n";
  o << "hp.dwa_temperature = " << fmt(h.dwa_temperature) << "\n";
  o << "hp.uncertainty_lr = " << fmt(h.uncertainty_lr) << "\n";
  o << "hp.famo_lr = " << fmt(h.famo_lr) << "\n";
  o << "hp.famo_eps = " << fmt(h.famo_eps) << "\n";
  o << "hp.cosreg_lambda = " << fmt(h.cosreg_lambda) << "\n";
  o << "hp.cosreg_fd_step = " << fmt(h.cosreg_fd_step) << "\n";
  return o.str();
}

// --------------------------------------------------------------------------
// trajectory persistence (JSON Lines, one snapshot per line)
// --------------------------------------------------------------------------

namespace {

void append_vector(std::string& line, const Eigen::VectorXd& v) {
  line += '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) line += ',';
    line += fmt(v(i));
  }
  line += ']';
}

}  // namespace

void write_trajectory(const fs::path& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : traj.snapshots) {
    std::string line = "{\"iter\":" + std::to_string(s.iteration) + ",\"losses\":";
    append_vector(line, s.losses);
    line += ",\"gds\":" + fmt(s.gds) + ",\"gms\":" + fmt(s.gms) + ",\"fd\":" + fmt(s.fd);
    line += ",\"weights\":";
    if (s.applied_weights.size() > 0)
      append_vector(line, s.applied_weights);
    else
      line += "null";
    line += "}";
    out << line << "\n";
  }
}

Trajectory read_trajectory(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Trajectory traj;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    InterferenceSnapshot s;
    s.iteration = j.at("iter").get<long>();
    const auto& lv = j.at("losses");
    s.losses.resize(static_cast<Eigen::Index>(lv.size()));
    for (std::size_t i = 0; i < lv.size(); ++i)
      s.losses(static_cast<Eigen::Index>(i)) = lv[i].get<double>();
    s.gds = j.at("gds").get<double>();
    s.gms = j.at("gms").get<double>();
    s.fd = j.at("fd").get<double>();
    if (!j.at("weights").is_null()) {
      const auto& wv = j.at("weights");
      s.applied_weights.resize(static_cast<Eigen::Index>(wv.size()));
      for (std::size_t i = 0; i < wv.size(); ++i)
        s.applied_weights(static_cast<Eigen::Index>(i)) = wv[i].get<double>();
    }
    traj.snapshots.push_back(std::move(s));
  }
  if (!traj.snapshots.empty()) traj.final_losses = traj.snapshots.back().losses;
  return traj;
}

// --------------------------------------------------------------------------
// run / sweep / report
// --------------------------------------------------------------------------

namespace {

ToyProblem<double> build_problem(const ProblemSpec& p) {
  return make_problem<double>(p.seed, p.inputs, p.features, p.tasks, p.samples, p.overlap,
                              p.noise, p.activation, p.head_scale);
}

struct RunOutcome {
  bool ok = false;
  std::string error;
  std::uint64_t failed_seed = 0;
  long failed_iteration = -1;
};

/// Trains every repeat seed before touching the filesystem, so a run either
/// completes its files or leaves only a failure marker. Each repeat trains an
/// independent problem draw from the same settings; full-batch descent on one
/// fixed draw would make deterministic methods repeat verbatim.
RunOutcome execute_run(const RunConfig& cfg, Method method, GradientLevel level) {
  RunOutcome outcome;
  const fs::path dir(cfg.out_dir);
  std::vector<Trajectory> trajs;
  Hyper<double> hp = cfg.hyper;
  hp.monitor_cadence = cfg.cadence;

  for (const std::uint64_t seed : cfg.seeds) {
    ProblemSpec spec = cfg.problem;
    spec.seed = cfg.problem.seed + 0x9e3779b97f4a7c15ull * seed;
    ToyProblem<double> pb;
    try {
      pb = build_problem(spec);
    } catch (const std::exception& e) {
      outcome.error = e.what();
      return outcome;
    }
    try {
      trajs.push_back(train_run(pb, method, level, cfg.iters, seed, hp));
    } catch (const DivergenceDetected& e) {
      outcome.error = e.what();
      outcome.failed_seed = seed;
      outcome.failed_iteration = e.iteration;
      fs::create_directories(dir);
      std::ofstream marker(dir / "failed.txt");
      marker << "seed " << seed << ": " << e.what() << "\n";
      return outcome;
    }
  }

  fs::create_directories(dir);
  {
    std::ofstream cf(dir / "config.txt");
    RunConfig stamped = cfg;
    stamped.method = method_name(method);
    stamped.level = level_name(level);
    cf << render_config(stamped);
  }
  for (std::size_t i = 0; i < trajs.size(); ++i)
    write_trajectory(dir / ("seed_" + std::to_string(cfg.seeds[i]) + ".jsonl"), trajs[i]);

  const Eigen::Index t = trajs.front().final_losses.size();
  std::ofstream sum(dir / "summary.csv");
  sum << "seed";
  for (Eigen::Index i = 0; i < t; ++i) sum << ",loss_task_" << (i + 1);
  sum << ",loss_total\n";
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(t);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    sum << fmt(cfg.seeds[i]);
    for (Eigen::Index k = 0; k < t; ++k) sum << "," << fmt(trajs[i].final_losses(k));
    sum << "," << fmt(trajs[i].final_losses.sum()) << "\n";
    mean += trajs[i].final_losses;
  }
  mean /= static_cast<double>(trajs.size());
  sum << "mean";
  for (Eigen::Index k = 0; k < t; ++k) sum << "," << fmt(mean(k));
  sum << "," << fmt(mean.sum()) << "\n";

  outcome.ok = true;
  return outcome;
}

}  // namespace

int run_command(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto method = parse_method(cfg.method);
  if (!method) {
    err << "unknown method '" << cfg.method << "'\n";
    list_methods(err);
    return 2;
  }
  if (cfg.cadence < 1 || cfg.seeds.empty() || cfg.iters < 1) {
    err << "need cadence >= 1, iters >= 1 and at least one seed\n";
    return 2;
  }
  GradientLevel level;
  try {
    level = parse_level(cfg.level);
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return 2;
  }

  const RunOutcome res = execute_run(cfg, *method, level);
  if (!res.ok) {
    if (res.failed_iteration >= 0) {
      err << "divergence: seed " << res.failed_seed << ", iteration " << res.failed_iteration
          << "\n";
      return 3;
    }
    err << res.error << "\n";
    return 2;
  }
  out << "run " << cfg.method << " (" << cfg.level << "): " << cfg.seeds.size()
      << " seeds -> " << cfg.out_dir << "\n";
  return 0;
}

int sweep_command(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.cadence < 1 || cfg.seeds.empty() || cfg.iters < 1) {
    err << "need cadence >= 1, iters >= 1 and at least one seed\n";
    return 2;
  }
  std::string bad;
  const std::vector<Cell> cells = sweep_cells(cfg.methods, &bad);
  if (cells.empty()) {
    if (!bad.empty()) {
      err << "unknown method '" << bad << "'\n";
      list_methods(err);
    } else {
      err << "sweep grid is empty\n";
    }
    return 2;
  }

  const fs::path root(cfg.out_dir);
  fs::create_directories(root / "cells");
  {
    std::ofstream cf(root / "config.txt");
    cf << render_config(cfg);
  }

  struct CellResult {
    RunOutcome outcome;
  };
  std::vector<CellResult> results(cells.size());

  auto run_cell = [&](std::size_t idx) {
    RunConfig sub = cfg;
    sub.method = method_name(cells[idx].method);
    sub.level = level_name(cells[idx].level);
    sub.out_dir = (root / "cells" / cell_dirname(cells[idx])).string();
    try {
      results[idx].outcome = execute_run(sub, cells[idx].method, cells[idx].level);
    } catch (const std::exception& e) {
      results[idx].outcome.ok = false;
      results[idx].outcome.error = e.what();
    }
  };

  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
          run_cell(i);
      });
    }
    for (auto& w : workers) w.join();
  }

  std::size_t ok = 0;
  std::ofstream manifest(root / "manifest.txt");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    manifest << "cell " << cell_dirname(cells[i]) << " | " << cell_label(cells[i]) << " | ";
    if (results[i].outcome.ok) {
      manifest << "ok\n";
      ++ok;
    } else {
      manifest << "failed: " << results[i].outcome.error << "\n";
    }
  }
  manifest << "completed " << ok << "/" << cells.size() << "\n";
  out << "sweep: " << ok << "/" << cells.size() << " cells -> " << cfg.out_dir << "\n";
  return 0;
}

namespace {

struct CellData {
  std::string label;
  std::string dirname;
  std::vector<Trajectory> trajs;  // one per seed
};

std::vector<CellData> load_completed_cells(const fs::path& root) {
  std::ifstream manifest(root / "manifest.txt");
  if (!manifest) throw std::runtime_error("no manifest.txt in " + root.string());
  std::vector<CellData> cells;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.rfind("cell ", 0) != 0) continue;
    const auto parts = split(line.substr(5), '|');
    if (parts.size() < 3) continue;
    if (trim(parts[2]).rfind("ok", 0) != 0) continue;
    CellData cd;
    cd.dirname = trim(parts[0]);
    cd.label = trim(parts[1]);
    const fs::path dir = root / "cells" / cd.dirname;
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      if (name.rfind("seed_", 0) == 0 && entry.path().extension() == ".jsonl") {
        Trajectory traj = read_trajectory(entry.path());
        traj.seed = std::stoull(name.substr(5, name.size() - 5 - 6));
        traj.method_label = cd.label;
        cd.trajs.push_back(std::move(traj));
      }
    }
    std::sort(cd.trajs.begin(), cd.trajs.end(),
              [](const Trajectory& a, const Trajectory& b) { return a.seed < b.seed; });
    if (!cd.trajs.empty()) cells.push_back(std::move(cd));
  }
  std::sort(cells.begin(), cells.end(),
            [](const CellData& a, const CellData& b) { return a.dirname < b.dirname; });
  return cells;
}

/// Smoothed (window = length/10) indicator curves averaged across seeds, then
/// the mean over the trailing 50 points.
double indicator_score(const CellData& cd, MetricField field, std::size_t tail) {
  std::vector<std::vector<double>> smoothed;
  for (const auto& traj : cd.trajs) {
    auto series = metric_series(traj, field);
    smoothed.push_back(moving_average(series, default_smoothing_window(series.size())));
  }
  std::vector<double> avg(smoothed.front().size(), 0.0);
  for (const auto& s : smoothed)
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += s[i] / static_cast<double>(smoothed.size());
  return tail_mean(avg, tail);
}

}  // namespace

int report_command(const std::string& sweep_dir, std::ostream& out, std::ostream& err) {
  const fs::path root(sweep_dir);
  std::vector<CellData> cells;
  try {
    cells = load_completed_cells(root);
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return 2;
  }
  if (cells.size() < 2) {
    err << "need at least 2 completed cells to rank, found " << cells.size() << "\n";
    return 2;
  }

  const Eigen::Index t = cells.front().trajs.front().final_losses.size();
  std::vector<std::string> labels;
  for (const auto& c : cells) labels.push_back(c.label);

  const MetricField fields[] = {MetricField::Gds, MetricField::Gms, MetricField::Fd};
  const char* field_names[] = {"GDS", "GMS", "FD"};

  // performance rankings: final per-task losses and the total, averaged over seeds
  std::vector<Ranking> perf;
  std::vector<std::string> perf_names;
  for (Eigen::Index k = 0; k <= t; ++k) {
    std::vector<double> scores;
    for (const auto& c : cells) {
      double acc = 0;
      for (const auto& traj : c.trajs)
        acc += (k < t ? traj.final_losses(k) : traj.final_losses.sum());
      scores.push_back(acc / static_cast<double>(c.trajs.size()));
    }
    perf.push_back(make_ranking(labels, scores));
    perf_names.push_back(k < t ? "task_" + std::to_string(k + 1) : "total");
  }

  std::ostringstream csv, txt;
  csv << "indicator";
  for (const auto& n : perf_names) csv << "," << n;
  csv << "\n";
  txt << "ranking similarity (converted to [0.5, 1.0])\n";
  txt << "cells: " << cells.size() << ", repeats per cell: " << cells.front().trajs.size()
      << "\n\n";
  txt << "indicator";
  for (const auto& n : perf_names) txt << "\t" << n;
  txt << "\n";

  for (int f = 0; f < 3; ++f) {
    std::vector<double> scores;
    for (const auto& c : cells) scores.push_back(indicator_score(c, fields[f], 50));
    const Ranking ind = make_ranking(labels, scores);
    csv << field_names[f];
    txt << field_names[f];
    for (const auto& p : perf) {
      const double conv = ranking_similarity(ind, p).converted;
      csv << "," << fmt(conv);
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%.4f", conv);
      txt << "\t" << buf;
    }
    csv << "\n";
    txt << "\n";
  }

  std::ofstream(root / "report.csv") << csv.str();
  std::ofstream(root / "report.txt") << txt.str();
  out << txt.str();
  return 0;
}

}  // namespace mtopt::harness
