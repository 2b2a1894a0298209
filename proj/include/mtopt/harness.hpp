#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mtopt/monitors.hpp"
#include "mtopt/toy.hpp"

namespace mtopt::harness {

struct ProblemSpec {
  std::uint64_t seed = 1;
  int inputs = 16;
  int features = 32;
  int tasks = 2;
  int samples = 256;
  double overlap = 0.5;
  double noise = 0.05;
  double head_scale = 1.0;
  Activation activation = Activation::Tanh;
};

/// Full description of one experiment; config-file keys and CLI flags both
/// land here (flags win).
struct RunConfig {
  ProblemSpec problem;
  std::string method = "baseline";
  std::string level = "param";
  int iters = 500;
  int cadence = 10;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int jobs = 1;
  std::string out_dir = "out";
  std::vector<std::string> methods;  // sweep roster; empty = full benchmark roster
  Hyper<double> hyper;
};

RunConfig parse_config_file(const std::string& path);
/// Applies one `key = value` pair; throws std::invalid_argument on bad keys.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
/// Every effective setting, one `key = value` per line (run-directory provenance).
std::string render_config(const RunConfig& cfg);

std::vector<std::string> default_roster();

struct Cell {
  Method method = Method::Baseline;
  GradientLevel level = GradientLevel::ParameterLevel;
};

/// Expands a method list into the benchmark grid: methods with a level axis
/// get a parameter- and a feature-level cell, the rest a single cell.
std::vector<Cell> sweep_cells(const std::vector<std::string>& methods, std::string* bad_name);
std::string cell_label(const Cell& c);    // display name, "(rep) mgda"
std::string cell_dirname(const Cell& c);  // filesystem name, "mgda_feature"

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory read_trajectory(const std::filesystem::path& path);

// Exit codes: 0 success, 2 usage error (unknown method, empty grid, too few
// cells), 3 divergence.
int run_command(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int sweep_command(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int report_command(const std::string& sweep_dir, std::ostream& out, std::ostream& err);

/// Combiner oracle suite (also wired to `mtopt selftest`): randomized
/// first-principles checks of every solver-backed combiner.
bool combiner_oracle_suite(int instances, std::ostream& out);

}  // namespace mtopt::harness
