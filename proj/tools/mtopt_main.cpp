#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtopt/harness.hpp"

namespace {

using mtopt::harness::RunConfig;

struct CommonFlags {
  std::string config_path;
  std::string method, level, out_dir, seeds_csv, methods_csv;
  int iters = 0, cadence = 0, jobs = 0;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_method) {
  cmd->add_option("--config", f.config_path, "config file (key = value lines)");
  if (with_method) {
    cmd->add_option("--method", f.method, "method name");
    cmd->add_option("--level", f.level, "gradient level: param or feature");
  } else {
    cmd->add_option("--methods", f.methods_csv, "comma-separated method roster");
  }
  cmd->add_option("--iters", f.iters, "training iterations");
  cmd->add_option("--seeds", f.seeds_csv, "comma-separated repeat seeds");
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--jobs", f.jobs, "parallel sweep cells");
  cmd->add_option("--cadence", f.cadence, "monitor every N iterations");
  cmd->add_option("--set", f.sets, "extra override key=value (repeatable)")->take_all();
}

int build_config(const CLI::App* cmd, const CommonFlags& f, RunConfig& cfg) {
  const auto given = [cmd](const std::string& name) {
    const auto* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  try {
    if (!f.config_path.empty()) cfg = mtopt::harness::parse_config_file(f.config_path);
    if (given("--method")) cfg.method = f.method;
    if (given("--level")) cfg.level = f.level;
    if (given("--iters")) cfg.iters = f.iters;
    if (given("--cadence")) cfg.cadence = f.cadence;
    if (given("--jobs")) cfg.jobs = f.jobs;
    if (given("--out")) cfg.out_dir = f.out_dir;
    if (given("--seeds")) mtopt::harness::apply_override(cfg, "seeds", f.seeds_csv);
    if (given("--methods")) mtopt::harness::apply_override(cfg, "methods", f.methods_csv);
    for (const auto& kv : f.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value");
      mtopt::harness::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task optimization lab: combiners, interference monitors, toy problems"};
  app.require_subcommand(1);

  CommonFlags run_flags, sweep_flags;
  std::string report_dir;
  int selftest_instances = 500;

  auto* run_cmd = app.add_subcommand("run", "train one method and persist trajectories");
  add_common(run_cmd, run_flags, true);

  auto* sweep_cmd = app.add_subcommand("sweep", "run the benchmark grid of methods x levels");
  add_common(sweep_cmd, sweep_flags, false);

  auto* report_cmd = app.add_subcommand("report", "ranking-similarity report for a sweep");
  report_cmd->add_option("sweep_dir", report_dir, "sweep output directory")->required();

  auto* selftest_cmd = app.add_subcommand("selftest", "combiner oracle suite");
  selftest_cmd->add_option("--instances", selftest_instances, "random instances per check");

  CLI11_PARSE(app, argc, argv);

  if (run_cmd->parsed()) {
    RunConfig cfg;
    if (const int rc = build_config(run_cmd, run_flags, cfg)) return rc;
    return mtopt::harness::run_command(cfg, std::cout, std::cerr);
  }
  if (sweep_cmd->parsed()) {
    RunConfig cfg;
    if (const int rc = build_config(sweep_cmd, sweep_flags, cfg)) return rc;
    return mtopt::harness::sweep_command(cfg, std::cout, std::cerr);
  }
  if (report_cmd->parsed()) {
    return mtopt::harness::report_command(report_dir, std::cout, std::cerr);
  }
  if (selftest_cmd->parsed()) {
    return mtopt::harness::combiner_oracle_suite(selftest_instances, std::cout) ? 0 : 1;
  }
  return 2;
}
