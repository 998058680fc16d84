// evarl: command-line front end.
//
//   evarl run <config.json> [--jobs N] [--out DIR]
//   evarl summarize <DIR>
//   evarl gradcheck [--tol 1e-4]
//
// Exit codes: 0 success, 1 runtime failure, 2 config error.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "evarl/experiment.hpp"

namespace {

int gradcheck(double tolerance) {
  if (!(tolerance > 0.0)) throw evarl::ConfigError("--tol", "must be > 0");
  const auto checks = evarl::run_gradcheck_suite(tolerance);
  bool ok = true;
  for (const auto& c : checks) {
    std::printf("%-28s %3zu / %-3zu max rel. error %-10.3g %s\n", c.name.c_str(), c.passed,
                c.total, c.worst, c.ok() ? "PASS" : "FAIL");
    ok = ok && c.ok();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EvA-RL experiments: theory checks, training studies, OPE comparison"};
  app.name("evarl");
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run the experiment described by a JSON config");
  std::string config_path;
  std::size_t jobs = evarl::default_jobs();
  std::string out;
  bool quiet = false;
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--jobs", jobs, "Worker threads (default: available cores)");
  run->add_option("--out", out, "Output directory, overrides output_dir");
  run->add_flag("--quiet", quiet, "No progress messages");

  auto* summarize = app.add_subcommand("summarize", "Verify and summarize an output directory");
  std::string dir;
  summarize->add_option("dir", dir, "Output directory of a previous run")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  double tolerance = 1e-4;
  grad->add_option("--tol", tolerance, "Relative tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      evarl::RunOptions options;
      options.jobs = jobs;
      if (!out.empty()) options.out = out;
      options.seed_offset = evarl::seed_offset_from_env();
      options.progress = !quiet;
      const auto result = evarl::run_experiment(config_path, options);
      std::cout << "wrote " << result.manifest.artifacts.size() << " artifacts to "
                << result.dir.string() << "\n";
      return 0;
    }
    if (*summarize) {
      std::cout << evarl::summarize(dir);
      return 0;
    }
    return gradcheck(tolerance);
  } catch (const evarl::ConfigError& e) {
    std::cerr << "evarl: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "evarl: " << e.what() << "\n";
    return 1;
  }
}
