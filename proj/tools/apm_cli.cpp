// apm: run, validate and diagnose sampler experiments.
//
//   apm run <config> [--seed N] [--out DIR] [--chains N]
//   apm validate <config>
//   apm diagnose <trace-dir>
//
// Exit status: 0 success, 1 configuration error, 2 runtime error.
// APM_OUT_DIR, when set, replaces the output directory.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "apm/harness/config.hpp"
#include "apm/harness/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

std::filesystem::path default_out_dir(const std::filesystem::path& config) {
  return std::filesystem::path("runs") / config.stem();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Auxiliary pseudo-marginal MCMC experiments"};
  app.require_subcommand(1);

  std::string run_config, validate_config, trace_dir, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> chains;

  auto* run = app.add_subcommand("run", "run an experiment config");
  run->add_option("config", run_config, "config file")->required();
  run->add_option("--seed", seed, "master seed (chain i uses seed + i)");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--chains", chains, "number of chains")->check(CLI::PositiveNumber);

  auto* validate = app.add_subcommand("validate", "check a config and report every problem");
  validate->add_option("config", validate_config, "config file")->required();

  auto* diagnose = app.add_subcommand("diagnose", "recompute summaries from chain_<i>.csv traces");
  diagnose->add_option("trace-dir", trace_dir, "directory of traces")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  using namespace apm::harness;

  if (*validate) {
    try {
      const auto cfg = load_config(validate_config);
      std::cout << validate_config << ": ok (" << to_string(cfg.experiment) << ")\n";
      return kOk;
    } catch (const ConfigError& e) {
      std::cerr << e.what();
      return kConfigError;
    }
  }

  if (*diagnose) {
    try {
      std::cout << apm::harness::diagnose(trace_dir).dump(2) << '\n';
      return kOk;
    } catch (const std::exception& e) {
      std::cerr << "diagnose: " << e.what() << '\n';
      return kRuntimeError;
    }
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(run_config);
  } catch (const ConfigError& e) {
    std::cerr << e.what();
    return kConfigError;
  }
  if (seed) cfg.seed = *seed;
  if (chains) cfg.n_chains = *chains;
  std::filesystem::path out = out_dir.empty() ? default_out_dir(run_config) : std::filesystem::path(out_dir);
  if (const char* env = std::getenv("APM_OUT_DIR"); env && *env) out = env;

  try {
    const auto report = run_experiment(cfg, out);
    if (!report.ok()) {
      for (const auto& e : report.errors) std::cerr << "chain error: " << e << '\n';
      std::cerr << "partial outputs and errors.json written to " << out.string() << '\n';
      return kRuntimeError;
    }
    std::cout << "wrote " << out.string() << '\n';
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "run: " << e.what() << '\n';
    return kRuntimeError;
  }
}
