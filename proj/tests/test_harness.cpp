#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "apm/harness/config.hpp"
#include "apm/harness/experiment.hpp"

using namespace apm;
using namespace apm::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("apm_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t data_rows(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n - 1;
}

std::vector<ConfigIssue> issues_of(const std::string& text) {
  try {
    parse_config(text, "t.cfg");
  } catch (const ConfigError& e) {
    return e.issues();
  }
  return {};
}

bool mentions(const std::vector<ConfigIssue>& issues, std::size_t line, const std::string& fragment) {
  for (const auto& i : issues)
    if (i.line == line && i.message.find(fragment) != std::string::npos) return true;
  return false;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(APM_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kToy =
    "experiment = toy\n"
    "kernel = apm-ss+ss\n"
    "n_iters = 1000\n"
    "burn_in = 100\n"
    "thin = 7\n"
    "n_chains = 2\n"
    "seed = 5\n";

}  // namespace

TEST(Config, ValidKernelParses) {
  const auto cfg = parse_config(kToy);
  EXPECT_EQ(cfg.experiment, Experiment::Toy);
  EXPECT_EQ(cfg.kernel.name(), "apm-ss+ss");
  EXPECT_EQ(cfg.n_iters, 1000u);
  EXPECT_EQ(cfg.thin, 7u);
  EXPECT_EQ(cfg.seed, 5u);
  EXPECT_TRUE(cfg.init.from_prior);
}

TEST(Config, KernelMissingThetaUpdateNamesTheGrammar) {
  auto issues = issues_of("experiment = toy\nkernel = apm-ss\nn_iters = 10\n");
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].line, 2u);
  EXPECT_NE(issues[0].message.find("pm-mh | noisy-ss | apm-(mi|ss)+(mh|ss)"), std::string::npos);
}

TEST(Config, EveryViolationIsReportedWithItsLine) {
  const std::string text =
      "experiment = toy\n"
      "kernel = apm-mi+mh\n"
      "n_iters = -5\n"
      "# a comment\n"
      "sedd = 3\n"
      "thin = 0\n"
      "proposal.sigma = 0.5, x\n"
      "thin = 2\n"
      "no equals sign\n";
  auto issues = issues_of(text);
  EXPECT_TRUE(mentions(issues, 3, "non-negative integer"));
  EXPECT_TRUE(mentions(issues, 5, "unknown key `sedd`"));
  EXPECT_TRUE(mentions(issues, 6, "thin must be >= 1"));
  EXPECT_TRUE(mentions(issues, 7, "list of numbers"));
  EXPECT_TRUE(mentions(issues, 8, "duplicate key"));
  EXPECT_TRUE(mentions(issues, 9, "key = value"));
  EXPECT_TRUE(mentions(issues, 3, "n_iters must be >= 1"));
  for (std::size_t i = 1; i < issues.size(); ++i) EXPECT_LE(issues[i - 1].line, issues[i].line);
}

TEST(Config, CrossKeyChecks) {
  EXPECT_TRUE(mentions(issues_of("experiment = toy\nkernel = pm-mh\nn_iters = 10\nburn_in = 10\n"), 4, "burn_in"));
  EXPECT_TRUE(mentions(issues_of("experiment = toy\nkernel = pm-mh\nn_iters = 10\ninit = 1, 2\n"), 4, "5 coordinates"));
  EXPECT_TRUE(mentions(issues_of("experiment = toy\nkernel = apm-mi+mh\nn_iters = 10\nadapt.frozen_u = true\n"), 4,
                       "pm-mh only"));
  EXPECT_TRUE(mentions(issues_of("experiment = toy\nkernel = pm-mh\nn_iters = 100\nburn_in = 10\nadapt.iters = 50\n"),
                       5, "adapt.iters"));
  EXPECT_TRUE(mentions(issues_of("experiment = toy-stepsize-sweep\nkernel = pm-mh\nn_iters = 10\n"), 0,
                       "sweep.kernels"));
  EXPECT_TRUE(mentions(issues_of("experiment = ising\nkernel = pm-mh\nn_iters = 10\nising.coupling = 0.5\n"), 4,
                       "coupling_max"));
  EXPECT_TRUE(mentions(issues_of("experiment = gp\nkernel = pm-mh\nn_iters = 10\ngp.data = nope.csv\n"), 4,
                       "not found"));
  EXPECT_TRUE(mentions(issues_of("experiment = lattice\nkernel = pm-mh\nn_iters = 10\n"), 1, "one of"));
}

TEST(Config, RelativeDataPathsResolveAgainstTheConfigFile) {
  const auto dir = scratch("relpath");
  fs::create_directories(dir / "data");
  std::ofstream(dir / "data" / "d.csv") << "0.1,1\n0.2,-1\n";
  std::ofstream(dir / "g.cfg") << "experiment = gp\nkernel = pm-mh\nn_iters = 10\ngp.data = data/d.csv\n";
  const auto cfg = load_config(dir / "g.cfg");
  EXPECT_EQ(cfg.gp.data, dir / "data" / "d.csv");
  EXPECT_THROW(load_config(dir / "missing.cfg"), ConfigError);
}

TEST(Run, TraceRowsColumnsAndDeterminism) {
  auto cfg = parse_config(kToy);
  const auto a = scratch("det_a"), b = scratch("det_b");
  ASSERT_TRUE(run_experiment(cfg, a).ok());
  ASSERT_TRUE(run_experiment(cfg, b).ok());
  for (const char* f : {"chain_0.csv", "chain_1.csv"}) {
    EXPECT_EQ(data_rows(a / f), (1000u - 100u) / 7u);
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  std::ifstream in(a / "chain_0.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "iter,theta1,theta2,theta3,theta4,theta5,log_f_hat,accepted_u,accepted_theta,cum_estimator_evals");
  EXPECT_NE(slurp(a / "chain_0.csv"), slurp(a / "chain_1.csv"));
  for (const char* f : {"summary.json", "acf.csv", "hist_theta1.csv"}) EXPECT_TRUE(fs::exists(a / f)) << f;
  EXPECT_FALSE(fs::exists(a / "errors.json"));
}

TEST(Run, IsingSummaryCarriesRhatForBothParameters) {
  auto cfg = parse_config(
      "experiment = ising\nkernel = apm-ss+ss\nn_iters = 300\nburn_in = 50\nn_chains = 4\n"
      "theta_slice.w = 0.1\ntheta_slice.mode = per-coordinate\n");
  const auto dir = scratch("ising");
  const auto report = run_experiment(cfg, dir);
  ASSERT_TRUE(report.ok());
  const auto s = nlohmann::json::parse(slurp(dir / "summary.json"));
  for (const char* p : {"theta_J", "theta_h"}) {
    ASSERT_TRUE(s["r_hat"].contains(p));
    EXPECT_TRUE(s["r_hat"][p].is_number()) << p;
    EXPECT_EQ(s["ess"][p].size(), 4u);
  }
  EXPECT_EQ(s["max_stick_run"].size(), 4u);
  EXPECT_EQ(s["kernel"], "apm-ss+ss");
}

TEST(Run, SweepWritesOneCurvePerKernel) {
  auto cfg = parse_config(
      "experiment = toy-stepsize-sweep\nsweep.kernels = pm-mh, apm-mi+mh\nsweep.sigmas = 0.05, 0.85, 2.0\n"
      "n_iters = 2000\nburn_in = 100\noutput.traces = false\n");
  const auto dir = scratch("sweep");
  ASSERT_TRUE(run_experiment(cfg, dir).ok());
  for (const char* k : {"pm-mh", "apm-mi+mh"}) {
    const auto csv = dir / (std::string("acceptance_") + k + ".csv");
    ASSERT_TRUE(fs::exists(csv)) << k;
    EXPECT_EQ(data_rows(csv), 3u);
  }
  EXPECT_FALSE(fs::exists(dir / "traces"));
}

TEST(Run, RuntimeFailureLeavesPartialOutputsAndManifest) {
  // No finite estimate exists outside the prior box, so chain start-up fails.
  auto cfg = parse_config("experiment = ising\nkernel = pm-mh\nn_iters = 50\nising.rows = 3\nising.cols = 3\n"
                          "init = 0.45, 0.0\nn_chains = 2\n");
  const auto dir = scratch("fail");
  const auto report = run_experiment(cfg, dir);
  EXPECT_FALSE(report.ok());
  ASSERT_TRUE(fs::exists(dir / "errors.json"));
  const auto m = nlohmann::json::parse(slurp(dir / "errors.json"));
  EXPECT_EQ(m["errors"].size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_EQ(data_rows(dir / "chain_0.csv"), 0u);
}

TEST(Diagnose, RecomputesFromTraces) {
  auto cfg = parse_config(kToy);
  cfg.thin = 1;
  const auto dir = scratch("diag");
  const auto report = run_experiment(cfg, dir);
  ASSERT_TRUE(report.ok());
  const auto d = diagnose(dir);
  for (const char* p : {"theta1", "theta5"}) {
    EXPECT_DOUBLE_EQ(d["r_hat"][p].get<double>(), report.summary["r_hat"][p].get<double>());
    EXPECT_DOUBLE_EQ(d["ess_mean"][p].get<double>(), report.summary["ess_mean"][p].get<double>());
  }
  EXPECT_EQ(d["max_stick_run"], report.summary["max_stick_run"]);
  EXPECT_EQ(d["estimator_evals"], report.summary["estimator_evals"]);
  EXPECT_THROW(diagnose(scratch("empty")), std::runtime_error);
}

TEST(Cli, ExitCodesAndOutputOverride) {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  std::ofstream(dir / "ok.cfg") << "experiment = toy\nkernel = pm-mh\nn_iters = 200\n";
  std::ofstream(dir / "bad.cfg") << "experiment = toy\nkernel = apm-ss\nn_iters = 200\n";
  std::ofstream(dir / "fail.cfg") << "experiment = ising\nkernel = pm-mh\nn_iters = 20\nising.rows = 2\n"
                                     "ising.cols = 2\ninit = 0.45, 0\n";
  const std::string d = dir.string();
  EXPECT_EQ(run_cli("validate " + d + "/ok.cfg"), 0);
  EXPECT_EQ(run_cli("validate " + d + "/bad.cfg"), 1);
  EXPECT_EQ(run_cli("validate " + d + "/missing.cfg"), 1);
  EXPECT_EQ(run_cli("run " + d + "/bad.cfg --out " + d + "/never"), 1);
  EXPECT_FALSE(fs::exists(dir / "never"));
  EXPECT_EQ(run_cli("run " + d + "/ok.cfg --out " + d + "/out --seed 9 --chains 2"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "chain_1.csv"));
  EXPECT_EQ(run_cli("run " + d + "/fail.cfg --out " + d + "/failed"), 2);
  EXPECT_TRUE(fs::exists(dir / "failed" / "errors.json"));
  EXPECT_EQ(std::system(("APM_OUT_DIR=" + d + "/env " + APM_CLI_PATH + " run " + d + "/ok.cfg --out " + d +
                         "/ignored >/dev/null 2>&1")
                            .c_str()),
            0);
  EXPECT_TRUE(fs::exists(dir / "env" / "summary.json"));
  EXPECT_FALSE(fs::exists(dir / "ignored"));
  EXPECT_EQ(run_cli("diagnose " + d + "/out"), 0);
  EXPECT_EQ(run_cli("diagnose " + d + "/nothing"), 2);
  EXPECT_NE(run_cli("frobnicate"), 0);
}
