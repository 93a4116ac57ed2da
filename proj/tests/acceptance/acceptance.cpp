// Acceptance checks for the sampler library. Each criterion prints one line
//   CRITERION k: PASS|FAIL  <details>
// and the process exits non-zero if any requested criterion fails.
//
//   apm_acceptance 1 2 3 ...   (no arguments runs all ten)

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "apm/estimators.hpp"
#include "apm/harness/config.hpp"
#include "apm/harness/experiment.hpp"
#include "apm/kernels.hpp"
#include "apm/models/ising.hpp"
#include "apm/random_db.hpp"
#include "apm/rng.hpp"
#include "apm/slice.hpp"
#include "support/chain_stats.hpp"
#include "support/fuzz.hpp"
#include "support/stats.hpp"

namespace fs = std::filesystem;
namespace st = apm::testing;
using namespace apm;
using apm::harness::json;

namespace {

const fs::path kConfigDir = APM_CONFIG_DIR;
const fs::path kOutRoot = APM_ACCEPTANCE_OUT;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail << (detail.tellp() > 0 ? "; " : "") << (ok ? "" : "[x] ") << what;
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

harness::ExperimentConfig config(const std::string& name) {
  auto cfg = harness::load_config(kConfigDir / name);
  cfg.write_traces = false;
  return cfg;
}

json run(const harness::ExperimentConfig& cfg, const std::string& label) {
  const auto report = harness::run_experiment(cfg, kOutRoot / label);
  if (!report.ok()) throw std::runtime_error(label + ": " + report.errors.front());
  return report.summary;
}

std::map<double, double> sweep_curve(const json& summary, const std::string& kernel) {
  std::map<double, double> out;
  for (const auto& p : summary["sweep"][kernel]) out[p["sigma"].get<double>()] = p["theta_acceptance"].get<double>();
  return out;
}

std::vector<double> random_theta(KernelRng& rng, std::size_t dim) {
  std::vector<double> t(dim);
  for (auto& v : t) v = rng.normal();
  return t;
}

// 1. PM-MH acceptance stays below 0.234 over the step-size sweep.
void criterion_1(Verdict& v) {
  auto cfg = config("toy-sweep.cfg");
  cfg.sweep_kernels = {*KernelSpec::parse("pm-mh")};
  cfg.sweep_sigmas = {0.05, 0.1, 0.2, 0.4, 0.85, 1.5};
  const auto curve = sweep_curve(run(cfg, "c1"), "pm-mh");
  for (auto [sigma, acc] : curve) v.require(acc < 0.234, "sigma " + fmt(sigma) + " acc " + fmt(acc));
}

// 2. APM MI+MH acceptance crosses 0.234 inside [0.6, 1.1] and exceeds 0.5 at 0.2.
void criterion_2(Verdict& v) {
  auto cfg = config("toy-sweep.cfg");
  cfg.sweep_kernels = {*KernelSpec::parse("apm-mi+mh")};
  const auto curve = sweep_curve(run(cfg, "c2"), "apm-mi+mh");
  std::vector<double> crossings;
  for (auto it = curve.begin(); std::next(it) != curve.end(); ++it) {
    const auto [s0, a0] = *it;
    const auto [s1, a1] = *std::next(it);
    if ((a0 - 0.234) * (a1 - 0.234) <= 0.0 && a0 != a1) crossings.push_back(s0 + (0.234 - a0) * (s1 - s0) / (a1 - a0));
  }
  v.require(!crossings.empty(), std::to_string(crossings.size()) + " crossing(s)");
  for (double c : crossings) v.require(c >= 0.6 && c <= 1.1, "crossing at sigma " + fmt(c));
  v.require(curve.at(0.2) > 0.5, "acc at 0.2 = " + fmt(curve.at(0.2)));
}

// 3. theta_1 marginal of every kernel passes KS against N(0, 1).
void criterion_3(Verdict& v) {
  ToyGaussianEstimator est;
  for (const auto& name : st::all_kernel_names()) {
    KernelConfig kc;
    kc.spec = *KernelSpec::parse(name);
    kc.proposal = ProposalConfig{{0.85}};
    kc.theta_slice = SliceConfig{4.0, false};
    kc.theta_slice_mode = SliceMode::RandomDirection;
    Kernel<ToyGaussianEstimator> kernel(est, kc);
    const auto seeds = chain_seeds(300, 0);
    KernelRng rng(seeds.kernel);
    KernelRng init(seeds.kernel ^ 0x5a5a5a5aULL);
    ChainState s = initialize_state(est, random_theta(init, 5), RandomDb(BaseSpace::StandardNormal, seeds.db));
    RunOptions opts;
    opts.burn_in = 1000;
    opts.n_iters = 100000 + opts.burn_in;
    std::vector<double> theta1;
    theta1.reserve(100000);
    run_chain(kernel, s, opts, rng, [&](const TraceRecord& r) { theta1.push_back(r.theta[0]); });
    const auto ks = st::chain_ks(theta1, st::normal_cdf);
    v.require(ks.p_value > 0.01, name + " D=" + fmt(ks.d) + " n_eff=" + fmt(ks.n_eff, 6) + " p=" + fmt(ks.p_value));
  }
}

// 4. Noisy slice sampling with a bracket allowed to shrink to machine
// precision averages more than 100 evaluations per update.
void criterion_4(Verdict& v) {
  const auto cfg = config("toy-noisy-ss.cfg");
  ToyGaussianEstimator est;
  Kernel<ToyGaussianEstimator> kernel(est, cfg.kernel_config(cfg.kernel));
  const auto seeds = chain_seeds(cfg.seed, 0);
  KernelRng rng(seeds.kernel);
  KernelRng init(seeds.kernel ^ 0x5a5a5a5aULL);
  ChainState s = initialize_state(est, random_theta(init, 5), RandomDb(BaseSpace::StandardNormal, seeds.db));
  RunOptions opts;
  opts.n_iters = 1000;
  const auto sum = run_chain(kernel, s, opts, rng, [](const TraceRecord&) {});
  const double per_update = double(sum.total_evals) / double(sum.iterations);
  v.require(per_update > 100.0, "mean evals/update " + fmt(per_update) + " over " + std::to_string(sum.iterations));
}

ising::Lattice lattice3() { return ising::Lattice(3, 3); }

IsingPosterior small_ising(ising::Params truth, std::uint64_t seed) {
  const auto lat = lattice3();
  RandomDb db(BaseSpace::UnitUniform, seed);
  auto y = ising::cftp_exact_sample(lat, truth, db);
  return IsingPosterior(ising::Spec{lat, y}, truth);
}

std::vector<double> draw_weights(const std::function<double(const RandomDb&)>& log_w, BaseSpace space,
                                 std::uint64_t seed, int n) {
  RandomDb db(space, seed);
  std::vector<double> w;
  w.reserve(n);
  for (int i = 0; i < n; ++i) {
    db = resample(db);
    w.push_back(std::exp(log_w(db)));
  }
  return w;
}

void check_mean(Verdict& v, const std::string& label, const std::vector<double>& w, double truth) {
  const auto m = st::mean_and_se(w);
  v.require(std::abs(m.mean - truth) <= 3 * m.se,
            label + " mean " + fmt(m.mean, 6) + " truth " + fmt(truth, 6) + " se " + fmt(m.se, 3));
}

// p(y | theta) for a single point by the midpoint rule.
double quadrature_one_point(const gp::ProbitModel& m, const gp::Theta& t) {
  const double var = gp::covariance(m, t)(0, 0);
  const double sd = std::sqrt(var), lo = -10 * sd, h = 20 * sd / 4000;
  double acc = 0.0;
  for (int i = 0; i < 4000; ++i) {
    const double f = lo + (i + 0.5) * h;
    acc += std::exp(gp::log_normal_cdf(m.data.targets[0] * f) - 0.5 * f * f / var) / std::sqrt(2 * std::numbers::pi * var) * h;
  }
  return acc;
}

// 5. Unbiasedness of every estimator against an exact reference.
void criterion_5(Verdict& v) {
  ToyGaussianEstimator toy;
  KernelRng rng(501);
  for (int trial = 0; trial < 5; ++trial) {
    const auto theta = random_theta(rng, 5);
    const double log_target = toy.log_target(theta);
    auto w = draw_weights([&](const RandomDb& db) { return toy(theta, db) - log_target; }, BaseSpace::StandardNormal,
                          510 + trial, 100000);
    check_mean(v, "toy#" + std::to_string(trial), w, 1.0);
  }

  const auto model = small_ising({0.3, 0.0}, 520);
  const auto lat = lattice3();
  const ising::Params p{0.2, 0.1};
  const double ratio = std::exp(ising::enumerate_log_z(lat, model.theta_hat()) - ising::enumerate_log_z(lat, p));
  DiIsEstimator di(model);
  check_mean(v, "ising-is",
             draw_weights([&](const RandomDb& db) { return di.log_ratio(model.exact_sample(p, db), p); },
                          BaseSpace::UnitUniform, 521, 100000),
             ratio);

  const ising::Params far{0.05, 0.6};
  const double far_ratio = std::exp(ising::enumerate_log_z(lat, model.theta_hat()) - ising::enumerate_log_z(lat, far));
  AisEstimator ais(model, AisConfig{8});
  check_mean(v, "ais-k8", draw_weights([&](const RandomDb& db) { return ais.log_weight(far, db); }, BaseSpace::UnitUniform, 522, 100000),
             far_ratio);

  Eigen::MatrixXd x(1, 1);
  Eigen::VectorXd y(1);
  x(0, 0) = 0.3;
  y[0] = 1.0;
  gp::ProbitModel gpm{gp::Dataset{x, y}};
  const gp::Theta t{2.0, 0.8};
  GpIsEstimator gpe(gpm, 4);
  const std::vector<double> gtheta{t.variance, t.length_scale};
  const double log_prior = gpm.log_prior(t);
  check_mean(v, "gp-n1",
             draw_weights([&](const RandomDb& db) { return gpe(gtheta, db) - log_prior; }, BaseSpace::StandardNormal, 523, 100000),
             quadrature_one_point(gpm, t));
}

// 6. CFTP samples match the enumerated 3 x 3 distribution.
void criterion_6(Verdict& v) {
  const auto lat = lattice3();
  const ising::Params p{0.25, 0.1};
  const double log_z = ising::enumerate_log_z(lat, p);
  const int n = 100000;
  std::vector<double> observed(512, 0.0), expected(512);
  for (std::uint64_t m = 0; m < 512; ++m)
    expected[m] = n * std::exp(ising::log_g(lat, p, ising::config_from_mask(9, m)) - log_z);
  RandomDb db(BaseSpace::UnitUniform, 600);
  for (int i = 0; i < n; ++i) {
    db = resample(db);
    observed[ising::mask_from_config(ising::cftp_exact_sample(lat, p, db))] += 1;
  }
  const auto chi = st::chi_square_test(observed, expected);
  v.require(chi.p_value > 0.01, "chi2 " + fmt(chi.statistic) + " df " + fmt(chi.df) + " p " + fmt(chi.p_value));
}

// 7 and 8 share the 10 x 10 Ising runs.
void criteria_7_8(Verdict& v7, Verdict& v8) {
  const auto apm = run(config("ising-apm-ss+ss.cfg"), "c7_apm");
  auto pm_cfg = config("ising-pm-mh.cfg");
  pm_cfg.seed = config("ising-apm-ss+ss.cfg").seed;
  const auto pm = run(pm_cfg, "c7_pm");

  const double pm_stick = pm["max_stick_run"][0].get<double>();
  const double apm_stick = apm["max_stick_run"][0].get<double>();
  v7.require(pm_stick >= 10 * apm_stick, "pm-mh stick " + fmt(pm_stick, 8) + " vs apm-ss+ss " + fmt(apm_stick, 8));
  v7.require(apm_stick <= 5, "apm-ss+ss stick " + fmt(apm_stick, 8));

  for (const char* p : {"theta_J", "theta_h"}) {
    const auto& r = apm["r_hat"][p];
    v8.require(!r.is_null() && r.get<double>() < 1.05, std::string("R-hat ") + p + " " + (r.is_null() ? "null" : fmt(r.get<double>(), 5)));
  }
}

// 9. ESS of the length scale under APM beats PM-MH; APM acceptances land in band.
void criterion_9(Verdict& v) {
  const auto pm = run(config("gp-pm-mh.cfg"), "c9_pm");
  const double pm_ess = pm["ess_mean"]["tau"].get<double>();
  for (const char* name : {"gp-apm-mi+mh.cfg", "gp-apm-ss+mh.cfg"}) {
    const auto s = run(config(name), std::string("c9_") + name);
    const double e = s["ess_mean"]["tau"].get<double>();
    v.require(e >= pm_ess, std::string(name) + " ESS(tau) " + fmt(e) + " vs pm-mh " + fmt(pm_ess));
    std::size_t inside = 0, total = 0;
    double lo = 1.0, hi = 0.0;
    for (const auto& a : s["acceptance"]["theta"]) {
      const double x = a.get<double>();
      lo = std::min(lo, x);
      hi = std::max(hi, x);
      inside += (x >= 0.15 && x <= 0.3);
      ++total;
    }
    v.require(inside == total && total > 0,
              std::to_string(inside) + "/" + std::to_string(total) + " in band [" + fmt(lo, 3) + ", " + fmt(hi, 3) + "]");
  }
}

double uniform_cdf(double x) { return std::clamp(x, 0.0, 1.0); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// 10. Measure preservation, 1-D slice exactness, kernel fuzzing, reruns.
void criterion_10(Verdict& v) {
  const double crit = st::ks_critical(1e5, 0.01);
  {
    RandomDb u(BaseSpace::UnitUniform, 1001);
    auto view = perturb_reflective(u, u.fresh_sibling(BaseSpace::StandardNormal), 0.73);
    std::vector<double> xs;
    for (std::uint64_t k = 0; k < 100000; ++k) xs.push_back(view.get({k}));
    const double d = st::ks_statistic(xs, uniform_cdf);
    v.require(d < crit, "reflective D " + fmt(d));
  }
  {
    RandomDb u(BaseSpace::StandardNormal, 1002);
    auto view = perturb_elliptical(u, u.fresh_sibling(BaseSpace::StandardNormal), 2.1);
    std::vector<double> xs;
    for (std::uint64_t k = 0; k < 100000; ++k) xs.push_back(view.get({k}));
    const double d = st::ks_statistic(xs, st::normal_cdf);
    v.require(d < crit, "elliptical D " + fmt(d));
  }

  auto slice_chain = [](auto log_f, double x0, SliceConfig cfg, std::uint64_t seed) {
    KernelRng rng(seed);
    double x = x0, lf = log_f(x0);
    std::vector<double> xs;
    for (int i = 0; i < 100000; ++i) {
      auto out = slice_linear(log_f, x, lf, cfg, rng);
      x = out.new_point;
      lf = out.log_f;
      xs.push_back(x);
    }
    return xs;
  };
  {
    auto xs = slice_chain([](double x) { return -0.5 * x * x; }, 0.0, SliceConfig{1.0, true}, 1003);
    const auto ks = st::chain_ks(xs, st::normal_cdf);
    v.require(ks.p_value > 0.01, "slice normal p " + fmt(ks.p_value));
  }
  {
    auto xs = slice_chain([](double x) { return x > 0 ? -x : -INFINITY; }, 1.0, SliceConfig{2.0, true}, 1004);
    const auto ks = st::chain_ks(xs, [](double x) { return x <= 0 ? 0.0 : 1.0 - std::exp(-x); });
    v.require(ks.p_value > 0.01, "slice exponential p " + fmt(ks.p_value));
  }

  {
    st::FuzzReport toy_report, ising_report;
    ToyGaussianEstimator toy;
    ChainState t = initialize_state(toy, std::vector<double>(5, 0.0), RandomDb(BaseSpace::StandardNormal, 1005));
    st::fuzz_kernels(toy, t, 10000, 1005, 0.8, toy_report);
    const auto model = small_ising({0.3, 0.0}, 1006);
    DiIsEstimator di(model);
    ChainState s = initialize_state(di, std::vector<double>{0.3, 0.0}, RandomDb(BaseSpace::UnitUniform, 1006));
    st::fuzz_kernels(di, s, 10000, 1006, 0.05, ising_report);
    for (const auto* r : {&toy_report, &ising_report}) {
      const std::string which = r == &toy_report ? "toy" : "ising";
      v.require(r->cache_mismatches == 0 && r->impure_rejections == 0,
                which + " fuzz " + std::to_string(r->steps) + " steps, " + std::to_string(r->cache_mismatches) +
                    " cache mismatches, " + std::to_string(r->impure_rejections) + " impure of " +
                    std::to_string(r->rejections) + " rejections" +
                    (r->first_failure.empty() ? "" : " (" + r->first_failure + ")"));
    }
  }

  {
    bool same = true;
    std::size_t files = 0;
    for (const char* name : {"toy-apm-ss+ss.cfg", "ising-ais.cfg"}) {
      auto cfg = harness::load_config(kConfigDir / name);
      cfg.n_iters = 3000;
      cfg.burn_in = 500;
      cfg.n_chains = 2;
      const auto a = kOutRoot / "c10_rerun_a" / name, b = kOutRoot / "c10_rerun_b" / name;
      fs::remove_all(a);
      fs::remove_all(b);
      harness::run_experiment(cfg, a);
      harness::run_experiment(cfg, b);
      for (const auto& e : fs::directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        ++files;
        same = same && slurp(e.path()) == slurp(b / e.path().filename());
      }
    }
    v.require(same && files > 0, "byte-identical reruns over " + std::to_string(files) + " output files");
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::stoi(argv[i]));
  if (wanted.empty())
    for (int k = 1; k <= 10; ++k) wanted.push_back(k);
  fs::create_directories(kOutRoot);

  std::map<int, std::function<void(Verdict&)>> single{{1, criterion_1}, {2, criterion_2}, {3, criterion_3},
                                                       {4, criterion_4}, {5, criterion_5}, {6, criterion_6},
                                                       {9, criterion_9}, {10, criterion_10}};
  std::map<int, Verdict> verdicts;
  auto guarded = [&](std::initializer_list<int> ks, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      for (int k : ks) verdicts[k].require(false, std::string("exception: ") + e.what());
    }
  };

  bool all = true;
  std::vector<int> printed;
  for (int k : wanted) {
    if (std::find(printed.begin(), printed.end(), k) != printed.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    std::vector<int> done;
    if (k == 7 || k == 8) {
      guarded({7, 8}, [&] { criteria_7_8(verdicts[7], verdicts[8]); });
      for (int j : {7, 8})
        if (std::find(wanted.begin(), wanted.end(), j) != wanted.end()) done.push_back(j);
    } else if (single.count(k)) {
      guarded({k}, [&] { single[k](verdicts[k]); });
      done.push_back(k);
    } else {
      std::cerr << "unknown criterion " << k << '\n';
      return 2;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (int j : done) {
      const auto& v = verdicts[j];
      all = all && v.pass;
      std::cout << "CRITERION " << j << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail.str() << "  ("
                << fmt(secs, 3) << " s)" << std::endl;
      printed.push_back(j);
    }
  }
  return all ? 0 : 1;
}
