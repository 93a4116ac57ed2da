#pragma once

// Runs the chains an ExperimentConfig describes and writes their outputs:
//
//   chain_<i>.csv          per-chain trace
//   summary.json           ESS, R-hat, acceptance, evaluation counts, stick runs
//   acf.csv                chain-averaged autocorrelation against raw and cost-scaled lag
//   hist_<param>.csv       pooled marginal histograms
//   acceptance_<kernel>.csv  (toy-stepsize-sweep) acceptance against step size
//   errors.json            only when some chain failed

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "apm/diagnostics.hpp"
#include "apm/estimators.hpp"
#include "apm/harness/config.hpp"
#include "apm/kernels.hpp"
#include "apm/rng.hpp"

namespace apm::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> trace_header(const std::vector<std::string>& names) {
  std::vector<std::string> h{"iter"};
  h.insert(h.end(), names.begin(), names.end());
  for (const char* c : {"log_f_hat", "accepted_u", "accepted_theta", "cum_estimator_evals"}) h.emplace_back(c);
  return h;
}

class TraceWriter {
 public:
  TraceWriter(const fs::path& path, const std::vector<std::string>& names) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    const auto h = trace_header(names);
    for (std::size_t i = 0; i < h.size(); ++i) out_ << (i ? "," : "") << h[i];
    out_ << '\n';
  }

  void write(const TraceRecord& r) {
    out_ << r.iter;
    for (double t : r.theta) out_ << ',' << format_double(t);
    out_ << ',' << format_double(r.log_f_hat) << ',' << int(r.accepted_u) << ',' << int(r.accepted_theta) << ','
         << r.n_estimator_evals << '\n';
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

/// Everything one finished (or failed) chain contributes to the summary.
struct ChainOutcome {
  std::size_t index = 0;
  bool ok = false;
  std::string error;
  RunSummary run;
  std::vector<std::vector<double>> series;  // per parameter, retained rows
  std::vector<std::vector<double>> rows;    // retained theta vectors
  std::size_t last_cum_evals = 0;
  std::size_t n_records = 0;
  std::size_t recorded_theta_accepts = 0;
  std::size_t recorded_u_accepts = 0;
};

/// Chain-level summary reduction shared by run and diagnose.
inline json summarize_chains(const std::vector<std::string>& names, const std::vector<ChainOutcome>& chains,
                             bool flags_only) {
  json out;
  std::vector<const ChainOutcome*> good;
  for (const auto& c : chains)
    if (c.ok || !c.rows.empty()) good.push_back(&c);

  json ess = json::object(), ess_mean = json::object(), r_hat = json::object();
  for (std::size_t p = 0; p < names.size(); ++p) {
    json per = json::array();
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto* c : good) {
      if (c->series[p].size() < 100) {
        per.push_back(nullptr);
        continue;
      }
      const auto e = diag::ess(c->series[p]);
      per.push_back(e.ess);
      sum += e.ess;
      ++counted;
    }
    ess[names[p]] = per;
    ess_mean[names[p]] = counted ? json(sum / double(counted)) : json(nullptr);

    std::vector<std::vector<double>> s;
    for (const auto* c : good)
      if (c->ok) s.push_back(c->series[p]);
    bool equal = s.size() >= 2 && s.front().size() >= 100;
    for (const auto& v : s) equal = equal && v.size() == s.front().size();
    if (equal) {
      const auto r = diag::r_hat(s);
      r_hat[names[p]] = r.degenerate ? json(nullptr) : json(r.r_hat);
    } else {
      r_hat[names[p]] = nullptr;
    }
  }
  out["parameters"] = names;
  out["ess"] = ess;
  out["ess_mean"] = ess_mean;
  out["r_hat"] = r_hat;

  json acc_theta = json::array(), acc_u = json::array(), evals = json::array(), per_iter = json::array(),
       stick = json::array(), rows = json::array();
  for (const auto* c : good) {
    if (flags_only) {
      const double n = double(std::max<std::size_t>(c->n_records, 1));
      acc_theta.push_back(double(c->recorded_theta_accepts) / n);
      acc_u.push_back(double(c->recorded_u_accepts) / n);
      evals.push_back(c->last_cum_evals);
    } else {
      acc_theta.push_back(c->run.theta_acceptance());
      acc_u.push_back(c->run.u_acceptance());
      evals.push_back(c->run.total_evals);
      per_iter.push_back(c->run.iterations ? double(c->run.total_evals) / double(c->run.iterations) : 0.0);
    }
    stick.push_back(c->rows.empty() ? 0 : diag::max_stick_run(c->rows));
    rows.push_back(c->n_records);
  }
  out["acceptance"] = {{"theta", acc_theta}, {"u", acc_u}};
  out["estimator_evals"] = evals;
  if (!flags_only) out["evals_per_iteration"] = per_iter;
  out["max_stick_run"] = stick;
  out["trace_rows"] = rows;
  return out;
}

namespace detail {

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void write_plot_data(const fs::path& dir, const std::vector<std::string>& names,
                            const std::vector<ChainOutcome>& chains, std::size_t thin, double evals_per_iter,
                            std::size_t max_lag, std::size_t bins) {
  std::vector<const ChainOutcome*> good;
  for (const auto& c : chains)
    if (c.ok && c.rows.size() >= 2) good.push_back(&c);
  if (good.empty()) return;

  std::size_t shortest = good.front()->rows.size();
  for (const auto* c : good) shortest = std::min(shortest, c->rows.size());
  const std::size_t lags = std::min(max_lag, shortest - 1);
  std::vector<std::vector<double>> acf(names.size(), std::vector<double>(lags + 1, 0.0));
  for (std::size_t p = 0; p < names.size(); ++p)
    for (const auto* c : good) {
      const auto a = diag::autocorrelation(c->series[p], lags);
      for (std::size_t k = 0; k <= lags; ++k) acf[p][k] += a.values[k] / double(good.size());
    }
  const double cost = std::max(evals_per_iter, 1e-300) * double(thin);
  const auto scaled = diag::cost_scaled_lags(acf.front(), cost);
  {
    std::ofstream out(dir / "acf.csv", std::ios::binary);
    out << "lag,cost_scaled_lag";
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    for (std::size_t k = 0; k <= lags; ++k) {
      out << k * thin << ',' << format_double(scaled[k].first);
      for (std::size_t p = 0; p < names.size(); ++p) out << ',' << format_double(acf[p][k]);
      out << '\n';
    }
  }

  for (std::size_t p = 0; p < names.size(); ++p) {
    double lo = INFINITY, hi = -INFINITY;
    std::size_t total = 0;
    for (const auto* c : good)
      for (double v : c->series[p]) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        ++total;
      }
    if (!(hi > lo)) hi = lo + 1.0;
    const double width = (hi - lo) / double(bins);
    std::vector<std::size_t> counts(bins, 0);
    for (const auto* c : good)
      for (double v : c->series[p]) counts[std::min<std::size_t>(bins - 1, std::size_t((v - lo) / width))]++;
    std::ofstream out(dir / ("hist_" + names[p] + ".csv"), std::ios::binary);
    out << "bin_lo,bin_hi,count,density\n";
    for (std::size_t b = 0; b < bins; ++b)
      out << format_double(lo + b * width) << ',' << format_double(lo + (b + 1) * width) << ',' << counts[b] << ','
          << format_double(double(counts[b]) / (double(total) * width)) << '\n';
  }
}

/// Calls job(i) for i < n on up to hardware_concurrency threads.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n, std::thread::hardware_concurrency()));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Model objects shared read-only by all chains of a run.
class ModelContext {
 public:
  explicit ModelContext(const ExperimentConfig& cfg) : cfg_(&cfg) {
    if (cfg.experiment == Experiment::Ising) {
      const auto& s = cfg.ising;
      ising::Lattice lat(s.rows, s.cols);
      const ising::Params truth{s.coupling, s.field};
      auto y = ising::cftp_exact_sample(lat, truth, RandomDb(BaseSpace::UnitUniform, s.data_seed));
      ising_ = std::make_unique<IsingPosterior>(ising::Spec{lat, y, s.field_max, s.coupling_max}, truth);
    } else if (cfg.experiment == Experiment::Gp) {
      const auto& s = cfg.gp;
      gp::Dataset data = s.data.empty() ? gp::synthetic_data(s.n, s.d, {s.variance, s.length_scale}, s.data_seed)
                                        : gp::load_csv(s.data.string());
      gp_ = std::make_unique<gp::ProbitModel>(gp::ProbitModel{std::move(data), s.variance_prior, s.length_scale_prior});
    }
  }

  const IsingPosterior* ising() const { return ising_.get(); }
  const gp::ProbitModel* gp() const { return gp_.get(); }

  /// Starting theta for one chain.
  std::vector<double> initial_theta(std::uint64_t seed) const {
    const auto& c = *cfg_;
    if (!c.init.from_prior) return c.init.theta;
    KernelRng rng(seed ^ 0x696e6974ULL);
    switch (c.experiment) {
      case Experiment::Toy:
      case Experiment::ToyStepsizeSweep: {
        std::vector<double> t(c.toy.dim);
        for (auto& v : t) v = rng.normal();
        return t;
      }
      case Experiment::Ising:
        return {rng.uniform(0.0, c.ising.coupling_max), rng.uniform(-c.ising.field_max, c.ising.field_max)};
      case Experiment::Gp: {
        std::mt19937_64 eng(rng.bits());
        std::gamma_distribution<double> var(c.gp.variance_prior.shape, 1.0 / c.gp.variance_prior.rate);
        std::gamma_distribution<double> len(c.gp.length_scale_prior.shape, 1.0 / c.gp.length_scale_prior.rate);
        const double a = var(eng);
        return {a, len(eng)};
      }
    }
    return {};
  }

  /// Runs `body` with a freshly built estimator for one chain.
  template <class Body>
  void with_estimator(Body&& body) const {
    const auto& c = *cfg_;
    switch (c.experiment) {
      case Experiment::Toy:
      case Experiment::ToyStepsizeSweep: body(ToyGaussianEstimator(c.toy.dim)); return;
      case Experiment::Ising:
        if (c.ising.ais_k > 0)
          body(AisEstimator(*ising_, AisConfig{c.ising.ais_k}));
        else
          body(DiIsEstimator(*ising_));
        return;
      case Experiment::Gp: body(GpIsEstimator(*gp_, c.gp.n_imp, c.gp.proposal)); return;
    }
  }

 private:
  const ExperimentConfig* cfg_;
  std::unique_ptr<IsingPosterior> ising_;
  std::unique_ptr<gp::ProbitModel> gp_;
};

/// Runs one chain; failures are captured in the outcome, with the partial
/// trace already on disk.
inline ChainOutcome run_one_chain(const ExperimentConfig& cfg, const ModelContext& ctx, const KernelConfig& kc,
                                  std::size_t index, const std::optional<fs::path>& trace_path) {
  ChainOutcome out;
  out.index = index;
  const auto names = cfg.parameter_names();
  out.series.assign(names.size(), {});
  const auto seeds = chain_seeds(cfg.seed, index);
  try {
    std::unique_ptr<TraceWriter> writer;
    if (trace_path) writer = std::make_unique<TraceWriter>(*trace_path, names);
    ctx.with_estimator([&](const auto& est) {
      Kernel kernel(est, kc);
      KernelRng rng(seeds.kernel);
      const auto space = est.base_space();
      ChainState state = initialize_state(est, ctx.initial_theta(seeds.kernel), RandomDb(space, seeds.db));
      auto record = [&](const TraceRecord& r) {
        if (writer) writer->write(r);
        for (std::size_t p = 0; p < r.theta.size(); ++p) out.series[p].push_back(r.theta[p]);
        out.rows.push_back(r.theta);
        out.last_cum_evals = r.n_estimator_evals;
        ++out.n_records;
        out.recorded_theta_accepts += r.accepted_theta;
        out.recorded_u_accepts += r.accepted_u;
      };
      try {
        out.run = run_chain(kernel, state, cfg.run_options(), rng, record);
      } catch (...) {
        if (writer) writer->flush();
        throw;
      }
    });
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

struct RunReport {
  fs::path out_dir;
  std::vector<std::string> errors;
  json summary;
  bool ok() const { return errors.empty(); }
};

namespace detail {

inline json error_entry(const std::string& kernel, std::optional<double> sigma, const ChainOutcome& c) {
  json e{{"kernel", kernel}, {"chain", c.index}, {"message", c.error}, {"rows_written", c.n_records}};
  if (sigma) e["sigma"] = *sigma;
  return e;
}

inline std::string sigma_label(double s) { return "sigma_" + format_double(s); }

}  // namespace detail

/// Runs every chain in cfg and writes all outputs under out_dir.
inline RunReport run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  RunReport report;
  report.out_dir = out_dir;
  fs::create_directories(out_dir);
  const ModelContext ctx(cfg);
  const auto names = cfg.parameter_names();
  json errors = json::array();

  json summary{{"experiment", to_string(cfg.experiment)},
               {"seed", cfg.seed},
               {"n_iters", cfg.n_iters},
               {"burn_in", cfg.burn_in},
               {"thin", cfg.thin},
               {"n_chains", cfg.n_chains}};

  if (cfg.experiment == Experiment::ToyStepsizeSweep) {
    json kernels = json::object();
    for (const auto& spec : cfg.sweep_kernels) {
      const std::string kname = spec.name();
      std::ofstream curve(out_dir / ("acceptance_" + kname + ".csv"), std::ios::binary);
      curve << "sigma,theta_acceptance,u_acceptance,evals_per_iteration\n";
      json points = json::array();
      for (double sigma : cfg.sweep_sigmas) {
        KernelConfig kc = cfg.kernel_config(spec);
        kc.proposal.sigma = {sigma};
        std::vector<ChainOutcome> chains(cfg.n_chains);
        const fs::path dir = out_dir / "traces" / kname / detail::sigma_label(sigma);
        if (cfg.write_traces) fs::create_directories(dir);
        detail::parallel_for(cfg.n_chains, [&](std::size_t i) {
          std::optional<fs::path> tp;
          if (cfg.write_traces) tp = dir / ("chain_" + std::to_string(i) + ".csv");
          chains[i] = run_one_chain(cfg, ctx, kc, i, tp);
        });
        double acc = 0.0, acc_u = 0.0, per_iter = 0.0;
        std::size_t ok = 0;
        for (const auto& c : chains) {
          if (!c.ok) {
            errors.push_back(detail::error_entry(kname, sigma, c));
            continue;
          }
          acc += c.run.theta_acceptance();
          acc_u += c.run.u_acceptance();
          per_iter += double(c.run.total_evals) / double(c.run.iterations);
          ++ok;
        }
        if (ok) {
          acc /= ok;
          acc_u /= ok;
          per_iter /= ok;
          curve << format_double(sigma) << ',' << format_double(acc) << ',' << format_double(acc_u) << ','
                << format_double(per_iter) << '\n';
        }
        points.push_back({{"sigma", sigma},
                          {"theta_acceptance", ok ? json(acc) : json(nullptr)},
                          {"u_acceptance", ok ? json(acc_u) : json(nullptr)},
                          {"evals_per_iteration", ok ? json(per_iter) : json(nullptr)}});
      }
      kernels[kname] = points;
    }
    summary["sweep"] = kernels;
  } else {
    const std::string kname = cfg.kernel.name();
    summary["kernel"] = kname;
    const KernelConfig kc = cfg.kernel_config(cfg.kernel);
    std::vector<ChainOutcome> chains(cfg.n_chains);
    detail::parallel_for(cfg.n_chains, [&](std::size_t i) {
      std::optional<fs::path> tp;
      if (cfg.write_traces) tp = out_dir / ("chain_" + std::to_string(i) + ".csv");
      chains[i] = run_one_chain(cfg, ctx, kc, i, tp);
    });
    for (const auto& c : chains)
      if (!c.ok) errors.push_back(detail::error_entry(kname, std::nullopt, c));
    summary.update(summarize_chains(names, chains, false));
    json final_sigma = json::array();
    double per_iter = 0.0;
    std::size_t ok = 0;
    for (const auto& c : chains) {
      if (!c.ok) continue;
      final_sigma.push_back(c.run.final_proposal.sigma);
      per_iter += double(c.run.total_evals) / double(c.run.iterations);
      ++ok;
    }
    if (cfg.kernel.uses_mh_theta()) summary["final_sigma"] = final_sigma;
    detail::write_plot_data(out_dir, names, chains, cfg.thin, ok ? per_iter / ok : 1.0, cfg.acf_max_lag,
                            cfg.hist_bins);
  }

  summary["failed_chains"] = errors.size();
  detail::write_json(out_dir / "summary.json", summary);
  if (!errors.empty()) detail::write_json(out_dir / "errors.json", json{{"errors", errors}});
  for (const auto& e : errors) report.errors.push_back(e["message"].get<std::string>());
  report.summary = std::move(summary);
  return report;
}

/// Reads every chain_<i>.csv in a directory back into outcomes.
inline std::pair<std::vector<std::string>, std::vector<ChainOutcome>> read_traces(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " is not a directory");
  std::vector<std::pair<std::size_t, fs::path>> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("chain_", 0) != 0 || entry.path().extension() != ".csv") continue;
    const std::string idx = name.substr(6, name.size() - 10);
    if (auto v = detail::parse_number<std::size_t>(idx)) files.emplace_back(*v, entry.path());
  }
  if (files.empty()) throw std::runtime_error("no chain_<i>.csv traces in " + dir.string());
  std::sort(files.begin(), files.end());

  std::vector<std::string> names;
  std::vector<ChainOutcome> chains;
  for (const auto& [index, path] : files) {
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty trace");
    std::vector<std::string> header;
    for (auto f : detail::split_list(line)) header.emplace_back(f);
    if (header.size() < 6 || header.front() != "iter" || header.back() != "cum_estimator_evals")
      throw std::runtime_error(path.string() + ":1: not a trace header");
    std::vector<std::string> params(header.begin() + 1, header.end() - 4);
    if (names.empty())
      names = params;
    else if (names != params)
      throw std::runtime_error(path.string() + ": parameters differ from the other traces");
    ChainOutcome c;
    c.index = index;
    c.ok = true;
    c.series.assign(names.size(), {});
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto fields = detail::split_list(line);
      if (fields.size() != header.size())
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": wrong number of fields");
      std::vector<double> theta(names.size());
      for (std::size_t p = 0; p < names.size(); ++p) {
        auto v = detail::parse_number<double>(fields[p + 1]);
        if (!v) throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": bad number");
        theta[p] = *v;
        c.series[p].push_back(*v);
      }
      const std::size_t base = names.size() + 1;
      c.recorded_u_accepts += fields[base + 1] == "1";
      c.recorded_theta_accepts += fields[base + 2] == "1";
      if (auto e = detail::parse_number<std::size_t>(fields[base + 3])) c.last_cum_evals = *e;
      c.rows.push_back(std::move(theta));
      ++c.n_records;
    }
    chains.push_back(std::move(c));
  }
  return {names, chains};
}

/// Summary recomputed from the traces alone. Acceptance here is the fraction
/// of retained rows whose sub-move was accepted.
inline json diagnose(const fs::path& dir) {
  auto [names, chains] = read_traces(dir);
  json out{{"trace_dir", dir.string()}, {"n_chains", chains.size()}};
  out.update(summarize_chains(names, chains, true));
  return out;
}

}  // namespace apm::harness
