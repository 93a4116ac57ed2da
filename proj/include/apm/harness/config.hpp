#pragma once

// Experiment configuration: one `key = value` pair per line, `#` starts a
// comment. Lists are comma separated. Every problem in a file is reported
// together, each tagged with the line it came from.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "apm/chain.hpp"
#include "apm/kernels.hpp"
#include "apm/estimators.hpp"
#include "apm/slice.hpp"

namespace apm::harness {

enum class Experiment { Toy, ToyStepsizeSweep, Ising, Gp };

inline const char* to_string(Experiment e) {
  switch (e) {
    case Experiment::Toy: return "toy";
    case Experiment::ToyStepsizeSweep: return "toy-stepsize-sweep";
    case Experiment::Ising: return "ising";
    case Experiment::Gp: return "gp";
  }
  return "";
}

struct ConfigIssue {
  std::size_t line = 0;  // 0 when the problem is not tied to one line
  std::string message;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string source, std::vector<ConfigIssue> issues)
      : std::runtime_error(format(source, issues)), source_(std::move(source)), issues_(std::move(issues)) {}

  const std::vector<ConfigIssue>& issues() const { return issues_; }
  const std::string& source() const { return source_; }

 private:
  static std::string format(const std::string& source, const std::vector<ConfigIssue>& issues) {
    std::string out;
    for (const auto& i : issues) {
      out += source;
      if (i.line) out += ":" + std::to_string(i.line);
      out += ": " + i.message + "\n";
    }
    return out;
  }

  std::string source_;
  std::vector<ConfigIssue> issues_;
};

/// Either the literal "prior" (draw from the prior) or explicit coordinates.
struct InitSpec {
  bool from_prior = true;
  std::vector<double> theta;
};

struct ToySettings {
  std::size_t dim = 5;
};

struct IsingSettings {
  std::size_t rows = 10;
  std::size_t cols = 10;
  double coupling = 0.3;  // generating theta_J, also the reference point
  double field = 0.0;     // generating theta_h
  std::uint64_t data_seed = 1;
  std::size_t ais_k = 0;
  double coupling_max = 0.4;
  double field_max = 1.0;
};

struct GpSettings {
  std::filesystem::path data;  // empty: synthetic
  std::size_t n = 50;
  std::size_t d = 2;
  double variance = 2.0;
  double length_scale = 0.5;
  std::uint64_t data_seed = 1;
  std::size_t n_imp = 64;
  GpIsEstimator::Proposal proposal = GpIsEstimator::Proposal::Laplace;
  gp::GammaPrior variance_prior;
  gp::GammaPrior length_scale_prior;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::Toy;
  KernelSpec kernel;
  std::vector<KernelSpec> sweep_kernels;
  std::vector<double> sweep_sigmas;

  std::size_t n_iters = 0;
  std::size_t n_chains = 1;
  std::size_t thin = 1;
  std::size_t burn_in = 0;
  std::uint64_t seed = 0;
  InitSpec init;

  ProposalConfig proposal;
  std::optional<AdaptationConfig> adaptation;
  bool frozen_u_while_adapting = false;
  SliceConfig theta_slice{4.0, false};
  SliceMode theta_slice_mode = SliceMode::RandomDirection;
  SliceConfig u_slice{1.0, false};
  std::size_t elliptical_max_shrink = 100;

  ToySettings toy;
  IsingSettings ising;
  GpSettings gp;

  std::size_t acf_max_lag = 200;
  std::size_t hist_bins = 50;
  bool write_traces = true;

  KernelConfig kernel_config(const KernelSpec& spec) const {
    return KernelConfig{spec, proposal, theta_slice, theta_slice_mode, u_slice, elliptical_max_shrink};
  }

  RunOptions run_options() const {
    RunOptions o;
    o.n_iters = n_iters;
    o.thin = thin;
    o.burn_in = burn_in;
    o.adaptation = adaptation;
    o.frozen_u_while_adapting = frozen_u_while_adapting;
    return o;
  }

  std::size_t theta_dim() const {
    switch (experiment) {
      case Experiment::Toy:
      case Experiment::ToyStepsizeSweep: return toy.dim;
      case Experiment::Ising:
      case Experiment::Gp: return 2;
    }
    return 0;
  }

  std::vector<std::string> parameter_names() const {
    switch (experiment) {
      case Experiment::Ising: return {"theta_J", "theta_h"};
      case Experiment::Gp: return {"sigma", "tau"};
      default: break;
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < toy.dim; ++i) names.push_back("theta" + std::to_string(i + 1));
    return names;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  if (s.empty()) return std::nullopt;
  if constexpr (std::is_unsigned_v<T>) {
    if (s.front() == '-' || s.front() == '+') return std::nullopt;
  }
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  return v;
}

class Parser {
 public:
  explicit Parser(std::filesystem::path base_dir) : base_dir_(std::move(base_dir)) { install(); }

  ExperimentConfig parse(std::string_view text, const std::string& source) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        issue(line_no, "expected `key = value`");
        continue;
      }
      const std::string key(trim(line.substr(0, eq)));
      const std::string_view value = trim(line.substr(eq + 1));
      auto h = handlers_.find(key);
      if (h == handlers_.end()) {
        issue(line_no, "unknown key `" + key + "`");
        continue;
      }
      if (lines_.count(key)) {
        issue(line_no, "duplicate key `" + key + "` (first set on line " + std::to_string(lines_[key]) + ")");
        continue;
      }
      lines_[key] = line_no;
      if (value.empty()) {
        issue(line_no, "`" + key + "` has an empty value");
        continue;
      }
      current_line_ = line_no;
      h->second(value);
    }
    cross_check();
    if (!issues_.empty()) {
      std::stable_sort(issues_.begin(), issues_.end(),
                       [](const ConfigIssue& a, const ConfigIssue& b) { return a.line < b.line; });
      throw ConfigError(source, issues_);
    }
    return cfg_;
  }

 private:
  using Handler = std::function<void(std::string_view)>;

  void issue(std::size_t line, std::string msg) { issues_.push_back({line, std::move(msg)}); }
  void here(std::string msg) { issue(current_line_, std::move(msg)); }
  std::size_t line_of(const std::string& key) const {
    auto it = lines_.find(key);
    return it == lines_.end() ? 0 : it->second;
  }

  template <class T>
  Handler number(T& out, const char* what) {
    return [this, &out, what](std::string_view v) {
      if (auto x = parse_number<T>(v))
        out = *x;
      else
        here(std::string("expected ") + what + ", got `" + std::string(v) + "`");
    };
  }
  Handler count(std::size_t& out) { return number(out, "a non-negative integer"); }
  Handler real(double& out) { return number(out, "a finite number"); }
  Handler boolean(bool& out) {
    return [this, &out](std::string_view v) {
      if (v == "true")
        out = true;
      else if (v == "false")
        out = false;
      else
        here("expected true or false, got `" + std::string(v) + "`");
    };
  }
  Handler reals(std::vector<double>& out) {
    return [this, &out](std::string_view v) {
      out.clear();
      for (auto item : split_list(v)) {
        if (auto x = parse_number<double>(item)) {
          out.push_back(*x);
        } else {
          here("expected a comma separated list of numbers, got `" + std::string(item) + "`");
          return;
        }
      }
    };
  }
  Handler kernel(KernelSpec& out) {
    return [this, &out](std::string_view v) {
      if (auto k = KernelSpec::parse(v))
        out = *k;
      else
        here("kernel `" + std::string(v) + "` does not match " + std::string(KernelSpec::kGrammar));
    };
  }
  AdaptationConfig& adapt() {
    if (!cfg_.adaptation) cfg_.adaptation = AdaptationConfig{};
    return *cfg_.adaptation;
  }

  void install() {
    auto& c = cfg_;
    handlers_["experiment"] = [this](std::string_view v) {
      for (auto e : {Experiment::Toy, Experiment::ToyStepsizeSweep, Experiment::Ising, Experiment::Gp})
        if (v == to_string(e)) {
          cfg_.experiment = e;
          return;
        }
      here("experiment must be one of toy, toy-stepsize-sweep, ising, gp; got `" + std::string(v) + "`");
    };
    handlers_["kernel"] = kernel(c.kernel);
    handlers_["sweep.kernels"] = [this](std::string_view v) {
      cfg_.sweep_kernels.clear();
      for (auto item : split_list(v)) {
        if (auto k = KernelSpec::parse(item))
          cfg_.sweep_kernels.push_back(*k);
        else
          here("kernel `" + std::string(item) + "` does not match " + std::string(KernelSpec::kGrammar));
      }
    };
    handlers_["sweep.sigmas"] = reals(c.sweep_sigmas);
    handlers_["n_iters"] = count(c.n_iters);
    handlers_["n_chains"] = count(c.n_chains);
    handlers_["thin"] = count(c.thin);
    handlers_["burn_in"] = count(c.burn_in);
    handlers_["seed"] = number(c.seed, "a non-negative integer");
    handlers_["init"] = [this](std::string_view v) {
      if (v == "prior") {
        cfg_.init = InitSpec{};
        return;
      }
      cfg_.init.from_prior = false;
      reals(cfg_.init.theta)(v);
    };

    handlers_["proposal.sigma"] = reals(c.proposal.sigma);
    handlers_["proposal.per_coordinate"] = boolean(c.proposal.per_coordinate);
    handlers_["adapt.iters"] = [this](std::string_view v) { count(adapt().adapt_iters)(v); };
    handlers_["adapt.window"] = [this](std::string_view v) { count(adapt().window)(v); };
    handlers_["adapt.target_low"] = [this](std::string_view v) { real(adapt().target_low)(v); };
    handlers_["adapt.target_high"] = [this](std::string_view v) { real(adapt().target_high)(v); };
    handlers_["adapt.scale_up"] = [this](std::string_view v) { real(adapt().scale_up)(v); };
    handlers_["adapt.scale_down"] = [this](std::string_view v) { real(adapt().scale_down)(v); };
    handlers_["adapt.frozen_u"] = boolean(c.frozen_u_while_adapting);

    handlers_["theta_slice.w"] = real(c.theta_slice.w);
    handlers_["theta_slice.step_out"] = boolean(c.theta_slice.step_out);
    handlers_["theta_slice.max_shrink"] = count(c.theta_slice.max_shrink);
    handlers_["theta_slice.collapse_width"] = real(c.theta_slice.collapse_width);
    handlers_["theta_slice.mode"] = [this](std::string_view v) {
      if (v == "per-coordinate")
        cfg_.theta_slice_mode = SliceMode::PerCoordinate;
      else if (v == "random-direction")
        cfg_.theta_slice_mode = SliceMode::RandomDirection;
      else
        here("theta_slice.mode must be per-coordinate or random-direction");
    };
    handlers_["u_slice.w"] = real(c.u_slice.w);
    handlers_["u_slice.step_out"] = boolean(c.u_slice.step_out);
    handlers_["u_slice.max_shrink"] = count(c.u_slice.max_shrink);
    handlers_["elliptical.max_shrink"] = count(c.elliptical_max_shrink);

    handlers_["toy.dim"] = count(c.toy.dim);

    handlers_["ising.rows"] = count(c.ising.rows);
    handlers_["ising.cols"] = count(c.ising.cols);
    handlers_["ising.coupling"] = real(c.ising.coupling);
    handlers_["ising.field"] = real(c.ising.field);
    handlers_["ising.data_seed"] = number(c.ising.data_seed, "a non-negative integer");
    handlers_["ising.ais_k"] = count(c.ising.ais_k);
    handlers_["ising.coupling_max"] = real(c.ising.coupling_max);
    handlers_["ising.field_max"] = real(c.ising.field_max);

    handlers_["gp.data"] = [this](std::string_view v) {
      std::filesystem::path p{std::string(v)};
      cfg_.gp.data = p.is_absolute() ? p : base_dir_ / p;
    };
    handlers_["gp.n"] = count(c.gp.n);
    handlers_["gp.d"] = count(c.gp.d);
    handlers_["gp.variance"] = real(c.gp.variance);
    handlers_["gp.length_scale"] = real(c.gp.length_scale);
    handlers_["gp.data_seed"] = number(c.gp.data_seed, "a non-negative integer");
    handlers_["gp.n_imp"] = count(c.gp.n_imp);
    handlers_["gp.proposal"] = [this](std::string_view v) {
      if (v == "laplace")
        cfg_.gp.proposal = GpIsEstimator::Proposal::Laplace;
      else if (v == "prior")
        cfg_.gp.proposal = GpIsEstimator::Proposal::Prior;
      else
        here("gp.proposal must be laplace or prior");
    };
    handlers_["gp.variance_prior.shape"] = real(c.gp.variance_prior.shape);
    handlers_["gp.variance_prior.rate"] = real(c.gp.variance_prior.rate);
    handlers_["gp.length_scale_prior.shape"] = real(c.gp.length_scale_prior.shape);
    handlers_["gp.length_scale_prior.rate"] = real(c.gp.length_scale_prior.rate);

    handlers_["output.acf_max_lag"] = count(c.acf_max_lag);
    handlers_["output.hist_bins"] = count(c.hist_bins);
    handlers_["output.traces"] = boolean(c.write_traces);
  }

  // Checks that involve several keys or need the parsed values.
  void cross_check() {
    auto& c = cfg_;
    auto require = [&](const char* key) {
      if (!lines_.count(key)) issue(0, std::string("missing required key `") + key + "`");
    };
    auto positive = [&](const char* key, double v) {
      if (lines_.count(key) && !(v > 0.0)) issue(line_of(key), std::string("`") + key + "` must be positive");
    };
    require("experiment");
    require("n_iters");
    const bool sweep = c.experiment == Experiment::ToyStepsizeSweep;
    if (sweep) {
      require("sweep.kernels");
      require("sweep.sigmas");
      if (lines_.count("kernel")) issue(line_of("kernel"), "toy-stepsize-sweep takes sweep.kernels, not kernel");
      for (double s : c.sweep_sigmas)
        if (!(s > 0.0)) issue(line_of("sweep.sigmas"), "sweep.sigmas must all be positive");
    } else {
      require("kernel");
      for (const char* k : {"sweep.kernels", "sweep.sigmas"})
        if (lines_.count(k)) issue(line_of(k), std::string("`") + k + "` only applies to toy-stepsize-sweep");
    }

    if (lines_.count("n_iters") && c.n_iters < 1) issue(line_of("n_iters"), "n_iters must be >= 1");
    if (c.n_chains < 1) issue(line_of("n_chains"), "n_chains must be >= 1");
    if (c.thin < 1) issue(line_of("thin"), "thin must be >= 1");
    if (c.burn_in >= c.n_iters && c.n_iters >= 1)
      issue(line_of("burn_in"), "burn_in must be smaller than n_iters");

    const std::size_t dim = c.theta_dim();
    if (!c.init.from_prior && c.init.theta.size() != dim)
      issue(line_of("init"), "init needs " + std::to_string(dim) + " coordinates");
    if (c.proposal.sigma.size() != 1 && c.proposal.sigma.size() != dim)
      issue(line_of("proposal.sigma"), "proposal.sigma must be one value or " + std::to_string(dim));
    for (double s : c.proposal.sigma)
      if (!(s > 0.0)) issue(line_of("proposal.sigma"), "proposal.sigma must be positive");

    if (c.adaptation) {
      try {
        c.adaptation->validate();
      } catch (const ContractViolation& e) {
        issue(first_line({"adapt.target_low", "adapt.target_high", "adapt.scale_up", "adapt.scale_down", "adapt.window"}),
              e.what());
      }
      if (c.adaptation->adapt_iters > c.burn_in)
        issue(line_of("adapt.iters"), "adapt.iters must not exceed burn_in, so retained samples use a fixed kernel");
    }
    if (lines_.count("adapt.frozen_u") && c.frozen_u_while_adapting) {
      const bool pm = !sweep && c.kernel.family == KernelSpec::Family::PseudoMarginalMH;
      if (!pm) issue(line_of("adapt.frozen_u"), "adapt.frozen_u applies to pm-mh only");
    }
    check_slice(c.theta_slice, "theta_slice");
    check_slice(c.u_slice, "u_slice");
    if (c.elliptical_max_shrink < 1) issue(line_of("elliptical.max_shrink"), "elliptical.max_shrink must be >= 1");

    if ((c.experiment == Experiment::Toy || sweep) && c.toy.dim < 1) issue(line_of("toy.dim"), "toy.dim must be >= 1");
    if (c.experiment == Experiment::Ising) {
      if (c.ising.rows < 1 || c.ising.cols < 1)
        issue(first_line({"ising.rows", "ising.cols"}), "ising lattice needs positive rows and cols");
      positive("ising.coupling_max", c.ising.coupling_max);
      positive("ising.field_max", c.ising.field_max);
      if (!(c.ising.coupling > 0.0 && c.ising.coupling < c.ising.coupling_max))
        issue(line_of("ising.coupling"), "ising.coupling must lie inside (0, ising.coupling_max)");
      if (!(std::abs(c.ising.field) < c.ising.field_max))
        issue(line_of("ising.field"), "ising.field must satisfy |field| < ising.field_max");
    }
    if (c.experiment == Experiment::Gp) {
      if (c.gp.data.empty()) {
        if (c.gp.n < 1) issue(line_of("gp.n"), "gp.n must be >= 1");
        if (c.gp.d < 1) issue(line_of("gp.d"), "gp.d must be >= 1");
        positive("gp.variance", c.gp.variance);
        positive("gp.length_scale", c.gp.length_scale);
      } else if (!std::filesystem::exists(c.gp.data)) {
        issue(line_of("gp.data"), "gp.data file not found: " + c.gp.data.string());
      }
      if (c.gp.n_imp < 1) issue(line_of("gp.n_imp"), "gp.n_imp must be >= 1");
      positive("gp.variance_prior.shape", c.gp.variance_prior.shape);
      positive("gp.variance_prior.rate", c.gp.variance_prior.rate);
      positive("gp.length_scale_prior.shape", c.gp.length_scale_prior.shape);
      positive("gp.length_scale_prior.rate", c.gp.length_scale_prior.rate);
    }
    if (c.hist_bins < 1) issue(line_of("output.hist_bins"), "output.hist_bins must be >= 1");
  }

  void check_slice(const SliceConfig& s, const std::string& prefix) {
    if (!(s.w > 0.0)) issue(line_of(prefix + ".w"), prefix + ".w must be positive");
    if (s.max_shrink < 1) issue(line_of(prefix + ".max_shrink"), prefix + ".max_shrink must be >= 1");
    if (s.collapse_width < 0.0) issue(line_of(prefix + ".collapse_width"), prefix + ".collapse_width must be >= 0");
  }

  std::size_t first_line(std::initializer_list<const char*> keys) const {
    std::size_t best = 0;
    for (const char* k : keys)
      if (auto l = line_of(k); l && (!best || l < best)) best = l;
    return best;
  }

  std::filesystem::path base_dir_;
  ExperimentConfig cfg_;
  std::map<std::string, Handler> handlers_;
  std::map<std::string, std::size_t> lines_;
  std::vector<ConfigIssue> issues_;
  std::size_t current_line_ = 0;
};

}  // namespace detail

/// Parses config text; relative paths resolve against base_dir.
inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>",
                                     const std::filesystem::path& base_dir = ".") {
  return detail::Parser(base_dir).parse(text, source);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string(), {{0, "cannot read file"}});
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text_file(path), path.string(), path.parent_path());
}

}  // namespace apm::harness
