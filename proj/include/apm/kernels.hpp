#pragma once

// Transition kernels on the joint state (theta, u):
//   pm_mh_step        pseudo-marginal MH: new theta and new u, accepted together
//   mi_u_step         independence proposal for u at fixed theta
//   mh_theta_step     Gaussian MH on theta with u clamped
//   ss_theta_step     slice sampling on theta with u clamped
//   slice_u_step      reflective (uniform u) or elliptical (Gaussian u) slice on u
//   noisy_slice_step  slice sampling on theta with a fresh u per evaluation
// plus the compound Kernel selected by name and the chain runner.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "apm/chain.hpp"
#include "apm/random_db.hpp"
#include "apm/rng.hpp"
#include "apm/slice.hpp"

namespace apm {

enum class SliceMode { PerCoordinate, RandomDirection };

namespace detail {

/// MH accept test in log space; equality accepts.
inline bool mh_accept(double log_ratio, KernelRng& rng) {
  if (std::isnan(log_ratio)) return false;
  return std::log(rng.uniform()) <= log_ratio;
}

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace detail

/// Resample u until the estimate at theta is finite. The starting state of
/// every chain comes through here.
template <LogEstimator E>
ChainState initialize_state(const E& est, std::vector<double> theta, RandomDb db, std::size_t max_retries = 1000) {
  for (std::size_t attempt = 0; attempt <= max_retries; ++attempt) {
    const double lf = evaluate(est, theta, db);
    if (lf > detail::kNegInf) return ChainState{std::move(theta), std::move(db), lf};
    db = resample(db);
  }
  throw std::runtime_error("initialize_state: no finite estimate after " + std::to_string(max_retries) +
                           " resamples");
}

template <LogEstimator E>
StepInfo pm_mh_step(ChainState& state, const E& est, const ProposalConfig& prop, KernelRng& rng) {
  prop.validate(state.theta.size());
  StepInfo info;
  auto propose_and_test = [&](std::vector<double> theta_new) {
    RandomDb db_new = resample(state.db);
    const double lf_new = evaluate(est, theta_new, db_new);
    ++info.n_evals;
    ++info.theta_proposals;
    ++info.u_proposals;
    if (lf_new > detail::kNegInf && detail::mh_accept(lf_new - state.log_f_hat, rng)) {
      state = ChainState{std::move(theta_new), std::move(db_new), lf_new};
      ++info.theta_accepts;
      ++info.u_accepts;
    }
  };
  if (prop.per_coordinate) {
    for (std::size_t i = 0; i < state.theta.size(); ++i) {
      auto theta_new = state.theta;
      theta_new[i] += prop.sigma_at(i) * rng.normal();
      propose_and_test(std::move(theta_new));
    }
  } else {
    auto theta_new = state.theta;
    for (std::size_t i = 0; i < theta_new.size(); ++i) theta_new[i] += prop.sigma_at(i) * rng.normal();
    propose_and_test(std::move(theta_new));
  }
  return info;
}

template <LogEstimator E>
StepInfo mi_u_step(ChainState& state, const E& est, KernelRng& rng) {
  StepInfo info{1, 1};
  RandomDb db_new = resample(state.db);
  const double lf_new = evaluate(est, state.theta, db_new);
  if (lf_new > detail::kNegInf && detail::mh_accept(lf_new - state.log_f_hat, rng)) {
    state.db = std::move(db_new);
    state.log_f_hat = lf_new;
    info.u_accepts = 1;
  }
  return info;
}

template <LogEstimator E>
StepInfo mh_theta_step(ChainState& state, const E& est, const ProposalConfig& prop, KernelRng& rng) {
  prop.validate(state.theta.size());
  StepInfo info;
  auto test = [&](std::vector<double>& theta_new) {
    const double lf_new = evaluate(est, theta_new, state.db);
    ++info.n_evals;
    ++info.theta_proposals;
    if (lf_new > detail::kNegInf && detail::mh_accept(lf_new - state.log_f_hat, rng)) {
      state.theta = std::move(theta_new);
      state.log_f_hat = lf_new;
      ++info.theta_accepts;
    }
  };
  if (prop.per_coordinate) {
    for (std::size_t i = 0; i < state.theta.size(); ++i) {
      auto theta_new = state.theta;
      theta_new[i] += prop.sigma_at(i) * rng.normal();
      test(theta_new);
    }
  } else {
    auto theta_new = state.theta;
    for (std::size_t i = 0; i < theta_new.size(); ++i) theta_new[i] += prop.sigma_at(i) * rng.normal();
    test(theta_new);
  }
  return info;
}

namespace detail {

// Slice theta along one line theta + t * direction; log_f_at(theta) supplies
// the target and returns (log f, payload) so noisy slicing can keep the db
// that produced each value.
template <class EvalLine>
void slice_theta_line(ChainState& state, std::span<const double> direction, const SliceConfig& cfg,
                      KernelRng& rng, StepInfo& info, EvalLine&& eval_line) {
  std::vector<double> theta_t(state.theta.size());
  std::optional<RandomDb> last_db;
  auto log_f = [&](double t) {
    for (std::size_t i = 0; i < theta_t.size(); ++i) theta_t[i] = state.theta[i] + t * direction[i];
    return eval_line(std::span<const double>(theta_t), last_db);
  };
  auto out = slice_linear(log_f, 0.0, state.log_f_hat, cfg, rng);
  info.n_evals += out.n_evals;
  ++info.theta_proposals;
  if (out.collapsed) {
    ++info.collapses;
    return;
  }
  for (std::size_t i = 0; i < state.theta.size(); ++i) state.theta[i] += out.new_point * direction[i];
  state.log_f_hat = out.log_f;
  if (last_db) state.db = std::move(*last_db);
  if (out.moved) ++info.theta_accepts;
}

template <class EvalLine>
StepInfo slice_theta(ChainState& state, const SliceConfig& cfg, SliceMode mode, KernelRng& rng,
                     EvalLine&& eval_line) {
  StepInfo info;
  const std::size_t dim = state.theta.size();
  std::vector<double> direction(dim, 0.0);
  if (mode == SliceMode::PerCoordinate) {
    for (std::size_t i = 0; i < dim; ++i) {
      std::fill(direction.begin(), direction.end(), 0.0);
      direction[i] = 1.0;
      slice_theta_line(state, direction, cfg, rng, info, eval_line);
    }
  } else {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (double& d : direction) {
        d = rng.normal();
        norm2 += d * d;
      }
    } while (norm2 == 0.0);
    const double norm = std::sqrt(norm2);
    for (double& d : direction) d /= norm;
    slice_theta_line(state, direction, cfg, rng, info, eval_line);
  }
  return info;
}

}  // namespace detail

/// Slice sampling on theta with u clamped: per coordinate in turn, or along
/// one normalized random direction.
template <LogEstimator E>
StepInfo ss_theta_step(ChainState& state, const E& est, const SliceConfig& cfg, SliceMode mode, KernelRng& rng) {
  return detail::slice_theta(state, cfg, mode, rng, [&](std::span<const double> theta, std::optional<RandomDb>&) {
    return evaluate(est, theta, state.db);
  });
}

/// Slice sampling on theta where every evaluation draws a fresh u. The height
/// comes from the cached estimate. Collapse keeps the original (theta, u, f_hat).
template <LogEstimator E>
StepInfo noisy_slice_step(ChainState& state, const E& est, const SliceConfig& cfg, SliceMode mode,
                          KernelRng& rng) {
  return detail::slice_theta(state, cfg, mode, rng,
                             [&](std::span<const double> theta, std::optional<RandomDb>& last_db) {
                               last_db = resample(state.db);
                               return evaluate(est, theta, *last_db);
                             });
}

/// Slice update of u at fixed theta: reflective for UnitUniform estimators,
/// elliptical for StandardNormal ones.
template <LogEstimator E>
StepInfo slice_u_step(ChainState& state, const E& est, const SliceConfig& reflective_cfg,
                      std::size_t elliptical_max_shrink, KernelRng& rng) {
  if (state.db.space() != est.base_space())
    throw ContractViolation("slice_u_step: db space does not match the estimator's base space");
  auto log_f = [&](const RandomDb& db) { return evaluate(est, state.theta, db); };
  auto out = est.base_space() == BaseSpace::UnitUniform
                 ? slice_reflective_db(log_f, state.db, state.log_f_hat, reflective_cfg, rng)
                 : slice_elliptical_db(log_f, state.db, state.log_f_hat, elliptical_max_shrink, rng);
  StepInfo info;
  info.n_evals = out.n_evals;
  info.u_proposals = 1;
  if (out.collapsed) {
    info.collapses = 1;
    return info;
  }
  state.db = std::move(out.new_point);
  state.log_f_hat = out.log_f;
  info.u_accepts = out.moved ? 1 : 0;
  return info;
}

/// New sigma after one adaptation window.
inline ProposalConfig adapt_step_size(double window_acceptance, const ProposalConfig& prop,
                                      const AdaptationConfig& cfg) {
  ProposalConfig out = prop;
  if (window_acceptance < cfg.target_low)
    out.scale(cfg.scale_down);
  else if (window_acceptance > cfg.target_high)
    out.scale(cfg.scale_up);
  return out;
}

enum class UUpdate { MI, SS };
enum class ThetaUpdate { MH, SS };

/// Kernel names: "pm-mh", "noisy-ss", "apm-(mi|ss)+(mh|ss)"; the u update
/// is named first.
struct KernelSpec {
  enum class Family { PseudoMarginalMH, NoisySlice, Auxiliary };
  Family family = Family::PseudoMarginalMH;
  UUpdate u = UUpdate::MI;
  ThetaUpdate theta = ThetaUpdate::MH;

  static constexpr std::string_view kGrammar = "pm-mh | noisy-ss | apm-(mi|ss)+(mh|ss)";

  static std::optional<KernelSpec> parse(std::string_view name) {
    if (name == "pm-mh") return KernelSpec{Family::PseudoMarginalMH};
    if (name == "noisy-ss") return KernelSpec{Family::NoisySlice};
    if (name.size() != 9 || name.substr(0, 4) != "apm-" || name[6] != '+') return std::nullopt;
    const auto u = name.substr(4, 2);
    const auto t = name.substr(7, 2);
    KernelSpec k{Family::Auxiliary};
    if (u == "mi")
      k.u = UUpdate::MI;
    else if (u == "ss")
      k.u = UUpdate::SS;
    else
      return std::nullopt;
    if (t == "mh")
      k.theta = ThetaUpdate::MH;
    else if (t == "ss")
      k.theta = ThetaUpdate::SS;
    else
      return std::nullopt;
    return k;
  }

  std::string name() const {
    switch (family) {
      case Family::PseudoMarginalMH: return "pm-mh";
      case Family::NoisySlice: return "noisy-ss";
      case Family::Auxiliary: break;
    }
    return std::string("apm-") + (u == UUpdate::MI ? "mi" : "ss") + "+" + (theta == ThetaUpdate::MH ? "mh" : "ss");
  }

  bool uses_mh_theta() const {
    return family == Family::PseudoMarginalMH || (family == Family::Auxiliary && theta == ThetaUpdate::MH);
  }
};

struct KernelConfig {
  KernelSpec spec;
  ProposalConfig proposal;
  SliceConfig theta_slice{4.0, false};
  SliceMode theta_slice_mode = SliceMode::RandomDirection;
  SliceConfig u_slice{1.0, false};
  std::size_t elliptical_max_shrink = 100;
};

/// Compound transition selected by KernelSpec.
template <LogEstimator E>
class Kernel {
 public:
  Kernel(const E& est, KernelConfig cfg) : est_(&est), cfg_(std::move(cfg)) {}

  StepInfo operator()(ChainState& state, KernelRng& rng) const {
    switch (cfg_.spec.family) {
      case KernelSpec::Family::PseudoMarginalMH:
        if (frozen_u_) return mh_theta_step(state, *est_, cfg_.proposal, rng);
        return pm_mh_step(state, *est_, cfg_.proposal, rng);
      case KernelSpec::Family::NoisySlice:
        return noisy_slice_step(state, *est_, cfg_.theta_slice, cfg_.theta_slice_mode, rng);
      case KernelSpec::Family::Auxiliary: return apm(state, rng);
    }
    return {};
  }

  const KernelConfig& config() const { return cfg_; }
  ProposalConfig& proposal() { return cfg_.proposal; }

  /// With u frozen, PM-MH runs MH on the deterministic f_hat(theta; u0). This
  /// is the biased surrogate used only while adapting PM-MH step sizes.
  void set_frozen_u(bool on) { frozen_u_ = on; }

 private:
  StepInfo apm(ChainState& state, KernelRng& rng) const {
    StepInfo info = cfg_.spec.u == UUpdate::MI
                        ? mi_u_step(state, *est_, rng)
                        : slice_u_step(state, *est_, cfg_.u_slice, cfg_.elliptical_max_shrink, rng);
    info += cfg_.spec.theta == ThetaUpdate::MH
                ? mh_theta_step(state, *est_, cfg_.proposal, rng)
                : ss_theta_step(state, *est_, cfg_.theta_slice, cfg_.theta_slice_mode, rng);
    return info;
  }

  const E* est_;
  KernelConfig cfg_;
  bool frozen_u_ = false;
};

/// One APM update: u given theta, then theta given u.
template <LogEstimator E>
StepInfo apm_step(ChainState& state, const E& est, UUpdate u, ThetaUpdate theta, const KernelConfig& cfg,
                  KernelRng& rng) {
  KernelConfig c = cfg;
  c.spec = KernelSpec{KernelSpec::Family::Auxiliary, u, theta};
  return Kernel<E>(est, std::move(c))(state, rng);
}

struct RunOptions {
  std::size_t n_iters = 1;
  std::size_t thin = 1;
  std::size_t burn_in = 0;
  /// Adapt the MH step size during the first adaptation.adapt_iters iterations.
  std::optional<AdaptationConfig> adaptation;
  /// PM-MH only: use the frozen-u surrogate while adapting.
  bool frozen_u_while_adapting = false;
};

struct RunSummary {
  std::size_t iterations = 0;
  std::size_t total_evals = 0;
  StepInfo post_burn_in;
  ProposalConfig final_proposal;

  double theta_acceptance() const {
    return post_burn_in.theta_proposals ? double(post_burn_in.theta_accepts) / post_burn_in.theta_proposals : 0.0;
  }
  double u_acceptance() const {
    return post_burn_in.u_proposals ? double(post_burn_in.u_accepts) / post_burn_in.u_proposals : 0.0;
  }
};

/// Iterate kernel from state, passing every thin-th post-burn-in state to
/// record. Records reach the recorder as they are produced, so a throwing
/// kernel leaves a partial trace behind.
template <class K, class Recorder>
RunSummary run_chain(K& kernel, ChainState& state, const RunOptions& opts, KernelRng& rng, Recorder&& record) {
  if (opts.n_iters < 1) throw ContractViolation("run_chain: n_iters must be >= 1");
  if (opts.thin < 1) throw ContractViolation("run_chain: thin must be >= 1");
  if (opts.burn_in > opts.n_iters) throw ContractViolation("run_chain: burn_in exceeds n_iters");

  constexpr bool adaptable = requires(K& k) { k.proposal(); };
  constexpr bool freezable = requires(K& k) { k.set_frozen_u(true); };

  RunSummary summary;
  std::size_t window_props = 0, window_accepts = 0;
  const std::size_t adapt_until = opts.adaptation ? opts.adaptation->adapt_iters : 0;
  if (opts.adaptation) opts.adaptation->validate();
  if constexpr (freezable) kernel.set_frozen_u(opts.frozen_u_while_adapting && adapt_until > 0);

  for (std::size_t it = 0; it < opts.n_iters; ++it) {
    if constexpr (freezable) {
      if (it == adapt_until && opts.frozen_u_while_adapting) kernel.set_frozen_u(false);
    }
    const StepInfo info = kernel(state, rng);
    summary.total_evals += info.n_evals;
    ++summary.iterations;

    if constexpr (adaptable) {
      if (it < adapt_until) {
        window_props += info.theta_proposals;
        window_accepts += info.theta_accepts;
        if ((it + 1) % opts.adaptation->window == 0 && window_props > 0) {
          kernel.proposal() =
              adapt_step_size(double(window_accepts) / window_props, kernel.proposal(), *opts.adaptation);
          window_props = window_accepts = 0;
        }
      }
    }

    if (it >= opts.burn_in) {
      summary.post_burn_in += info;
      const std::size_t k = it - opts.burn_in;
      if ((k + 1) % opts.thin == 0)
        record(TraceRecord{it, state.theta, state.log_f_hat, info.accepted_u(), info.accepted_theta(),
                           summary.total_evals});
    }
  }
  if constexpr (adaptable) summary.final_proposal = kernel.proposal();
  return summary;
}

template <class K>
std::vector<TraceRecord> run_chain(K& kernel, ChainState& state, const RunOptions& opts, KernelRng& rng) {
  std::vector<TraceRecord> trace;
  trace.reserve((opts.n_iters - std::min(opts.burn_in, opts.n_iters)) / std::max<std::size_t>(opts.thin, 1));
  run_chain(kernel, state, opts, rng, [&](const TraceRecord& r) { trace.push_back(r); });
  return trace;
}

}  // namespace apm
