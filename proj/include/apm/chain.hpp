#pragma once

#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <utility>
#include <vector>

#include "apm/random_db.hpp"

namespace apm {

/// Unbiased estimator of an unnormalized density, returning log f_hat(theta; u).
template <class E>
concept LogEstimator = requires(const E& e, std::span<const double> theta, const RandomDb& db) {
  { e.base_space() } -> std::same_as<BaseSpace>;
  { e(theta, db) } -> std::convertible_to<double>;
};

/// Type-erased LogEstimator.
class AnyEstimator {
 public:
  using Fn = std::function<double(std::span<const double>, const RandomDb&)>;

  AnyEstimator(BaseSpace space, Fn fn) : space_(space), fn_(std::move(fn)) {}

  template <LogEstimator E>
    requires(!std::same_as<std::remove_cvref_t<E>, AnyEstimator>)
  explicit AnyEstimator(E est)
      : space_(est.base_space()),
        fn_([e = std::move(est)](std::span<const double> t, const RandomDb& db) { return e(t, db); }) {}

  BaseSpace base_space() const { return space_; }
  double operator()(std::span<const double> theta, const RandomDb& db) const { return fn_(theta, db); }

 private:
  BaseSpace space_;
  Fn fn_;
};

/// (theta, u, log f_hat(theta; u)). log_f_hat always matches a fresh
/// evaluation of the estimator at (theta, db).
struct ChainState {
  std::vector<double> theta;
  RandomDb db;
  double log_f_hat = -std::numeric_limits<double>::infinity();
};

inline bool identical(const ChainState& a, const ChainState& b) {
  return a.theta == b.theta && identical(a.db, b.db) &&
         std::bit_cast<std::uint64_t>(a.log_f_hat) == std::bit_cast<std::uint64_t>(b.log_f_hat);
}

/// Non-finite estimates count as log f_hat = -inf.
template <LogEstimator E>
double evaluate(const E& est, std::span<const double> theta, const RandomDb& db) {
  const double v = est(theta, db);
  return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
}

/// Gaussian random-walk proposal. A single sigma is broadcast over all
/// coordinates. With per_coordinate set, coordinates are updated one at a
/// time, each with its own accept/reject.
struct ProposalConfig {
  std::vector<double> sigma{1.0};
  bool per_coordinate = false;

  double sigma_at(std::size_t i) const { return sigma.size() == 1 ? sigma[0] : sigma.at(i); }

  void validate(std::size_t dim) const {
    if (sigma.empty() || (sigma.size() != 1 && sigma.size() != dim))
      throw ContractViolation("ProposalConfig: sigma must be a scalar or match theta's dimension");
    for (double s : sigma)
      if (!(s > 0.0) || !std::isfinite(s)) throw ContractViolation("ProposalConfig: sigma must be positive");
  }

  void scale(double factor) {
    for (double& s : sigma) s *= factor;
  }
};

struct AdaptationConfig {
  double target_low = 0.15;
  double target_high = 0.3;
  std::size_t adapt_iters = 0;
  std::size_t window = 100;
  double scale_up = 1.1;
  double scale_down = 0.9;

  void validate() const {
    if (!(0.0 < target_low && target_low < target_high && target_high < 1.0))
      throw ContractViolation("AdaptationConfig: need 0 < target_low < target_high < 1");
    if (!(scale_up > 1.0 && scale_down > 0.0 && scale_down < 1.0))
      throw ContractViolation("AdaptationConfig: need scale_up > 1 > scale_down > 0");
    if (window < 1) throw ContractViolation("AdaptationConfig: window must be >= 1");
  }
};

/// Bookkeeping returned by every transition.
struct StepInfo {
  std::size_t n_evals = 0;
  std::size_t u_proposals = 0;
  std::size_t u_accepts = 0;
  std::size_t theta_proposals = 0;
  std::size_t theta_accepts = 0;
  std::size_t collapses = 0;

  bool accepted_u() const { return u_accepts > 0; }
  bool accepted_theta() const { return theta_accepts > 0; }

  StepInfo& operator+=(const StepInfo& o) {
    n_evals += o.n_evals;
    u_proposals += o.u_proposals;
    u_accepts += o.u_accepts;
    theta_proposals += o.theta_proposals;
    theta_accepts += o.theta_accepts;
    collapses += o.collapses;
    return *this;
  }
};

struct TraceRecord {
  std::size_t iter = 0;
  std::vector<double> theta;
  double log_f_hat = 0.0;
  bool accepted_u = false;
  bool accepted_theta = false;
  std::size_t n_estimator_evals = 0;  // cumulative
};

}  // namespace apm
