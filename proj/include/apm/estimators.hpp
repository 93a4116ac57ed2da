#pragma once

// Unbiased estimators of unnormalized densities, each a deterministic
// function of (theta, RandomDb) returning log f_hat.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "apm/chain.hpp"
#include "apm/models/gp_probit.hpp"
#include "apm/models/ising.hpp"
#include "apm/random_db.hpp"

namespace apm {

namespace detail {
inline constexpr double kLog2Pi = 1.83787706640934548356;
inline constexpr double kNegInfinity = -std::numeric_limits<double>::infinity();

inline double log_sum_exp(std::span<const double> v) {
  double m = kNegInfinity;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}
}  // namespace detail

/// Gaussian N(theta; 0, I) treated as doubly intractable: g(x; theta) =
/// N(x; theta, I), y = 0, flat prior, reference theta_hat = 0, and x = u + theta
/// from standard-normal u (keys 0..dim-1).
class ToyGaussianEstimator {
 public:
  explicit ToyGaussianEstimator(std::size_t dim = 5) : dim_(dim) {}

  BaseSpace base_space() const { return BaseSpace::StandardNormal; }
  std::size_t dim() const { return dim_; }

  double operator()(std::span<const double> theta, const RandomDb& db) const {
    if (theta.size() != dim_) throw ContractViolation("ToyGaussianEstimator: theta has the wrong dimension");
    double log_lik = 0.0, log_ref = 0.0, log_g = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double x = db.get({i}) + theta[i];
      log_lik += -0.5 * theta[i] * theta[i];            // log N(0; theta, I)
      log_ref += -0.5 * x * x;                          // log N(x; 0, I)
      log_g += -0.5 * (x - theta[i]) * (x - theta[i]);  // log N(x; theta, I)
    }
    return -0.5 * dim_ * detail::kLog2Pi + log_lik + (log_ref - log_g);
  }

  /// Exact target density N(theta; 0, I), in log space.
  double log_target(std::span<const double> theta) const {
    double s = 0.0;
    for (double t : theta) s += t * t;
    return -0.5 * dim_ * detail::kLog2Pi - 0.5 * s;
  }

 private:
  std::size_t dim_;
};

/// Ising parameter posterior as a doubly-intractable model. theta = (J, h).
/// Exact samples come from CFTP on key block 1; annealing sweeps use block 0.
class IsingPosterior {
 public:
  using Sample = ising::Config;

  IsingPosterior(ising::Spec spec, ising::Params theta_hat) : spec_(std::move(spec)), theta_hat_(theta_hat) {
    if (spec_.data.size() != spec_.lattice.size())
      throw ContractViolation("IsingPosterior: data does not match lattice");
    data_stats_ = ising::sufficient_stats(spec_.lattice, spec_.data);
  }

  static ising::Params params(std::span<const double> theta) {
    if (theta.size() != 2) throw ContractViolation("IsingPosterior: theta must be (coupling, field)");
    return {theta[0], theta[1]};
  }

  BaseSpace base_space() const { return BaseSpace::UnitUniform; }
  const ising::Spec& spec() const { return spec_; }
  const ising::Params& theta_hat() const { return theta_hat_; }
  ising::CftpOptions& cftp_options() { return cftp_; }

  double log_g_data(const ising::Params& p) const { return ising::log_g(data_stats_, p); }
  double log_g(const Sample& x, const ising::Params& p) const { return ising::log_g(spec_.lattice, p, x); }
  double log_prior(const ising::Params& p) const { return spec_.log_prior(p); }

  Sample exact_sample(const ising::Params& p, const RandomDb& db) const {
    return ising::cftp_exact_sample(spec_.lattice, p, db, cftp_);
  }

  /// One heat-bath sweep at params p using variates (0, step, s).
  void anneal_sweep(Sample& x, const ising::Params& p, const RandomDb& db, std::size_t step) const {
    const ising::HeatBathTable table(p);
    std::vector<double> u(x.size());
    db.get_row({0, step}, u.size(), u.data());
    ising::gibbs_sweep(spec_.lattice, table, x, [&](std::size_t s) { return u[s]; });
  }

  static ising::Params interpolate(const ising::Params& from, const ising::Params& to, double beta) {
    return {(1.0 - beta) * from.coupling + beta * to.coupling, (1.0 - beta) * from.field + beta * to.field};
  }

 private:
  ising::Spec spec_;
  ising::Params theta_hat_;
  ising::SufficientStats data_stats_;
  ising::CftpOptions cftp_;
};

/// f_hat = g(y; theta) p(theta) g(x; theta_hat) / g(x; theta), x ~ p(. | theta).
class DiIsEstimator {
 public:
  explicit DiIsEstimator(const IsingPosterior& model) : model_(&model) {}

  BaseSpace base_space() const { return model_->base_space(); }

  double operator()(std::span<const double> theta, const RandomDb& db) const {
    const auto p = IsingPosterior::params(theta);
    const double lp = model_->log_prior(p);
    if (!std::isfinite(lp)) return detail::kNegInfinity;
    const auto x = model_->exact_sample(p, db);
    return model_->log_g_data(p) + lp + log_ratio(x, p);
  }

  /// log g(x; theta_hat) - log g(x; theta), an unbiased estimate of
  /// log Z(theta_hat) / Z(theta) on the natural scale.
  double log_ratio(const IsingPosterior::Sample& x, const ising::Params& p) const {
    return model_->log_g(x, model_->theta_hat()) - model_->log_g(x, p);
  }

 private:
  const IsingPosterior* model_;
};

struct AisConfig {
  std::size_t steps = 0;  // K
  /// Interpolation exponents beta_1 < ... < beta_K in (0, 1); empty means k / (K + 1).
  std::vector<double> schedule;

  std::vector<double> betas() const {
    if (!schedule.empty()) {
      if (schedule.size() != steps) throw ContractViolation("AisConfig: schedule length must equal steps");
      for (std::size_t k = 0; k < steps; ++k)
        if (!(schedule[k] > 0.0 && schedule[k] < 1.0) || (k > 0 && !(schedule[k] > schedule[k - 1])))
          throw ContractViolation("AisConfig: schedule must increase strictly inside (0, 1)");
      return schedule;
    }
    std::vector<double> b(steps);
    for (std::size_t k = 0; k < steps; ++k) b[k] = double(k + 1) / double(steps + 1);
    return b;
  }
};

/// Annealed version of DiIsEstimator. Starting from an exact sample at theta,
/// K heat-bath sweeps move through g(.; theta)^(1-beta) g(.; theta_hat)^beta;
/// the accumulated weight is unbiased for Z(theta_hat) / Z(theta), and K = 0
/// reproduces DiIsEstimator bit for bit.
class AisEstimator {
 public:
  AisEstimator(const IsingPosterior& model, AisConfig cfg) : model_(&model), betas_(cfg.betas()) {}

  BaseSpace base_space() const { return model_->base_space(); }
  std::size_t steps() const { return betas_.size(); }

  double operator()(std::span<const double> theta, const RandomDb& db) const {
    const auto p = IsingPosterior::params(theta);
    const double lp = model_->log_prior(p);
    if (!std::isfinite(lp)) return detail::kNegInfinity;
    return model_->log_g_data(p) + lp + log_weight(p, db);
  }

  double log_weight(const ising::Params& p, const RandomDb& db) const {
    auto x = model_->exact_sample(p, db);
    const auto& ref = model_->theta_hat();
    double logw = 0.0;
    double prev = 0.0;
    for (std::size_t k = 0; k < betas_.size(); ++k) {
      logw += (betas_[k] - prev) * (model_->log_g(x, ref) - model_->log_g(x, p));
      model_->anneal_sweep(x, IsingPosterior::interpolate(p, ref, betas_[k]), db, k + 1);
      prev = betas_[k];
    }
    logw += (1.0 - prev) * (model_->log_g(x, ref) - model_->log_g(x, p));
    return logw;
  }

 private:
  const IsingPosterior* model_;
  std::vector<double> betas_;
};

/// Importance-sampling estimate of p(y | theta, X) p(theta) for GP probit
/// classification, theta = (variance, length_scale). Block i of n standard
/// normals (keys {i, j}) is mapped to a draw from the proposal.
///
/// Holds a small per-theta cache of factorizations, so one instance must not
/// be shared between concurrently running chains.
class GpIsEstimator {
 public:
  enum class Proposal { Laplace, Prior };

  GpIsEstimator(const gp::ProbitModel& model, std::size_t n_imp = 64, Proposal proposal = Proposal::Laplace)
      : model_(&model), n_imp_(n_imp), proposal_(proposal) {
    if (n_imp < 1) throw ContractViolation("GpIsEstimator: n_imp must be >= 1");
  }

  BaseSpace base_space() const { return BaseSpace::StandardNormal; }
  std::size_t n_imp() const { return n_imp_; }
  /// Number of O(n^3) factorization passes so far (cache misses).
  std::size_t factorizations() const { return factorizations_; }

  double operator()(std::span<const double> theta, const RandomDb& db) const {
    if (theta.size() != 2) throw ContractViolation("GpIsEstimator: theta must be (variance, length_scale)");
    const gp::Theta t{theta[0], theta[1]};
    if (!(t.variance > 0.0) || !(t.length_scale > 0.0)) return detail::kNegInfinity;
    const double lp = model_->log_prior(t);
    if (!std::isfinite(lp)) return detail::kNegInfinity;
    const Factors& fac = factors(t);

    const Eigen::Index n = static_cast<Eigen::Index>(model_->size());
    const auto& y = model_->data.targets;
    Eigen::VectorXd z(n), f(n), alpha(n);
    std::vector<double> terms(n_imp_);
    for (std::size_t i = 0; i < n_imp_; ++i) {
      db.get_row({i}, static_cast<std::size_t>(n), z.data());
      f.noalias() = fac.proposal_l.triangularView<Eigen::Lower>() * z;
      f += fac.proposal_mean;
      const double log_q = -0.5 * z.squaredNorm() - fac.proposal_half_logdet - 0.5 * n * detail::kLog2Pi;
      double log_prior_f = log_q;
      if (proposal_ == Proposal::Laplace) {
        alpha = fac.prior_l.triangularView<Eigen::Lower>().solve(f);
        log_prior_f = -0.5 * alpha.squaredNorm() - fac.prior_half_logdet - 0.5 * n * detail::kLog2Pi;
      }
      terms[i] = gp::log_likelihood(y, f) + log_prior_f - log_q;
    }
    return detail::log_sum_exp(terms) - std::log(double(n_imp_)) + lp;
  }

 private:
  struct Factors {
    gp::Theta theta;
    Eigen::MatrixXd prior_l;  // chol K
    double prior_half_logdet = 0.0;
    Eigen::VectorXd proposal_mean;
    Eigen::MatrixXd proposal_l;
    double proposal_half_logdet = 0.0;
  };

  static double half_logdet(const Eigen::MatrixXd& l) { return l.diagonal().array().log().sum(); }

  const Factors& factors(const gp::Theta& t) const {
    for (std::size_t i = 0; i < cache_.size(); ++i) {
      const auto& c = cache_[i];
      if (c && c->theta.variance == t.variance && c->theta.length_scale == t.length_scale) {
        mru_ = i;
        return *c;
      }
    }
    ++factorizations_;
    Factors fac{t};
    const Eigen::MatrixXd K = gp::covariance(*model_, t);
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) throw gp::FactorizationError("GpIsEstimator: covariance not PD", t);
    fac.prior_l = llt.matrixL();
    fac.prior_half_logdet = half_logdet(fac.prior_l);
    if (proposal_ == Proposal::Prior) {
      fac.proposal_mean = Eigen::VectorXd::Zero(K.rows());
      fac.proposal_l = fac.prior_l;
      fac.proposal_half_logdet = fac.prior_half_logdet;
    } else {
      auto approx = gp::laplace_approx(model_->data.targets, K, t);
      fac.proposal_mean = std::move(approx.mode);
      Eigen::LLT<Eigen::MatrixXd> s_llt(approx.cov);
      if (s_llt.info() != Eigen::Success) {
        approx.cov.diagonal().array() += model_->jitter_factor * t.variance;
        s_llt.compute(approx.cov);
        if (s_llt.info() != Eigen::Success)
          throw gp::FactorizationError("GpIsEstimator: Laplace covariance not PD", t);
      }
      fac.proposal_l = s_llt.matrixL();
      fac.proposal_half_logdet = half_logdet(fac.proposal_l);
    }
    // Two slots, least recently used evicted: the current theta survives a
    // rejected proposal.
    mru_ ^= 1;
    cache_[mru_] = std::move(fac);
    return *cache_[mru_];
  }

  const gp::ProbitModel* model_;
  std::size_t n_imp_;
  Proposal proposal_;
  mutable std::array<std::optional<Factors>, 2> cache_;
  mutable std::size_t mru_ = 0;
  mutable std::size_t factorizations_ = 0;
};

}  // namespace apm
