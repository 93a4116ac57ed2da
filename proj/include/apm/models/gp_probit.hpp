#pragma once

// Gaussian-process probit classification: squared-exponential covariance,
// Gamma priors on (variance, length-scale), Laplace approximation of the
// latent posterior, synthetic data and CSV ingestion.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "apm/random_db.hpp"
#include "apm/rng.hpp"

namespace apm::gp {

struct Theta {
  double variance = 1.0;      // sigma
  double length_scale = 1.0;  // tau
};

class FactorizationError : public std::runtime_error {
 public:
  FactorizationError(const std::string& what, const Theta& t)
      : std::runtime_error(what + " at variance=" + std::to_string(t.variance) +
                           " length_scale=" + std::to_string(t.length_scale)),
        theta(t) {}
  Theta theta;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GammaPrior {
  double shape = 1.0;
  double rate = 0.1;

  double log_pdf(double x) const {
    if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
    return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
  }
};

struct Dataset {
  Eigen::MatrixXd inputs;   // n x d
  Eigen::VectorXd targets;  // +-1
};

struct ProbitModel {
  Dataset data;
  GammaPrior variance_prior;
  GammaPrior length_scale_prior;
  double jitter_factor = 1e-8;  // jitter = jitter_factor * variance

  std::size_t size() const { return static_cast<std::size_t>(data.targets.size()); }

  double log_prior(const Theta& t) const {
    return variance_prior.log_pdf(t.variance) + length_scale_prior.log_pdf(t.length_scale);
  }
};

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))

/// log Phi(x), accurate far into the lower tail.
inline double log_normal_cdf(double x) {
  if (x > -20.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  // Asymptotic series of the Mills ratio.
  const double x2 = x * x;
  return -0.5 * x2 - std::log(-x) - kLogSqrt2Pi + std::log1p(-1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2));
}

/// phi(x) / Phi(x).
inline double inverse_mills(double x) {
  return std::exp(-0.5 * x * x - kLogSqrt2Pi - log_normal_cdf(x));
}

/// K_ab = variance * exp(-|x_a - x_b|^2 / (2 length_scale^2)) + jitter [a == b].
inline Eigen::MatrixXd covariance(const ProbitModel& model, const Theta& t) {
  const auto& X = model.data.inputs;
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd K(n, n);
  const double inv2l2 = 1.0 / (2.0 * t.length_scale * t.length_scale);
  for (Eigen::Index a = 0; a < n; ++a) {
    K(a, a) = t.variance + model.jitter_factor * t.variance;
    for (Eigen::Index b = a + 1; b < n; ++b) {
      const double d2 = (X.row(a) - X.row(b)).squaredNorm();
      K(a, b) = K(b, a) = t.variance * std::exp(-d2 * inv2l2);
    }
  }
  return K;
}

inline double log_likelihood(const Eigen::VectorXd& y, const Eigen::VectorXd& f) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.size(); ++i) s += log_normal_cdf(y[i] * f[i]);
  return s;
}

/// Laplace objective log p(y|f) - f^T K^{-1} f / 2 and its gradient, for
/// checking the Newton iteration.
inline double laplace_objective(const Eigen::VectorXd& y, const Eigen::LLT<Eigen::MatrixXd>& chol_k,
                                const Eigen::VectorXd& f) {
  return log_likelihood(y, f) - 0.5 * f.dot(chol_k.solve(f));
}

inline Eigen::VectorXd laplace_gradient(const Eigen::VectorXd& y, const Eigen::LLT<Eigen::MatrixXd>& chol_k,
                                        const Eigen::VectorXd& f) {
  Eigen::VectorXd g(f.size());
  for (Eigen::Index i = 0; i < f.size(); ++i) g[i] = y[i] * inverse_mills(y[i] * f[i]);
  return g - chol_k.solve(f);
}

struct LaplaceOptions {
  std::size_t max_iters = 100;
  double tolerance = 1e-10;
  std::size_t max_halvings = 30;
};

/// Gaussian approximation N(mode, cov) to p(f | y, theta).
struct LaplaceApprox {
  Eigen::VectorXd mode;
  Eigen::MatrixXd cov;
  double objective = 0.0;
  std::size_t iterations = 0;
  std::vector<double> objective_trace;  // objective after each Newton step
};

/// Newton iterations with step halving; S = (K^{-1} + W)^{-1} at the mode.
inline LaplaceApprox laplace_approx(const Eigen::VectorXd& y, const Eigen::MatrixXd& K, const Theta& theta,
                                    const LaplaceOptions& opts = {}) {
  const Eigen::Index n = y.size();
  Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd grad(n), w(n), sw(n);
  auto objective_of = [&](const Eigen::VectorXd& a_, const Eigen::VectorXd& f_) {
    return log_likelihood(y, f_) - 0.5 * a_.dot(f_);
  };
  auto derivatives = [&](const Eigen::VectorXd& f_) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = y[i] * f_[i];
      const double r = inverse_mills(z);
      grad[i] = y[i] * r;
      w[i] = r * r + z * r;
      sw[i] = std::sqrt(std::max(w[i], 0.0));
    }
  };
  auto factor_b = [&]() {
    Eigen::MatrixXd B = sw.asDiagonal() * K * sw.asDiagonal();
    B.diagonal().array() += 1.0;
    Eigen::LLT<Eigen::MatrixXd> llt(B);
    if (llt.info() != Eigen::Success) throw FactorizationError("laplace_approx: I + W^1/2 K W^1/2 not PD", theta);
    return llt;
  };

  LaplaceApprox out;
  double obj = objective_of(a, f);
  bool converged = false;
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    derivatives(f);
    const auto llt = factor_b();
    const Eigen::VectorXd b = w.cwiseProduct(f) + grad;
    const Eigen::VectorXd kb = K * b;
    const Eigen::VectorXd a_new = b - sw.cwiseProduct(llt.solve(sw.cwiseProduct(kb)));
    Eigen::VectorXd step = a_new - a;
    Eigen::VectorXd a_try = a_new;
    Eigen::VectorXd f_try = K * a_try;
    double obj_try = objective_of(a_try, f_try);
    for (std::size_t h = 0; h < opts.max_halvings && !(obj_try >= obj); ++h) {
      step *= 0.5;
      a_try = a + step;
      f_try = K * a_try;
      obj_try = objective_of(a_try, f_try);
    }
    if (!(obj_try >= obj)) {  // no ascent direction left
      converged = true;
      break;
    }
    const double delta = obj_try - obj;
    a = std::move(a_try);
    f = std::move(f_try);
    obj = obj_try;
    out.objective_trace.push_back(obj);
    out.iterations = it + 1;
    if (delta < opts.tolerance) {
      converged = true;
      break;
    }
  }
  if (!converged)
    throw ConvergenceError("laplace_approx: Newton did not converge in " + std::to_string(opts.max_iters) +
                           " iterations");

  derivatives(f);
  const auto llt = factor_b();
  // S = K - K W^1/2 B^{-1} W^1/2 K = K - V^T V with V = L^{-1} W^1/2 K.
  const Eigen::MatrixXd V = llt.matrixL().solve(sw.asDiagonal() * K);
  out.cov = K - V.transpose() * V;
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  out.mode = std::move(f);
  out.objective = obj;
  return out;
}

inline LaplaceApprox laplace_approx(const ProbitModel& model, const Theta& theta, const LaplaceOptions& opts = {}) {
  return laplace_approx(model.data.targets, covariance(model, theta), theta, opts);
}

/// X uniform on [-1, 1]^d, f from the GP prior at theta, y = +1 w.p. Phi(f).
inline Dataset synthetic_data(std::size_t n, std::size_t d, const Theta& theta, std::uint64_t seed,
                              double jitter_factor = 1e-8) {
  if (n < 1 || d < 1) throw ContractViolation("synthetic_data: n and d must be >= 1");
  KernelRng rng(seed);
  Dataset data{Eigen::MatrixXd(n, d), Eigen::VectorXd(n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) data.inputs(i, j) = rng.uniform(-1.0, 1.0);

  ProbitModel tmp{data};
  tmp.jitter_factor = jitter_factor;
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
  if (theta.variance > 0.0) {
    Eigen::LLT<Eigen::MatrixXd> llt(covariance(tmp, theta));
    if (llt.info() != Eigen::Success) throw FactorizationError("synthetic_data: covariance not PD", theta);
    Eigen::VectorXd z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = rng.normal();
    f = llt.matrixL() * z;
  }
  for (std::size_t i = 0; i < n; ++i)
    data.targets[i] = rng.uniform() < std::exp(log_normal_cdf(f[i])) ? 1.0 : -1.0;
  return data;
}

/// CSV with d feature columns then one label column in {-1, +1} or {0, 1}.
/// A first line that does not parse as numbers is taken as a header.
inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t", used) != std::string::npos) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (rows.empty() && line_no == 1) continue;
      throw std::runtime_error("load_csv: " + path + ":" + std::to_string(line_no) + ": non-numeric field");
    }
    if (row.size() < 2)
      throw std::runtime_error("load_csv: " + path + ":" + std::to_string(line_no) + ": need features and a label");
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error("load_csv: " + path + ":" + std::to_string(line_no) + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("load_csv: " + path + ": no data rows");

  const std::size_t n = rows.size(), d = rows.front().size() - 1;
  bool has_zero = false, has_minus = false;
  for (const auto& r : rows) {
    const double lab = r.back();
    has_zero |= lab == 0.0;
    has_minus |= lab == -1.0;
    if ((lab != 0.0 && lab != 1.0 && lab != -1.0) || (has_zero && has_minus))
      throw std::runtime_error("load_csv: " + path + ": labels must be in {-1,+1} or {0,1}");
  }
  const bool zero_one = has_zero;
  Dataset data{Eigen::MatrixXd(n, d), Eigen::VectorXd(n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) data.inputs(i, j) = rows[i][j];
    const double lab = rows[i].back();
    data.targets[i] = zero_one ? (lab == 1.0 ? 1.0 : -1.0) : lab;
  }
  return data;
}

}  // namespace apm::gp
