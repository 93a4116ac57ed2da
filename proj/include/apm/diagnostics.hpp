#pragma once

// Chain diagnostics over completed traces: autocorrelation, effective sample
// size (initial positive sequence), Gelman-Rubin R-hat, cost-scaled lags and
// stick-run lengths.

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "apm/random_db.hpp"

namespace apm::diag {

struct Autocorrelation {
  std::vector<double> values;  // lag 0 .. max_lag
  bool degenerate = false;     // constant series
};

/// Biased (divide-by-N) sample autocorrelation for lags 0..max_lag.
inline Autocorrelation autocorrelation(std::span<const double> series, std::size_t max_lag) {
  const std::size_t n = series.size();
  if (n <= max_lag) throw ContractViolation("autocorrelation: series must be longer than max_lag");
  Autocorrelation out;
  out.values.assign(max_lag + 1, 0.0);
  out.values[0] = 1.0;

  const double mean = std::accumulate(series.begin(), series.end(), 0.0) / double(n);
  double var = 0.0;
  for (double x : series) var += (x - mean) * (x - mean);
  if (!(var > 0.0) || !std::isfinite(var)) {
    out.degenerate = true;
    return out;
  }

  std::size_t padded = 1;
  while (padded < 2 * n) padded <<= 1;
  std::vector<double> centred(padded, 0.0);
  for (std::size_t i = 0; i < n; ++i) centred[i] = series[i] - mean;

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, centred);
  for (auto& c : spectrum) c = std::norm(c);
  std::vector<double> acov;
  fft.inv(acov, spectrum);
  for (std::size_t k = 1; k <= max_lag; ++k) out.values[k] = std::clamp(acov[k] / acov[0], -1.0, 1.0);
  return out;
}

struct EssEstimate {
  double ess = 0.0;
  bool degenerate = false;       // constant series, ess reported as 0
  bool super_efficient = false;  // ess > n (negatively correlated chain)
};

/// n / tau with tau = -1 + 2 sum_k (rho_2k + rho_2k+1), summing pairs while
/// they stay positive. tau is floored at 1 / log10(n).
inline EssEstimate ess(std::span<const double> series) {
  const std::size_t n = series.size();
  if (n < 100) throw ContractViolation("ess: need at least 100 samples");
  const auto ac = autocorrelation(series, n - 1);
  EssEstimate out;
  if (ac.degenerate) {
    out.degenerate = true;
    return out;
  }
  double pair_sum = 0.0;
  for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
    const double gamma = ac.values[2 * k] + ac.values[2 * k + 1];
    if (!(gamma > 0.0)) break;
    pair_sum += gamma;
  }
  const double tau = std::max(-1.0 + 2.0 * pair_sum, 1.0 / std::log10(double(n)));
  out.ess = double(n) / tau;
  out.super_efficient = tau < 1.0;
  return out;
}

struct RhatEstimate {
  double r_hat = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;  // zero within-chain variance
};

/// Classic potential scale reduction sqrt((W (N-1)/N + B/N) / W).
inline RhatEstimate r_hat(std::span<const std::vector<double>> chains) {
  const std::size_t m = chains.size();
  if (m < 2) throw ContractViolation("r_hat: need at least 2 chains");
  const std::size_t n = chains.front().size();
  if (n < 100) throw ContractViolation("r_hat: chains need at least 100 samples");
  for (const auto& c : chains)
    if (c.size() != n) throw ContractViolation("r_hat: chains must have equal length");

  std::vector<double> means(m);
  double within = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    means[j] = std::accumulate(chains[j].begin(), chains[j].end(), 0.0) / double(n);
    double s2 = 0.0;
    for (double x : chains[j]) s2 += (x - means[j]) * (x - means[j]);
    within += s2 / double(n - 1);
  }
  within /= double(m);
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / double(m);
  double between = 0.0;
  for (double mu : means) between += (mu - grand) * (mu - grand);
  between *= double(n) / double(m - 1);

  RhatEstimate out;
  if (!(within > 0.0)) {
    out.degenerate = true;
    return out;
  }
  const double pooled = within * double(n - 1) / double(n) + between / double(n);
  out.r_hat = std::sqrt(pooled / within);
  return out;
}

/// (k * relative_cost, rho_k) pairs: autocorrelation against computation spent.
inline std::vector<std::pair<double, double>> cost_scaled_lags(std::span<const double> autocorr,
                                                               double relative_cost) {
  if (!(relative_cost > 0.0)) throw ContractViolation("cost_scaled_lags: relative_cost must be positive");
  std::vector<std::pair<double, double>> out;
  out.reserve(autocorr.size());
  for (std::size_t k = 0; k < autocorr.size(); ++k) out.emplace_back(double(k) * relative_cost, autocorr[k]);
  return out;
}

/// Longest run of consecutive identical entries.
template <class T>
std::size_t max_stick_run(std::span<const T> trace) {
  if (trace.empty()) throw ContractViolation("max_stick_run: empty trace");
  std::size_t best = 1, run = 1;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    run = trace[i] == trace[i - 1] ? run + 1 : 1;
    best = std::max(best, run);
  }
  return best;
}

template <class T>
std::size_t max_stick_run(const std::vector<T>& trace) {
  return max_stick_run(std::span<const T>(trace));
}

}  // namespace apm::diag
