#pragma once

// Toroidal Ising model p(x | J, h) ∝ exp(J sum_edges x_i x_j + h sum_i x_i):
// heat-bath Gibbs updates, exact sampling by coupling from the past with a
// summary (bounding) lattice, and brute-force log Z for small lattices.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apm/random_db.hpp"

namespace apm::ising {

using Spin = std::int8_t;
using Config = std::vector<Spin>;

/// Summary-lattice label for a site whose spin is not yet determined.
inline constexpr Spin kUnknown = 0;

struct Params {
  double coupling = 0.0;  // theta_J
  double field = 0.0;     // theta_h
};

class NonCoalescenceError : public std::runtime_error {
 public:
  NonCoalescenceError(const Params& p, std::size_t sweeps)
      : std::runtime_error("cftp: no coalescence within " + std::to_string(sweeps) +
                           " sweeps at coupling=" + std::to_string(p.coupling) +
                           " field=" + std::to_string(p.field)),
        params(p) {}
  Params params;
};

/// W x H torus, sites in raster order s = row * W + col. Edges go right and
/// down from every site, skipping self-loops on width- or height-1 lattices;
/// width-2 lattices therefore carry doubled edges.
class Lattice {
 public:
  Lattice(std::size_t width, std::size_t height) : width_(width), height_(height) {
    if (width < 1 || height < 1) throw ContractViolation("ising::Lattice: dimensions must be positive");
    const std::size_t n = width * height;
    std::vector<std::vector<std::uint32_t>> nbrs(n);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        const std::size_t s = r * width + c;
        const std::size_t right = r * width + (c + 1) % width;
        const std::size_t down = ((r + 1) % height) * width + c;
        const std::size_t left = r * width + (c + width - 1) % width;
        const std::size_t up = ((r + height - 1) % height) * width + c;
        for (std::size_t nb : {right, down, left, up})
          if (nb != s) nbrs[s].push_back(static_cast<std::uint32_t>(nb));
        if (right != s) edges_.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(right)});
        if (down != s) edges_.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(down)});
      }
    }
    offsets_.push_back(0);
    for (const auto& v : nbrs) {
      flat_.insert(flat_.end(), v.begin(), v.end());
      offsets_.push_back(static_cast<std::uint32_t>(flat_.size()));
    }
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return width_ * height_; }
  std::span<const std::uint32_t> neighbors(std::size_t s) const {
    return {flat_.data() + offsets_[s], flat_.data() + offsets_[s + 1]};
  }
  const std::vector<std::array<std::uint32_t, 2>>& edges() const { return edges_; }

 private:
  std::size_t width_, height_;
  std::vector<std::uint32_t> flat_;     // neighbor lists, concatenated
  std::vector<std::uint32_t> offsets_;  // site s owns flat_[offsets_[s], offsets_[s + 1])
  std::vector<std::array<std::uint32_t, 2>> edges_;
};

/// (sum over edges of x_i x_j, sum over sites of x_i).
struct SufficientStats {
  double edge_sum = 0.0;
  double magnetization = 0.0;
};

inline SufficientStats sufficient_stats(const Lattice& lat, std::span<const Spin> x) {
  SufficientStats st;
  for (const auto& e : lat.edges()) st.edge_sum += x[e[0]] * x[e[1]];
  for (Spin v : x) st.magnetization += v;
  return st;
}

inline double log_g(const SufficientStats& st, const Params& p) {
  return p.coupling * st.edge_sum + p.field * st.magnetization;
}

/// Unnormalized log-likelihood J sum_edges x_i x_j + h sum_i x_i.
inline double log_g(const Lattice& lat, const Params& p, std::span<const Spin> x) {
  if (x.size() != lat.size()) throw ContractViolation("ising::log_g: configuration size mismatch");
  return log_g(sufficient_stats(lat, x), p);
}

inline double logistic(double a) {
  return a >= 0.0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
}

/// P(x_s = +1 | neighbors) for every possible neighbor sum -4..4.
class HeatBathTable {
 public:
  explicit HeatBathTable(const Params& p) {
    for (int k = -4; k <= 4; ++k) table_[k + 4] = logistic(2.0 * (p.coupling * k + p.field));
  }
  double operator()(int neighbor_sum) const { return table_[neighbor_sum + 4]; }

 private:
  std::array<double, 9> table_{};
};

/// Heat-bath update: +1 iff u < logistic(2 (J * neighbor_sum + h)).
inline Spin gibbs_site_update(const Lattice& lat, const Params& p, std::span<const Spin> x, std::size_t site,
                              double u) {
  int sum = 0;
  for (auto nb : lat.neighbors(site)) sum += x[nb];
  return u < logistic(2.0 * (p.coupling * sum + p.field)) ? Spin{1} : Spin{-1};
}

/// One raster-order heat-bath sweep of x, in place.
template <class VariateAt>
void gibbs_sweep(const Lattice& lat, const HeatBathTable& table, std::span<Spin> x, VariateAt&& u_at) {
  for (std::size_t s = 0; s < lat.size(); ++s) {
    int sum = 0;
    for (auto nb : lat.neighbors(s)) sum += x[nb];
    x[s] = u_at(s) < table(sum) ? Spin{1} : Spin{-1};
  }
}

/// Summary-lattice update of one site: the spin every coupled chain would
/// take given the shared variate u, or kUnknown if they can disagree.
inline Spin summary_site_update(const Lattice& lat, const HeatBathTable& table, std::span<const Spin> summary,
                                std::size_t site, double u) {
  // kUnknown is 0, so an unknown neighbor adds nothing to sum and one to unknown.
  int sum = 0, unknown = 0;
  for (auto nb : lat.neighbors(site)) {
    const Spin v = summary[nb];
    sum += v;
    unknown += v == kUnknown;
  }
  const int lo = sum - unknown, hi = sum + unknown;
  const double p_lo = table(lo), p_hi = table(hi);
  const double p_min = std::min(p_lo, p_hi), p_max = std::max(p_lo, p_hi);
  if (u < p_min) return 1;
  if (u >= p_max) return -1;
  return kUnknown;
}

struct CftpOptions {
  /// Leading key component; variates live at (key_block, t, site), t >= 1
  /// counting backward from time 0.
  std::uint64_t key_block = 1;
  std::size_t max_sweeps = std::size_t{1} << 20;
};

struct CftpStats {
  std::size_t depth = 0;         // backward sweeps of the coalescing epoch
  std::size_t keys_consumed = 0;  // distinct keys read
};

/// Exact sample from p(x | params) by coupling from the past. Epoch depths
/// double from 1; each backward time step t is one raster sweep driven by
/// the variates (key_block, t, s), reused unchanged by deeper epochs.
inline Config cftp_exact_sample(const Lattice& lat, const Params& p, const RandomDb& db,
                                const CftpOptions& opts = {}, CftpStats* stats = nullptr) {
  if (db.space() != BaseSpace::UnitUniform) throw ContractViolation("cftp_exact_sample: db must be UnitUniform");
  const std::size_t n = lat.size();
  const HeatBathTable table(p);
  std::vector<double> variates;  // variates[(t - 1) * n + s]
  Config summary(n);

  for (std::size_t depth = 1;; depth *= 2) {
    if (depth > opts.max_sweeps) throw NonCoalescenceError(p, opts.max_sweeps);
    const std::size_t have = variates.size() / n;
    variates.resize(depth * n);
    for (std::size_t t = have + 1; t <= depth; ++t) db.get_row({opts.key_block, t}, n, &variates[(t - 1) * n]);

    std::fill(summary.begin(), summary.end(), kUnknown);
    for (std::size_t t = depth; t >= 1; --t) {
      const double* u = &variates[(t - 1) * n];
      for (std::size_t s = 0; s < n; ++s) summary[s] = summary_site_update(lat, table, summary, s, u[s]);
    }
    if (std::find(summary.begin(), summary.end(), kUnknown) == summary.end()) {
      if (stats) *stats = {depth, depth * n};
      return summary;
    }
  }
}

/// log Z by exhaustive enumeration; lattices of at most 20 sites.
inline double enumerate_log_z(const Lattice& lat, const Params& p) {
  const std::size_t n = lat.size();
  if (n > 20) throw ContractViolation("enumerate_log_z: more than 20 sites");
  Config x(n);
  std::vector<double> terms(std::size_t{1} << n);
  for (std::size_t mask = 0; mask < terms.size(); ++mask) {
    for (std::size_t s = 0; s < n; ++s) x[s] = (mask >> s) & 1 ? 1 : -1;
    terms[mask] = log_g(lat, p, x);
  }
  const double m = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

/// Configuration of a lattice of at most 64 sites from a bit mask (bit s set = +1).
inline Config config_from_mask(std::size_t n, std::uint64_t mask) {
  Config x(n);
  for (std::size_t s = 0; s < n; ++s) x[s] = (mask >> s) & 1 ? 1 : -1;
  return x;
}

inline std::uint64_t mask_from_config(std::span<const Spin> x) {
  std::uint64_t m = 0;
  for (std::size_t s = 0; s < x.size(); ++s)
    if (x[s] > 0) m |= std::uint64_t{1} << s;
  return m;
}

/// Observed data plus the uniform prior box |h| < field_max, 0 < J < coupling_max.
struct Spec {
  Lattice lattice;
  Config data;
  double field_max = 1.0;
  double coupling_max = 0.4;

  bool in_prior(const Params& p) const {
    return p.coupling > 0.0 && p.coupling < coupling_max && std::abs(p.field) < field_max;
  }
  double log_prior(const Params& p) const {
    return in_prior(p) ? -std::log(coupling_max * 2.0 * field_max) : -std::numeric_limits<double>::infinity();
  }
};

}  // namespace apm::ising
