#pragma once

// Slice-sampling procedures, all in log space:
//  - slice_linear: one variable, random bracket placement, optional linear
//    step-out, shrinkage toward the current point.
//  - slice_reflective_db: slice_linear along z for u' = reflect(u + z nu).
//  - slice_elliptical_db: elliptical slice sampling of a Gaussian db.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <utility>

#include "apm/random_db.hpp"

namespace apm {

struct SliceConfig {
  double w = 1.0;
  bool step_out = false;
  std::size_t max_shrink = 100;
  /// Absolute bracket width at which the update gives up. Non-positive means
  /// the default 1e-12 * w.
  double collapse_width = 0.0;

  double effective_collapse_width() const { return collapse_width > 0.0 ? collapse_width : 1e-12 * w; }

  void validate() const {
    if (!(w > 0.0) || !std::isfinite(w)) throw ContractViolation("SliceConfig: w must be positive");
    if (max_shrink < 1) throw ContractViolation("SliceConfig: max_shrink must be >= 1");
    if (collapse_width < 0.0 || !std::isfinite(collapse_width))
      throw ContractViolation("SliceConfig: collapse_width must be positive");
  }
};

template <class Point>
struct SliceOutcome {
  Point new_point;
  double log_f = 0.0;   // log target at new_point
  double offset = 0.0;  // accepted displacement (x' - x, z, or angle)
  std::size_t n_evals = 0;
  bool moved = false;
  bool collapsed = false;
};

namespace detail {
// Step-out has no limit in the linear scheme; this only guards improper targets.
inline constexpr std::size_t kStepOutGuard = 1'000'000;
}

/// Linear slice sampling from x0 whose log target log_f_x0 is already known.
/// log_f is not evaluated at x0.
template <class LogF, class Rng>
SliceOutcome<double> slice_linear(LogF&& log_f, double x0, double log_f_x0, const SliceConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!(log_f_x0 > -std::numeric_limits<double>::infinity()))
    throw ContractViolation("slice_linear: current point outside the support");

  SliceOutcome<double> out{x0, log_f_x0};
  const double log_h = log_f_x0 + std::log(rng.uniform());

  double lo = x0 - cfg.w * rng.uniform();
  double hi = lo + cfg.w;

  if (cfg.step_out) {
    for (std::size_t n = 0;; ++n) {
      if (n > detail::kStepOutGuard) throw ContractViolation("slice_linear: step-out did not terminate");
      ++out.n_evals;
      if (!(log_f(lo) > log_h)) break;
      lo -= cfg.w;
    }
    for (std::size_t n = 0;; ++n) {
      if (n > detail::kStepOutGuard) throw ContractViolation("slice_linear: step-out did not terminate");
      ++out.n_evals;
      if (!(log_f(hi) > log_h)) break;
      hi += cfg.w;
    }
  }

  const double min_width = cfg.effective_collapse_width();
  for (std::size_t attempt = 0; attempt < cfg.max_shrink; ++attempt) {
    const double x1 = lo + (hi - lo) * rng.uniform();
    const double lf = log_f(x1);
    ++out.n_evals;
    if (lf > log_h) {
      out.new_point = x1;
      out.log_f = lf;
      out.offset = x1 - x0;
      out.moved = x1 != x0;
      return out;
    }
    if (x1 < x0)
      lo = x1;
    else
      hi = x1;
    if (hi - lo < min_width) break;
  }
  out.collapsed = true;
  return out;
}

/// As above, computing log_f(x0) first (counted as one evaluation).
template <class LogF, class Rng>
SliceOutcome<double> slice_linear(LogF&& log_f, double x0, const SliceConfig& cfg, Rng& rng) {
  const double lf0 = log_f(x0);
  auto out = slice_linear(log_f, x0, lf0, cfg, rng);
  ++out.n_evals;
  return out;
}

/// Directional slice sampling of a UnitUniform db along a fresh Gaussian
/// direction, with reflections off the unit hypercube. The search starts at
/// z = 0; cfg normally has w = 1 and no step-out.
template <class LogFDb, class Rng>
SliceOutcome<RandomDb> slice_reflective_db(LogFDb&& log_f_of_db, const RandomDb& db, double log_f_db,
                                           const SliceConfig& cfg, Rng& rng) {
  if (db.space() != BaseSpace::UnitUniform)
    throw ContractViolation("slice_reflective_db: db must be UnitUniform");
  const RandomDb direction = db.fresh_sibling(BaseSpace::StandardNormal);

  std::optional<RandomDb> last;
  auto along = [&](double z) {
    last = perturb_reflective(db, direction, z);
    return log_f_of_db(*last);
  };
  auto lin = slice_linear(along, 0.0, log_f_db, cfg, rng);

  SliceOutcome<RandomDb> out{db, log_f_db, 0.0, lin.n_evals, false, lin.collapsed};
  if (!lin.collapsed) {
    // The accepted proposal is always the last evaluation.
    out.new_point = last->flatten();
    out.log_f = lin.log_f;
    out.offset = lin.new_point;
    out.moved = lin.moved;
  }
  return out;
}

template <class LogFDb, class Rng>
SliceOutcome<RandomDb> slice_reflective_db(LogFDb&& log_f_of_db, const RandomDb& db, const SliceConfig& cfg,
                                           Rng& rng) {
  const double lf0 = log_f_of_db(db);
  auto out = slice_reflective_db(log_f_of_db, db, lf0, cfg, rng);
  ++out.n_evals;
  return out;
}

/// Elliptical slice sampling of a StandardNormal db: proposals
/// u cos(phi) + nu sin(phi) with the angle bracket shrinking toward 0.
template <class LogFDb, class Rng>
SliceOutcome<RandomDb> slice_elliptical_db(LogFDb&& log_f_of_db, const RandomDb& db, double log_f_db,
                                           std::size_t max_shrink, Rng& rng) {
  if (db.space() != BaseSpace::StandardNormal)
    throw ContractViolation("slice_elliptical_db: db must be StandardNormal");
  if (max_shrink < 1) throw ContractViolation("slice_elliptical_db: max_shrink must be >= 1");
  if (!(log_f_db > -std::numeric_limits<double>::infinity()))
    throw ContractViolation("slice_elliptical_db: current point outside the support");

  const RandomDb nu = db.fresh_sibling(BaseSpace::StandardNormal);
  const double log_y = log_f_db + std::log(rng.uniform());
  double phi = 2.0 * std::numbers::pi * rng.uniform();
  double lo = phi - 2.0 * std::numbers::pi;
  double hi = phi;

  SliceOutcome<RandomDb> out{db, log_f_db};
  for (std::size_t attempt = 0; attempt < max_shrink; ++attempt) {
    RandomDb proposal = perturb_elliptical(db, nu, phi);
    const double lf = log_f_of_db(proposal);
    ++out.n_evals;
    if (lf > log_y) {
      out.new_point = proposal.flatten();
      out.log_f = lf;
      out.offset = phi;
      out.moved = phi != 0.0;
      return out;
    }
    if (phi < 0.0)
      lo = phi;
    else
      hi = phi;
    phi = lo + (hi - lo) * rng.uniform();
  }
  out.collapsed = true;
  return out;
}

template <class LogFDb, class Rng>
SliceOutcome<RandomDb> slice_elliptical_db(LogFDb&& log_f_of_db, const RandomDb& db, std::size_t max_shrink,
                                           Rng& rng) {
  const double lf0 = log_f_of_db(db);
  auto out = slice_elliptical_db(log_f_of_db, db, lf0, max_shrink, rng);
  ++out.n_evals;
  return out;
}

}  // namespace apm
