#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "apm/random_db.hpp"

namespace apm {

/// Randomness used by the kernels themselves (proposals, slice heights,
/// bracket placement). Separate from the estimator's RandomDb variates.
class KernelRng {
 public:
  explicit KernelRng(std::uint64_t seed) : engine_(detail::splitmix64(seed ^ 0x6b65726e656c5f72ULL)) {}

  /// Uniform on the open interval (0, 1).
  double uniform() { return detail::to_unit_open(engine_()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double phi = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  std::uint64_t bits() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Seeds for chain i of a run, for the db stream and the kernel stream.
struct ChainSeeds {
  std::uint64_t db;
  std::uint64_t kernel;
};

inline ChainSeeds chain_seeds(std::uint64_t master, std::uint64_t chain_index) {
  const std::uint64_t base = master + chain_index;
  return {detail::splitmix64(base ^ 0x64625f73747265ULL), detail::splitmix64(base ^ 0x6b726e6c5f737472ULL)};
}

}  // namespace apm
