#pragma once

// Keyed store of the base random variates consumed by an estimator.
//
// A RandomDb is conceptually an infinite vector u indexed by VariateKey. Keys
// that were explicitly materialized (by flattening a perturbation) live in an
// entries map; every other key is a pure function of (seed, generation, key)
// produced by a counter-based generator. Reads are therefore replayable and
// order independent, and "lazy materialization" never changes a value.

#include <absl/container/flat_hash_map.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace apm {

class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class BaseSpace { UnitUniform, StandardNormal };

inline const char* to_string(BaseSpace s) {
  return s == BaseSpace::UnitUniform ? "UnitUniform" : "StandardNormal";
}

/// Hierarchical address of one variate, e.g. (block, backward-time, site).
class VariateKey {
 public:
  static constexpr std::size_t kMaxDepth = 4;

  constexpr VariateKey() = default;
  constexpr VariateKey(std::initializer_list<std::uint64_t> parts) {
    if (parts.size() > kMaxDepth) throw ContractViolation("VariateKey deeper than 4 components");
    for (auto p : parts) parts_[size_++] = p;
  }

  constexpr std::size_t size() const { return size_; }
  constexpr std::uint64_t operator[](std::size_t i) const { return parts_[i]; }

  /// Child key with one more trailing component.
  constexpr VariateKey child(std::uint64_t part) const {
    if (size_ == kMaxDepth) throw ContractViolation("VariateKey deeper than 4 components");
    VariateKey k = *this;
    k.parts_[k.size_++] = part;
    return k;
  }

  friend constexpr bool operator==(const VariateKey& a, const VariateKey& b) {
    if (a.size_ != b.size_) return false;
    for (std::size_t i = 0; i < a.size_; ++i)
      if (a.parts_[i] != b.parts_[i]) return false;
    return true;
  }
  friend constexpr std::strong_ordering operator<=>(const VariateKey& a, const VariateKey& b) {
    return std::lexicographical_compare_three_way(a.parts_.begin(), a.parts_.begin() + a.size_,
                                                  b.parts_.begin(), b.parts_.begin() + b.size_);
  }

 private:
  template <class H>
  friend H AbslHashValue(H h, const VariateKey& k) {
    // Unused parts are always zero, so hashing all of them agrees with ==.
    return H::combine(std::move(h), k.size_, k.parts_[0], k.parts_[1], k.parts_[2], k.parts_[3]);
  }

  std::array<std::uint64_t, kMaxDepth> parts_{};
  std::uint8_t size_ = 0;
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Hash state after the first key.size() components of a key of length `full`.
constexpr std::uint64_t hash_prefix(std::uint64_t h, const VariateKey& key, std::size_t full) {
  h = splitmix64(h ^ (0xa0761d6478bd642fULL * (full + 1)));
  for (std::size_t i = 0; i < key.size(); ++i) h = splitmix64(h ^ key[i]);
  return h;
}

constexpr std::uint64_t hash_key(std::uint64_t h, const VariateKey& key) { return hash_prefix(h, key, key.size()); }

// Open interval (0, 1) with 53 bits of resolution.
constexpr double to_unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

constexpr std::uint64_t stream_base(std::uint64_t seed, std::uint64_t generation) {
  return splitmix64(splitmix64(seed) ^ generation);
}

inline double draw_from_hash(std::uint64_t h, BaseSpace space) {
  if (space == BaseSpace::UnitUniform) return to_unit_open(h);
  // Box-Muller on two independent hash outputs.
  const double u1 = to_unit_open(h);
  const double u2 = to_unit_open(splitmix64(h ^ 0x5851f42d4c957f2dULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double stream_draw(std::uint64_t stream, const VariateKey& key, BaseSpace space) {
  return draw_from_hash(hash_key(stream, key), space);
}

}  // namespace detail

/// Reflect onto [0, 1]: m = x mod 2 (non-negative remainder), then m or 2 - m.
inline double reflect(double x) {
  if (!std::isfinite(x)) throw ContractViolation("reflect: non-finite input");
  double m = std::fmod(x, 2.0);
  if (m < 0.0) m += 2.0;
  if (m >= 2.0) m = 0.0;  // fmod rounding for tiny negative x
  return m < 1.0 ? m : 2.0 - m;
}

class RandomDb {
 public:
  using Entries = absl::flat_hash_map<VariateKey, double>;

  /// Fresh root db for one chain. All dbs derived from it share a generation
  /// counter so every resample touches a never-used slice of the stream.
  RandomDb(BaseSpace space, std::uint64_t seed) : node_(std::make_shared<Node>()) {
    node_->space = space;
    node_->seed = seed;
    node_->counter = std::make_shared<std::uint64_t>(1);
    node_->set_generation(0);
  }

  /// Concrete db with explicitly supplied values; unlisted keys draw fresh.
  static RandomDb with_entries(BaseSpace space, std::uint64_t seed, Entries entries) {
    RandomDb db(space, seed);
    for (const auto& [k, v] : entries) check_range(space, v);
    db.node_->entries = std::move(entries);
    return db;
  }

  BaseSpace space() const { return node_->space; }
  std::uint64_t seed() const { return node_->seed; }
  std::uint64_t generation() const { return node_->generation; }
  bool is_view() const { return node_->kind != Kind::Concrete; }
  /// Explicitly materialized entries (empty for views and fresh dbs).
  const Entries& entries() const { return node_->entries; }

  double get(const VariateKey& key) const { return node_->get(key); }

  /// out[i] = get(prefix.child(i)) for i < count.
  void get_row(const VariateKey& prefix, std::size_t count, double* out) const {
    if (prefix.size() >= VariateKey::kMaxDepth) throw ContractViolation("VariateKey deeper than 4 components");
    node_->get_row(prefix, count, out);
  }

  /// Same db with every key redrawn; the input is untouched.
  friend RandomDb resample(const RandomDb& db) { return db.fresh_sibling(db.space()); }

  /// Fresh db in another base space sharing this db's seed and counter.
  RandomDb fresh_sibling(BaseSpace space) const {
    RandomDb out;
    out.node_ = std::make_shared<Node>();
    out.node_->space = space;
    out.node_->seed = node_->seed;
    out.node_->counter = node_->counter;
    out.node_->set_generation((*node_->counter)++);
    return out;
  }

  /// u'_k = reflect(u_k + z * nu_k), evaluated lazily per key.
  friend RandomDb perturb_reflective(const RandomDb& db, const RandomDb& direction, double z) {
    if (db.space() != BaseSpace::UnitUniform || direction.space() != BaseSpace::StandardNormal)
      throw ContractViolation("perturb_reflective: needs UnitUniform db and StandardNormal direction");
    if (!std::isfinite(z)) throw ContractViolation("perturb_reflective: non-finite z");
    return make_view(Kind::Reflective, db, direction, z, 0.0);
  }

  /// u'_k = u_k cos(angle) + nu_k sin(angle), evaluated lazily per key.
  friend RandomDb perturb_elliptical(const RandomDb& db, const RandomDb& nu, double angle) {
    if (db.space() != BaseSpace::StandardNormal || nu.space() != BaseSpace::StandardNormal)
      throw ContractViolation("perturb_elliptical: needs StandardNormal dbs");
    if (!std::isfinite(angle)) throw ContractViolation("perturb_elliptical: non-finite angle");
    return make_view(Kind::Elliptical, db, nu, std::cos(angle), std::sin(angle));
  }

  /// Concrete db holding every key read through this view so far; keys never
  /// read are redrawn from a fresh generation. Identity on concrete dbs.
  RandomDb flatten() const {
    if (!is_view()) return *this;
    RandomDb out = node_->parent->as_db().fresh_sibling(space());
    out.node_->entries.reserve(node_->touched.size());
    for (const auto& [k, v] : node_->touched) out.node_->entries.insert_or_assign(k, v);
    return out;
  }

  /// Structural identity: same space, stream position, entries and view shape.
  friend bool identical(const RandomDb& a, const RandomDb& b) {
    if (a.node_ == b.node_) return true;
    const Node& x = *a.node_;
    const Node& y = *b.node_;
    if (x.kind != y.kind || x.space != y.space || x.seed != y.seed) return false;
    if (x.kind == Kind::Concrete) return x.generation == y.generation && x.entries == y.entries;
    return x.a == y.a && x.b == y.b && identical(x.parent->as_db(), y.parent->as_db()) &&
           identical(x.direction->as_db(), y.direction->as_db());
  }

 private:
  enum class Kind { Concrete, Reflective, Elliptical };

  struct Node : std::enable_shared_from_this<Node> {
    Kind kind = Kind::Concrete;
    BaseSpace space = BaseSpace::UnitUniform;
    std::uint64_t seed = 0;
    std::uint64_t generation = 0;
    std::uint64_t stream = 0;  // stream_base(seed, generation)
    std::shared_ptr<std::uint64_t> counter;
    Entries entries;
    // View parameters: reflective uses a = z; elliptical uses a = cos, b = sin.
    std::shared_ptr<const Node> parent, direction;
    double a = 0.0, b = 0.0;
    mutable std::vector<std::pair<VariateKey, double>> touched;

    double get(const VariateKey& key) const {
      switch (kind) {
        case Kind::Concrete: {
          if (!entries.empty()) {
            auto it = entries.find(key);
            if (it != entries.end()) return it->second;
          }
          return detail::stream_draw(stream, key, space);
        }
        case Kind::Reflective: {
          const double v = reflect(parent->get(key) + a * direction->get(key));
          touched.emplace_back(key, v);
          return v;
        }
        case Kind::Elliptical: {
          const double v = parent->get(key) * a + direction->get(key) * b;
          touched.emplace_back(key, v);
          return v;
        }
      }
      return 0.0;
    }

    void get_row(const VariateKey& prefix, std::size_t count, double* out) const {
      if (kind == Kind::Concrete) {
        if (entries.empty()) {
          const std::uint64_t h = detail::hash_prefix(stream, prefix, prefix.size() + 1);
          for (std::size_t i = 0; i < count; ++i) out[i] = detail::draw_from_hash(detail::splitmix64(h ^ i), space);
        } else {
          for (std::size_t i = 0; i < count; ++i) out[i] = get(prefix.child(i));
        }
        return;
      }
      thread_local std::vector<double> dir;
      dir.resize(count);
      parent->get_row(prefix, count, out);
      direction->get_row(prefix, count, dir.data());
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = kind == Kind::Reflective ? reflect(out[i] + a * dir[i]) : out[i] * a + dir[i] * b;
        touched.emplace_back(prefix.child(i), out[i]);
      }
    }

    void set_generation(std::uint64_t g) {
      generation = g;
      stream = detail::stream_base(seed, g);
    }

    RandomDb as_db() const {
      RandomDb db;
      db.node_ = std::const_pointer_cast<Node>(shared_from_this());
      return db;
    }
  };

  RandomDb() = default;

  static void check_range(BaseSpace space, double v) {
    const bool ok = space == BaseSpace::UnitUniform ? (v >= 0.0 && v <= 1.0) : std::isfinite(v);
    if (!ok) throw ContractViolation("RandomDb: value outside " + std::string(to_string(space)) + " range");
  }

  static RandomDb make_view(Kind kind, const RandomDb& parent, const RandomDb& direction, double a,
                            double b) {
    if (parent.is_view() || direction.is_view())
      throw ContractViolation("RandomDb: perturbations apply to concrete dbs only");
    RandomDb out;
    out.node_ = std::make_shared<Node>();
    out.node_->kind = kind;
    out.node_->space = parent.space();
    out.node_->seed = parent.seed();
    out.node_->counter = parent.node_->counter;
    out.node_->parent = parent.node_;
    out.node_->direction = direction.node_;
    out.node_->a = a;
    out.node_->b = b;
    return out;
  }

  std::shared_ptr<Node> node_;
};

}  // namespace apm
