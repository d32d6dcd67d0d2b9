#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "hplab/errors.hpp"

namespace hplab {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Purpose tags for deriving independent substreams from one master seed.
enum class Stream : uint64_t {
  data = 1,
  init = 2,
  gumbel = 3,
  concrete = 4,
  order = 5,
  bench = 6,
  eval_data = 7,
};

inline uint64_t substream_seed(uint64_t master, Stream purpose) {
  return splitmix64(master ^ splitmix64(static_cast<uint64_t>(purpose)));
}

// Deterministic random stream. One instance per purpose, never shared
// between concurrently running cells.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1), both endpoints excluded.
  double uniform_open() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int below(int n) {
    if (n <= 0) throw DomainError("Rng::below: n must be positive");
    return static_cast<int>(uniform() * n);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u = uniform_open();
    double v = uniform_open();
    double radius = std::sqrt(-2.0 * std::log(u));
    double angle = 2.0 * M_PI * v;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  // Standard Gumbel(0,1) draw: -log(-log(U)), U on the open unit interval.
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(static_cast<int>(i)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hplab
