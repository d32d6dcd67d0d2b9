#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hplab/rng.hpp"
#include "hplab/tensor.hpp"

namespace hplab {

// Head logits w; the importance of head h is exp(w[h]).
struct ImportanceWeights {
  std::vector<double> w;

  explicit ImportanceWeights(std::vector<double> logits);
  static ImportanceWeights from_importances(std::span<const double> iota);

  int count() const { return static_cast<int>(w.size()); }
  double importance(int h) const;
  double total_importance() const;
};

// Binary keep/prune vector.
struct HeadMask {
  std::vector<uint8_t> keep;

  HeadMask() = default;
  explicit HeadMask(std::vector<uint8_t> bits);
  static HeadMask ones(int h);
  static HeadMask from_bits(const std::string& bits);
  static HeadMask from_kept(int h, std::span<const int> kept);

  std::string bits() const;
  int size() const { return static_cast<int>(keep.size()); }
  int count() const;
  std::vector<int> kept_indices() const;
  uint64_t as_word() const;  // bit h set iff head h kept; size() <= 64

  bool operator==(const HeadMask& other) const { return keep == other.keep; }
};

// Relaxed K-hot gates with per-round diagnostics.
struct GateVector {
  Tensor gate;                 // [H], sums to k
  std::vector<Tensor> rounds;  // per-round softmax vectors, each sums to 1
  int k = 0;
  bool saturated = false;      // the log(1 - g) clamp engaged in some round

  std::vector<double> values() const;
  double max_gate() const;
};

// Log-linear cooling from tau_ini to tau_end over cooldown_steps.
struct TemperatureSchedule {
  double tau_ini = 1.0;
  double tau_end = 1.0;
  int64_t cooldown_steps = 1;

  TemperatureSchedule() = default;
  TemperatureSchedule(double tau_ini, double tau_end, int64_t cooldown_steps);
  static TemperatureSchedule constant(double tau);
};

// count independent standard Gumbel(0,1) draws.
std::vector<double> sample_gumbel(int count, Rng& rng);

// argmax of w + noise; ties resolve to the lowest index.
int gumbel_argmax(std::span<const double> w, std::span<const double> noise);

std::vector<double> add_spans(std::span<const double> a, std::span<const double> b);

// softmax(r / tau).
Tensor gumbel_softmax(const Tensor& perturbed, double tau);
std::vector<double> gumbel_softmax(std::span<const double> perturbed, double tau);

// Mask of the k largest entries; ties resolve to the lowest index.
HeadMask hard_top_k(std::span<const double> perturbed, int k);

// Exact probability that sampling without replacement yields exactly the
// given subset: the sum over all orderings of the product of conditional
// draw probabilities. Factorial in |subset|; guarded at |subset| <= 8.
double subset_probability(const ImportanceWeights& w, std::span<const int> subset);

// k relaxed argmax rounds at temperature tau, chained through
// r <- r + log(1 - g); the returned gate is the sum of round vectors.
GateVector soft_top_k(const Tensor& perturbed, int k, double tau);
GateVector soft_top_k(std::span<const double> perturbed, int k, double tau);

double temperature_at(const TemperatureSchedule& schedule, int64_t step);

}  // namespace hplab
