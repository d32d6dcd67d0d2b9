#include "hplab/gumbel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hplab {

ImportanceWeights::ImportanceWeights(std::vector<double> logits) : w(std::move(logits)) {
  if (w.empty()) throw DomainError("ImportanceWeights: at least one head required");
  for (double v : w) {
    if (!std::isfinite(v)) throw NumericError("ImportanceWeights: non-finite logit");
  }
}

ImportanceWeights ImportanceWeights::from_importances(std::span<const double> iota) {
  std::vector<double> logits(iota.size());
  for (size_t i = 0; i < iota.size(); ++i) {
    if (!(iota[i] > 0.0)) {
      throw DomainError("ImportanceWeights: importances must be positive");
    }
    logits[i] = std::log(iota[i]);
  }
  return ImportanceWeights(std::move(logits));
}

double ImportanceWeights::importance(int h) const {
  return std::exp(w.at(static_cast<size_t>(h)));
}

double ImportanceWeights::total_importance() const {
  double z = 0.0;
  for (double v : w) z += std::exp(v);
  return z;
}

HeadMask::HeadMask(std::vector<uint8_t> bits) : keep(std::move(bits)) {
  for (uint8_t b : keep) {
    if (b > 1) throw ContractError("HeadMask: entries must be 0 or 1");
  }
}

HeadMask HeadMask::ones(int h) {
  if (h < 1) throw DomainError("HeadMask: head count must be positive");
  return HeadMask(std::vector<uint8_t>(static_cast<size_t>(h), 1));
}

HeadMask HeadMask::from_bits(const std::string& bits) {
  std::vector<uint8_t> keep;
  keep.reserve(bits.size());
  for (char c : bits) {
    if (c != '0' && c != '1') throw ContractError("HeadMask: bits must be 0/1");
    keep.push_back(c == '1' ? 1 : 0);
  }
  return HeadMask(std::move(keep));
}

HeadMask HeadMask::from_kept(int h, std::span<const int> kept) {
  std::vector<uint8_t> keep(static_cast<size_t>(h), 0);
  for (int idx : kept) {
    if (idx < 0 || idx >= h) throw ContractError("HeadMask: index out of range");
    keep[static_cast<size_t>(idx)] = 1;
  }
  return HeadMask(std::move(keep));
}

std::string HeadMask::bits() const {
  std::string s;
  s.reserve(keep.size());
  for (uint8_t b : keep) s.push_back(b ? '1' : '0');
  return s;
}

int HeadMask::count() const {
  int c = 0;
  for (uint8_t b : keep) c += b;
  return c;
}

std::vector<int> HeadMask::kept_indices() const {
  std::vector<int> idx;
  for (size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

uint64_t HeadMask::as_word() const {
  if (keep.size() > 64) throw ContractError("HeadMask: too wide for a 64-bit word");
  uint64_t word = 0;
  for (size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) word |= (1ULL << i);
  }
  return word;
}

std::vector<double> GateVector::values() const {
  return {gate.data().begin(), gate.data().end()};
}

double GateVector::max_gate() const {
  double mx = 0.0;
  for (double v : gate.data()) mx = std::max(mx, v);
  return mx;
}

TemperatureSchedule::TemperatureSchedule(double ini, double end, int64_t cooldown)
    : tau_ini(ini), tau_end(end), cooldown_steps(cooldown) {
  if (!(tau_end > 0.0) || !(tau_ini >= tau_end)) {
    throw DomainError("TemperatureSchedule: require tau_ini >= tau_end > 0");
  }
  if (cooldown_steps < 1) {
    throw DomainError("TemperatureSchedule: cooldown must be a positive step count");
  }
}

TemperatureSchedule TemperatureSchedule::constant(double tau) {
  return TemperatureSchedule(tau, tau, 1);
}

std::vector<double> sample_gumbel(int count, Rng& rng) {
  if (count < 1) throw DomainError("sample_gumbel: count must be positive");
  std::vector<double> noise(static_cast<size_t>(count));
  for (double& n : noise) n = rng.gumbel();
  return noise;
}

int gumbel_argmax(std::span<const double> w, std::span<const double> noise) {
  if (w.size() != noise.size()) {
    throw ShapeError("gumbel_argmax: logit/noise length mismatch");
  }
  if (w.empty()) throw DomainError("gumbel_argmax: empty input");
  int best = 0;
  double best_value = w[0] + noise[0];
  for (size_t h = 1; h < w.size(); ++h) {
    double value = w[h] + noise[h];
    if (value > best_value) {
      best = static_cast<int>(h);
      best_value = value;
    }
  }
  return best;
}

std::vector<double> add_spans(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("add_spans: length mismatch");
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor gumbel_softmax(const Tensor& perturbed, double tau) {
  if (!(tau > 0.0)) throw DomainError("gumbel_softmax: temperature must be positive");
  return softmax_rows(scale(perturbed, 1.0 / tau));
}

std::vector<double> gumbel_softmax(std::span<const double> perturbed, double tau) {
  Tensor r = Tensor::from_data({static_cast<int>(perturbed.size())},
                               {perturbed.begin(), perturbed.end()});
  Tensor g = gumbel_softmax(r, tau);
  return {g.data().begin(), g.data().end()};
}

HeadMask hard_top_k(std::span<const double> perturbed, int k) {
  int h = static_cast<int>(perturbed.size());
  if (k < 1 || k > h) throw DomainError("hard_top_k: k out of [1, H]");
  std::vector<int> order(static_cast<size_t>(h));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return perturbed[static_cast<size_t>(a)] > perturbed[static_cast<size_t>(b)];
  });
  std::vector<uint8_t> keep(static_cast<size_t>(h), 0);
  for (int i = 0; i < k; ++i) keep[static_cast<size_t>(order[i])] = 1;
  return HeadMask(std::move(keep));
}

double subset_probability(const ImportanceWeights& w, std::span<const int> subset) {
  int k = static_cast<int>(subset.size());
  if (k < 1 || k > w.count()) {
    throw DomainError("subset_probability: subset size out of [1, H]");
  }
  if (k > 8) {
    throw DomainError("subset_probability: subset larger than the K <= 8 enumeration guard");
  }
  std::vector<int> members(subset.begin(), subset.end());
  std::sort(members.begin(), members.end());
  for (int i = 0; i + 1 < k; ++i) {
    if (members[i] == members[i + 1]) {
      throw ContractError("subset_probability: duplicate head in subset");
    }
  }
  if (members.front() < 0 || members.back() >= w.count()) {
    throw ContractError("subset_probability: head index out of range");
  }
  double z = w.total_importance();
  double total = 0.0;
  do {
    double term = 1.0;
    double removed = 0.0;
    for (int i = 0; i < k; ++i) {
      double iota = w.importance(members[static_cast<size_t>(i)]);
      term *= iota / (z - removed);
      removed += iota;
    }
    total += term;
  } while (std::next_permutation(members.begin(), members.end()));
  return total;
}

GateVector soft_top_k(const Tensor& perturbed, int k, double tau) {
  if (perturbed.shape().size() != 1) {
    throw ShapeError("soft_top_k: expected a logit vector");
  }
  int h = static_cast<int>(perturbed.size());
  if (k < 1 || k > h) throw DomainError("soft_top_k: k out of [1, H]");
  if (!(tau > 0.0)) throw DomainError("soft_top_k: temperature must be positive");

  GateVector result;
  result.k = k;
  Tensor logits = perturbed;
  Tensor total;
  for (int round = 0; round < k; ++round) {
    Tensor probs = gumbel_softmax(logits, tau);
    result.rounds.push_back(probs);
    total = round == 0 ? probs : add(total, probs);
    if (round + 1 < k) {
      if (log1m_would_clamp(probs.data())) result.saturated = true;
      logits = add(logits, log1m_clamped(probs));
    }
  }
  result.gate = total;

  double gate_sum = 0.0;
  for (double v : result.gate.data()) {
    if (v < 0.0) throw NumericError("soft_top_k: negative gate");
    gate_sum += v;
  }
  if (std::abs(gate_sum - k) > 1e-9) {
    throw NumericError("soft_top_k: gate sum drifted from k");
  }
  return result;
}

GateVector soft_top_k(std::span<const double> perturbed, int k, double tau) {
  Tensor r = Tensor::from_data({static_cast<int>(perturbed.size())},
                               {perturbed.begin(), perturbed.end()});
  return soft_top_k(r, k, tau);
}

double temperature_at(const TemperatureSchedule& schedule, int64_t step) {
  if (step < 0) throw DomainError("temperature_at: step must be non-negative");
  if (step == 0) return schedule.tau_ini;
  if (step >= schedule.cooldown_steps) return schedule.tau_end;
  double fraction = static_cast<double>(step) /
                    static_cast<double>(schedule.cooldown_steps);
  double log_tau = std::log(schedule.tau_ini) -
                   fraction * (std::log(schedule.tau_ini) - std::log(schedule.tau_end));
  return std::exp(log_tau);
}

}  // namespace hplab
