// Acceptance suite: one pass/fail line per criterion, exit code equals the
// number of failures. Criteria A1..A12 cover the relaxation algebra, the
// sampling distribution, gradients, compaction, the desk-scale sweep, the
// stochastic-gate baselines, scheduling, wallclock trends, and training
// dynamics.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "hplab/experiment.hpp"

using namespace hplab;

namespace {

int g_failures = 0;

void report(const char* id, bool pass, const std::string& detail) {
  std::printf("[%s] %s %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

ExperimentConfig reversal_reference() {
  ExperimentConfig config;
  config.task = "sequence-reversal";
  config.model.task = TaskKind::seq2seq;
  config.model.enc_layers = 2;
  config.model.dec_layers = 2;
  config.model.heads_per_layer = 4;
  config.model.d_model = 64;
  config.model.d_head = 16;
  config.model.vocab = 12;
  config.model.max_seq = 10;
  config.pruner = "joint-dsp";
  config.schedule = TemperatureSchedule(1.0, 1e-8, 500);
  config.auto_cooldown = false;
  config.lr = 0.2;
  config.lr_w = 0.5;
  config.epochs = 14;
  config.warmup_epochs = 6;
  config.batch_size = 8;
  config.train_size = 2048;
  config.eval_size = 200;
  config.seq_len = 8;
  config.finetune_steps = 0;
  config.eval_every = 512;
  config.seeds = {1, 2, 3};
  config.out_dir = "acceptance_out";
  return config;
}

// A1: relaxed gates sum to k for random draws across temperatures.
void criterion_a1() {
  auto start = std::chrono::steady_clock::now();
  Rng rng(10101);
  const double taus[] = {10.0, 1.0, 0.1, 1e-3};
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    int h = 2 + rng.below(15);  // H <= 16
    int k = 1 + rng.below(h);
    double tau = taus[trial % 4];
    std::vector<double> w(static_cast<size_t>(h));
    for (double& v : w) v = rng.uniform_in(-3.0, 3.0);
    std::vector<double> noise = sample_gumbel(h, rng);
    GateVector g = soft_top_k(add_spans(w, noise), k, tau);
    double total = 0.0;
    for (double v : g.gate.data()) total += v;
    worst = std::max(worst, std::abs(total - k));
  }
  double elapsed = seconds_since(start);
  bool pass = worst < 1e-9 && elapsed < 5.0;
  report("A1", pass,
         "gate-sum invariant: worst |sum-K| = " + format_g6(worst) + ", " +
             format_g6(elapsed) + " s (limit 5 s)");
}

// A2: the relaxation agrees with the hard mask at tau = 1e-6 when the
// boundary gap exceeds 0.1.
void criterion_a2() {
  Rng rng(20202);
  double worst = 0.0;
  int accepted = 0;
  while (accepted < 500) {
    int h = 3 + rng.below(14);
    int k = 1 + rng.below(h - 1);
    std::vector<double> r(static_cast<size_t>(h));
    for (double& v : r) v = rng.uniform_in(-4.0, 4.0);
    std::vector<double> sorted = r;
    std::sort(sorted.rbegin(), sorted.rend());
    if (sorted[static_cast<size_t>(k - 1)] - sorted[static_cast<size_t>(k)] <= 0.1) {
      continue;
    }
    ++accepted;
    GateVector g = soft_top_k(std::span<const double>(r), k, 1e-6);
    HeadMask hard = hard_top_k(r, k);
    for (int i = 0; i < h; ++i) {
      worst = std::max(worst,
                       std::abs(g.gate.at(i) - hard.keep[static_cast<size_t>(i)]));
    }
  }
  report("A2", worst < 1e-3,
         "hard-limit agreement: max |soft-hard| = " + format_g6(worst) +
             " over 500 trials");
}

// A3: Monte-Carlo subset frequencies match the permutation-sum probabilities.
void criterion_a3() {
  auto start = std::chrono::steady_clock::now();
  OracleCheckResult random_case = oracle_check(5, 2, 200000, 31337);
  std::vector<double> iota = {1.0, 2.0, 3.0};
  OracleCheckResult named =
      oracle_check(ImportanceWeights::from_importances(iota), 2, 200000, 424242);
  double freq_23 = 0.0;
  for (size_t i = 0; i < named.subsets.size(); ++i) {
    if (named.subsets[i] == std::vector<int>{1, 2}) freq_23 = named.empirical[i];
  }
  double elapsed = seconds_since(start);
  bool pass = random_case.tv_distance < 0.01 &&
              std::abs(freq_23 - 7.0 / 12.0) < 0.01 && elapsed < 30.0;
  report("A3", pass,
         "sampling w/o replacement: TV = " + format_g6(random_case.tv_distance) +
             ", P({iota=2,iota=3}) = " + format_g6(freq_23) + " (exact 7/12), " +
             format_g6(elapsed) + " s (limit 30 s)");
}

// A4: relaxation gradients match finite differences at several temperatures.
void criterion_a4() {
  Rng rng(40404);
  double worst = 0.0;
  std::vector<double> noise = sample_gumbel(8, rng);
  Tensor noise_t = Tensor::from_data({8}, noise);
  std::vector<double> probe(8);
  for (double& v : probe) v = rng.uniform_in(0.5, 1.5);
  Tensor probe_t = Tensor::from_data({8}, probe);
  for (double tau : {0.5, 1.0, 5.0}) {
    for (int k : {1, 3, 5}) {
      auto f = [&](const Tensor& w) {
        GateVector g = soft_top_k(add(w, noise_t), k, tau);
        return sum(mul(g.gate, probe_t));
      };
      std::vector<double> w0(8);
      for (double& v : w0) v = rng.uniform_in(-1.0, 1.0);
      worst = std::max(worst,
                       finite_difference_check(f, Tensor::from_data({8}, w0), 1e-6));
    }
  }
  report("A4", worst < 1e-4,
         "relaxation gradients: max relative error = " + format_g6(worst) +
             " over tau in {0.5, 1, 5}");
}

// A5: full toy-model loss gradients (parameters and gates) match finite
// differences on a d=8 single-layer instance.
void criterion_a5() {
  ModelConfig config;
  config.task = TaskKind::classifier;
  config.enc_layers = 1;
  config.dec_layers = 0;
  config.heads_per_layer = 2;
  config.d_model = 8;
  config.d_head = 4;
  config.vocab = 6;
  config.max_seq = 6;
  Rng rng(50505);
  GatedTransformer model = build_model(config, rng);
  std::vector<int> tokens = {2, 3, 4, 2};
  int label = 1;
  Tensor gates = ones_gates(model.total_heads());
  auto loss_fn = [&]() {
    Tensor logits = model.classifier_logits(tokens, gates);
    return cross_entropy_rows(logits, std::span<const int>(&label, 1));
  };

  auto params = model.parameters();
  zero_grads(params);
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> grads;
  for (auto& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(static_cast<size_t>(p.size()), 0.0);
    }
  }
  zero_grads(params);
  model.set_requires_grad(false);
  const double h = 1e-5;
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto values = p.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      double saved = values[i];
      values[i] = saved + h;
      double up = loss_fn().item();
      values[i] = saved - h;
      double down = loss_fn().item();
      values[i] = saved;
      double fd = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - grads[pi][i]) /
                                  (std::abs(grads[pi][i]) + 1e-12));
    }
  }
  auto gate_loss = [&](const Tensor& g) {
    Tensor logits = model.classifier_logits(tokens, g);
    return cross_entropy_rows(logits, std::span<const int>(&label, 1));
  };
  worst = std::max(worst, finite_difference_check(gate_loss, gates, 1e-5));
  model.set_requires_grad(true);
  report("A5", worst < 1e-3,
         "model gradients: max relative error = " + format_g6(worst));
}

// A6: masked and compacted forwards agree; compaction strictly shrinks.
void criterion_a6() {
  ModelConfig config;
  config.task = TaskKind::seq2seq;
  config.enc_layers = 2;
  config.dec_layers = 2;
  config.heads_per_layer = 4;
  config.d_model = 32;
  config.d_head = 8;
  config.vocab = 10;
  config.max_seq = 8;
  Rng rng(60606);
  GatedTransformer model = build_model(config, rng);
  int h = model.total_heads();
  std::vector<int> src = {2, 3, 4, 5, 6, 7};
  std::vector<int> tgt_in = {1, 2, 3, 4, 5, 6};
  double worst = 0.0;
  bool sizes_ok = true;
  Rng mask_rng(999);
  int64_t per_head = static_cast<int64_t>(3) * config.d_model * config.head_width() +
                     static_cast<int64_t>(config.head_width()) * config.d_model;
  int64_t full = model.parameter_count();
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<uint8_t> keep(static_cast<size_t>(h));
    for (auto& b : keep) b = mask_rng.uniform() < 0.5 ? 1 : 0;
    HeadMask mask{keep};
    GatedTransformer small = compact(model, mask);
    sizes_ok = sizes_ok &&
               small.parameter_count() == full - per_head * (h - mask.count());
    if (mask.count() < h) sizes_ok = sizes_ok && small.parameter_count() < full;
    Tensor masked = model.decode_logits(src, tgt_in, gates_from_mask(mask));
    Tensor compacted =
        small.decode_logits(src, tgt_in, ones_gates(small.total_heads()));
    for (int64_t i = 0; i < masked.size(); ++i) {
      worst = std::max(worst, std::abs(masked.at(i) - compacted.at(i)));
    }
  }
  report("A6", worst < 1e-6 && sizes_ok,
         "compaction equivalence: max |masked-compacted| = " + format_g6(worst) +
             std::string(sizes_ok ? ", parameter counts strictly decrease"
                                  : ", PARAMETER COUNT MISMATCH"));
}

// A7: desk-scale sweep on the reversal task: unpruned quality, joint DSP
// at half the heads within 2 points, and the method ordering at K = 3.
void criterion_a7() {
  auto start = std::chrono::steady_clock::now();
  ExperimentConfig config = reversal_reference();
  std::filesystem::remove_all(config.out_dir);
  int jobs = static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min(jobs, 4));

  ExperimentConfig half = config;
  half.k_list = {12};
  auto records_half = run_sweep(half, {"none", "joint-dsp"}, jobs);
  ExperimentConfig sparse = config;
  sparse.k_list = {3};
  auto records_sparse = run_sweep(sparse, {"joint-dsp", "ste", "michel"}, jobs);

  auto collect = [](const std::vector<SweepRecord>& records,
                    const std::string& method, int k) {
    std::vector<double> values;
    for (const auto& r : records) {
      if (r.method == method && r.k == k) values.push_back(r.metric_post);
    }
    return values;
  };
  double unpruned = median(collect(records_half, "none", config.model.total_heads()));
  double joint12 = median(collect(records_half, "joint-dsp", 12));
  double joint3 = median(collect(records_sparse, "joint-dsp", 3));
  double ste3 = median(collect(records_sparse, "ste", 3));
  double michel3 = median(collect(records_sparse, "michel", 3));
  double elapsed = seconds_since(start);

  bool pass = unpruned >= 0.95 && joint12 >= unpruned - 0.02 &&
              joint3 >= ste3 && joint3 > michel3 && elapsed <= 1800.0;
  report("A7", pass,
         "desk-scale sweep (median of 3 seeds): unpruned = " + format_g6(unpruned) +
             ", joint@12 = " + format_g6(joint12) + ", joint@3 = " + format_g6(joint3) +
             ", ste@3 = " + format_g6(ste3) + ", michel@3 = " + format_g6(michel3) +
             ", " + format_g6(elapsed) + " s (limit 1800 s)");
}

// A8: Hard Concrete open probability, closed form vs Monte Carlo.
void criterion_a8() {
  double worst = 0.0;
  for (double phi : {-4.0, 0.0, 4.0}) {
    Tensor phi_t = Tensor::full({1}, phi);
    Rng rng(substream_seed(80808 + static_cast<uint64_t>(phi * 1000.0),
                           Stream::concrete));
    const int draws = 100000;
    int nonzero = 0;
    for (int i = 0; i < draws; ++i) {
      if (hard_concrete_gates(phi_t, 2.0 / 3.0, -0.1, 1.1, rng).at(0) != 0.0) {
        ++nonzero;
      }
    }
    double closed = hard_concrete_open_probability(phi, 2.0 / 3.0, -0.1, 1.1);
    worst = std::max(worst,
                     std::abs(static_cast<double>(nonzero) / draws - closed));
  }
  report("A8", worst < 0.01,
         "hard concrete: max |MC - closed form| = " + format_g6(worst) +
             " across phi in {-4, 0, 4}");
}

// A9: the straight-through contract.
void criterion_a9() {
  ModelConfig config;
  config.task = TaskKind::classifier;
  config.enc_layers = 1;
  config.dec_layers = 0;
  config.heads_per_layer = 4;
  config.d_model = 16;
  config.d_head = 4;
  config.vocab = 8;
  config.max_seq = 8;
  Rng rng(90909);
  GatedTransformer model = build_model(config, rng);
  Dataset data = gen_needle_data(11, 32, config.vocab, 6);
  int h = model.total_heads();
  Tensor w = Tensor::from_data({h}, {0.4, -0.1, 0.2, 0.0}, true);
  std::vector<int> batch = {0, 1, 2, 3, 4, 5, 6, 7};

  Rng noise(321);
  double ste_loss;
  HeadMask mask;
  {
    Tape tape;
    auto result = ste_step(model, w, data, batch, 2, noise);
    ste_loss = result.loss;
    mask = result.mask;
  }
  std::vector<double> w_grad(w.grad().begin(), w.grad().end());
  w.zero_grad();
  zero_grads(model.parameters());

  GatedTransformer small = compact(model, mask);
  double compact_loss =
      batch_loss(small, data, batch, ones_gates(small.total_heads())).item();

  model.set_requires_grad(false);
  Tensor gate_probe = gates_from_mask(mask);
  gate_probe.node()->requires_grad = true;
  {
    Tape tape;
    Tensor loss = batch_loss(model, data, batch, gate_probe);
    tape.backward(loss);
  }
  model.set_requires_grad(true);
  bool grads_equal = true;
  for (int i = 0; i < h; ++i) {
    grads_equal = grads_equal &&
                  w_grad[static_cast<size_t>(i)] == gate_probe.grad()[static_cast<size_t>(i)];
  }
  bool pass = std::abs(ste_loss - compact_loss) < 1e-6 && grads_equal;
  report("A9", pass,
         "straight-through: |loss - compacted| = " +
             format_g6(std::abs(ste_loss - compact_loss)) +
             std::string(grads_equal ? ", grad(w) == dL/dg exactly"
                                     : ", GRADIENT MISMATCH"));
}

// A10: annealing schedule endpoints and midpoint.
void criterion_a10() {
  TemperatureSchedule schedule(1000.0, 1e-8, 25000);
  bool ends = temperature_at(schedule, 0) == 1000.0 &&
              temperature_at(schedule, 25000) == 1e-8 &&
              temperature_at(schedule, 400000) == 1e-8;
  double mid = temperature_at(schedule, 12500);
  double expected = std::pow(10.0, -2.5);
  double mid_err = std::abs(mid - expected) / expected;
  bool pass = ends && mid_err < 1e-12;
  report("A10", pass,
         "schedule: endpoints exact, midpoint rel. err = " + format_g6(mid_err));
}

// A11: compacted-model wallclock is non-increasing in pruned fraction.
void criterion_a11() {
  ExperimentConfig config = reversal_reference();
  auto records = run_bench(config, 12345, {0.0, 0.25, 0.5, 0.75}, 100);
  bool monotone = true;
  for (size_t i = 1; i < records.size(); ++i) {
    double slack = std::max(records[i - 1].fwd_us_iqr, records[i].fwd_us_iqr);
    if (records[i].fwd_us_median > records[i - 1].fwd_us_median + slack) {
      monotone = false;
    }
  }
  double speedup_50 = records[2].speedup_pct;
  std::string detail = "speedup trend: medians us = {";
  for (size_t i = 0; i < records.size(); ++i) {
    if (i) detail += ", ";
    detail += format_g6(records[i].fwd_us_median);
  }
  detail += "}, speedup@50% = " + format_g6(speedup_50) + "%";
  report("A11", monotone && speedup_50 > 0.0, detail);
}

ExperimentConfig dynamics_reference() {
  ExperimentConfig config;
  config.task = "needle-classification";
  config.model.task = TaskKind::classifier;
  config.model.enc_layers = 2;
  config.model.dec_layers = 0;
  config.model.heads_per_layer = 8;
  config.model.d_model = 32;
  config.model.d_head = 4;
  config.model.vocab = 8;
  config.model.max_seq = 12;
  config.pruner = "joint-dsp";
  config.k_list = {8};
  config.schedule = TemperatureSchedule(10.0, 1e-8, 1);
  config.auto_cooldown = true;  // cools over 80% of the run
  config.lr = 0.15;
  config.lr_w = 0.5;
  config.epochs = 2;
  config.batch_size = 1;  // per-example updates keep the control churning
  config.train_size = 512;
  config.eval_size = 128;
  config.seq_len = 12;
  config.eval_every = 256;
  config.seeds = {1};
  config.out_dir = "acceptance_out";
  return config;
}

// A12: with annealing the selection reaches and holds 100% eventual keep
// over the final fifth of training; the constant-temperature control does
// not hold it.
void criterion_a12() {
  ExperimentConfig config = dynamics_reference();
  DynamicsResult annealed = run_dynamics(config, 1, true);
  DynamicsResult control = run_dynamics(config, 1, false);
  auto holds_final_fifth = [](const DynamicsResult& result) {
    size_t n = result.records.size();
    size_t from = n - n / 5;
    for (size_t i = from; i < n; ++i) {
      if (result.records[i].eventual_keep_pct != 100.0) return false;
    }
    return true;
  };
  bool annealed_holds = holds_final_fifth(annealed);
  bool control_holds = holds_final_fifth(control);
  bool pass = annealed_holds && !control_holds;
  report("A12", pass,
         std::string("dynamics: annealed holds 100% over the final 20%: ") +
             (annealed_holds ? "yes" : "NO") +
             ", constant-temperature control holds: " +
             (control_holds ? "YES (should fluctuate)" : "no"));
}

}  // namespace

int main() {
  auto start = std::chrono::steady_clock::now();
  criterion_a1();
  criterion_a2();
  criterion_a3();
  criterion_a4();
  criterion_a5();
  criterion_a6();
  criterion_a8();
  criterion_a9();
  criterion_a10();
  criterion_a11();
  criterion_a12();
  criterion_a7();
  std::printf("acceptance finished in %.1f s with %d failure(s)\n",
              seconds_since(start), g_failures);
  return g_failures;
}

