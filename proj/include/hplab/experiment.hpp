#pragma once

#include <optional>
#include <string>

#include "hplab/pruners.hpp"

namespace hplab {

// Full description of a training/pruning run. Parsed from strict JSON:
// unknown keys are rejected at every level.
struct ExperimentConfig {
  std::string task = "needle-classification";
  ModelConfig model;
  std::string pruner = "none";
  std::vector<int> k_list;
  std::vector<double> lambda_list;
  TemperatureSchedule schedule{10.0, 1e-8, 1};
  bool auto_cooldown = true;  // cooldown_steps given as 0 in the config
  double lr = 0.1;
  double lr_w = 0.5;
  int epochs = 10;         // total training budget
  int warmup_epochs = 0;   // dense epochs before joint pruning engages
  int batch_size = 8;
  int train_size = 1024;
  int eval_size = 256;
  int seq_len = 8;
  int finetune_steps = 0;
  int eval_every = 100;
  std::string importance_data = "eval";  // "eval" | "train"
  std::vector<uint64_t> seeds = {1};
  std::string out_dir = "out";

  void validate() const;
};

ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& config);

// Six-significant-digit float formatting used for all emitted records.
std::string format_g6(double value);

struct TrainResult {
  double final_train_loss = 0.0;
  double eval_metric = 0.0;
  PruningOutcome outcome;  // mask is all-ones when pruner == none
  GatedTransformer model;  // post-training parameters
};

// Runs the configured regime for one seed (and, for pruning regimes, the
// first entry of k_list / lambda_list).
TrainResult run_training(const ExperimentConfig& config, uint64_t seed);

struct SweepRecord {
  std::string method;
  int k = 0;
  uint64_t seed = 0;
  double metric_pre = 0.0;
  double metric_post = 0.0;
  int64_t params = 0;
  double fwd_us = 0.0;
};

// One train/prune/finetune cycle per (method, k, seed). Appends to
// <out_dir>/sweep.csv, skipping keys already present, and writes one
// outcome JSON line per cell. Cells may run on `jobs` worker threads;
// results merge in key order.
std::vector<SweepRecord> run_sweep(const ExperimentConfig& config,
                                   const std::vector<std::string>& methods,
                                   int jobs = 1);

// Head-count trace as a function of the L0 regularization coefficient.
struct LambdaRecord {
  double lambda = 0.0;
  uint64_t seed = 0;
  int unpruned_heads = 0;
  double metric = 0.0;
};
std::vector<LambdaRecord> run_lambda_sweep(const ExperimentConfig& config);

struct BenchRecord {
  double pruned_fraction = 0.0;
  int kept_heads = 0;
  int64_t params = 0;
  double fwd_us_median = 0.0;
  double fwd_us_iqr = 0.0;
  double speedup_pct = 0.0;    // vs the unpruned row
  double shrinkage_pct = 0.0;  // parameter-count reduction vs unpruned
  bool stable = true;          // IQR within 20% of the median
};

// Compacted-model forward wallclock and size across pruning levels.
std::vector<BenchRecord> run_bench(const ExperimentConfig& config, uint64_t seed,
                                   const std::vector<double>& pruned_fractions,
                                   int reps = 100);

struct DynamicsRecord {
  int64_t step = 0;
  double tau = 0.0;
  double eventual_keep_pct = 0.0;
  std::optional<double> metric;
};

struct DynamicsResult {
  std::vector<DynamicsRecord> records;
  HeadMask final_mask;
  double final_metric = 0.0;
};

// Joint-DSP run that tracks, per step, how much of the eventual subset is
// already selected. `anneal` false holds the temperature at tau_ini.
DynamicsResult run_dynamics(const ExperimentConfig& config, uint64_t seed,
                            bool anneal);

std::vector<DynamicsRecord> eventual_keep_trace(
    const std::vector<StepLog>& history, const HeadMask& final_mask);

struct OracleCheckResult {
  int heads = 0;
  int k = 0;
  int64_t samples = 0;
  double tv_distance = 0.0;
  std::vector<double> exact;      // per subset, lexicographic by member set
  std::vector<double> empirical;
  std::vector<std::vector<int>> subsets;
};

// Monte-Carlo subset frequencies from Gumbel hard top-k against the exact
// permutation-sum probabilities.
OracleCheckResult oracle_check(const ImportanceWeights& weights, int k,
                               int64_t samples, uint64_t seed);
OracleCheckResult oracle_check(int heads, int k, int64_t samples, uint64_t seed);

struct HeadDistribution {
  // One row per (type, layer): kept count and capacity.
  struct Row {
    HeadType type;
    int layer = 0;
    int kept = 0;
    int capacity = 0;
  };
  std::vector<Row> rows;
  int total_kept = 0;
};

HeadDistribution report_head_distribution(const HeadMask& mask,
                                          const ModelConfig& config);
std::string head_distribution_table(const HeadDistribution& dist);

// Output writers (UTF-8, LF, 6-significant-digit floats).
void write_sweep_csv(const std::string& path, const std::vector<SweepRecord>& records);
void append_sweep_csv(const std::string& path, const std::vector<SweepRecord>& records);
std::vector<std::string> existing_sweep_keys(const std::string& path);
void write_bench_csv(const std::string& path, const std::vector<BenchRecord>& records);
void write_dynamics_jsonl(const std::string& path, const DynamicsResult& result);
void append_outcome_jsonl(const std::string& path, const PruningOutcome& outcome,
                          const std::string& method);

}  // namespace hplab
