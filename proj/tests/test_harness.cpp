#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hplab/experiment.hpp"

using namespace hplab;

namespace {

const char* kClassifierConfig = R"json({
  "task": "needle-classification",
  "model": {"enc_layers": 1, "dec_layers": 0, "heads_per_layer": 4,
            "d_model": 16, "d_head": 4, "vocab": 8, "max_seq": 10},
  "pruner": "none",
  "k_list": [4],
  "schedule": {"tau_ini": 2.0, "tau_end": 1e-6, "cooldown_steps": 0},
  "lr": 0.15, "lr_w": 0.5,
  "epochs": 2, "batch_size": 8,
  "train_size": 128, "eval_size": 64, "seq_len": 8,
  "seeds": [5],
  "out_dir": "harness_test_out"
})json";

struct TempDir {
  std::string path;
  explicit TempDir(std::string p) : path(std::move(p)) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("needle data generation") {
  Dataset a = gen_needle_data(42, 200, 8, 10);
  Dataset b = gen_needle_data(42, 200, 8, 10);
  REQUIRE(a.size() == 200);
  for (int i = 0; i < a.size(); ++i) {
    CHECK(a.examples[static_cast<size_t>(i)].tokens ==
          b.examples[static_cast<size_t>(i)].tokens);
    CHECK(a.examples[static_cast<size_t>(i)].label ==
          b.examples[static_cast<size_t>(i)].label);
  }

  int positives = 0;
  for (const auto& ex : a.examples) {
    int needles = 0;
    for (int t : ex.tokens) needles += t == kNeedleToken ? 1 : 0;
    CHECK(ex.label == (needles >= 2 ? 1 : 0));
    if (needles == 0) CHECK(ex.label == 0);
    positives += ex.label;
  }
  // Classes balanced within 2%, so the majority baseline sits near 50%.
  double positive_rate = static_cast<double>(positives) / a.size();
  CHECK(std::abs(positive_rate - 0.5) <= 0.02);

  CHECK_THROWS_AS(gen_needle_data(1, 100, 3, 10), DomainError);
  CHECK_THROWS_AS(gen_needle_data(1, 100, 8, 3), DomainError);
  CHECK_THROWS_AS(gen_needle_data(1, 1, 8, 10), DomainError);
}

TEST_CASE("reversal data generation") {
  Dataset data = gen_reversal_data(7, 50, 10, 6);
  for (const auto& pair : data.pairs) {
    std::vector<int> reversed(pair.src.rbegin(), pair.src.rend());
    CHECK(pair.tgt == reversed);
  }
  // A palindrome source maps to itself.
  bool found_palindrome = false;
  for (const auto& pair : data.pairs) {
    std::vector<int> reversed(pair.src.rbegin(), pair.src.rend());
    if (pair.src == reversed) {
      found_palindrome = true;
      CHECK(pair.tgt == pair.src);
    }
  }
  (void)found_palindrome;

  // The copy (non-reversing) baseline scores about 1/|payload| per position
  // on positions that move.
  Dataset big = gen_reversal_data(11, 400, 12, 16);
  int64_t hits = 0, total = 0;
  for (const auto& pair : big.pairs) {
    for (size_t t = 0; t < pair.src.size(); ++t) {
      hits += pair.src[t] == pair.tgt[t] ? 1 : 0;
      ++total;
    }
  }
  double copy_accuracy = static_cast<double>(hits) / static_cast<double>(total);
  CHECK(copy_accuracy < 2.0 / 10.0);  // payload alphabet has 10 symbols
}

TEST_CASE("config parsing is strict") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  CHECK(config.model.total_heads() == 4);
  CHECK(config.auto_cooldown);
  CHECK(config.schedule.tau_ini == 2.0);

  CHECK_THROWS_AS(config_from_json_text(R"({"task": "needle-classification",
      "model": {"enc_layers": 1}, "bogus_key": 1})"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json_text(R"({"task": "needle-classification",
      "model": {"enc_layers": 1, "who": 2}})"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json_text(R"({"model": {"enc_layers": 1}})"),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json_text(R"({"task": "interpretive-dance",
      "model": {"enc_layers": 1}})"),
                  ConfigError);
  // k outside [1, H] rejected.
  CHECK_THROWS_AS(config_from_json_text(R"json({
      "task": "needle-classification",
      "model": {"enc_layers": 1, "heads_per_layer": 4, "d_model": 16,
                "d_head": 4, "vocab": 8, "max_seq": 10},
      "k_list": [9]})json"),
                  ConfigError);

  // Round trip through the emitter.
  ExperimentConfig again = config_from_json_text(config_to_json_text(config));
  CHECK(again.model.d_model == config.model.d_model);
  CHECK(again.schedule.tau_ini == config.schedule.tau_ini);
  CHECK(again.seeds == config.seeds);
}

TEST_CASE("training smoke test: loss decreases and runs reproduce") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  TempDir tmp(config.out_dir);
  TrainResult first = run_training(config, 5);
  TrainResult second = run_training(config, 5);
  CHECK(first.final_train_loss == second.final_train_loss);  // bit-for-bit
  CHECK(first.eval_metric == second.eval_metric);
  CHECK(first.final_train_loss < std::log(2.0));  // below the chance level
}

TEST_CASE("unpruned needle classifier trains past 97% validation accuracy") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  config.model.enc_layers = 2;
  config.model.d_model = 32;
  config.model.d_head = 8;
  config.model.max_seq = 12;
  config.epochs = 10;
  config.train_size = 1024;
  config.eval_size = 256;
  config.seq_len = 12;
  TempDir tmp(config.out_dir);
  TrainResult result = run_training(config, 1);
  CHECK(result.eval_metric >= 0.97);
}

TEST_CASE("a non-finite parameter aborts the next forward pass") {
  // An overflowed update is caught at the first operation that touches it,
  // which is what turns divergence into a diagnostic instead of NaN output.
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  Rng init(substream_seed(1, Stream::init));
  ModelConfig mc = config.model;
  mc.task = TaskKind::classifier;
  GatedTransformer model = build_model(mc, init);
  model.cls_w.mutable_data()[0] = HUGE_VAL;
  std::vector<int> tokens = {2, 3, 4, 5};
  CHECK_THROWS_AS(model.classifier_logits(tokens, ones_gates(model.total_heads())),
                  NumericError);
}

TEST_CASE("sweep csv is append-only and idempotent per key") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  config.epochs = 1;
  config.train_size = 64;
  config.eval_size = 32;
  TempDir tmp(config.out_dir);

  auto first = run_sweep(config, {"ste"}, 1);
  CHECK(first.size() == 1);
  auto csv_before = existing_sweep_keys(config.out_dir + "/sweep.csv");
  CHECK(csv_before.size() == 1);

  // Re-running does not duplicate rows.
  auto second = run_sweep(config, {"ste"}, 1);
  CHECK(second.size() == 1);
  auto csv_after = existing_sweep_keys(config.out_dir + "/sweep.csv");
  CHECK(csv_after.size() == 1);

  // A new method appends while existing rows stay put.
  auto third = run_sweep(config, {"ste", "michel"}, 1);
  CHECK(third.size() == 2);
  auto csv_final = existing_sweep_keys(config.out_dir + "/sweep.csv");
  CHECK(csv_final.size() == 2);
}

TEST_CASE("oracle check") {
  // H = 3, K = 3: a single outcome, TV distance is exactly zero.
  std::vector<double> iota = {1.0, 2.0, 3.0};
  ImportanceWeights w = ImportanceWeights::from_importances(iota);
  OracleCheckResult certain = oracle_check(w, 3, 10000, 1);
  CHECK(certain.tv_distance < 1e-12);

  // iota = (1,2,3), K = 2: the {1,2} subset shows up 7/12 of the time.
  OracleCheckResult check12 = oracle_check(w, 2, 200000, 9);
  REQUIRE(check12.subsets.size() == 3);
  for (size_t i = 0; i < check12.subsets.size(); ++i) {
    if (check12.subsets[i] == std::vector<int>{1, 2}) {
      CHECK(std::abs(check12.empirical[i] - 7.0 / 12.0) < 0.01);
    }
  }
  CHECK(check12.tv_distance < 0.01);

  // Three-at-a-time sampling stays faithful as well.
  OracleCheckResult triple = oracle_check(5, 3, 200000, 21);
  CHECK(triple.tv_distance < 0.01);

  CHECK_THROWS_AS(oracle_check(w, 2, 5000, 1), DomainError);   // too few samples
  CHECK_THROWS_AS(oracle_check(12, 2, 20000, 1), DomainError); // H guard
}

TEST_CASE("head distribution report") {
  ModelConfig config;
  config.task = TaskKind::seq2seq;
  config.enc_layers = 2;
  config.dec_layers = 2;
  config.heads_per_layer = 4;
  config.d_model = 32;
  config.d_head = 8;
  config.vocab = 8;
  config.max_seq = 8;

  HeadMask all = HeadMask::ones(config.total_heads());
  HeadDistribution full = report_head_distribution(all, config);
  REQUIRE(full.rows.size() == 6);  // 2 enc-self + 2 dec-self + 2 cross
  for (const auto& row : full.rows) CHECK(row.kept == 4);
  CHECK(full.total_kept == 24);

  Rng rng(3);
  std::vector<uint8_t> bits(24);
  for (auto& b : bits) b = rng.uniform() < 0.4 ? 1 : 0;
  HeadMask random_mask{bits};
  HeadDistribution dist = report_head_distribution(random_mask, config);
  int sum = 0;
  for (const auto& row : dist.rows) sum += row.kept;
  CHECK(sum == random_mask.count());

  std::string table = head_distribution_table(dist);
  CHECK(table.find("encoder-self") != std::string::npos);
  CHECK(table.find("decoder-self") != std::string::npos);
  CHECK(table.find("cross") != std::string::npos);
}

TEST_CASE("bench records sizes and stays self-consistent") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  auto records = run_bench(config, 1, {0.0, 0.5}, 20);
  REQUIRE(records.size() == 2);
  CHECK(records[0].kept_heads == 4);
  CHECK(records[1].kept_heads == 2);
  CHECK(records[1].params < records[0].params);
  CHECK(records[0].speedup_pct == 0.0);
  CHECK(records[1].shrinkage_pct > 0.0);
}

TEST_CASE("voita lambda sweep produces head counts per coefficient") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  config.pruner = "voita";
  config.epochs = 1;
  config.train_size = 64;
  config.eval_size = 32;
  config.lambda_list = {0.001, 0.1};
  TempDir tmp(config.out_dir);
  auto records = run_lambda_sweep(config);
  REQUIRE(records.size() == 2);
  CHECK(records[0].lambda == 0.001);
  for (const auto& r : records) {
    CHECK(r.unpruned_heads >= 0);
    CHECK(r.unpruned_heads <= 4);
  }
  CHECK(std::filesystem::exists(config.out_dir + "/lambda_sweep.csv"));
}

TEST_CASE("voita head count is not monotone in the L0 coefficient") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  config.pruner = "voita";
  config.model.enc_layers = 2;
  config.model.heads_per_layer = 8;
  config.model.d_head = 4;
  config.model.d_model = 32;
  config.model.max_seq = 12;
  config.seq_len = 12;
  config.epochs = 8;
  config.train_size = 512;
  config.eval_size = 128;
  config.k_list = {};
  config.lambda_list = {0.18, 0.2, 0.25, 0.3, 0.4};
  config.seeds = {1};
  TempDir tmp(config.out_dir);
  auto records = run_lambda_sweep(config);
  REQUIRE(records.size() == 5);
  // Sparsity responds to lambda, but not monotonically: somewhere along the
  // grid the unpruned-head count goes back up.
  bool shrinks = records.front().unpruned_heads > records.back().unpruned_heads ||
                 records.front().unpruned_heads > records[3].unpruned_heads;
  bool non_monotone = false;
  for (size_t i = 1; i < records.size(); ++i) {
    if (records[i].unpruned_heads > records[i - 1].unpruned_heads) {
      non_monotone = true;
    }
  }
  CHECK(shrinks);
  CHECK(non_monotone);
}

TEST_CASE("dynamics trace ends at full eventual keep") {
  ExperimentConfig config = config_from_json_text(kClassifierConfig);
  config.pruner = "joint-dsp";
  config.k_list = {2};
  config.epochs = 2;
  config.train_size = 96;
  config.eval_size = 32;
  config.eval_every = 10;
  DynamicsResult result = run_dynamics(config, 5, true);
  REQUIRE(!result.records.empty());
  // The final step selection matches the final mask by construction.
  CHECK(result.records.back().eventual_keep_pct == 100.0);
  for (const auto& r : result.records) {
    CHECK(r.eventual_keep_pct >= 0.0);
    CHECK(r.eventual_keep_pct <= 100.0);
  }
  // Constant-w control: with lr_w = 0 the selection trace never moves.
  ExperimentConfig frozen = config;
  frozen.lr_w = 0.0;
  DynamicsResult flat = run_dynamics(frozen, 5, true);
  double first_keep = flat.records.front().eventual_keep_pct;
  for (const auto& r : flat.records) CHECK(r.eventual_keep_pct == first_keep);
}
