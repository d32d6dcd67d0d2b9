#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hplab/experiment.hpp"

using namespace hplab;

namespace {

ExperimentConfig load_with_overrides(const std::string& config_path,
                                     bool have_seed, uint64_t seed,
                                     const std::string& out_dir,
                                     const std::string& method,
                                     const std::vector<int>& k_list,
                                     const std::vector<double>& lambda_list) {
  ExperimentConfig config = load_config(config_path);
  if (have_seed) config.seeds = {seed};
  if (!out_dir.empty()) config.out_dir = out_dir;
  if (!method.empty()) config.pruner = method;
  if (!k_list.empty()) config.k_list = k_list;
  if (!lambda_list.empty()) config.lambda_list = lambda_list;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hplab: attention-head subset pruning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  bool have_seed = false;
  std::string out_dir;
  std::vector<std::string> methods;
  std::vector<int> k_list;
  std::vector<double> lambda_list;

  auto add_common = [&](CLI::App* cmd, bool need_config) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config JSON");
    if (need_config) opt->required();
    cmd->add_option("--seed", seed, "master seed override")
        ->each([&](const std::string&) { have_seed = true; });
    cmd->add_option("--out", out_dir, "output directory override");
  };

  CLI::App* train = app.add_subcommand("train", "run one training/pruning cycle");
  add_common(train, true);
  std::string train_method;
  train->add_option("--method", train_method, "pruner override");
  train->add_option("--k", k_list, "target head-count list override");
  train->add_option("--lambda", lambda_list, "L0 coefficient list override");

  CLI::App* sweep = app.add_subcommand("sweep", "sparsity-performance sweep");
  add_common(sweep, true);
  sweep->add_option("--method", methods, "methods to sweep (repeatable)");
  sweep->add_option("--k", k_list, "target head counts");
  sweep->add_option("--lambda", lambda_list, "L0 coefficients (lambda sweep mode)");
  int jobs = 1;
  sweep->add_option("--jobs", jobs, "concurrent sweep cells");

  CLI::App* bench = app.add_subcommand("bench", "compaction wallclock benchmark");
  add_common(bench, true);
  int bench_reps = 100;
  bench->add_option("--reps", bench_reps, "timing repetitions per mask");

  CLI::App* dynamics = app.add_subcommand("dynamics", "joint-DSP training dynamics");
  add_common(dynamics, true);
  bool no_annealing = false;
  dynamics->add_flag("--no-annealing", no_annealing, "hold temperature at tau_ini");

  CLI::App* oracle = app.add_subcommand("oracle-check",
                                        "sampling distribution vs exact subset probabilities");
  int oracle_heads = 5;
  int oracle_k = 2;
  int64_t oracle_samples = 200000;
  uint64_t oracle_seed = 7;
  oracle->add_option("--heads", oracle_heads, "number of heads (<= 10)");
  oracle->add_option("--k", oracle_k, "subset size (<= 8)");
  oracle->add_option("--samples", oracle_samples, "Monte-Carlo draws (>= 10^4)");
  oracle->add_option("--seed", oracle_seed, "sampling seed");

  CLI::App* report = app.add_subcommand("report", "per-layer head distribution");
  add_common(report, true);
  std::string mask_bits;
  report->add_option("--mask", mask_bits, "keep mask as a 0/1 bit-string")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      ExperimentConfig config = load_with_overrides(
          config_path, have_seed, seed, out_dir, train_method, k_list, lambda_list);
      std::filesystem::create_directories(config.out_dir);
      for (uint64_t s : config.seeds) {
        TrainResult result = run_training(config, s);
        std::string checkpoint =
            config.out_dir + "/model_seed" + std::to_string(s) + ".json";
        save_checkpoint(result.model, result.outcome.mask, checkpoint);
        append_outcome_jsonl(config.out_dir + "/outcomes.jsonl", result.outcome,
                             config.pruner);
        std::printf("seed %llu: metric %s, final train loss %s, checkpoint %s\n",
                    static_cast<unsigned long long>(s),
                    format_g6(result.eval_metric).c_str(),
                    format_g6(result.final_train_loss).c_str(),
                    checkpoint.c_str());
      }
    } else if (*sweep) {
      ExperimentConfig config = load_with_overrides(config_path, have_seed, seed,
                                                    out_dir, "", k_list, lambda_list);
      if (!lambda_list.empty() ||
          (config.pruner == "voita" && config.k_list.empty())) {
        auto records = run_lambda_sweep(config);
        std::printf("lambda sweep: %zu records -> %s/lambda_sweep.csv\n",
                    records.size(), config.out_dir.c_str());
      } else {
        std::vector<std::string> use_methods =
            methods.empty() ? std::vector<std::string>{config.pruner} : methods;
        auto records = run_sweep(config, use_methods, jobs);
        std::printf("sweep: %zu records -> %s/sweep.csv\n", records.size(),
                    config.out_dir.c_str());
      }
    } else if (*bench) {
      ExperimentConfig config = load_with_overrides(config_path, have_seed, seed,
                                                    out_dir, "", {}, {});
      uint64_t bench_seed = config.seeds.front();
      auto records = run_bench(config, bench_seed, {0.0, 0.25, 0.5, 0.75}, bench_reps);
      std::filesystem::create_directories(config.out_dir);
      write_bench_csv(config.out_dir + "/bench.csv", records);
      for (const auto& r : records) {
        std::printf("pruned %5.1f%%: %5d heads kept, %8lld params, %10s us (speedup %s%%)%s\n",
                    100.0 * r.pruned_fraction, r.kept_heads,
                    static_cast<long long>(r.params),
                    format_g6(r.fwd_us_median).c_str(),
                    format_g6(r.speedup_pct).c_str(),
                    r.stable ? "" : "  [unstable]");
      }
    } else if (*dynamics) {
      ExperimentConfig config = load_with_overrides(config_path, have_seed, seed,
                                                    out_dir, "", {}, {});
      uint64_t run_seed = config.seeds.front();
      DynamicsResult result = run_dynamics(config, run_seed, !no_annealing);
      std::filesystem::create_directories(config.out_dir);
      std::string path = config.out_dir +
                         (no_annealing ? "/dynamics_const.jsonl" : "/dynamics.jsonl");
      write_dynamics_jsonl(path, result);
      std::printf("dynamics: %zu steps, final metric %s -> %s\n",
                  result.records.size(), format_g6(result.final_metric).c_str(),
                  path.c_str());
    } else if (*oracle) {
      OracleCheckResult result =
          oracle_check(oracle_heads, oracle_k, oracle_samples, oracle_seed);
      std::printf("H=%d K=%d samples=%lld  TV distance %s\n", result.heads,
                  result.k, static_cast<long long>(result.samples),
                  format_g6(result.tv_distance).c_str());
      for (size_t i = 0; i < result.subsets.size(); ++i) {
        std::string members;
        for (int m : result.subsets[i]) {
          if (!members.empty()) members += " ";
          members += std::to_string(m);
        }
        std::printf("  {%s}: exact %s, empirical %s\n", members.c_str(),
                    format_g6(result.exact[i]).c_str(),
                    format_g6(result.empirical[i]).c_str());
      }
    } else if (*report) {
      ExperimentConfig config = load_with_overrides(config_path, have_seed, seed,
                                                    out_dir, "", {}, {});
      HeadMask mask = HeadMask::from_bits(mask_bits);
      HeadDistribution dist = report_head_distribution(mask, config.model);
      std::printf("%s", head_distribution_table(dist).c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
