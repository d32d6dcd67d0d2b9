#include "hplab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace hplab {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::string& where,
                  std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

ModelConfig model_from_json(const json& j) {
  require_keys(j, "model",
               {"enc_layers", "dec_layers", "heads_per_layer", "d_model",
                "d_head", "vocab", "max_seq", "n_classes"});
  ModelConfig m;
  m.enc_layers = j.value("enc_layers", m.enc_layers);
  m.dec_layers = j.value("dec_layers", m.dec_layers);
  m.heads_per_layer = j.value("heads_per_layer", m.heads_per_layer);
  m.d_model = j.value("d_model", m.d_model);
  m.d_head = j.value("d_head", m.d_head);
  m.vocab = j.value("vocab", m.vocab);
  m.max_seq = j.value("max_seq", m.max_seq);
  m.n_classes = j.value("n_classes", m.n_classes);
  return m;
}

Dataset gen_task_data(const ExperimentConfig& config, uint64_t seed, int size) {
  TaskKind kind = task_from_name(config.task);
  if (kind == TaskKind::classifier) {
    return gen_needle_data(seed, size, config.model.vocab, config.seq_len);
  }
  return gen_reversal_data(seed, size, config.model.vocab, config.seq_len);
}

struct CellData {
  Dataset train;
  Dataset eval;
};

CellData make_cell_data(const ExperimentConfig& config, uint64_t seed) {
  return {gen_task_data(config, substream_seed(seed, Stream::data), config.train_size),
          gen_task_data(config, substream_seed(seed, Stream::eval_data), config.eval_size)};
}

DspOptions dsp_options_for(const ExperimentConfig& config, int k, uint64_t seed,
                           bool anneal = true) {
  DspOptions options;
  options.k = k;
  options.tau_ini = config.schedule.tau_ini;
  options.tau_end = config.schedule.tau_end;
  options.cooldown_steps = config.auto_cooldown ? 0 : config.schedule.cooldown_steps;
  options.anneal = anneal;
  options.lr_w = config.lr_w;
  options.lr_theta = config.lr;
  options.epochs = std::max(1, config.epochs - config.warmup_epochs);
  options.batch_size = config.batch_size;
  options.seed = seed;
  return options;
}

// Dense training phase before a joint regime engages; the total budget
// stays at config.epochs.
void warmup_model(const ExperimentConfig& config, GatedTransformer& model,
                  const Dataset& train, Rng& order_rng) {
  if (config.warmup_epochs > 0) {
    train_plain(model, train, config.warmup_epochs, config.lr,
                config.batch_size, order_rng);
  }
}

double first_lambda(const ExperimentConfig& config) {
  return config.lambda_list.empty() ? 0.01 : config.lambda_list.front();
}

// Median forward wallclock in microseconds over `reps` runs.
struct TimingStats {
  double median_us = 0.0;
  double iqr_us = 0.0;
};

TimingStats time_forward(const GatedTransformer& model,
                         std::span<const int> tokens,
                         std::span<const int> tgt_in, int reps, int warmup) {
  Tensor gates = ones_gates(model.total_heads());
  auto run_once = [&] {
    if (model.config.task == TaskKind::classifier) {
      model.classifier_logits(tokens, gates);
    } else {
      model.decode_logits(tokens, tgt_in, gates);
    }
  };
  for (int i = 0; i < warmup; ++i) run_once();
  std::vector<double> samples(static_cast<size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    auto start = std::chrono::steady_clock::now();
    run_once();
    auto stop = std::chrono::steady_clock::now();
    samples[static_cast<size_t>(i)] =
        std::chrono::duration<double, std::micro>(stop - start).count();
  }
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    double pos = q * (samples.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, samples.size() - 1);
    double frac = pos - lo;
    return samples[lo] * (1.0 - frac) + samples[hi] * frac;
  };
  return {quantile(0.5), quantile(0.75) - quantile(0.25)};
}

std::vector<int> bench_tokens(const ExperimentConfig& config, Rng& rng) {
  std::vector<int> tokens(static_cast<size_t>(std::min(config.seq_len, config.model.max_seq)));
  for (int& t : tokens) t = 2 + rng.below(config.model.vocab - 2);
  return tokens;
}

}  // namespace

void ExperimentConfig::validate() const {
  task_from_name(task);
  ModelConfig m = model;
  m.task = task_from_name(task);
  m.validate();
  pruner_from_name(pruner);
  int h = m.total_heads();
  for (int k : k_list) {
    if (k < 1 || k > h) throw ConfigError("config: k values must lie in [1, H]");
  }
  for (double l : lambda_list) {
    if (l < 0.0) throw ConfigError("config: lambda values must be non-negative");
  }
  if (lr <= 0.0) throw ConfigError("config: lr must be positive");
  if (lr_w < 0.0) throw ConfigError("config: lr_w must be non-negative");
  if (epochs < 1) throw ConfigError("config: epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("config: warmup_epochs must lie in [0, epochs)");
  }
  if (batch_size < 1) throw ConfigError("config: batch_size must be positive");
  if (train_size < 2 || eval_size < 2) throw ConfigError("config: dataset sizes must be at least 2");
  if (seq_len < 4) throw ConfigError("config: seq_len must be at least 4");
  if (seq_len > m.max_seq) throw ConfigError("config: seq_len exceeds model max_seq");
  if (finetune_steps < 0) throw ConfigError("config: finetune_steps must be non-negative");
  if (eval_every < 1) throw ConfigError("config: eval_every must be positive");
  if (importance_data != "eval" && importance_data != "train") {
    throw ConfigError("config: importance_data must be 'eval' or 'train'");
  }
  if (seeds.empty()) throw ConfigError("config: at least one seed required");
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  require_keys(j, "config",
               {"task", "model", "pruner", "k_list", "lambda_list", "schedule",
                "lr", "lr_w", "epochs", "warmup_epochs", "batch_size",
                "train_size", "eval_size", "seq_len", "finetune_steps",
                "eval_every", "importance_data", "seeds", "out_dir"});
  ExperimentConfig config;
  if (!j.contains("task")) throw ConfigError("config: missing 'task'");
  if (!j.contains("model")) throw ConfigError("config: missing 'model'");
  config.task = j.at("task").get<std::string>();
  config.model = model_from_json(j.at("model"));
  config.model.task = task_from_name(config.task);
  config.pruner = j.value("pruner", config.pruner);
  config.k_list = j.value("k_list", config.k_list);
  config.lambda_list = j.value("lambda_list", config.lambda_list);
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    require_keys(s, "schedule", {"tau_ini", "tau_end", "cooldown_steps"});
    double tau_ini = s.value("tau_ini", 10.0);
    double tau_end = s.value("tau_end", 1e-8);
    int64_t cooldown = s.value("cooldown_steps", int64_t{0});
    config.auto_cooldown = cooldown == 0;
    config.schedule = TemperatureSchedule(tau_ini, tau_end,
                                          config.auto_cooldown ? 1 : cooldown);
  }
  config.lr = j.value("lr", config.lr);
  config.lr_w = j.value("lr_w", config.lr_w);
  config.epochs = j.value("epochs", config.epochs);
  config.warmup_epochs = j.value("warmup_epochs", config.warmup_epochs);
  config.batch_size = j.value("batch_size", config.batch_size);
  config.train_size = j.value("train_size", config.train_size);
  config.eval_size = j.value("eval_size", config.eval_size);
  config.seq_len = j.value("seq_len", config.seq_len);
  config.finetune_steps = j.value("finetune_steps", config.finetune_steps);
  config.eval_every = j.value("eval_every", config.eval_every);
  config.importance_data = j.value("importance_data", config.importance_data);
  config.seeds = j.value("seeds", config.seeds);
  config.out_dir = j.value("out_dir", config.out_dir);
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return config_from_json_text(buffer.str());
}

std::string config_to_json_text(const ExperimentConfig& config) {
  json j;
  j["task"] = config.task;
  j["model"] = {{"enc_layers", config.model.enc_layers},
                {"dec_layers", config.model.dec_layers},
                {"heads_per_layer", config.model.heads_per_layer},
                {"d_model", config.model.d_model},
                {"d_head", config.model.d_head},
                {"vocab", config.model.vocab},
                {"max_seq", config.model.max_seq},
                {"n_classes", config.model.n_classes}};
  j["pruner"] = config.pruner;
  j["k_list"] = config.k_list;
  j["lambda_list"] = config.lambda_list;
  j["schedule"] = {{"tau_ini", config.schedule.tau_ini},
                   {"tau_end", config.schedule.tau_end},
                   {"cooldown_steps",
                    config.auto_cooldown ? 0 : config.schedule.cooldown_steps}};
  j["lr"] = config.lr;
  j["lr_w"] = config.lr_w;
  j["epochs"] = config.epochs;
  j["warmup_epochs"] = config.warmup_epochs;
  j["batch_size"] = config.batch_size;
  j["train_size"] = config.train_size;
  j["eval_size"] = config.eval_size;
  j["seq_len"] = config.seq_len;
  j["finetune_steps"] = config.finetune_steps;
  j["eval_every"] = config.eval_every;
  j["importance_data"] = config.importance_data;
  j["seeds"] = config.seeds;
  j["out_dir"] = config.out_dir;
  return j.dump(2);
}

std::string format_g6(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.6g", value);
  return buffer;
}

namespace {

struct CellResult {
  SweepRecord record;
  PruningOutcome outcome;
  GatedTransformer model;
};

CellResult run_cell(const ExperimentConfig& config, const std::string& method,
                    int k, uint64_t seed) {
  ExperimentConfig cfg = config;
  PrunerKind kind = pruner_from_name(method);
  CellData data = make_cell_data(cfg, seed);
  Rng init_rng(substream_seed(seed, Stream::init));
  GatedTransformer model = build_model(cfg.model, init_rng);
  int h = model.total_heads();
  Rng order_rng(substream_seed(seed, Stream::order));

  PruningOutcome outcome;
  HeadMask mask = HeadMask::ones(h);
  switch (kind) {
    case PrunerKind::none: {
      train_plain(model, data.train, cfg.epochs, cfg.lr, cfg.batch_size, order_rng);
      outcome.method = kind;
      outcome.k = h;
      break;
    }
    case PrunerKind::michel: {
      train_plain(model, data.train, cfg.epochs, cfg.lr, cfg.batch_size, order_rng);
      const Dataset& scoring =
          cfg.importance_data == "train" ? data.train : data.eval;
      int block = std::max(1, h / 10);
      auto masks = greedy_pipeline_prune(model, scoring, block, k);
      mask = masks.empty() ? HeadMask::ones(h) : masks.back();
      outcome.method = kind;
      outcome.k = k;
      break;
    }
    case PrunerKind::pipelined_dsp: {
      train_plain(model, data.train, cfg.epochs, cfg.lr, cfg.batch_size, order_rng);
      DspOptions options = dsp_options_for(cfg, k, seed);
      options.epochs = 1;  // one extra epoch of importance learning
      outcome = pipelined_dsp(model, data.train, options);
      mask = outcome.mask;
      break;
    }
    case PrunerKind::joint_dsp: {
      warmup_model(cfg, model, data.train, order_rng);
      outcome = run_joint_dsp(model, data.train, dsp_options_for(cfg, k, seed));
      mask = outcome.mask;
      break;
    }
    case PrunerKind::ste: {
      warmup_model(cfg, model, data.train, order_rng);
      outcome = run_ste(model, data.train, dsp_options_for(cfg, k, seed));
      mask = outcome.mask;
      break;
    }
    case PrunerKind::voita: {
      warmup_model(cfg, model, data.train, order_rng);
      VoitaOptions options;
      options.lambda = first_lambda(cfg);
      options.lr_phi = cfg.lr_w;
      options.lr_theta = cfg.lr;
      options.epochs = std::max(1, cfg.epochs - cfg.warmup_epochs);
      options.batch_size = cfg.batch_size;
      options.seed = seed;
      outcome = run_voita(model, data.train, options);
      mask = adjust_mask_to_k(outcome.scores, outcome.mask, k);
      break;
    }
  }

  FinetuneOptions finetune;
  finetune.steps = cfg.finetune_steps;
  finetune.lr = cfg.lr;
  finetune.batch_size = cfg.batch_size;
  finetune.seed = seed;
  PruningOutcome final = finetune_with_mask(model, mask, data.train, data.eval, finetune);
  outcome.mask = final.mask;
  outcome.k = final.mask.count();
  outcome.seed = seed;
  outcome.metric_pre = final.metric_pre;
  outcome.metric_post = final.metric_post;

  GatedTransformer small = compact(model, mask);
  Rng bench_rng(substream_seed(seed, Stream::bench));
  std::vector<int> tokens = bench_tokens(cfg, bench_rng);
  std::vector<int> tgt_in(tokens.size(), kBosToken);
  TimingStats timing = time_forward(small, tokens, tgt_in, 30, 5);

  SweepRecord record;
  record.method = method;
  record.k = mask.count();
  record.seed = seed;
  record.metric_pre = final.metric_pre;
  record.metric_post = final.metric_post;
  record.params = small.parameter_count();
  record.fwd_us = timing.median_us;
  return {std::move(record), std::move(outcome), std::move(model)};
}

std::string sweep_key(const std::string& method, int k, uint64_t seed) {
  return method + "," + std::to_string(k) + "," + std::to_string(seed);
}

}  // namespace

TrainResult run_training(const ExperimentConfig& config, uint64_t seed) {
  config.validate();
  PrunerKind kind = pruner_from_name(config.pruner);
  int h = config.model.total_heads();
  int k = config.k_list.empty() ? h : config.k_list.front();
  try {
    CellResult cell = run_cell(config, pruner_name(kind), k, seed);
    TrainResult result;
    result.outcome = std::move(cell.outcome);
    result.model = std::move(cell.model);
    result.eval_metric = cell.record.metric_post;
    if (!result.outcome.history.empty()) {
      result.final_train_loss = result.outcome.history.back().loss;
    }
    return result;
  } catch (const NumericError& e) {
    throw NumericError(std::string("training diverged: ") + e.what());
  }
}

std::vector<SweepRecord> run_sweep(const ExperimentConfig& config,
                                   const std::vector<std::string>& methods,
                                   int jobs) {
  config.validate();
  if (methods.empty()) throw ConfigError("sweep: at least one method required");
  for (const auto& m : methods) pruner_from_name(m);
  if (config.k_list.empty()) throw ConfigError("sweep: k_list must not be empty");

  std::filesystem::create_directories(config.out_dir);
  std::string csv_path = config.out_dir + "/sweep.csv";
  std::string outcome_path = config.out_dir + "/outcomes.jsonl";
  auto existing = existing_sweep_keys(csv_path);

  struct Cell {
    std::string method;
    int k;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const auto& method : methods) {
    for (int k : config.k_list) {
      for (uint64_t seed : config.seeds) {
        if (std::find(existing.begin(), existing.end(),
                      sweep_key(method, k, seed)) != existing.end()) {
          continue;
        }
        cells.push_back({method, k, seed});
      }
    }
  }

  std::vector<CellResult> results(cells.size());
  std::atomic<size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) break;
      const Cell& cell = cells[i];
      results[i] = run_cell(config, cell.method, cell.k, cell.seed);
      std::lock_guard<std::mutex> lock(log_mutex);
      std::fprintf(stderr, "[sweep] %s k=%d seed=%llu metric=%s\n",
                   cell.method.c_str(), cell.k,
                   static_cast<unsigned long long>(cell.seed),
                   format_g6(results[i].record.metric_post).c_str());
    }
  };
  int workers = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<SweepRecord> fresh;
  for (auto& r : results) fresh.push_back(r.record);
  append_sweep_csv(csv_path, fresh);
  for (auto& r : results) {
    append_outcome_jsonl(outcome_path, r.outcome, r.record.method);
  }

  // Full sweep state: previously existing rows plus the new ones.
  std::vector<SweepRecord> all = fresh;
  std::ifstream in(csv_path, std::ios::binary);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    std::istringstream ss(line);
    SweepRecord rec;
    std::string field;
    std::getline(ss, rec.method, ',');
    std::getline(ss, field, ',');
    rec.k = std::stoi(field);
    std::getline(ss, field, ',');
    rec.seed = std::stoull(field);
    std::getline(ss, field, ',');
    rec.metric_pre = std::stod(field);
    std::getline(ss, field, ',');
    rec.metric_post = std::stod(field);
    std::getline(ss, field, ',');
    rec.params = std::stoll(field);
    std::getline(ss, field, ',');
    rec.fwd_us = std::stod(field);
    bool already = false;
    for (const auto& f : all) {
      if (f.method == rec.method && f.k == rec.k && f.seed == rec.seed) {
        already = true;
        break;
      }
    }
    if (!already) all.push_back(rec);
  }
  return all;
}

std::vector<LambdaRecord> run_lambda_sweep(const ExperimentConfig& config) {
  config.validate();
  if (config.lambda_list.empty()) {
    throw ConfigError("lambda sweep: lambda_list must not be empty");
  }
  std::vector<LambdaRecord> records;
  for (double lambda : config.lambda_list) {
    for (uint64_t seed : config.seeds) {
      CellData data = make_cell_data(config, seed);
      Rng init_rng(substream_seed(seed, Stream::init));
      GatedTransformer model = build_model(config.model, init_rng);
      Rng order_rng(substream_seed(seed, Stream::order));
      warmup_model(config, model, data.train, order_rng);
      VoitaOptions options;
      options.lambda = lambda;
      options.lr_phi = config.lr_w;
      options.lr_theta = config.lr;
      options.epochs = std::max(1, config.epochs - config.warmup_epochs);
      options.batch_size = config.batch_size;
      options.seed = seed;
      PruningOutcome outcome = run_voita(model, data.train, options);
      double metric = dataset_metric(model, data.eval, gates_from_mask(outcome.mask));
      records.push_back({lambda, seed, outcome.mask.count(), metric});
    }
  }
  std::filesystem::create_directories(config.out_dir);
  std::ofstream out(config.out_dir + "/lambda_sweep.csv", std::ios::binary);
  out << "lambda,seed,unpruned_heads,metric\n";
  for (const auto& r : records) {
    out << format_g6(r.lambda) << "," << r.seed << "," << r.unpruned_heads << ","
        << format_g6(r.metric) << "\n";
  }
  return records;
}

std::vector<BenchRecord> run_bench(const ExperimentConfig& config, uint64_t seed,
                                   const std::vector<double>& pruned_fractions,
                                   int reps) {
  config.validate();
  Rng init_rng(substream_seed(seed, Stream::init));
  GatedTransformer model = build_model(config.model, init_rng);
  int h = model.total_heads();
  Rng bench_rng(substream_seed(seed, Stream::bench));
  std::vector<int> tokens = bench_tokens(config, bench_rng);
  std::vector<int> tgt_in(tokens.size(), kBosToken);

  std::vector<BenchRecord> records;
  double base_median = 0.0;
  int64_t base_params = 0;
  for (double fraction : pruned_fractions) {
    if (fraction < 0.0 || fraction >= 1.0) {
      throw DomainError("bench: pruned fraction must lie in [0, 1)");
    }
    int kept = std::max(1, static_cast<int>(std::lround(h * (1.0 - fraction))));
    std::vector<int> order(static_cast<size_t>(h));
    std::iota(order.begin(), order.end(), 0);
    bench_rng.shuffle(order);
    HeadMask mask = HeadMask::from_kept(
        h, std::span<const int>(order.data(), static_cast<size_t>(kept)));
    GatedTransformer small = compact(model, mask);
    TimingStats timing = time_forward(small, tokens, tgt_in, reps, 10);
    BenchRecord record;
    record.pruned_fraction = fraction;
    record.kept_heads = kept;
    record.params = small.parameter_count();
    record.fwd_us_median = timing.median_us;
    record.fwd_us_iqr = timing.iqr_us;
    record.stable = timing.iqr_us <= 0.2 * timing.median_us;
    if (records.empty()) {
      base_median = timing.median_us;
      base_params = record.params;
      record.speedup_pct = 0.0;
      record.shrinkage_pct = 0.0;
    } else {
      record.speedup_pct = 100.0 * (base_median - timing.median_us) / base_median;
      record.shrinkage_pct =
          100.0 * static_cast<double>(base_params - record.params) / base_params;
    }
    records.push_back(record);
  }
  return records;
}

std::vector<DynamicsRecord> eventual_keep_trace(
    const std::vector<StepLog>& history, const HeadMask& final_mask) {
  uint64_t final_bits = final_mask.as_word();
  int k = final_mask.count();
  std::vector<DynamicsRecord> trace;
  trace.reserve(history.size());
  for (const auto& log : history) {
    int overlap = std::popcount(log.topk_bits & final_bits);
    DynamicsRecord record;
    record.step = log.step;
    record.tau = log.tau;
    record.eventual_keep_pct = k > 0 ? 100.0 * overlap / k : 100.0;
    trace.push_back(record);
  }
  return trace;
}

DynamicsResult run_dynamics(const ExperimentConfig& config, uint64_t seed,
                            bool anneal) {
  config.validate();
  if (config.k_list.empty()) throw ConfigError("dynamics: k_list must not be empty");
  int k = config.k_list.front();
  CellData data = make_cell_data(config, seed);
  Rng init_rng(substream_seed(seed, Stream::init));
  GatedTransformer model = build_model(config.model, init_rng);
  int h = model.total_heads();

  Rng order_rng(substream_seed(seed, Stream::order));
  warmup_model(config, model, data.train, order_rng);
  int joint_epochs = std::max(1, config.epochs - config.warmup_epochs);

  DspOptions options = dsp_options_for(config, k, seed, anneal);
  int64_t total_steps =
      static_cast<int64_t>((data.train.size() + config.batch_size - 1) /
                           config.batch_size) *
      joint_epochs;
  TemperatureSchedule schedule = resolve_schedule(options, total_steps);

  Tensor w = Tensor::zeros({h}, true);
  auto params = model.parameters();
  Rng noise_rng(substream_seed(seed, Stream::gumbel));

  std::vector<StepLog> history;
  std::vector<std::pair<int64_t, double>> metric_points;
  int64_t step = 0;
  for (int epoch = 0; epoch < joint_epochs; ++epoch) {
    for (const auto& batch :
         make_batches(data.train.size(), config.batch_size, order_rng)) {
      double loss_value, tau;
      uint64_t sampled;
      {
        Tape tape;
        auto result = joint_dsp_step(model, w, data.train, batch, step, k,
                                     schedule, noise_rng);
        loss_value = result.loss;
        tau = result.tau;
        sampled = result.sampled.as_word();
      }
      sgd_step(params, config.lr);
      sgd_step(std::span<const Tensor>(&w, 1), config.lr_w);
      zero_grads(params);
      w.zero_grad();
      history.push_back(
          {step, tau, loss_value, hard_top_k(w.data(), k).as_word(), sampled});
      if (step % config.eval_every == 0 || step + 1 == total_steps) {
        HeadMask current = hard_top_k(w.data(), k);
        double metric =
            dataset_metric(model, data.eval, gates_from_mask(current));
        metric_points.emplace_back(step, metric);
      }
      ++step;
    }
  }

  DynamicsResult result;
  result.final_mask = hard_top_k(w.data(), k);
  result.records = eventual_keep_trace(history, result.final_mask);
  for (const auto& [at, metric] : metric_points) {
    for (auto& record : result.records) {
      if (record.step == at) {
        record.metric = metric;
        break;
      }
    }
  }
  result.final_metric =
      dataset_metric(model, data.eval, gates_from_mask(result.final_mask));
  return result;
}

OracleCheckResult oracle_check(const ImportanceWeights& weights, int k,
                               int64_t samples, uint64_t seed) {
  int h = weights.count();
  if (h > 10) throw DomainError("oracle_check: H must be at most 10");
  if (k < 1 || k > h) throw DomainError("oracle_check: k out of [1, H]");
  if (k > 8) throw DomainError("oracle_check: k exceeds the enumeration guard");
  if (samples < 10000) {
    throw DomainError("oracle_check: fewer than 10^4 samples is statistically meaningless");
  }

  OracleCheckResult result;
  result.heads = h;
  result.k = k;
  result.samples = samples;

  // Enumerate k-subsets in lexicographic order.
  std::vector<int> combo(static_cast<size_t>(k));
  std::iota(combo.begin(), combo.end(), 0);
  std::vector<int> subset_index(static_cast<size_t>(1) << h, -1);
  while (true) {
    uint64_t bits = 0;
    for (int member : combo) bits |= (1ULL << member);
    subset_index[bits] = static_cast<int>(result.subsets.size());
    result.subsets.push_back(combo);
    result.exact.push_back(subset_probability(weights, combo));
    int i = k - 1;
    while (i >= 0 && combo[static_cast<size_t>(i)] == h - k + i) --i;
    if (i < 0) break;
    ++combo[static_cast<size_t>(i)];
    for (int j = i + 1; j < k; ++j) {
      combo[static_cast<size_t>(j)] = combo[static_cast<size_t>(j - 1)] + 1;
    }
  }

  std::vector<int64_t> counts(result.subsets.size(), 0);
  Rng rng(seed);
  for (int64_t s = 0; s < samples; ++s) {
    std::vector<double> noise = sample_gumbel(h, rng);
    std::vector<double> perturbed = add_spans(weights.w, noise);
    HeadMask mask = hard_top_k(perturbed, k);
    ++counts[static_cast<size_t>(subset_index[mask.as_word()])];
  }
  result.empirical.resize(counts.size());
  double tv = 0.0;
  for (size_t i = 0; i < counts.size(); ++i) {
    result.empirical[i] = static_cast<double>(counts[i]) / samples;
    tv += std::abs(result.empirical[i] - result.exact[i]);
  }
  result.tv_distance = 0.5 * tv;
  return result;
}

OracleCheckResult oracle_check(int heads, int k, int64_t samples, uint64_t seed) {
  if (heads < 1) throw DomainError("oracle_check: need at least one head");
  Rng rng(substream_seed(seed, Stream::data));
  std::vector<double> iota(static_cast<size_t>(heads));
  for (double& v : iota) v = rng.uniform_in(0.5, 3.0);
  return oracle_check(ImportanceWeights::from_importances(iota), k, samples,
                      substream_seed(seed, Stream::gumbel));
}

HeadDistribution report_head_distribution(const HeadMask& mask,
                                          const ModelConfig& config) {
  if (mask.size() != config.total_heads()) {
    throw ShapeError("report: mask length must equal the configured head count");
  }
  HeadDistribution dist;
  int per = config.heads_per_layer;
  int flat = 0;
  auto add_rows = [&](HeadType type, int layers) {
    for (int l = 0; l < layers; ++l) {
      HeadDistribution::Row row;
      row.type = type;
      row.layer = l;
      row.capacity = per;
      for (int s = 0; s < per; ++s) {
        row.kept += mask.keep[static_cast<size_t>(flat++)] ? 1 : 0;
      }
      dist.rows.push_back(row);
    }
  };
  add_rows(HeadType::encoder_self, config.enc_layers);
  if (config.task == TaskKind::seq2seq) {
    add_rows(HeadType::decoder_self, config.dec_layers);
    add_rows(HeadType::cross, config.dec_layers);
  }
  dist.total_kept = mask.count();
  return dist;
}

std::string head_distribution_table(const HeadDistribution& dist) {
  std::ostringstream os;
  os << "type           layer  kept  capacity\n";
  for (const auto& row : dist.rows) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-14s %5d %5d %9d\n",
                  head_type_name(row.type).c_str(), row.layer, row.kept,
                  row.capacity);
    os << line;
  }
  os << "total kept: " << dist.total_kept << "\n";
  return os.str();
}

void write_sweep_csv(const std::string& path,
                     const std::vector<SweepRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  out << "method,K,seed,metric_pre,metric_post,params,fwd_us\n";
  for (const auto& r : records) {
    out << r.method << "," << r.k << "," << r.seed << ","
        << format_g6(r.metric_pre) << "," << format_g6(r.metric_post) << ","
        << r.params << "," << format_g6(r.fwd_us) << "\n";
  }
}

void append_sweep_csv(const std::string& path,
                      const std::vector<SweepRecord>& records) {
  bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (fresh) out << "method,K,seed,metric_pre,metric_post,params,fwd_us\n";
  for (const auto& r : records) {
    out << r.method << "," << r.k << "," << r.seed << ","
        << format_g6(r.metric_pre) << "," << format_g6(r.metric_post) << ","
        << r.params << "," << format_g6(r.fwd_us) << "\n";
  }
}

std::vector<std::string> existing_sweep_keys(const std::string& path) {
  std::vector<std::string> keys;
  std::ifstream in(path, std::ios::binary);
  if (!in) return keys;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    std::istringstream ss(line);
    std::string method, k, seed;
    std::getline(ss, method, ',');
    std::getline(ss, k, ',');
    std::getline(ss, seed, ',');
    keys.push_back(method + "," + k + "," + seed);
  }
  return keys;
}

void write_bench_csv(const std::string& path,
                     const std::vector<BenchRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  out << "pruned_pct,kept_heads,params,shrinkage_pct,fwd_us_median,fwd_us_iqr,"
         "speedup_pct,stable\n";
  for (const auto& r : records) {
    out << format_g6(100.0 * r.pruned_fraction) << "," << r.kept_heads << ","
        << r.params << "," << format_g6(r.shrinkage_pct) << ","
        << format_g6(r.fwd_us_median) << "," << format_g6(r.fwd_us_iqr) << ","
        << format_g6(r.speedup_pct) << "," << (r.stable ? 1 : 0) << "\n";
  }
}

void write_dynamics_jsonl(const std::string& path, const DynamicsResult& result) {
  std::ofstream out(path, std::ios::binary);
  out << "{\"type\":\"summary\",\"final_mask\":\"" << result.final_mask.bits()
      << "\",\"final_metric\":" << format_g6(result.final_metric) << "}\n";
  for (const auto& r : result.records) {
    out << "{\"type\":\"step\",\"step\":" << r.step
        << ",\"tau\":" << format_g6(r.tau)
        << ",\"eventual_keep_pct\":" << format_g6(r.eventual_keep_pct);
    if (r.metric.has_value()) out << ",\"metric\":" << format_g6(*r.metric);
    out << "}\n";
  }
}

void append_outcome_jsonl(const std::string& path, const PruningOutcome& outcome,
                          const std::string& method) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  out << "{\"method\":\"" << method << "\",\"k\":" << outcome.mask.count()
      << ",\"lambda\":" << format_g6(outcome.lambda)
      << ",\"seed\":" << outcome.seed << ",\"mask\":\"" << outcome.mask.bits()
      << "\",\"metric_pre\":" << format_g6(outcome.metric_pre)
      << ",\"metric_post\":" << format_g6(outcome.metric_post)
      << ",\"max_gate\":" << format_g6(outcome.max_gate_seen)
      << ",\"loss_history\":[";
  for (size_t i = 0; i < outcome.history.size(); ++i) {
    if (i) out << ",";
    out << format_g6(outcome.history[i].loss);
  }
  out << "]}\n";
}

}  // namespace hplab
