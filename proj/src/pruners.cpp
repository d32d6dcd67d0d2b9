#include "hplab/pruners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hplab {

PrunerKind pruner_from_name(const std::string& name) {
  if (name == "none") return PrunerKind::none;
  if (name == "michel") return PrunerKind::michel;
  if (name == "pipelined-dsp") return PrunerKind::pipelined_dsp;
  if (name == "joint-dsp") return PrunerKind::joint_dsp;
  if (name == "ste") return PrunerKind::ste;
  if (name == "voita") return PrunerKind::voita;
  throw ConfigError("unknown pruner: " + name);
}

std::string pruner_name(PrunerKind kind) {
  switch (kind) {
    case PrunerKind::none: return "none";
    case PrunerKind::michel: return "michel";
    case PrunerKind::pipelined_dsp: return "pipelined-dsp";
    case PrunerKind::joint_dsp: return "joint-dsp";
    case PrunerKind::ste: return "ste";
    case PrunerKind::voita: return "voita";
  }
  return "?";
}

namespace {

int64_t total_steps_for(const Dataset& train, int epochs, int batch_size) {
  int64_t per_epoch = (train.size() + batch_size - 1) / batch_size;
  return per_epoch * epochs;
}

uint64_t topk_word(std::span<const double> scores, int k) {
  return hard_top_k(scores, k).as_word();
}

}  // namespace

TemperatureSchedule resolve_schedule(const DspOptions& options, int64_t total_steps) {
  if (!options.anneal) return TemperatureSchedule::constant(options.tau_ini);
  int64_t cooldown = options.cooldown_steps;
  if (cooldown <= 0) cooldown = std::max<int64_t>(1, (total_steps * 8) / 10);
  return TemperatureSchedule(options.tau_ini, options.tau_end, cooldown);
}

ImportanceScores michel_importance(
    const std::function<Tensor(int, const Tensor&)>& loss_of_example,
    int example_count, int head_count) {
  if (example_count < 1) throw DomainError("michel_importance: empty dataset");
  if (head_count < 1) throw DomainError("michel_importance: no heads");
  std::vector<double> iota(static_cast<size_t>(head_count), 0.0);
  for (int m = 0; m < example_count; ++m) {
    Tensor gates = Tensor::full({head_count}, 1.0, true);
    Tape tape;
    Tensor loss = loss_of_example(m, gates);
    tape.backward(loss);
    if (gates.has_grad()) {
      auto g = gates.grad();
      for (int h = 0; h < head_count; ++h) iota[static_cast<size_t>(h)] += std::abs(g[h]);
    }
  }
  for (double& v : iota) v /= example_count;
  return {std::move(iota), ImportanceScores::Provenance::gradient_proxy};
}

ImportanceScores michel_importance(const GatedTransformer& model,
                                   const Dataset& data) {
  GatedTransformer frozen = model;
  frozen.set_requires_grad(false);
  auto scores = michel_importance(
      [&](int m, const Tensor& gates) {
        return example_loss(frozen, data, m, gates);
      },
      data.size(), model.total_heads());
  frozen.set_requires_grad(true);
  return scores;
}

std::vector<HeadMask> greedy_pipeline_prune(const GatedTransformer& model,
                                            const Dataset& data, int block_size,
                                            int final_k) {
  int h = model.total_heads();
  if (block_size < 1) throw DomainError("greedy_pipeline_prune: block size must be positive");
  if (final_k < 1 || final_k > h) throw DomainError("greedy_pipeline_prune: final k out of [1, H]");

  GatedTransformer frozen = model;
  frozen.set_requires_grad(false);
  std::vector<uint8_t> alive(static_cast<size_t>(h), 1);
  std::vector<HeadMask> masks;
  int removed_in_block = block_size;  // force scoring on the first removal
  std::vector<double> iota;
  int kept = h;
  while (kept > final_k) {
    if (removed_in_block >= block_size) {
      Tensor mask_gates = gates_from_mask(HeadMask(alive));
      auto scores = michel_importance(
          [&](int m, const Tensor& gates) {
            return example_loss(frozen, data, m, mul(gates, mask_gates));
          },
          data.size(), h);
      iota = std::move(scores.iota);
      removed_in_block = 0;
    }
    // Lowest-importance surviving head; ties resolve to the lowest index.
    int victim = -1;
    for (int i = 0; i < h; ++i) {
      if (!alive[static_cast<size_t>(i)]) continue;
      if (victim < 0 || iota[static_cast<size_t>(i)] < iota[static_cast<size_t>(victim)]) {
        victim = i;
      }
    }
    if (victim < 0) throw ContractError("greedy_pipeline_prune: no surviving head");
    alive[static_cast<size_t>(victim)] = 0;
    ++removed_in_block;
    --kept;
    masks.push_back(HeadMask(alive));
  }
  frozen.set_requires_grad(true);
  return masks;
}

JointStepResult joint_dsp_step(const GatedTransformer& model, const Tensor& w,
                               const Dataset& data, std::span<const int> batch,
                               int64_t step, int k,
                               const TemperatureSchedule& schedule,
                               Rng& noise_rng) {
  int h = model.total_heads();
  if (w.size() != h) throw ContractError("joint_dsp_step: w length must equal head count");
  if (Tape::active() == nullptr) throw ContractError("joint_dsp_step: no active tape");
  double tau = temperature_at(schedule, step);
  std::vector<double> noise = sample_gumbel(h, noise_rng);
  Tensor perturbed = add(w, Tensor::from_data({h}, std::move(noise)));
  GateVector gates = soft_top_k(perturbed, k, tau);
  HeadMask sampled = hard_top_k(perturbed.data(), k);
  Tensor loss = batch_loss(model, data, batch, gates.gate);
  Tape::active()->backward(loss);
  return {loss.item(), tau, std::move(gates), std::move(sampled)};
}

SteStepResult ste_step(const GatedTransformer& model, const Tensor& w,
                       const Dataset& data, std::span<const int> batch, int k,
                       Rng& noise_rng) {
  int h = model.total_heads();
  if (w.size() != h) throw ContractError("ste_step: w length must equal head count");
  if (Tape::active() == nullptr) throw ContractError("ste_step: no active tape");
  std::vector<double> noise = sample_gumbel(h, noise_rng);
  Tensor perturbed = add(w, Tensor::from_data({h}, std::move(noise)));
  Tensor gate = straight_through_top_k(perturbed, k);
  HeadMask mask = hard_top_k(perturbed.data(), k);
  Tensor loss = batch_loss(model, data, batch, gate);
  Tape::active()->backward(loss);
  return {loss.item(), std::move(mask)};
}

namespace {

PruningOutcome run_dsp_common(GatedTransformer& model, const Dataset& train,
                              const DspOptions& options, bool train_theta,
                              bool straight_through) {
  int h = model.total_heads();
  if (options.k < 1 || options.k > h) throw DomainError("dsp: k out of [1, H]");
  int64_t total_steps = total_steps_for(train, options.epochs, options.batch_size);
  TemperatureSchedule schedule = resolve_schedule(options, total_steps);

  Tensor w = Tensor::zeros({h}, true);
  auto params = model.parameters();
  if (!train_theta) model.set_requires_grad(false);

  Rng noise_rng(substream_seed(options.seed, Stream::gumbel));
  Rng order_rng(substream_seed(options.seed, Stream::order));

  PruningOutcome outcome;
  outcome.method = straight_through
                       ? PrunerKind::ste
                       : (train_theta ? PrunerKind::joint_dsp : PrunerKind::pipelined_dsp);
  outcome.k = options.k;
  outcome.seed = options.seed;

  int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (const auto& batch : make_batches(train.size(), options.batch_size, order_rng)) {
      Tape tape;
      double loss_value;
      double tau = 0.0;
      uint64_t sampled = 0;
      if (straight_through) {
        auto result = ste_step(model, w, train, batch, options.k, noise_rng);
        loss_value = result.loss;
        sampled = result.mask.as_word();
      } else {
        auto result = joint_dsp_step(model, w, train, batch, step, options.k,
                                     schedule, noise_rng);
        loss_value = result.loss;
        tau = result.tau;
        sampled = result.sampled.as_word();
        outcome.max_gate_seen = std::max(outcome.max_gate_seen, result.gates.max_gate());
      }
      if (train_theta) sgd_step(params, options.lr_theta);
      sgd_step(std::span<const Tensor>(&w, 1), options.lr_w);
      zero_grads(params);
      w.zero_grad();
      if (options.record_history) {
        outcome.history.push_back(
            {step, tau, loss_value, topk_word(w.data(), options.k), sampled});
      }
      ++step;
    }
  }
  if (!train_theta) model.set_requires_grad(true);
  outcome.scores.assign(w.data().begin(), w.data().end());
  outcome.mask = hard_top_k(w.data(), options.k);
  return outcome;
}

}  // namespace

PruningOutcome pipelined_dsp(const GatedTransformer& model, const Dataset& train,
                             const DspOptions& options) {
  GatedTransformer view = model;  // parameters shared, never updated
  return run_dsp_common(view, train, options, /*train_theta=*/false,
                        /*straight_through=*/false);
}

PruningOutcome run_joint_dsp(GatedTransformer& model, const Dataset& train,
                             const DspOptions& options) {
  return run_dsp_common(model, train, options, /*train_theta=*/true,
                        /*straight_through=*/false);
}

PruningOutcome run_ste(GatedTransformer& model, const Dataset& train,
                       const DspOptions& options) {
  return run_dsp_common(model, train, options, /*train_theta=*/true,
                        /*straight_through=*/true);
}

Tensor hard_concrete_gates(const Tensor& phi, double beta, double gamma,
                           double zeta, Rng& rng) {
  if (!(beta > 0.0)) throw DomainError("hard_concrete: beta must be positive");
  if (!(gamma < 0.0 && zeta > 1.0)) {
    throw DomainError("hard_concrete: require gamma < 0 < 1 < zeta");
  }
  size_t n = static_cast<size_t>(phi.size());
  std::vector<double> values(n), local(n);
  auto pd = phi.data();
  for (size_t i = 0; i < n; ++i) {
    double u = rng.uniform_open();
    double logistic = std::log(u) - std::log(1.0 - u);
    double s = 1.0 / (1.0 + std::exp(-(logistic + pd[i]) / beta));
    double stretched = s * (zeta - gamma) + gamma;
    if (stretched <= 0.0) {
      values[i] = 0.0;
      local[i] = 0.0;
    } else if (stretched >= 1.0) {
      values[i] = 1.0;
      local[i] = 0.0;
    } else {
      values[i] = stretched;
      local[i] = s * (1.0 - s) * (zeta - gamma) / beta;
    }
  }
  return map_with_grad(phi, std::move(values), std::move(local));
}

double hard_concrete_open_probability(double phi, double beta, double gamma,
                                      double zeta) {
  double x = phi - beta * std::log(-gamma / zeta);
  return 1.0 / (1.0 + std::exp(-x));
}

Tensor voita_objective(const Tensor& task_loss, const HardConcreteParams& params,
                       double lambda) {
  if (lambda < 0.0) throw DomainError("voita_objective: lambda must be non-negative");
  double offset = -params.beta * std::log(-params.gamma / params.zeta);
  Tensor open_probs = sigmoid(shift(params.phi, offset));
  return add(task_loss, scale(sum(open_probs), lambda));
}

std::vector<double> voita_eval_gates(const HardConcreteParams& params) {
  std::vector<double> gates(static_cast<size_t>(params.phi.size()));
  auto pd = params.phi.data();
  for (size_t i = 0; i < gates.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-pd[i]));
    gates[i] = std::clamp(s * (params.zeta - params.gamma) + params.gamma, 0.0, 1.0);
  }
  return gates;
}

PruningOutcome run_voita(GatedTransformer& model, const Dataset& train,
                         const VoitaOptions& options) {
  int h = model.total_heads();
  HardConcreteParams hc;
  hc.phi = Tensor::full({h}, options.phi_init, true);
  auto params = model.parameters();
  Rng gate_rng(substream_seed(options.seed, Stream::concrete));
  Rng order_rng(substream_seed(options.seed, Stream::order));

  PruningOutcome outcome;
  outcome.method = PrunerKind::voita;
  outcome.lambda = options.lambda;
  outcome.seed = options.seed;

  int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (const auto& batch : make_batches(train.size(), options.batch_size, order_rng)) {
      Tape tape;
      Tensor gates = hard_concrete_gates(hc.phi, hc.beta, hc.gamma, hc.zeta, gate_rng);
      Tensor loss = batch_loss(model, train, batch, gates);
      Tensor objective = voita_objective(loss, hc, options.lambda);
      tape.backward(objective);
      sgd_step(params, options.lr_theta);
      sgd_step(std::span<const Tensor>(&hc.phi, 1), options.lr_phi);
      zero_grads(params);
      hc.phi.zero_grad();
      auto eval_gates = voita_eval_gates(hc);
      std::vector<uint8_t> open(static_cast<size_t>(h), 0);
      for (int i = 0; i < h; ++i) open[static_cast<size_t>(i)] = eval_gates[static_cast<size_t>(i)] > 0.0 ? 1 : 0;
      outcome.history.push_back({step, 0.0, objective.item(),
                                 HeadMask(std::move(open)).as_word()});
      ++step;
    }
  }
  auto eval_gates = voita_eval_gates(hc);
  std::vector<uint8_t> keep(static_cast<size_t>(h), 0);
  for (int i = 0; i < h; ++i) keep[static_cast<size_t>(i)] = eval_gates[static_cast<size_t>(i)] > 0.0 ? 1 : 0;
  outcome.mask = HeadMask(std::move(keep));
  outcome.k = outcome.mask.count();
  outcome.scores = std::move(eval_gates);
  outcome.max_gate_seen = *std::max_element(outcome.scores.begin(), outcome.scores.end());
  return outcome;
}

HeadMask adjust_mask_to_k(std::span<const double> gate_values,
                          const HeadMask& current, int k) {
  int h = current.size();
  if (static_cast<int>(gate_values.size()) != h) {
    throw ContractError("adjust_mask_to_k: gate values for every head required");
  }
  if (k < 0 || k > h) throw DomainError("adjust_mask_to_k: k out of [0, H]");
  std::vector<uint8_t> keep = current.keep;
  int count = current.count();
  if (count < k) {
    // Re-include discarded heads with the highest gate values.
    std::vector<int> candidates;
    for (int i = 0; i < h; ++i) {
      if (!keep[static_cast<size_t>(i)]) candidates.push_back(i);
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
      return gate_values[static_cast<size_t>(a)] > gate_values[static_cast<size_t>(b)];
    });
    for (int i = 0; count < k; ++i, ++count) keep[static_cast<size_t>(candidates[static_cast<size_t>(i)])] = 1;
  } else if (count > k) {
    // Exclude kept heads with the smallest gate values.
    std::vector<int> candidates;
    for (int i = 0; i < h; ++i) {
      if (keep[static_cast<size_t>(i)]) candidates.push_back(i);
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
      return gate_values[static_cast<size_t>(a)] < gate_values[static_cast<size_t>(b)];
    });
    for (int i = 0; count > k; ++i, --count) keep[static_cast<size_t>(candidates[static_cast<size_t>(i)])] = 0;
  }
  return HeadMask(std::move(keep));
}

PruningOutcome finetune_with_mask(GatedTransformer& model, const HeadMask& mask,
                                  const Dataset& train, const Dataset& eval,
                                  const FinetuneOptions& options) {
  PruningOutcome outcome;
  outcome.k = mask.count();
  outcome.seed = options.seed;
  outcome.mask = mask;
  Tensor gates = gates_from_mask(outcome.mask);
  outcome.metric_pre = dataset_metric(model, eval, gates);
  if (options.steps > 0) {
    auto params = model.parameters();
    Rng order_rng(substream_seed(options.seed, Stream::order));
    int done = 0;
    while (done < options.steps) {
      for (const auto& batch : make_batches(train.size(), options.batch_size, order_rng)) {
        if (done >= options.steps) break;
        Tape tape;
        Tensor loss = batch_loss(model, train, batch, gates);
        tape.backward(loss);
        sgd_step(params, options.lr);
        zero_grads(params);
        ++done;
      }
    }
    outcome.metric_post = dataset_metric(model, eval, gates);
  } else {
    outcome.metric_post = outcome.metric_pre;
  }
  return outcome;
}

PruningOutcome finalize_and_finetune(GatedTransformer& model,
                                     std::span<const double> scores, int k,
                                     const Dataset& train, const Dataset& eval,
                                     const FinetuneOptions& options) {
  return finetune_with_mask(model, hard_top_k(scores, k), train, eval, options);
}

}  // namespace hplab
