#pragma once

#include <functional>
#include <string>

#include "hplab/data.hpp"
#include "hplab/training.hpp"

namespace hplab {

enum class PrunerKind { none, michel, pipelined_dsp, joint_dsp, ste, voita };

PrunerKind pruner_from_name(const std::string& name);
std::string pruner_name(PrunerKind kind);

// Per-head importance with its provenance.
struct ImportanceScores {
  enum class Provenance { learned_weights, gradient_proxy, gate_probability };
  std::vector<double> iota;
  Provenance provenance = Provenance::gradient_proxy;
};

// Stretched binary Concrete gates; the canonical constants keep
// gamma < 0 < 1 < zeta so the distribution has point masses at 0 and 1.
struct HardConcreteParams {
  Tensor phi;  // [H]
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta = 1.1;
};

struct StepLog {
  int64_t step = 0;
  double tau = 0.0;
  double loss = 0.0;
  uint64_t topk_bits = 0;     // noise-free top-k of the scores after the update
  uint64_t sampled_bits = 0;  // top-k of the perturbed logits used this step
};

struct PruningOutcome {
  PrunerKind method = PrunerKind::none;
  HeadMask mask;
  int k = 0;
  double lambda = 0.0;
  uint64_t seed = 0;
  double metric_pre = 0.0;
  double metric_post = 0.0;
  double max_gate_seen = 0.0;
  // Final per-head scores: learned w for the DSP family and STE,
  // evaluation-time gates for the L0 pruner.
  std::vector<double> scores;
  std::vector<StepLog> history;
};

// Mean absolute gate-gradient importance, gates held at 1. The loss
// closure must evaluate example m under the supplied gate tensor.
ImportanceScores michel_importance(
    const std::function<Tensor(int, const Tensor&)>& loss_of_example,
    int example_count, int head_count);
ImportanceScores michel_importance(const GatedTransformer& model,
                                   const Dataset& data);

// Greedy removal of the lowest-importance surviving heads, block_size at a
// time, re-scoring between blocks. Returns one mask per cardinality from
// H-1 down to final_k (inclusive).
std::vector<HeadMask> greedy_pipeline_prune(const GatedTransformer& model,
                                            const Dataset& data, int block_size,
                                            int final_k);

struct DspOptions {
  int k = 1;
  double tau_ini = 10.0;
  double tau_end = 1e-8;
  int64_t cooldown_steps = 0;  // 0 selects 80% of the total step count
  bool anneal = true;          // false holds tau at tau_ini
  double lr_w = 0.5;
  double lr_theta = 0.1;
  int epochs = 1;
  int batch_size = 8;
  uint64_t seed = 0;
  bool record_history = true;
};

TemperatureSchedule resolve_schedule(const DspOptions& options, int64_t total_steps);

// One gradient step of joint differentiable subset pruning: fresh Gumbel
// noise, relaxed top-k gates at the scheduled temperature, backward into
// both model parameters and w. The caller applies the updates.
struct JointStepResult {
  double loss = 0.0;
  double tau = 0.0;
  GateVector gates;
  HeadMask sampled;  // hard view of this step's perturbed logits
};
JointStepResult joint_dsp_step(const GatedTransformer& model, const Tensor& w,
                               const Dataset& data, std::span<const int> batch,
                               int64_t step, int k,
                               const TemperatureSchedule& schedule,
                               Rng& noise_rng);

// One straight-through step: hard top-k mask forward, identity backward
// into w.
struct SteStepResult {
  double loss = 0.0;
  HeadMask mask;
};
SteStepResult ste_step(const GatedTransformer& model, const Tensor& w,
                       const Dataset& data, std::span<const int> batch,
                       int k, Rng& noise_rng);

// Learns w on a frozen model (one epoch by default), then keeps the
// noise-free top-k of w.
PruningOutcome pipelined_dsp(const GatedTransformer& model, const Dataset& train,
                             const DspOptions& options);

// Full joint training loops used by the harness.
PruningOutcome run_joint_dsp(GatedTransformer& model, const Dataset& train,
                             const DspOptions& options);
PruningOutcome run_ste(GatedTransformer& model, const Dataset& train,
                       const DspOptions& options);

// Hard Concrete gate sample, differentiable in phi where unclamped.
Tensor hard_concrete_gates(const Tensor& phi, double beta, double gamma,
                           double zeta, Rng& rng);
double hard_concrete_open_probability(double phi, double beta, double gamma,
                                      double zeta);

// Expected-L0 penalty added to the task loss:
//   loss + lambda * sum_h P(g_h != 0 | phi_h).
Tensor voita_objective(const Tensor& task_loss, const HardConcreteParams& params,
                       double lambda);

struct VoitaOptions {
  double lambda = 0.01;
  double lr_phi = 0.05;
  double lr_theta = 0.1;
  int epochs = 1;
  int batch_size = 8;
  uint64_t seed = 0;
  double phi_init = 2.0;
};

// Joint training with stochastic gates and the L0 penalty. The resulting
// mask keeps heads whose evaluation-time gate is nonzero; its cardinality
// is whatever the regularizer produced.
PruningOutcome run_voita(GatedTransformer& model, const Dataset& train,
                         const VoitaOptions& options);

// Evaluation-time expected gate: clamp(sigmoid(phi)*(zeta-gamma)+gamma, 0, 1).
std::vector<double> voita_eval_gates(const HardConcreteParams& params);

// Forces the mask to exactly k ones with the smallest possible symmetric
// difference, ranking candidates by gate value (ties: lowest index).
HeadMask adjust_mask_to_k(std::span<const double> gate_values,
                          const HeadMask& current, int k);

struct FinetuneOptions {
  int steps = 0;
  double lr = 0.1;
  int batch_size = 8;
  uint64_t seed = 0;
};

// Evaluates under the fixed binary mask, optionally fine-tunes the model
// with it, and evaluates again.
PruningOutcome finetune_with_mask(GatedTransformer& model, const HeadMask& mask,
                                  const Dataset& train, const Dataset& eval,
                                  const FinetuneOptions& options);

// Keeps the noise-free top-k of the scores, then runs finetune_with_mask.
PruningOutcome finalize_and_finetune(GatedTransformer& model,
                                     std::span<const double> scores, int k,
                                     const Dataset& train, const Dataset& eval,
                                     const FinetuneOptions& options);

}  // namespace hplab
