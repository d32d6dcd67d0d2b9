#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hplab/gumbel.hpp"
#include "hplab/rng.hpp"
#include "hplab/tensor.hpp"

namespace hplab {

enum class TaskKind { classifier, seq2seq };

TaskKind task_from_name(const std::string& name);
std::string task_name(TaskKind kind);

enum class HeadType { encoder_self, decoder_self, cross };
std::string head_type_name(HeadType type);

struct ModelConfig {
  TaskKind task = TaskKind::classifier;
  int enc_layers = 2;
  int dec_layers = 0;  // nonzero only for seq2seq
  int heads_per_layer = 4;
  int d_model = 32;
  int d_head = 0;  // 0 selects d_model / heads_per_layer
  int vocab = 16;
  int max_seq = 16;
  int n_classes = 2;

  int head_width() const;
  // Flat head count across layers (and across the three attention types
  // for the encoder-decoder task).
  int total_heads() const;
  void validate() const;
};

struct HeadParams {
  Tensor wq, wk, wv;  // [d, d_head]
  Tensor wo;          // [d_head, d]
};

// Location of a flat head index inside the model.
struct HeadRef {
  HeadType type;
  int layer;
  int slot;
};

struct LayerNormParams {
  Tensor gain, bias;  // [d]
};

struct FeedForward {
  Tensor w1, b1;  // [d, 4d], [4d]
  Tensor w2, b2;  // [4d, d], [d]
};

struct EncoderLayer {
  std::vector<HeadParams> heads;
  LayerNormParams ln_attn, ln_ffn;
  FeedForward ffn;
};

struct DecoderLayer {
  std::vector<HeadParams> self_heads;
  std::vector<HeadParams> cross_heads;
  LayerNormParams ln_self, ln_cross, ln_ffn;
  FeedForward ffn;
};

constexpr int kBosToken = 1;

// Pre-norm Transformer with a multiplicative gate on every attention head.
// Head lists may be ragged after compaction; `config` keeps the original
// sizing (widths, vocab), while the layer vectors are authoritative for
// the live head layout.
class GatedTransformer {
 public:
  ModelConfig config;
  Tensor tok_embed;  // [vocab, d]
  Tensor pos_embed;  // [max_seq, d]
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  LayerNormParams enc_final_ln;
  LayerNormParams dec_final_ln;
  Tensor cls_w, cls_b;  // classifier readout [d, n_classes], [n_classes]
  Tensor out_w, out_b;  // vocab projection [d, vocab], [vocab]

  int total_heads() const;
  std::vector<HeadRef> head_layout() const;
  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
  void set_requires_grad(bool on);
  GatedTransformer clone() const;

  // Encoder output [T, d]. `gates` has one entry per flat head.
  Tensor encode(std::span<const int> tokens, const Tensor& gates) const;
  Tensor classifier_logits(std::span<const int> tokens, const Tensor& gates) const;
  // Teacher-forced decoder logits [|tgt_in|, vocab].
  Tensor decode_logits(std::span<const int> src, std::span<const int> tgt_in,
                       const Tensor& gates) const;
  std::vector<int> greedy_decode(std::span<const int> src, const Tensor& gates,
                                 int out_len) const;
};

GatedTransformer build_model(const ModelConfig& config, Rng& rng);

// Single attention head over a key/value sequence z [Tk, d] and query
// positions q [Tq, d]; causal restricts position i to keys <= i.
Tensor attention_head_forward(const HeadParams& head, const Tensor& z,
                              const Tensor& q, bool causal = false);

// Sum of gated head outputs. `head_gates` holds one scalar tensor per head.
Tensor gated_multihead_forward(std::span<const HeadParams> heads,
                               std::span<const Tensor> head_gates,
                               const Tensor& z, const Tensor& q,
                               bool causal = false);

Tensor ones_gates(int total_heads);
Tensor gates_from_mask(const HeadMask& mask);

// New model with pruned heads physically removed. Parameters are deep
// copies; layers may end up with zero heads.
GatedTransformer compact(const GatedTransformer& model, const HeadMask& mask);

// Versioned JSON checkpoint (magic "HPLAB1"): config, live head layout,
// flat parameter arrays, and the current mask.
void save_checkpoint(const GatedTransformer& model, const HeadMask& mask,
                     const std::string& path);
GatedTransformer load_checkpoint(const std::string& path,
                                 HeadMask* mask_out = nullptr);

}  // namespace hplab
