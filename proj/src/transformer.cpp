#include "hplab/transformer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace hplab {

TaskKind task_from_name(const std::string& name) {
  if (name == "needle-classification") return TaskKind::classifier;
  if (name == "sequence-reversal") return TaskKind::seq2seq;
  throw ConfigError("unknown task: " + name);
}

std::string task_name(TaskKind kind) {
  return kind == TaskKind::classifier ? "needle-classification"
                                      : "sequence-reversal";
}

std::string head_type_name(HeadType type) {
  switch (type) {
    case HeadType::encoder_self: return "encoder-self";
    case HeadType::decoder_self: return "decoder-self";
    case HeadType::cross: return "cross";
  }
  return "?";
}

int ModelConfig::head_width() const {
  if (d_head > 0) return d_head;
  return d_model / heads_per_layer;
}

int ModelConfig::total_heads() const {
  int per_type = heads_per_layer;
  if (task == TaskKind::classifier) return enc_layers * per_type;
  return enc_layers * per_type + 2 * dec_layers * per_type;
}

void ModelConfig::validate() const {
  if (enc_layers < 1) throw ConfigError("ModelConfig: need at least one encoder layer");
  if (task == TaskKind::seq2seq && dec_layers < 1) {
    throw ConfigError("ModelConfig: seq2seq needs at least one decoder layer");
  }
  if (task == TaskKind::classifier && dec_layers != 0) {
    throw ConfigError("ModelConfig: classifier must have zero decoder layers");
  }
  if (heads_per_layer < 1) throw ConfigError("ModelConfig: heads_per_layer must be positive");
  if (d_model < 1) throw ConfigError("ModelConfig: d_model must be positive");
  if (d_head < 0) throw ConfigError("ModelConfig: d_head must be non-negative");
  if (d_head == 0 && d_model % heads_per_layer != 0) {
    throw ConfigError("ModelConfig: d_model not divisible by heads_per_layer; set d_head");
  }
  if (vocab < 4) throw ConfigError("ModelConfig: vocab must be at least 4");
  if (max_seq < 1) throw ConfigError("ModelConfig: max_seq must be positive");
  if (task == TaskKind::classifier && n_classes < 2) {
    throw ConfigError("ModelConfig: n_classes must be at least 2");
  }
  if (head_width() * heads_per_layer > 4 * d_model) {
    std::fprintf(stderr,
                 "[hplab] config warning: per-layer head width %d x %d exceeds 4*d_model\n",
                 head_width(), heads_per_layer);
  }
}

namespace {

Tensor xavier(int fan_in, int fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> data(static_cast<size_t>(fan_in) * fan_out);
  for (double& v : data) v = rng.uniform_in(-limit, limit);
  return Tensor::from_data({fan_in, fan_out}, std::move(data), true);
}

Tensor small_normal(int rows, int cols, Rng& rng, double sd = 0.1) {
  std::vector<double> data(static_cast<size_t>(rows) * cols);
  for (double& v : data) v = sd * rng.normal();
  return Tensor::from_data({rows, cols}, std::move(data), true);
}

HeadParams make_head(int d, int dk, Rng& rng) {
  HeadParams head;
  head.wq = xavier(d, dk, rng);
  head.wk = xavier(d, dk, rng);
  head.wv = xavier(d, dk, rng);
  head.wo = xavier(dk, d, rng);
  return head;
}

LayerNormParams make_ln(int d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

FeedForward make_ffn(int d, Rng& rng) {
  FeedForward ffn;
  ffn.w1 = xavier(d, 4 * d, rng);
  ffn.b1 = Tensor::zeros({4 * d}, true);
  ffn.w2 = xavier(4 * d, d, rng);
  ffn.b2 = Tensor::zeros({d}, true);
  return ffn;
}

void collect_head(const HeadParams& head, std::vector<Tensor>& out) {
  out.push_back(head.wq);
  out.push_back(head.wk);
  out.push_back(head.wv);
  out.push_back(head.wo);
}

void collect_ln(const LayerNormParams& ln, std::vector<Tensor>& out) {
  out.push_back(ln.gain);
  out.push_back(ln.bias);
}

void collect_ffn(const FeedForward& ffn, std::vector<Tensor>& out) {
  out.push_back(ffn.w1);
  out.push_back(ffn.b1);
  out.push_back(ffn.w2);
  out.push_back(ffn.b2);
}

std::vector<int> iota_ids(int n) {
  std::vector<int> ids(static_cast<size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

Tensor causal_mask(int t) {
  std::vector<double> mask(static_cast<size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i) {
    for (int j = i + 1; j < t; ++j) {
      mask[static_cast<size_t>(i) * t + j] = -1e30;
    }
  }
  return Tensor::from_data({t, t}, std::move(mask));
}

Tensor ffn_forward(const FeedForward& ffn, const Tensor& x) {
  Tensor hidden = relu(add_rowvec(matmul(x, ffn.w1), ffn.b1));
  return add_rowvec(matmul(hidden, ffn.w2), ffn.b2);
}

std::vector<Tensor> split_gates(const Tensor& gates, int total_heads) {
  if (total_heads == 0) return {};
  if (!gates.defined() || gates.size() != total_heads) {
    throw ContractError("gates: expected one gate per head");
  }
  std::vector<Tensor> scalars;
  scalars.reserve(static_cast<size_t>(total_heads));
  for (int h = 0; h < total_heads; ++h) scalars.push_back(select(gates, h));
  return scalars;
}

}  // namespace

int GatedTransformer::total_heads() const {
  int h = 0;
  for (const auto& layer : encoder) h += static_cast<int>(layer.heads.size());
  for (const auto& layer : decoder) {
    h += static_cast<int>(layer.self_heads.size());
    h += static_cast<int>(layer.cross_heads.size());
  }
  return h;
}

std::vector<HeadRef> GatedTransformer::head_layout() const {
  std::vector<HeadRef> layout;
  for (int l = 0; l < static_cast<int>(encoder.size()); ++l) {
    for (int s = 0; s < static_cast<int>(encoder[l].heads.size()); ++s) {
      layout.push_back({HeadType::encoder_self, l, s});
    }
  }
  for (int l = 0; l < static_cast<int>(decoder.size()); ++l) {
    for (int s = 0; s < static_cast<int>(decoder[l].self_heads.size()); ++s) {
      layout.push_back({HeadType::decoder_self, l, s});
    }
  }
  for (int l = 0; l < static_cast<int>(decoder.size()); ++l) {
    for (int s = 0; s < static_cast<int>(decoder[l].cross_heads.size()); ++s) {
      layout.push_back({HeadType::cross, l, s});
    }
  }
  return layout;
}

std::vector<Tensor> GatedTransformer::parameters() const {
  std::vector<Tensor> params;
  params.push_back(tok_embed);
  params.push_back(pos_embed);
  for (const auto& layer : encoder) {
    for (const auto& head : layer.heads) collect_head(head, params);
    collect_ln(layer.ln_attn, params);
    collect_ln(layer.ln_ffn, params);
    collect_ffn(layer.ffn, params);
  }
  collect_ln(enc_final_ln, params);
  for (const auto& layer : decoder) {
    for (const auto& head : layer.self_heads) collect_head(head, params);
    for (const auto& head : layer.cross_heads) collect_head(head, params);
    collect_ln(layer.ln_self, params);
    collect_ln(layer.ln_cross, params);
    collect_ln(layer.ln_ffn, params);
    collect_ffn(layer.ffn, params);
  }
  if (config.task == TaskKind::seq2seq) {
    collect_ln(dec_final_ln, params);
    params.push_back(out_w);
    params.push_back(out_b);
  } else {
    params.push_back(cls_w);
    params.push_back(cls_b);
  }
  return params;
}

int64_t GatedTransformer::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

void GatedTransformer::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.node()->requires_grad = on;
}

GatedTransformer GatedTransformer::clone() const {
  GatedTransformer copy;
  copy.config = config;
  copy.tok_embed = tok_embed.clone();
  copy.pos_embed = pos_embed.clone();
  for (const auto& layer : encoder) {
    EncoderLayer lc;
    for (const auto& head : layer.heads) {
      lc.heads.push_back({head.wq.clone(), head.wk.clone(), head.wv.clone(),
                          head.wo.clone()});
    }
    lc.ln_attn = {layer.ln_attn.gain.clone(), layer.ln_attn.bias.clone()};
    lc.ln_ffn = {layer.ln_ffn.gain.clone(), layer.ln_ffn.bias.clone()};
    lc.ffn = {layer.ffn.w1.clone(), layer.ffn.b1.clone(), layer.ffn.w2.clone(),
              layer.ffn.b2.clone()};
    copy.encoder.push_back(std::move(lc));
  }
  copy.enc_final_ln = {enc_final_ln.gain.clone(), enc_final_ln.bias.clone()};
  for (const auto& layer : decoder) {
    DecoderLayer lc;
    for (const auto& head : layer.self_heads) {
      lc.self_heads.push_back({head.wq.clone(), head.wk.clone(), head.wv.clone(),
                               head.wo.clone()});
    }
    for (const auto& head : layer.cross_heads) {
      lc.cross_heads.push_back({head.wq.clone(), head.wk.clone(),
                                head.wv.clone(), head.wo.clone()});
    }
    lc.ln_self = {layer.ln_self.gain.clone(), layer.ln_self.bias.clone()};
    lc.ln_cross = {layer.ln_cross.gain.clone(), layer.ln_cross.bias.clone()};
    lc.ln_ffn = {layer.ln_ffn.gain.clone(), layer.ln_ffn.bias.clone()};
    lc.ffn = {layer.ffn.w1.clone(), layer.ffn.b1.clone(), layer.ffn.w2.clone(),
              layer.ffn.b2.clone()};
    copy.decoder.push_back(std::move(lc));
  }
  if (dec_final_ln.gain.defined()) {
    copy.dec_final_ln = {dec_final_ln.gain.clone(), dec_final_ln.bias.clone()};
  }
  if (cls_w.defined()) {
    copy.cls_w = cls_w.clone();
    copy.cls_b = cls_b.clone();
  }
  if (out_w.defined()) {
    copy.out_w = out_w.clone();
    copy.out_b = out_b.clone();
  }
  return copy;
}

Tensor attention_head_forward(const HeadParams& head, const Tensor& z,
                              const Tensor& q, bool causal) {
  if (z.shape().size() != 2 || q.shape().size() != 2) {
    throw ShapeError("attention: sequence inputs must be [T, d] matrices");
  }
  if (z.shape()[0] < 1) throw DomainError("attention: empty sequence");
  int dk = head.wq.shape()[1];
  Tensor queries = matmul(q, head.wq);                       // [Tq, dk]
  Tensor keys = matmul(z, head.wk);                          // [Tk, dk]
  Tensor scores = scale(matmul(queries, transpose(keys)),    // [Tq, Tk]
                        1.0 / std::sqrt(static_cast<double>(dk)));
  if (causal) {
    if (q.shape()[0] != z.shape()[0]) {
      throw ShapeError("attention: causal masking requires square attention");
    }
    scores = add(scores, causal_mask(q.shape()[0]));
  }
  Tensor weights = softmax_rows(scores);
  Tensor mixed = matmul(weights, matmul(z, head.wv));        // [Tq, dk]
  return matmul(mixed, head.wo);                             // [Tq, d]
}

Tensor gated_multihead_forward(std::span<const HeadParams> heads,
                               std::span<const Tensor> head_gates,
                               const Tensor& z, const Tensor& q, bool causal) {
  if (heads.size() != head_gates.size()) {
    throw ContractError("gated_multihead_forward: one gate per head required");
  }
  Tensor out;
  for (size_t h = 0; h < heads.size(); ++h) {
    Tensor gated = scale_by(attention_head_forward(heads[h], z, q, causal),
                            head_gates[h]);
    out = h == 0 ? gated : add(out, gated);
  }
  if (!out.defined()) {
    return Tensor::zeros({q.shape()[0], q.shape()[1]});
  }
  return out;
}

namespace {

Tensor embed_sequence(const GatedTransformer& model, std::span<const int> tokens) {
  if (tokens.empty()) throw DomainError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > model.config.max_seq) {
    throw ShapeError("forward: sequence longer than max_seq");
  }
  Tensor tok = embedding_lookup(model.tok_embed, tokens);
  auto pos_ids = iota_ids(static_cast<int>(tokens.size()));
  Tensor pos = embedding_lookup(model.pos_embed, pos_ids);
  return add(tok, pos);
}

Tensor encode_with_gates(const GatedTransformer& model, std::span<const int> tokens,
                         std::span<const Tensor> gate_scalars, size_t gate_base) {
  Tensor x = embed_sequence(model, tokens);
  size_t g = gate_base;
  for (const auto& layer : model.encoder) {
    if (!layer.heads.empty()) {
      Tensor normed = layer_norm_rows(x, layer.ln_attn.gain, layer.ln_attn.bias);
      Tensor attn = gated_multihead_forward(
          layer.heads, gate_scalars.subspan(g, layer.heads.size()), normed,
          normed, false);
      x = add(x, attn);
    }
    g += layer.heads.size();
    Tensor normed = layer_norm_rows(x, layer.ln_ffn.gain, layer.ln_ffn.bias);
    x = add(x, ffn_forward(layer.ffn, normed));
  }
  return layer_norm_rows(x, model.enc_final_ln.gain, model.enc_final_ln.bias);
}

Tensor decode_with_gates(const GatedTransformer& model, const Tensor& enc_out,
                         std::span<const int> tgt_in,
                         std::span<const Tensor> gate_scalars) {
  size_t self_base = 0;
  for (const auto& layer : model.encoder) self_base += layer.heads.size();
  size_t cross_base = self_base;
  for (const auto& layer : model.decoder) cross_base += layer.self_heads.size();

  Tensor y = embed_sequence(model, tgt_in);
  size_t gs = self_base;
  size_t gc = cross_base;
  for (const auto& layer : model.decoder) {
    if (!layer.self_heads.empty()) {
      Tensor normed = layer_norm_rows(y, layer.ln_self.gain, layer.ln_self.bias);
      Tensor attn = gated_multihead_forward(
          layer.self_heads, gate_scalars.subspan(gs, layer.self_heads.size()),
          normed, normed, true);
      y = add(y, attn);
    }
    gs += layer.self_heads.size();
    if (!layer.cross_heads.empty()) {
      Tensor normed = layer_norm_rows(y, layer.ln_cross.gain, layer.ln_cross.bias);
      Tensor attn = gated_multihead_forward(
          layer.cross_heads, gate_scalars.subspan(gc, layer.cross_heads.size()),
          enc_out, normed, false);
      y = add(y, attn);
    }
    gc += layer.cross_heads.size();
    Tensor normed = layer_norm_rows(y, layer.ln_ffn.gain, layer.ln_ffn.bias);
    y = add(y, ffn_forward(layer.ffn, normed));
  }
  y = layer_norm_rows(y, model.dec_final_ln.gain, model.dec_final_ln.bias);
  return add_rowvec(matmul(y, model.out_w), model.out_b);
}

}  // namespace

Tensor GatedTransformer::encode(std::span<const int> tokens, const Tensor& gates) const {
  auto gate_scalars = split_gates(gates, total_heads());
  return encode_with_gates(*this, tokens, gate_scalars, 0);
}

Tensor GatedTransformer::classifier_logits(std::span<const int> tokens,
                                           const Tensor& gates) const {
  if (config.task != TaskKind::classifier) {
    throw ContractError("classifier_logits: model is not a classifier");
  }
  Tensor enc = encode(tokens, gates);
  int t = enc.shape()[0];
  Tensor pool = Tensor::full({1, t}, 1.0 / t);
  Tensor pooled = matmul(pool, enc);  // [1, d]
  return add_rowvec(matmul(pooled, cls_w), cls_b);
}

Tensor GatedTransformer::decode_logits(std::span<const int> src,
                                       std::span<const int> tgt_in,
                                       const Tensor& gates) const {
  if (config.task != TaskKind::seq2seq) {
    throw ContractError("decode_logits: model is not seq2seq");
  }
  auto gate_scalars = split_gates(gates, total_heads());
  Tensor enc_out = encode_with_gates(*this, src, gate_scalars, 0);
  return decode_with_gates(*this, enc_out, tgt_in, gate_scalars);
}

std::vector<int> GatedTransformer::greedy_decode(std::span<const int> src,
                                                 const Tensor& gates,
                                                 int out_len) const {
  std::vector<int> prefix = {kBosToken};
  std::vector<int> out;
  auto gate_scalars = split_gates(gates, total_heads());
  Tensor enc_out = encode_with_gates(*this, src, gate_scalars, 0);
  for (int t = 0; t < out_len; ++t) {
    Tensor logits = decode_with_gates(*this, enc_out, prefix, gate_scalars);
    int cols = logits.shape()[1];
    int64_t row = static_cast<int64_t>(logits.shape()[0] - 1) * cols;
    int best = 0;
    double best_value = logits.at(row);
    for (int j = 1; j < cols; ++j) {
      double v = logits.at(row + j);
      if (v > best_value) {
        best = j;
        best_value = v;
      }
    }
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

GatedTransformer build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  GatedTransformer model;
  model.config = config;
  int d = config.d_model;
  int dk = config.head_width();
  model.tok_embed = small_normal(config.vocab, d, rng);
  model.pos_embed = small_normal(config.max_seq, d, rng);
  for (int l = 0; l < config.enc_layers; ++l) {
    EncoderLayer layer;
    for (int h = 0; h < config.heads_per_layer; ++h) {
      layer.heads.push_back(make_head(d, dk, rng));
    }
    layer.ln_attn = make_ln(d);
    layer.ln_ffn = make_ln(d);
    layer.ffn = make_ffn(d, rng);
    model.encoder.push_back(std::move(layer));
  }
  model.enc_final_ln = make_ln(d);
  for (int l = 0; l < config.dec_layers; ++l) {
    DecoderLayer layer;
    for (int h = 0; h < config.heads_per_layer; ++h) {
      layer.self_heads.push_back(make_head(d, dk, rng));
    }
    for (int h = 0; h < config.heads_per_layer; ++h) {
      layer.cross_heads.push_back(make_head(d, dk, rng));
    }
    layer.ln_self = make_ln(d);
    layer.ln_cross = make_ln(d);
    layer.ln_ffn = make_ln(d);
    layer.ffn = make_ffn(d, rng);
    model.decoder.push_back(std::move(layer));
  }
  if (config.task == TaskKind::seq2seq) {
    model.dec_final_ln = make_ln(d);
    model.out_w = xavier(d, config.vocab, rng);
    model.out_b = Tensor::zeros({config.vocab}, true);
  } else {
    model.cls_w = xavier(d, config.n_classes, rng);
    model.cls_b = Tensor::zeros({config.n_classes}, true);
  }
  return model;
}

Tensor ones_gates(int total_heads) {
  if (total_heads == 0) return Tensor{};  // a fully compacted model takes no gates
  return Tensor::full({total_heads}, 1.0);
}

Tensor gates_from_mask(const HeadMask& mask) {
  if (mask.size() == 0) return Tensor{};
  std::vector<double> values(mask.keep.size());
  for (size_t i = 0; i < mask.keep.size(); ++i) values[i] = mask.keep[i];
  return Tensor::from_data({mask.size()}, std::move(values));
}

GatedTransformer compact(const GatedTransformer& model, const HeadMask& mask) {
  if (mask.size() != model.total_heads()) {
    throw ShapeError("compact: mask length must equal the head count");
  }
  GatedTransformer out = model.clone();
  auto layout = model.head_layout();
  // Rebuild every head list with only the kept heads, preserving order.
  for (auto& layer : out.encoder) layer.heads.clear();
  for (auto& layer : out.decoder) {
    layer.self_heads.clear();
    layer.cross_heads.clear();
  }
  auto source_head = [&](const HeadRef& ref) -> const HeadParams& {
    switch (ref.type) {
      case HeadType::encoder_self: return model.encoder[ref.layer].heads[ref.slot];
      case HeadType::decoder_self: return model.decoder[ref.layer].self_heads[ref.slot];
      case HeadType::cross: return model.decoder[ref.layer].cross_heads[ref.slot];
    }
    throw ContractError("compact: bad head ref");
  };
  for (size_t i = 0; i < layout.size(); ++i) {
    if (!mask.keep[i]) continue;
    const HeadParams& src = source_head(layout[i]);
    HeadParams copy{src.wq.clone(), src.wk.clone(), src.wv.clone(), src.wo.clone()};
    switch (layout[i].type) {
      case HeadType::encoder_self:
        out.encoder[layout[i].layer].heads.push_back(std::move(copy));
        break;
      case HeadType::decoder_self:
        out.decoder[layout[i].layer].self_heads.push_back(std::move(copy));
        break;
      case HeadType::cross:
        out.decoder[layout[i].layer].cross_heads.push_back(std::move(copy));
        break;
    }
  }
  return out;
}

}  // namespace hplab
