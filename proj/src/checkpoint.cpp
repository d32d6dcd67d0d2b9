#include <fstream>

#include "hplab/transformer.hpp"
#include "json.hpp"

namespace hplab {

namespace {

using nlohmann::json;

constexpr const char* kMagic = "HPLAB1";

json tensor_to_json(const Tensor& t) {
  json j;
  j["shape"] = t.shape();
  j["data"] = std::vector<double>(t.data().begin(), t.data().end());
  return j;
}

Tensor tensor_from_json(const json& j, bool requires_grad = true) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

json head_to_json(const HeadParams& head) {
  return {{"wq", tensor_to_json(head.wq)},
          {"wk", tensor_to_json(head.wk)},
          {"wv", tensor_to_json(head.wv)},
          {"wo", tensor_to_json(head.wo)}};
}

HeadParams head_from_json(const json& j) {
  return {tensor_from_json(j.at("wq")), tensor_from_json(j.at("wk")),
          tensor_from_json(j.at("wv")), tensor_from_json(j.at("wo"))};
}

json ln_to_json(const LayerNormParams& ln) {
  return {{"gain", tensor_to_json(ln.gain)}, {"bias", tensor_to_json(ln.bias)}};
}

LayerNormParams ln_from_json(const json& j) {
  return {tensor_from_json(j.at("gain")), tensor_from_json(j.at("bias"))};
}

json ffn_to_json(const FeedForward& ffn) {
  return {{"w1", tensor_to_json(ffn.w1)},
          {"b1", tensor_to_json(ffn.b1)},
          {"w2", tensor_to_json(ffn.w2)},
          {"b2", tensor_to_json(ffn.b2)}};
}

FeedForward ffn_from_json(const json& j) {
  return {tensor_from_json(j.at("w1")), tensor_from_json(j.at("b1")),
          tensor_from_json(j.at("w2")), tensor_from_json(j.at("b2"))};
}

json heads_to_json(const std::vector<HeadParams>& heads) {
  json arr = json::array();
  for (const auto& head : heads) arr.push_back(head_to_json(head));
  return arr;
}

std::vector<HeadParams> heads_from_json(const json& arr) {
  std::vector<HeadParams> heads;
  for (const auto& j : arr) heads.push_back(head_from_json(j));
  return heads;
}

}  // namespace

void save_checkpoint(const GatedTransformer& model, const HeadMask& mask,
                     const std::string& path) {
  if (mask.size() != model.total_heads()) {
    throw ShapeError("save_checkpoint: mask length must equal the head count");
  }
  json j;
  j["magic"] = kMagic;
  j["config"] = {{"task", task_name(model.config.task)},
                 {"enc_layers", model.config.enc_layers},
                 {"dec_layers", model.config.dec_layers},
                 {"heads_per_layer", model.config.heads_per_layer},
                 {"d_model", model.config.d_model},
                 {"d_head", model.config.d_head},
                 {"vocab", model.config.vocab},
                 {"max_seq", model.config.max_seq},
                 {"n_classes", model.config.n_classes}};
  j["mask"] = mask.bits();
  j["tok_embed"] = tensor_to_json(model.tok_embed);
  j["pos_embed"] = tensor_to_json(model.pos_embed);
  json enc = json::array();
  for (const auto& layer : model.encoder) {
    enc.push_back({{"heads", heads_to_json(layer.heads)},
                   {"ln_attn", ln_to_json(layer.ln_attn)},
                   {"ln_ffn", ln_to_json(layer.ln_ffn)},
                   {"ffn", ffn_to_json(layer.ffn)}});
  }
  j["encoder"] = std::move(enc);
  j["enc_final_ln"] = ln_to_json(model.enc_final_ln);
  json dec = json::array();
  for (const auto& layer : model.decoder) {
    dec.push_back({{"self_heads", heads_to_json(layer.self_heads)},
                   {"cross_heads", heads_to_json(layer.cross_heads)},
                   {"ln_self", ln_to_json(layer.ln_self)},
                   {"ln_cross", ln_to_json(layer.ln_cross)},
                   {"ln_ffn", ln_to_json(layer.ln_ffn)},
                   {"ffn", ffn_to_json(layer.ffn)}});
  }
  j["decoder"] = std::move(dec);
  if (model.config.task == TaskKind::seq2seq) {
    j["dec_final_ln"] = ln_to_json(model.dec_final_ln);
    j["out_w"] = tensor_to_json(model.out_w);
    j["out_b"] = tensor_to_json(model.out_b);
  } else {
    j["cls_w"] = tensor_to_json(model.cls_w);
    j["cls_b"] = tensor_to_json(model.cls_b);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << j.dump() << "\n";
}

GatedTransformer load_checkpoint(const std::string& path, HeadMask* mask_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  json j;
  in >> j;
  if (!j.contains("magic") || j.at("magic").get<std::string>() != kMagic) {
    throw ConfigError("load_checkpoint: bad magic, expected HPLAB1");
  }
  GatedTransformer model;
  const json& cfg = j.at("config");
  model.config.task = task_from_name(cfg.at("task").get<std::string>());
  model.config.enc_layers = cfg.at("enc_layers").get<int>();
  model.config.dec_layers = cfg.at("dec_layers").get<int>();
  model.config.heads_per_layer = cfg.at("heads_per_layer").get<int>();
  model.config.d_model = cfg.at("d_model").get<int>();
  model.config.d_head = cfg.at("d_head").get<int>();
  model.config.vocab = cfg.at("vocab").get<int>();
  model.config.max_seq = cfg.at("max_seq").get<int>();
  model.config.n_classes = cfg.at("n_classes").get<int>();
  model.tok_embed = tensor_from_json(j.at("tok_embed"));
  model.pos_embed = tensor_from_json(j.at("pos_embed"));
  for (const auto& layer : j.at("encoder")) {
    EncoderLayer lc;
    lc.heads = heads_from_json(layer.at("heads"));
    lc.ln_attn = ln_from_json(layer.at("ln_attn"));
    lc.ln_ffn = ln_from_json(layer.at("ln_ffn"));
    lc.ffn = ffn_from_json(layer.at("ffn"));
    model.encoder.push_back(std::move(lc));
  }
  model.enc_final_ln = ln_from_json(j.at("enc_final_ln"));
  for (const auto& layer : j.at("decoder")) {
    DecoderLayer lc;
    lc.self_heads = heads_from_json(layer.at("self_heads"));
    lc.cross_heads = heads_from_json(layer.at("cross_heads"));
    lc.ln_self = ln_from_json(layer.at("ln_self"));
    lc.ln_cross = ln_from_json(layer.at("ln_cross"));
    lc.ln_ffn = ln_from_json(layer.at("ln_ffn"));
    lc.ffn = ffn_from_json(layer.at("ffn"));
    model.decoder.push_back(std::move(lc));
  }
  if (model.config.task == TaskKind::seq2seq) {
    model.dec_final_ln = ln_from_json(j.at("dec_final_ln"));
    model.out_w = tensor_from_json(j.at("out_w"));
    model.out_b = tensor_from_json(j.at("out_b"));
  } else {
    model.cls_w = tensor_from_json(j.at("cls_w"));
    model.cls_b = tensor_from_json(j.at("cls_b"));
  }
  HeadMask mask = HeadMask::from_bits(j.at("mask").get<std::string>());
  if (mask.size() != model.total_heads()) {
    throw ConfigError("load_checkpoint: mask length does not match head count");
  }
  if (mask_out != nullptr) *mask_out = std::move(mask);
  return model;
}

}  // namespace hplab
