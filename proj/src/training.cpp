#include "hplab/training.hpp"

#include <numeric>

namespace hplab {

Tensor example_loss(const GatedTransformer& model, const Dataset& data,
                    int index, const Tensor& gates) {
  if (index < 0 || index >= data.size()) {
    throw ContractError("example_loss: index out of range");
  }
  if (data.kind == TaskKind::classifier) {
    const LabeledSeq& ex = data.examples[static_cast<size_t>(index)];
    Tensor logits = model.classifier_logits(ex.tokens, gates);
    int label = ex.label;
    return cross_entropy_rows(logits, std::span<const int>(&label, 1));
  }
  const SeqPair& pair = data.pairs[static_cast<size_t>(index)];
  std::vector<int> tgt_in;
  tgt_in.reserve(pair.tgt.size());
  tgt_in.push_back(kBosToken);
  tgt_in.insert(tgt_in.end(), pair.tgt.begin(), pair.tgt.end() - 1);
  Tensor logits = model.decode_logits(pair.src, tgt_in, gates);
  return cross_entropy_rows(logits, pair.tgt);
}

Tensor batch_loss(const GatedTransformer& model, const Dataset& data,
                  std::span<const int> indices, const Tensor& gates) {
  if (indices.empty()) throw ContractError("batch_loss: empty batch");
  Tensor total;
  for (int idx : indices) {
    Tensor loss = example_loss(model, data, idx, gates);
    total = total.defined() ? add(total, loss) : loss;
  }
  return scale(total, 1.0 / static_cast<double>(indices.size()));
}

double dataset_loss(const GatedTransformer& model, const Dataset& data,
                    const Tensor& gates) {
  double total = 0.0;
  for (int i = 0; i < data.size(); ++i) {
    total += example_loss(model, data, i, gates).item();
  }
  return total / data.size();
}

double dataset_metric(const GatedTransformer& model, const Dataset& data,
                      const Tensor& gates) {
  if (data.size() == 0) throw ContractError("dataset_metric: empty dataset");
  if (data.kind == TaskKind::classifier) {
    int correct = 0;
    for (const auto& ex : data.examples) {
      Tensor logits = model.classifier_logits(ex.tokens, gates);
      int best = 0;
      for (int j = 1; j < logits.cols(); ++j) {
        if (logits.at(j) > logits.at(best)) best = j;
      }
      if (best == ex.label) ++correct;
    }
    return static_cast<double>(correct) / data.size();
  }
  int64_t hits = 0, total = 0;
  for (const auto& pair : data.pairs) {
    std::vector<int> decoded =
        model.greedy_decode(pair.src, gates, static_cast<int>(pair.tgt.size()));
    for (size_t t = 0; t < pair.tgt.size(); ++t) {
      hits += decoded[t] == pair.tgt[t] ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

void sgd_step(std::span<const Tensor> params, double lr) {
  for (const Tensor& p : params) {
    Tensor param = p;
    if (!param.has_grad()) continue;
    auto values = param.mutable_data();
    auto grads = param.grad();
    for (size_t i = 0; i < values.size(); ++i) values[i] -= lr * grads[i];
  }
}

void zero_grads(std::span<const Tensor> params) {
  for (const Tensor& p : params) {
    Tensor param = p;
    param.zero_grad();
  }
}

std::vector<std::vector<int>> make_batches(int dataset_size, int batch_size,
                                           Rng& order_rng) {
  if (batch_size < 1) throw DomainError("make_batches: batch size must be positive");
  std::vector<int> order(static_cast<size_t>(dataset_size));
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < dataset_size; start += batch_size) {
    int end = std::min(dataset_size, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

double train_plain(GatedTransformer& model, const Dataset& train, int epochs,
                   double lr, int batch_size, Rng& order_rng) {
  auto params = model.parameters();
  Tensor gates = ones_gates(model.total_heads());
  double last_loss = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& batch : make_batches(train.size(), batch_size, order_rng)) {
      Tape tape;
      Tensor loss = batch_loss(model, train, batch, gates);
      tape.backward(loss);
      last_loss = loss.item();
      sgd_step(params, lr);
      zero_grads(params);
    }
  }
  return last_loss;
}

}  // namespace hplab
