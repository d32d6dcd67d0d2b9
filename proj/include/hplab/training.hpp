#pragma once

#include <span>

#include "hplab/data.hpp"
#include "hplab/transformer.hpp"

namespace hplab {

// Task loss of a single example under the given gates (recorded on the
// active tape when gradients are tracked).
Tensor example_loss(const GatedTransformer& model, const Dataset& data,
                    int index, const Tensor& gates);

// Mean loss over a batch of example indices.
Tensor batch_loss(const GatedTransformer& model, const Dataset& data,
                  std::span<const int> indices, const Tensor& gates);

// No-grad mean loss over the whole dataset.
double dataset_loss(const GatedTransformer& model, const Dataset& data,
                    const Tensor& gates);

// Classification accuracy or greedy-decoding token accuracy.
double dataset_metric(const GatedTransformer& model, const Dataset& data,
                      const Tensor& gates);

void sgd_step(std::span<const Tensor> params, double lr);
void zero_grads(std::span<const Tensor> params);

// Epoch-shuffled batches of example indices.
std::vector<std::vector<int>> make_batches(int dataset_size, int batch_size,
                                           Rng& order_rng);

// Plain training without any pruning machinery; returns final train loss.
double train_plain(GatedTransformer& model, const Dataset& train, int epochs,
                   double lr, int batch_size, Rng& order_rng);

}  // namespace hplab
