#include "hplab/data.hpp"

#include <algorithm>

namespace hplab {

namespace {

void check_task_params(int size, int vocab, int length) {
  if (size < 2) throw DomainError("dataset: size must be at least 2");
  if (vocab < 4) throw DomainError("dataset: vocab must be at least 4");
  if (length < 4) throw DomainError("dataset: length must be at least 4");
}

// Payload token other than the needle, from [3, vocab).
int filler_token(Rng& rng, int vocab) {
  return 3 + rng.below(vocab - 3);
}

}  // namespace

Dataset gen_needle_data(uint64_t seed, int size, int vocab, int length) {
  check_task_params(size, vocab, length);
  Rng rng(seed);
  Dataset data;
  data.kind = TaskKind::classifier;
  int positives = size / 2;
  for (int i = 0; i < size; ++i) {
    bool positive = i < positives;
    int max_count = std::min(4, length);
    int count = positive ? 2 + rng.below(max_count - 1) : rng.below(2);
    std::vector<int> slots(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t) slots[static_cast<size_t>(t)] = t;
    rng.shuffle(slots);
    std::vector<int> tokens(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t) tokens[static_cast<size_t>(t)] = filler_token(rng, vocab);
    for (int c = 0; c < count; ++c) {
      tokens[static_cast<size_t>(slots[static_cast<size_t>(c)])] = kNeedleToken;
    }
    data.examples.push_back({std::move(tokens), positive ? 1 : 0});
  }
  rng.shuffle(data.examples);
  return data;
}

Dataset gen_reversal_data(uint64_t seed, int size, int vocab, int length) {
  check_task_params(size, vocab, length);
  Rng rng(seed);
  Dataset data;
  data.kind = TaskKind::seq2seq;
  for (int i = 0; i < size; ++i) {
    std::vector<int> src(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t) {
      src[static_cast<size_t>(t)] = 2 + rng.below(vocab - 2);
    }
    std::vector<int> tgt(src.rbegin(), src.rend());
    data.pairs.push_back({std::move(src), std::move(tgt)});
  }
  return data;
}

}  // namespace hplab
