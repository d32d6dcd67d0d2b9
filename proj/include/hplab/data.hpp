#pragma once

#include <cstdint>
#include <vector>

#include "hplab/transformer.hpp"

namespace hplab {

// Token layout shared by both synthetic tasks: 0 reserved, 1 = BOS,
// 2 = the needle token, payload tokens fill [2, vocab).
constexpr int kNeedleToken = 2;

struct LabeledSeq {
  std::vector<int> tokens;
  int label;
};

struct SeqPair {
  std::vector<int> src;
  std::vector<int> tgt;
};

struct Dataset {
  TaskKind kind = TaskKind::classifier;
  std::vector<LabeledSeq> examples;  // classifier task
  std::vector<SeqPair> pairs;        // seq2seq task

  int size() const {
    return static_cast<int>(kind == TaskKind::classifier ? examples.size()
                                                         : pairs.size());
  }
};

// Balanced binary task: label 1 iff the needle token occurs at least twice.
Dataset gen_needle_data(uint64_t seed, int size, int vocab, int length);

// Target is the reversed source sequence.
Dataset gen_reversal_data(uint64_t seed, int size, int vocab, int length);

}  // namespace hplab
