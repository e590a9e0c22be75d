// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "spikebert/config.hpp"
#include "spikebert/model.hpp"

namespace spikebert::testing {

inline ModelConfig tiny_config(int depth, int dim, int heads, int steps, int max_len, int vocab = 20,
                               int classes = 2) {
  ModelConfig c;
  c.depth = depth;
  c.hidden_dim = dim;
  c.heads = heads;
  c.time_steps = steps;
  c.max_len = max_len;
  c.vocab_size = vocab;
  c.num_classes = classes;
  c.ffn_mult = 2;
  return c;
}

/// [CLS] + random non-special ids, right-padded with a random number of pads (at least one real token).
inline TokenBatch random_tokens(Eigen::Index batch, Eigen::Index positions, int vocab, std::mt19937_64& rng,
                                bool with_padding = true) {
  std::uniform_int_distribution<int> tok(kMaskId + 1, vocab - 1);
  std::vector<int> ids;
  for (Eigen::Index b = 0; b < batch; ++b) {
    std::uniform_int_distribution<Eigen::Index> len(1, positions);
    const Eigen::Index real = with_padding ? len(rng) : positions;
    for (Eigen::Index n = 0; n < positions; ++n) ids.push_back(n >= real ? kPadId : n == 0 ? kClsId : tok(rng));
  }
  return TokenBatch(batch, positions, std::move(ids));
}

template <typename Derived>
bool is_binary(const Eigen::MatrixBase<Derived>& m) {
  return ((m.array() == 0) || (m.array() == 1)).all();
}

}  // namespace spikebert::testing
