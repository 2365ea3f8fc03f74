// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit and acceptance suites.
#pragma once

#include <vector>

#include "kunbr/gradbackend/rng.hpp"
#include "kunbr/lm/batch.hpp"
#include "kunbr/lm/model.hpp"

namespace kunbr::testing {

// 424 parameters: small enough for per-coordinate finite differences.
inline ModelConfig tiny_config(std::uint64_t seed = 11) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 4;
  c.n_heads = 2;
  c.d_ff = 8;
  c.vocab = 10;
  c.context = 8;
  c.seed = seed;
  return c;
}

// ~4.5k parameters, four layers.
inline ModelConfig small_config(std::uint64_t seed = 5) {
  ModelConfig c;
  c.layers = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab = 12;
  c.context = 8;
  c.seed = seed;
  return c;
}

// Moves every parameter off its initial value so norms and biases carry
// non-trivial gradients.
inline void perturb(ParameterStore& store, std::uint64_t seed, double amount = 0.3) {
  Rng rng(seed);
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (auto& v : store.value(i).data()) v += uniform(rng, -amount, amount);
  }
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> out(n);
  for (auto& t : out) t = static_cast<int>(1 + uniform_index(rng, vocab - 1));
  return out;
}

// Prompts of length 2..4 with one-token targets and three one-token
// incorrect options.
inline Batch random_batch(std::uint64_t seed, const ModelConfig& cfg, std::size_t n) {
  Rng rng(seed);
  Batch batch;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.prompt = random_tokens(rng, 2 + uniform_index(rng, 3), cfg.vocab);
    ex.target = random_tokens(rng, 1, cfg.vocab);
    for (int k = 0; k < 3; ++k) ex.incorrect.push_back(random_tokens(rng, 1, cfg.vocab));
    ex.tag = "test";
    batch.push_back(std::move(ex));
  }
  return batch;
}

}  // namespace kunbr::testing
