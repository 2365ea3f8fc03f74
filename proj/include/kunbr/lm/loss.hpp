// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kunbr/lm/batch.hpp"
#include "kunbr/lm/model.hpp"

namespace kunbr {

// A differentiable scalar objective over a batch. `build` records the loss
// on the graph the parameters are bound to and returns the scalar node.
struct LossSpec {
  std::string name;
  std::function<ad::Var(const lm::ParamVars&, const Batch&)> build;
};

namespace lm {

// Log-likelihood bookkeeping for scoring continuations after prompts.
// Continuations whose scoring sequence (prompt + tokens[:-1]) coincides
// share one row of the padded batch.
struct ContinuationPlan {
  PaddedBatch batch;
  std::vector<std::size_t> rows;    // flat row (b * T + t) predicting each scored token
  std::vector<int> tokens;          // the scored token at that row
  std::vector<std::size_t> owner;   // continuation each scored token belongs to
  std::size_t count = 0;            // number of continuations
  std::vector<std::size_t> lengths; // scored tokens per continuation
};

struct ContinuationRef {
  std::span<const int> prompt;
  std::span<const int> tokens;
};

ContinuationPlan plan_continuations(std::span<const ContinuationRef> items, const ModelConfig& config);

// log p(tokens | prompt) for every planned continuation, shape [count].
ad::Var continuation_log_probs(const ParamVars& params, const ContinuationPlan& plan);

// -sum_t log p(y_t | x, y_<t), averaged over the batch.
LossSpec nll_loss_spec();

// Single-pair NLL, -sum_t log p(y_t | x, y_<t).
double nll_loss(const ParameterStore& model, std::span<const int> prompt, std::span<const int> target);

}  // namespace lm
}  // namespace kunbr
