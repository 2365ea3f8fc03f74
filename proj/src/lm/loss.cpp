// SPDX-License-Identifier: Apache-2.0
#include "kunbr/lm/loss.hpp"

#include <fmt/format.h>
#include <map>

#include "kunbr/gradbackend/error.hpp"

namespace kunbr::lm {

ContinuationPlan plan_continuations(std::span<const ContinuationRef> items, const ModelConfig& config) {
  if (items.empty()) throw ValidationError("plan_continuations: nothing to score");
  std::map<std::vector<int>, std::size_t> sequence_ids;
  std::vector<std::vector<int>> sequences;
  struct Pending {
    std::size_t sequence;
    std::size_t position;
    int token;
    std::size_t owner;
  };
  std::vector<Pending> pending;

  ContinuationPlan plan;
  plan.count = items.size();
  for (std::size_t c = 0; c < items.size(); ++c) {
    const auto& item = items[c];
    if (item.tokens.empty()) throw ValidationError(fmt::format("continuation {} has an empty target", c));
    if (item.prompt.empty()) throw ValidationError(fmt::format("continuation {} has an empty prompt", c));
    std::vector<int> seq(item.prompt.begin(), item.prompt.end());
    seq.insert(seq.end(), item.tokens.begin(), item.tokens.end() - 1);
    auto [it, inserted] = sequence_ids.try_emplace(seq, sequences.size());
    if (inserted) sequences.push_back(std::move(seq));
    for (std::size_t j = 0; j < item.tokens.size(); ++j) {
      pending.push_back({it->second, item.prompt.size() - 1 + j, item.tokens[j], c});
    }
    plan.lengths.push_back(item.tokens.size());
  }
  plan.batch = pad_sequences(sequences, config);
  for (const auto& p : pending) {
    if (p.token < 0 || static_cast<std::size_t>(p.token) >= config.vocab) {
      throw ValidationError(fmt::format("target token {} outside vocabulary of size {}", p.token, config.vocab));
    }
    plan.rows.push_back(p.sequence * plan.batch.length + p.position);
    plan.tokens.push_back(p.token);
    plan.owner.push_back(p.owner);
  }
  return plan;
}

ad::Var continuation_log_probs(const ParamVars& params, const ContinuationPlan& plan) {
  ad::Var hidden = hidden_states(params, plan.batch);
  ad::Var logp = ad::log_softmax(logits_for_rows(params, hidden, plan.rows));
  return ad::segment_sum(ad::pick(logp, plan.tokens), plan.owner, plan.count);
}

LossSpec nll_loss_spec() {
  return LossSpec{"nll", [](const ParamVars& params, const Batch& batch) {
                    std::vector<ContinuationRef> refs;
                    refs.reserve(batch.size());
                    for (const auto& ex : batch) refs.push_back({ex.prompt, ex.target});
                    const auto plan = plan_continuations(refs, params.store().model_config());
                    return ad::scale(ad::sum(continuation_log_probs(params, plan)),
                                     -1.0 / static_cast<double>(batch.size()));
                  }};
}

double nll_loss(const ParameterStore& model, std::span<const int> prompt, std::span<const int> target) {
  if (target.empty()) throw ValidationError("nll_loss: empty target");
  ad::Graph graph;
  ParamVars params(graph, model, FreezeMask::none());
  const ContinuationRef ref{prompt, target};
  const auto plan = plan_continuations({&ref, 1}, model.model_config());
  return -continuation_log_probs(params, plan).value().item();
}

}  // namespace kunbr::lm
