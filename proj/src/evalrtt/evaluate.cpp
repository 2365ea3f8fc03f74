// SPDX-License-Identifier: Apache-2.0
#include "kunbr/evalrtt/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"
#include "kunbr/lm/model.hpp"
#include "kunbr/lm/optim.hpp"

namespace kunbr::eval {

namespace {

constexpr std::size_t kScoreChunk = 64;

// log p(choice | prompt) for every choice of every item, item-major.
std::vector<double> choice_log_probs(const ParameterStore& model, std::span<const corpus::McqItem> items) {
  std::vector<double> out;
  for (std::size_t start = 0; start < items.size(); start += kScoreChunk) {
    const std::size_t stop = std::min(items.size(), start + kScoreChunk);
    std::vector<lm::ContinuationRef> refs;
    for (std::size_t i = start; i < stop; ++i) {
      for (const auto& choice : items[i].choices) refs.push_back({items[i].prompt, choice});
    }
    ad::Graph graph;
    lm::ParamVars params(graph, model, FreezeMask::none());
    const auto plan = lm::plan_continuations(refs, model.model_config());
    const Tensor lp = lm::continuation_log_probs(params, plan).value();
    out.insert(out.end(), lp.data().begin(), lp.data().end());
  }
  return out;
}

std::string joined(const std::vector<std::string>& v) {
  std::string msg;
  for (const auto& s : v) msg += "\n  - " + s;
  return msg;
}

}  // namespace

std::vector<int> mcq_predictions(const ParameterStore& model, std::span<const corpus::McqItem> items) {
  if (items.empty()) throw ValidationError("mcq evaluation over an empty set");
  const auto lp = choice_log_probs(model, items);
  std::vector<int> out(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    int best = 0;
    for (std::size_t k = 1; k < corpus::kChoices; ++k) {
      if (lp[i * corpus::kChoices + k] > lp[i * corpus::kChoices + static_cast<std::size_t>(best)]) best = static_cast<int>(k);
    }
    out[i] = best;
  }
  return out;
}

double mcq_accuracy(const ParameterStore& model, std::span<const corpus::McqItem> items) {
  const auto pred = mcq_predictions(model, items);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) hits += pred[i] == items[i].correct ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

double mcq_accuracy(const ParameterStore& model, std::span<const corpus::FactRecord> records,
                    const corpus::Tokenizer& tokenizer) {
  const auto items = corpus::render_all(records, tokenizer);
  return mcq_accuracy(model, items);
}

Utility utility_eval(const ParameterStore& model, std::span<const corpus::FactRecord> retain,
                     const corpus::Tokenizer& tokenizer) {
  const auto items = corpus::render_all(retain, tokenizer);
  if (items.empty()) throw ValidationError("utility evaluation over an empty retain set");
  Utility u;
  u.retain_accuracy = mcq_accuracy(model, items);
  double nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < items.size(); start += kScoreChunk) {
    const std::size_t stop = std::min(items.size(), start + kScoreChunk);
    std::vector<lm::ContinuationRef> refs;
    for (std::size_t i = start; i < stop; ++i) {
      const auto& answer = items[i].choices[static_cast<std::size_t>(items[i].correct)];
      refs.push_back({items[i].prompt, answer});
      tokens += answer.size();
    }
    ad::Graph graph;
    lm::ParamVars params(graph, model, FreezeMask::none());
    const auto plan = lm::plan_continuations(refs, model.model_config());
    for (double v : lm::continuation_log_probs(params, plan).value().data()) nll -= v;
  }
  u.retain_perplexity = std::exp(nll / static_cast<double>(tokens));
  return u;
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> out;
  if (!(lr > 0.0)) out.push_back(fmt::format("train lr must be positive, got {}", lr));
  if (batch_size == 0) out.push_back("train batch_size must be positive");
  if (eval_every == 0) out.push_back("train eval_every must be positive");
  if (!(stop_accuracy > 0.0 && stop_accuracy <= 1.0)) out.push_back("train stop_accuracy must lie in (0, 1]");
  return out;
}

std::vector<std::string> AttackConfig::violations() const {
  std::vector<std::string> out;
  if (!(lr > 0.0)) out.push_back(fmt::format("attack lr must be positive, got {}", lr));
  if (batch_size == 0) out.push_back("attack batch_size must be positive");
  if (!(target_accuracy > 0.0 && target_accuracy <= 1.0)) out.push_back("attack target_accuracy must lie in (0, 1]");
  return out;
}

MemorizeResult memorize(ParameterStore& model, const corpus::DatasetSplits& splits, const corpus::Tokenizer& tokenizer,
                        const TrainConfig& config, std::uint64_t seed) {
  if (const auto v = config.violations(); !v.empty()) throw ValidationError("invalid train config:" + joined(v));
  std::vector<Example> examples;
  std::vector<corpus::FactRecord> records;
  for (auto which : {corpus::SplitName::kRetain, corpus::SplitName::kT, corpus::SplitName::kV}) {
    for (const auto& r : corpus::select_split(splits, which)) {
      examples.push_back(corpus::to_example(r, tokenizer, std::string(corpus::split_tag(which))));
      records.push_back(r);
    }
  }
  const auto items = corpus::render_all(records, tokenizer);
  corpus::BatchStream stream(std::move(examples), config.batch_size, derive_seed(seed, "memorize"));
  lm::AdamTrainer trainer(model, config.lr, FreezeMask::all(model));

  MemorizeResult result;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    double total = 0.0;
    const auto batches = stream.epoch(e);
    for (const auto& b : batches) total += trainer.step(model, b) * static_cast<double>(b.size());
    result.epoch_loss.push_back(total / static_cast<double>(stream.example_count()));
    result.epochs_run = e + 1;
    if ((e + 1) % config.eval_every == 0) {
      result.accuracy = mcq_accuracy(model, items);
      if (result.accuracy >= config.stop_accuracy) return result;
    }
  }
  result.accuracy = mcq_accuracy(model, items);
  return result;
}

AttackResult rtt_attack(ParameterStore& model, const corpus::DatasetSplits& splits, const corpus::Tokenizer& tokenizer,
                        const AttackConfig& config, std::uint64_t seed) {
  if (const auto v = config.violations(); !v.empty()) throw ValidationError("invalid attack config:" + joined(v));
  if (splits.forget_T.empty()) throw ValidationError("rtt attack needs a non-empty T split");
  const auto stream =
      corpus::training_batches(splits, corpus::SplitName::kT, tokenizer, config.batch_size, derive_seed(seed, "rtt"));
  const auto t_items = corpus::render_all(splits.forget_T, tokenizer);

  AttackResult result;
  result.t_accuracy = mcq_accuracy(model, t_items);
  result.reached_target = result.t_accuracy >= config.target_accuracy;
  if (config.max_epochs == 0 || result.reached_target) return result;

  lm::AdamTrainer trainer(model, config.lr, FreezeMask::all(model));
  for (std::size_t e = 0; e < config.max_epochs; ++e) {
    double total = 0.0;
    for (const auto& b : stream.epoch(e)) {
      for (const auto& ex : b) {
        if (ex.tag != "T") throw ValidationError(fmt::format("rtt attack batch carries a '{}' example", ex.tag));
      }
      total += trainer.step(model, b) * static_cast<double>(b.size());
    }
    result.epoch_loss.push_back(total / static_cast<double>(stream.example_count()));
    result.epochs_run = e + 1;
    result.t_accuracy = mcq_accuracy(model, t_items);
    if (result.t_accuracy >= config.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  return result;
}

}  // namespace kunbr::eval
