// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kunbr/evalrtt/evaluate.hpp"
#include "kunbr/kunbr/pipeline.hpp"
#include "kunbr/lm/model_config.hpp"
#include "kunbr/unlearn/unlearn.hpp"

namespace kunbr::eval {

struct CorpusConfig {
  std::size_t n_facts = 200;
  double forget_fraction = 0.5;
  double t_fraction = 0.5;
  std::size_t syllables = corpus::kDefaultSyllables;

  std::vector<std::string> violations() const;
};

struct ExperimentConfig {
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train;
  std::map<unlearn::Method, unlearn::UnlearnConfig> unlearn = default_unlearn_configs();
  pipeline::KunbrConfig kunbr;
  AttackConfig attack;

  static std::map<unlearn::Method, unlearn::UnlearnConfig> default_unlearn_configs();
  // Every violation across sections; empty when the config is runnable.
  std::vector<std::string> violations() const;
  void validate() const;
};

// Baseline names plus "KUnBR".
inline constexpr std::string_view kKunbrMethod = "KUnBR";
std::vector<std::string> method_ids();
// Canonical spelling of a method id; throws on unknown names.
std::string canonical_method(std::string_view name);

nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const unlearn::UnlearnConfig& config);
// SHA-256 of the canonical JSON.
std::string config_hash(const ExperimentConfig& config);

// Memorized model and data for one seed, shared by every method.
struct SeedContext {
  std::uint64_t seed = 0;
  corpus::DatasetSplits splits;
  corpus::Tokenizer tokenizer;
  ParameterStore memorized;
  MemorizeResult memorize;
  double pre_retain_accuracy = 0.0;
  double pre_v_accuracy = 0.0;
};

// Seed-derived stage seeds: corpus, split, init, train, unlearn, attack.
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

corpus::DatasetSplits make_splits(const CorpusConfig& config, std::uint64_t seed,
                                  std::vector<corpus::FactRecord>* records = nullptr);
ModelConfig model_for(const ExperimentConfig& config, const corpus::Tokenizer& tokenizer, std::uint64_t seed);
SeedContext prepare_seed(const ExperimentConfig& config, std::uint64_t seed);
// Context around an already memorized model; `memorize` is left empty.
SeedContext seed_context(std::uint64_t seed, corpus::DatasetSplits splits, ParameterStore memorized);
// Throws ValidationError if any rendered prompt exceeds the context length.
void check_context_length(const ModelConfig& model, std::span<const corpus::FactRecord> records,
                          const corpus::Tokenizer& tokenizer);
// SHA-256 of the f64 checkpoint bytes with empty metadata.
std::string parameters_sha256(const ParameterStore& model);

struct UnlearnOutcome {
  ParameterStore model;
  std::string status;
  std::string error;
  nlohmann::json detail;
  std::string trace_csv;
  std::optional<ParameterStore> warmup;  // KUnBR only
};

// Applies one method id (baseline or KUnBR) to the memorized model.
UnlearnOutcome apply_method(const ExperimentConfig& config, const SeedContext& ctx, const std::string& method);

struct ExperimentReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string status = "ok";
  std::string error;

  double memorized_accuracy = 0.0;
  double pre_retain_accuracy = 0.0;
  double pre_v_accuracy = 0.0;
  double a_unlearn = 0.0;
  double a_rtt = 0.0;
  double a_recover = 0.0;
  double retain_accuracy = 0.0;
  double retain_perplexity = 0.0;
  double rtt_t_accuracy = 0.0;
  std::size_t rtt_epochs = 0;
  bool rtt_reached_target = false;
  std::string unlearned_sha256;
  std::string attacked_sha256;
  nlohmann::json unlearn_detail;

  bool ok() const { return status == "ok"; }
};

// Measures a_unlearn and utility on `unlearned`, attacks a copy, measures
// a_rtt. a_recover is a_rtt - a_unlearn exactly.
ExperimentReport evaluate_unlearned(const ExperimentConfig& config, const SeedContext& ctx, const std::string& method,
                                    const ParameterStore& unlearned, ParameterStore* attacked_out = nullptr);

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for one value
};

MetricSummary summarize(const std::vector<double>& values);

struct Aggregate {
  std::string method;
  std::size_t runs = 0;
  std::size_t failures = 0;
  bool warning = false;
  MetricSummary a_unlearn, a_rtt, a_recover, retain_accuracy, retain_perplexity, rtt_t_accuracy;
};

Aggregate aggregate(const std::string& method, const std::vector<ExperimentReport>& reports);

struct Comparison {
  std::vector<ExperimentReport> reports;  // seed-major, methods in request order
  std::vector<Aggregate> aggregates;      // one per method
};

using ProgressFn = std::function<void(const std::string&)>;

// For every seed: memorize once, then every method on that shared model.
// Stage failures are recorded per report.
Comparison run_comparison(const ExperimentConfig& config, const std::vector<std::string>& methods,
                          const std::vector<std::uint64_t>& seeds, const ProgressFn& progress = {});

inline std::vector<ExperimentReport> run_experiment(const ExperimentConfig& config, const std::string& method,
                                                    const std::vector<std::uint64_t>& seeds) {
  return run_comparison(config, {method}, seeds).reports;
}

nlohmann::json to_json(const ExperimentReport& report);
nlohmann::json to_json(const Aggregate& aggregate);
// method,seed,a_unlearn_pct,a_rtt_pct,a_recover_pct,retain_acc_pct,retain_ppl
std::string reports_csv(const std::vector<ExperimentReport>& reports);
// One row per method with mean and std of each metric.
std::string aggregate_csv(const std::vector<Aggregate>& aggregates);

}  // namespace kunbr::eval
