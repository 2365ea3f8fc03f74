// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kunbr/corpus/corpus.hpp"
#include "kunbr/lm/params.hpp"

namespace kunbr::eval {

// Index of the most likely choice per item; ties go to the lowest index.
std::vector<int> mcq_predictions(const ParameterStore& model, std::span<const corpus::McqItem> items);
double mcq_accuracy(const ParameterStore& model, std::span<const corpus::McqItem> items);
double mcq_accuracy(const ParameterStore& model, std::span<const corpus::FactRecord> records,
                    const corpus::Tokenizer& tokenizer);

struct Utility {
  double retain_accuracy = 0.0;
  // exp(mean NLL per answer token) over the retain answers.
  double retain_perplexity = 0.0;
};

Utility utility_eval(const ParameterStore& model, std::span<const corpus::FactRecord> retain,
                     const corpus::Tokenizer& tokenizer);

// A_RTT - A_Unlearn.
inline double recovery(double a_unlearn, double a_rtt) { return a_rtt - a_unlearn; }

struct TrainConfig {
  double lr = 3e-3;
  std::size_t epochs = 300;
  std::size_t batch_size = 16;
  // Stop once full-corpus MCQ accuracy reaches this value, checked every
  // eval_every epochs.
  double stop_accuracy = 1.0;
  std::size_t eval_every = 5;

  std::vector<std::string> violations() const;
};

struct MemorizeResult {
  std::size_t epochs_run = 0;
  double accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Adam on NLL over every record of the splits.
MemorizeResult memorize(ParameterStore& model, const corpus::DatasetSplits& splits, const corpus::Tokenizer& tokenizer,
                        const TrainConfig& config, std::uint64_t seed);

struct AttackConfig {
  double lr = 1e-3;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 8;
  double target_accuracy = 0.95;

  std::vector<std::string> violations() const;
};

struct AttackResult {
  std::size_t epochs_run = 0;
  double t_accuracy = 0.0;
  bool reached_target = false;
  std::vector<double> epoch_loss;
};

// Full-parameter Adam on the T pairs until T accuracy reaches the target or
// the epoch cap. Throws ValidationError if a batch carries a non-T example.
AttackResult rtt_attack(ParameterStore& model, const corpus::DatasetSplits& splits, const corpus::Tokenizer& tokenizer,
                        const AttackConfig& config, std::uint64_t seed);

}  // namespace kunbr::eval
