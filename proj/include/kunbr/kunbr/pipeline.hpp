// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kunbr/corpus/corpus.hpp"
#include "kunbr/density/density.hpp"
#include "kunbr/lm/params.hpp"
#include "kunbr/unlearn/unlearn.hpp"

namespace kunbr::pipeline {

enum class DensityOn { kUnlearned, kOriginal };

std::string_view density_on_name(DensityOn d);
DensityOn parse_density_on(std::string_view name);

struct KunbrConfig {
  std::size_t warm_steps = 24;
  std::size_t M = 8;
  std::size_t top_k = 6;
  std::size_t head_exclude_layers = 2;
  std::size_t rounds = 1;
  std::size_t per_block_epochs = 15;
  std::size_t batch_size = 8;
  double lr = 0.08;
  // Warm-up step size; falls back to lr.
  std::optional<double> warm_lr = 1e-2;
  double retain_coeff = 1.0;
  DensityOn density_on = DensityOn::kUnlearned;
  // All selected blocks trained together in one graft.
  bool joint = false;
  // Forget-NLL ceiling for each block's GD run.
  std::optional<double> loss_ceiling;
  std::uint64_t seed = 0;

  std::vector<std::string> violations(std::size_t layers) const;
  void validate(std::size_t layers) const;
};

// Copy of the original model carrying the unlearned model's parameters in
// the inserted blocks; only those blocks are trainable.
struct GraftState {
  ParameterStore model;
  std::vector<std::size_t> blocks;
  std::vector<std::size_t> layers;
  FreezeMask mask;
};

struct WarmupResult {
  ParameterStore model;
  std::vector<unlearn::TraceRow> trace;
};

// warm_steps GD steps over every parameter.
WarmupResult warmup(const ParameterStore& original, const corpus::DatasetSplits& splits,
                    const corpus::Tokenizer& tokenizer, double lr, double alpha, std::size_t warm_steps,
                    std::size_t batch_size, std::uint64_t seed);

GraftState build_graft(const ParameterStore& original, const ParameterStore& unlearning,
                       const density::BlockPartition& partition, const std::vector<std::size_t>& blocks,
                       std::size_t head_exclude_layers = 2);
GraftState build_graft(const ParameterStore& original, const ParameterStore& unlearning,
                       const density::BlockPartition& partition, std::size_t block,
                       std::size_t head_exclude_layers = 2);

// Copies the graft's inserted blocks back into `unlearning`. `blocks` must
// match the graft.
void revert(ParameterStore& unlearning, const GraftState& trained_graft, const std::vector<std::size_t>& blocks);
void revert(ParameterStore& unlearning, const GraftState& trained_graft, std::size_t block);

struct BlockRun {
  std::vector<std::size_t> blocks;
  std::vector<std::size_t> layers;
  std::string status;
  std::vector<unlearn::TraceRow> trace;
};

struct RoundReport {
  std::size_t round = 0;
  density::DensityReport density;
  std::vector<BlockRun> runs;
};

struct PipelineReport {
  // "completed", "converged" (zero density) or "aborted".
  std::string status = "completed";
  std::string error;
  std::vector<unlearn::TraceRow> warmup_trace;
  std::vector<RoundReport> rounds;
  nlohmann::json checkpoints = nlohmann::json::object();
};

struct KunbrResult {
  ParameterStore warmup_model;
  ParameterStore model;
  PipelineReport report;
};

KunbrResult run_kunbr(const ParameterStore& original, const corpus::DatasetSplits& splits,
                      const corpus::Tokenizer& tokenizer, const KunbrConfig& config);

// phase,round,blocks,epoch,batch,loss_forget,loss_retain; blocks are
// space-separated ids, empty for the warm-up rows.
std::string trace_csv(const PipelineReport& report);
nlohmann::json to_json(const KunbrConfig& config);
nlohmann::json to_json(const PipelineReport& report);

}  // namespace kunbr::pipeline
