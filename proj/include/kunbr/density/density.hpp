// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kunbr/lm/batch.hpp"
#include "kunbr/lm/loss.hpp"
#include "kunbr/lm/params.hpp"

namespace kunbr::density {

struct LayerDensity {
  std::vector<double> K;
  // Absent when sum(K) == 0.
  std::optional<std::vector<double>> K_norm;

  bool defined() const { return K_norm.has_value(); }
  // Throws ValidationError when undefined.
  const std::vector<double>& normalized() const;
};

// K / sum(K). Throws on negative entries or a zero total.
std::vector<double> normalize(std::span<const double> K);

// K[l] is the mean over every example of the L1 norm of the per-example
// loss gradient restricted to the parameters of layer l. The model is only
// read.
LayerDensity estimate_density(const ParameterStore& model, const std::vector<Batch>& forget_batches,
                              const LossSpec& loss = lm::nll_loss_spec());

// Contiguous blocks of N = floor(H / M) layers; the last block also takes
// the H mod M remainder.
struct BlockPartition {
  std::size_t H = 0;
  std::size_t M = 0;
  std::size_t N = 0;
  std::vector<std::size_t> assignment;  // layer -> block

  std::vector<std::size_t> layers_of(std::size_t block) const;
};

BlockPartition partition_blocks(std::size_t H, std::size_t M);

struct BlockScore {
  BlockPartition partition;
  std::vector<double> score;  // per block, sum of K_norm over its layers

  // Blocks that contain no layer >= H - head_exclude_layers.
  std::vector<bool> eligibility(std::size_t head_exclude_layers) const;
};

BlockScore score_blocks(const BlockPartition& partition, std::span<const double> K_norm);

// Top-k eligible blocks by descending score, ties toward the lower id.
std::vector<std::size_t> select_blocks(const BlockScore& scores, std::size_t top_k,
                                       std::size_t head_exclude_layers = 2);

// Union of the layers of the given blocks, ascending.
std::vector<std::size_t> layers_of_blocks(const BlockPartition& partition, std::span<const std::size_t> blocks);

struct LayerDelta {
  std::vector<double> l1;
  std::vector<double> l2;
};

// Per-layer norms of a - b over the parameters named under each layer.
LayerDelta layer_deltas(const ParameterStore& a, const ParameterStore& b);

// Fraction of the total L1 delta carried by the k largest layers; 0 when
// nothing moved.
double top_share(const LayerDelta& delta, std::size_t k);

struct DensityReport {
  LayerDensity density;
  BlockScore scores;
  std::vector<std::size_t> selected;
  std::size_t top_k = 0;
  std::size_t head_exclude_layers = 0;
};

nlohmann::json to_json(const DensityReport& report);
nlohmann::json to_json(const LayerDelta& delta);
// layer,block,K,K_norm,eligible,selected; with a delta, also delta_l1,delta_l2.
std::string to_csv(const DensityReport& report, const LayerDelta* delta = nullptr);

}  // namespace kunbr::density
