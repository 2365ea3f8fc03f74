// SPDX-License-Identifier: Apache-2.0
#include "kunbr/density/density.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>
#include <set>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"

namespace kunbr::density {

const std::vector<double>& LayerDensity::normalized() const {
  if (!K_norm) throw ValidationError("knowledge density is undefined: every layer gradient is zero");
  return *K_norm;
}

std::vector<double> normalize(std::span<const double> K) {
  if (K.empty()) throw ValidationError("normalize: empty density vector");
  double total = 0.0;
  for (double k : K) {
    if (!(k >= 0.0)) throw ValidationError(fmt::format("normalize: density {} is negative or NaN", k));
    total += k;
  }
  if (total == 0.0) throw ValidationError("normalize: total density is zero");
  std::vector<double> out(K.size());
  for (std::size_t i = 0; i < K.size(); ++i) out[i] = K[i] / total;
  return out;
}

LayerDensity estimate_density(const ParameterStore& model, const std::vector<Batch>& forget_batches,
                              const LossSpec& loss) {
  const std::size_t H = model.model_config().layers;
  std::vector<std::size_t> all_layers(H);
  std::iota(all_layers.begin(), all_layers.end(), 0);
  const FreezeMask mask = FreezeMask::layers(model, all_layers);

  std::vector<double> sums(H, 0.0);
  std::size_t examples = 0;
  for (const auto& batch : forget_batches) {
    for (const auto& ex : batch) {
      const auto lg = loss_and_gradients(model, Batch{ex}, loss, mask);
      for (const auto& [name, g] : lg.gradients) {
        const auto slot = parse_slot(name);
        double l1 = 0.0;
        for (double v : g.data()) l1 += std::abs(v);
        sums[slot.layer] += l1;
      }
      ++examples;
    }
  }
  if (examples == 0) throw ValidationError("estimate_density needs at least one forget example");

  LayerDensity out;
  out.K.resize(H);
  double total = 0.0;
  for (std::size_t l = 0; l < H; ++l) {
    out.K[l] = sums[l] / static_cast<double>(examples);
    total += out.K[l];
  }
  if (total > 0.0) out.K_norm = normalize(out.K);
  return out;
}

std::vector<std::size_t> BlockPartition::layers_of(std::size_t block) const {
  if (block >= M) throw ValidationError(fmt::format("block {} out of range [0, {})", block, M));
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < H; ++l) {
    if (assignment[l] == block) out.push_back(l);
  }
  return out;
}

BlockPartition partition_blocks(std::size_t H, std::size_t M) {
  if (M == 0 || M > H) throw ValidationError(fmt::format("block count M={} must lie in [1, H={}]", M, H));
  BlockPartition p{H, M, H / M, std::vector<std::size_t>(H)};
  for (std::size_t l = 0; l < H; ++l) p.assignment[l] = std::min(l / p.N, M - 1);
  return p;
}

std::vector<bool> BlockScore::eligibility(std::size_t head_exclude_layers) const {
  std::vector<bool> out(partition.M, true);
  const std::size_t H = partition.H;
  for (std::size_t l = H - std::min(head_exclude_layers, H); l < H; ++l) out[partition.assignment[l]] = false;
  return out;
}

BlockScore score_blocks(const BlockPartition& partition, std::span<const double> K_norm) {
  if (K_norm.size() != partition.H) {
    throw ShapeError(fmt::format("score_blocks: {} densities for {} layers", K_norm.size(), partition.H));
  }
  BlockScore s{partition, std::vector<double>(partition.M, 0.0)};
  for (std::size_t l = 0; l < partition.H; ++l) s.score[partition.assignment[l]] += K_norm[l];
  return s;
}

std::vector<std::size_t> select_blocks(const BlockScore& scores, std::size_t top_k, std::size_t head_exclude_layers) {
  const auto eligible = scores.eligibility(head_exclude_layers);
  std::vector<std::size_t> candidates;
  for (std::size_t m = 0; m < eligible.size(); ++m) {
    if (eligible[m]) candidates.push_back(m);
  }
  if (top_k > candidates.size()) {
    throw ValidationError(
        fmt::format("top_k={} exceeds the {} eligible blocks", top_k, candidates.size()));
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return scores.score[a] > scores.score[b]; });
  candidates.resize(top_k);
  return candidates;
}

std::vector<std::size_t> layers_of_blocks(const BlockPartition& partition, std::span<const std::size_t> blocks) {
  std::set<std::size_t> layers;
  for (auto b : blocks) {
    for (auto l : partition.layers_of(b)) layers.insert(l);
  }
  return {layers.begin(), layers.end()};
}

LayerDelta layer_deltas(const ParameterStore& a, const ParameterStore& b) {
  const std::size_t H = a.model_config().layers;
  if (b.model_config().layers != H) throw ShapeError("layer_deltas: models have different depths");
  LayerDelta out{std::vector<double>(H, 0.0), std::vector<double>(H, 0.0)};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto slot = parse_slot(a.name(i));
    if (slot.kind != ParamSlot::Kind::kLayer) continue;
    const Tensor& ta = a.value(i);
    const Tensor& tb = b.at(a.name(i));
    if (ta.shape() != tb.shape()) throw ShapeError(fmt::format("layer_deltas: '{}' differs in shape", a.name(i)));
    for (std::size_t k = 0; k < ta.size(); ++k) {
      const double d = ta[k] - tb[k];
      out.l1[slot.layer] += std::abs(d);
      out.l2[slot.layer] += d * d;
    }
  }
  for (auto& v : out.l2) v = std::sqrt(v);
  return out;
}

double top_share(const LayerDelta& delta, std::size_t k) {
  std::vector<double> v = delta.l1;
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  if (total == 0.0) return 0.0;
  std::sort(v.begin(), v.end(), std::greater<>());
  k = std::min(k, v.size());
  return std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / total;
}

nlohmann::json to_json(const DensityReport& r) {
  nlohmann::json j;
  j["K"] = r.density.K;
  j["K_norm"] = r.density.K_norm ? nlohmann::json(*r.density.K_norm) : nlohmann::json();
  j["block_count"] = r.scores.partition.M;
  j["layers_per_block"] = r.scores.partition.N;
  j["assignment"] = r.scores.partition.assignment;
  j["block_scores"] = r.scores.score;
  std::vector<bool> eligible = r.scores.eligibility(r.head_exclude_layers);
  j["eligible"] = eligible;
  j["selected"] = r.selected;
  j["top_k"] = r.top_k;
  j["head_exclude_layers"] = r.head_exclude_layers;
  return j;
}

nlohmann::json to_json(const LayerDelta& d) {
  return {{"l1", d.l1}, {"l2", d.l2}, {"top2_share", top_share(d, 2)}};
}

std::string to_csv(const DensityReport& r, const LayerDelta* delta) {
  if (delta && (delta->l1.size() != r.density.K.size() || delta->l2.size() != r.density.K.size())) {
    throw ShapeError(fmt::format("density csv: delta covers {} layers, density covers {}", delta->l1.size(),
                                 r.density.K.size()));
  }
  std::string out = delta ? "layer,block,K,K_norm,eligible,selected,delta_l1,delta_l2\n"
                          : "layer,block,K,K_norm,eligible,selected\n";
  const auto eligible = r.scores.partition.M ? r.scores.eligibility(r.head_exclude_layers) : std::vector<bool>{};
  const std::set<std::size_t> chosen(r.selected.begin(), r.selected.end());
  for (std::size_t l = 0; l < r.density.K.size(); ++l) {
    const std::size_t block = r.scores.partition.assignment.empty() ? 0 : r.scores.partition.assignment[l];
    const std::string norm = r.density.K_norm ? fmt::format("{:.17g}", (*r.density.K_norm)[l]) : std::string();
    out += fmt::format("{},{},{:.17g},{},{},{}", l, block, r.density.K[l], norm,
                       eligible.empty() ? 0 : int(eligible[block]), int(chosen.contains(block)));
    if (delta) out += fmt::format(",{:.17g},{:.17g}", delta->l1[l], delta->l2[l]);
    out += "\n";
  }
  return out;
}

}  // namespace kunbr::density
