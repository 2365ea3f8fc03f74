// SPDX-License-Identifier: Apache-2.0
#include "kunbr/kunbr/pipeline.hpp"

#include <fmt/format.h>
#include <set>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"
#include "kunbr/lm/model.hpp"

namespace kunbr::pipeline {

std::string_view density_on_name(DensityOn d) { return d == DensityOn::kUnlearned ? "unlearned" : "original"; }

DensityOn parse_density_on(std::string_view name) {
  if (name == "unlearned") return DensityOn::kUnlearned;
  if (name == "original") return DensityOn::kOriginal;
  throw ValidationError(fmt::format("density_on must be 'unlearned' or 'original', got '{}'", name));
}

std::vector<std::string> KunbrConfig::violations(std::size_t layers) const {
  std::vector<std::string> out;
  if (warm_steps == 0) out.push_back("warm_steps must be at least 1");
  if (M == 0 || M > layers) out.push_back(fmt::format("M={} must lie in [1, {}]", M, layers));
  if (top_k == 0) out.push_back("top_k must be at least 1");
  if (per_block_epochs == 0) out.push_back("per_block_epochs must be at least 1");
  if (batch_size == 0) out.push_back("batch_size must be positive");
  if (!(lr > 0.0)) out.push_back(fmt::format("lr must be positive, got {}", lr));
  if (warm_lr && !(*warm_lr > 0.0)) out.push_back(fmt::format("warm_lr must be positive, got {}", *warm_lr));
  if (!(retain_coeff >= 0.0)) out.push_back(fmt::format("retain_coeff must be non-negative, got {}", retain_coeff));
  if (M >= 1 && M <= layers && top_k > 0) {
    const auto partition = density::partition_blocks(layers, M);
    const auto eligible = density::BlockScore{partition, std::vector<double>(M, 0.0)}.eligibility(head_exclude_layers);
    const auto n = static_cast<std::size_t>(std::count(eligible.begin(), eligible.end(), true));
    if (top_k > n) {
      out.push_back(fmt::format("top_k={} exceeds the {} eligible blocks (M={}, H={}, head_exclude_layers={})", top_k, n,
                                M, layers, head_exclude_layers));
    }
  }
  return out;
}

void KunbrConfig::validate(std::size_t layers) const {
  const auto v = violations(layers);
  if (v.empty()) return;
  std::string msg = "invalid KUnBR config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ValidationError(msg);
}

WarmupResult warmup(const ParameterStore& original, const corpus::DatasetSplits& splits,
                    const corpus::Tokenizer& tokenizer, double lr, double alpha, std::size_t warm_steps,
                    std::size_t batch_size, std::uint64_t seed) {
  if (warm_steps == 0) throw ValidationError("warm_steps must be at least 1");
  auto forget = corpus::training_batches(splits, corpus::SplitName::kForget, tokenizer, batch_size,
                                         derive_seed(seed, "warmup.forget"));
  auto retain = corpus::training_batches(splits, corpus::SplitName::kRetain, tokenizer, batch_size,
                                         derive_seed(seed, "warmup.retain"));
  WarmupResult out{original, {}};
  const FreezeMask all = FreezeMask::all(original);
  for (std::size_t s = 0; s < warm_steps; ++s) {
    const auto step = unlearn::gd_step(out.model, forget.next(), retain.next(), lr, alpha, all);
    out.trace.push_back({s / forget.batches_per_epoch(), s % forget.batches_per_epoch(), unlearn::Method::kGD,
                         step.loss_forget, step.loss_retain});
  }
  return out;
}

namespace {

void require_same_layout(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) throw ShapeError("graft: models have different parameter counts");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i) || a.value(i).shape() != b.value(i).shape()) {
      throw ShapeError(fmt::format("graft: parameter '{}' does not line up between the two models", a.name(i)));
    }
  }
  const ModelConfig& ca = a.model_config();
  const ModelConfig& cb = b.model_config();
  if (ca.layers != cb.layers || ca.d_model != cb.d_model || ca.vocab != cb.vocab) {
    throw ShapeError("graft: model configurations differ");
  }
}

}  // namespace

GraftState build_graft(const ParameterStore& original, const ParameterStore& unlearning,
                       const density::BlockPartition& partition, const std::vector<std::size_t>& blocks,
                       std::size_t head_exclude_layers) {
  require_same_layout(original, unlearning);
  if (partition.H != original.model_config().layers) {
    throw ValidationError(fmt::format("graft: partition covers {} layers, model has {}", partition.H,
                                      original.model_config().layers));
  }
  if (blocks.empty()) throw ValidationError("graft: no block to insert");
  const auto eligible = density::BlockScore{partition, std::vector<double>(partition.M, 0.0)}.eligibility(head_exclude_layers);
  std::set<std::size_t> seen;
  for (auto b : blocks) {
    if (b >= partition.M) throw ValidationError(fmt::format("graft: block {} out of range [0, {})", b, partition.M));
    if (!eligible[b]) throw ValidationError(fmt::format("graft: block {} contains an excluded head layer", b));
    if (!seen.insert(b).second) throw ValidationError(fmt::format("graft: duplicate block {}", b));
  }
  GraftState g{original, blocks, density::layers_of_blocks(partition, blocks), {}};
  lm::insert_layers(g.model, lm::extract_layers(unlearning, g.layers));
  g.mask = FreezeMask::layers(g.model, g.layers);
  return g;
}

GraftState build_graft(const ParameterStore& original, const ParameterStore& unlearning,
                       const density::BlockPartition& partition, std::size_t block, std::size_t head_exclude_layers) {
  return build_graft(original, unlearning, partition, std::vector<std::size_t>{block}, head_exclude_layers);
}

void revert(ParameterStore& unlearning, const GraftState& trained_graft, const std::vector<std::size_t>& blocks) {
  if (blocks != trained_graft.blocks) {
    throw ValidationError(fmt::format("revert: blocks [{}] do not match the graft's blocks [{}]", fmt::join(blocks, ", "),
                                      fmt::join(trained_graft.blocks, ", ")));
  }
  require_same_layout(unlearning, trained_graft.model);
  lm::insert_layers(unlearning, lm::extract_layers(trained_graft.model, trained_graft.layers));
}

void revert(ParameterStore& unlearning, const GraftState& trained_graft, std::size_t block) {
  revert(unlearning, trained_graft, std::vector<std::size_t>{block});
}

KunbrResult run_kunbr(const ParameterStore& original, const corpus::DatasetSplits& splits,
                      const corpus::Tokenizer& tokenizer, const KunbrConfig& config) {
  const std::size_t H = original.model_config().layers;
  config.validate(H);

  auto warm = warmup(original, splits, tokenizer, config.warm_lr.value_or(config.lr), config.retain_coeff,
                     config.warm_steps, config.batch_size, config.seed);
  KunbrResult result{warm.model, warm.model, {}};
  result.report.warmup_trace = std::move(warm.trace);

  const auto partition = density::partition_blocks(H, config.M);
  std::vector<Batch> forget_batches = corpus::training_batches(splits, corpus::SplitName::kForget, tokenizer,
                                                               config.batch_size, derive_seed(config.seed, "density"))
                                          .epoch(0);

  for (std::size_t r = 0; r < config.rounds; ++r) {
    RoundReport round;
    round.round = r;
    const ParameterStore& probe = config.density_on == DensityOn::kUnlearned ? result.model : original;
    round.density.density = density::estimate_density(probe, forget_batches);
    round.density.top_k = config.top_k;
    round.density.head_exclude_layers = config.head_exclude_layers;
    if (!round.density.density.defined()) {
      round.density.scores = density::BlockScore{partition, std::vector<double>(partition.M, 0.0)};
      result.report.rounds.push_back(std::move(round));
      result.report.status = "converged";
      return result;
    }
    round.density.scores = density::score_blocks(partition, round.density.density.normalized());
    round.density.selected = density::select_blocks(round.density.scores, config.top_k, config.head_exclude_layers);

    std::vector<std::vector<std::size_t>> groups;
    if (config.joint) {
      groups.push_back(round.density.selected);
    } else {
      for (auto b : round.density.selected) groups.push_back({b});
    }

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      GraftState graft = build_graft(original, result.model, partition, groups[gi], config.head_exclude_layers);
      unlearn::UnlearnConfig uc;
      uc.method = unlearn::Method::kGD;
      uc.lr = config.lr;
      uc.retain_coeff = config.retain_coeff;
      uc.epochs = config.per_block_epochs;
      uc.batch_size = config.batch_size;
      uc.loss_ceiling = config.loss_ceiling;
      uc.seed = derive_seed(config.seed, fmt::format("round{}.group{}", r, gi));

      auto run = unlearn::run_unlearning(graft.model, splits, tokenizer, uc, graft.mask);
      revert(result.model, graft, groups[gi]);
      round.runs.push_back({groups[gi], graft.layers, run.status, std::move(run.trace)});
      if (!run.ok()) {
        result.report.status = "aborted";
        result.report.error = run.error;
        result.report.rounds.push_back(std::move(round));
        return result;
      }
    }
    result.report.rounds.push_back(std::move(round));
  }
  return result;
}

std::string trace_csv(const PipelineReport& report) {
  std::string out = "phase,round,blocks,epoch,batch,loss_forget,loss_retain\n";
  const auto row = [&](const char* phase, const std::string& round, const std::string& blocks,
                       const unlearn::TraceRow& r) {
    out += fmt::format("{},{},{},{},{},{:.17g},{}\n", phase, round, blocks, r.epoch, r.batch, r.loss_forget,
                       r.loss_retain ? fmt::format("{:.17g}", *r.loss_retain) : std::string());
  };
  for (const auto& r : report.warmup_trace) row("warmup", "", "", r);
  for (const auto& round : report.rounds) {
    for (const auto& run : round.runs) {
      std::string blocks;
      for (auto b : run.blocks) blocks += (blocks.empty() ? "" : " ") + std::to_string(b);
      for (const auto& r : run.trace) row("block", std::to_string(round.round), blocks, r);
    }
  }
  return out;
}

nlohmann::json to_json(const KunbrConfig& c) {
  nlohmann::json j = {{"warm_steps", c.warm_steps},
                      {"M", c.M},
                      {"top_k", c.top_k},
                      {"head_exclude_layers", c.head_exclude_layers},
                      {"rounds", c.rounds},
                      {"per_block_epochs", c.per_block_epochs},
                      {"batch_size", c.batch_size},
                      {"lr", c.lr},
                      {"retain_coeff", c.retain_coeff},
                      {"density_on", density_on_name(c.density_on)},
                      {"joint", c.joint},
                      {"seed", c.seed}};
  j["warm_lr"] = c.warm_lr ? nlohmann::json(*c.warm_lr) : nlohmann::json();
  j["loss_ceiling"] = c.loss_ceiling ? nlohmann::json(*c.loss_ceiling) : nlohmann::json();
  return j;
}

namespace {

nlohmann::json trace_json(const std::vector<unlearn::TraceRow>& trace) {
  nlohmann::json forget = nlohmann::json::array();
  nlohmann::json retain = nlohmann::json::array();
  for (const auto& row : trace) {
    forget.push_back(row.loss_forget);
    retain.push_back(row.loss_retain ? nlohmann::json(*row.loss_retain) : nlohmann::json());
  }
  return {{"loss_forget", forget}, {"loss_retain", retain}};
}

}  // namespace

nlohmann::json to_json(const PipelineReport& r) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& round : r.rounds) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : round.runs) {
      runs.push_back({{"blocks", run.blocks}, {"layers", run.layers}, {"status", run.status}, {"trace", trace_json(run.trace)}});
    }
    rounds.push_back({{"round", round.round}, {"density", density::to_json(round.density)}, {"runs", runs}});
  }
  nlohmann::json j = {{"status", r.status},
                      {"warmup_trace", trace_json(r.warmup_trace)},
                      {"rounds", rounds},
                      {"checkpoints", r.checkpoints}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

}  // namespace kunbr::pipeline
