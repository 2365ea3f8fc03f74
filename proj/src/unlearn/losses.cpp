// SPDX-License-Identifier: Apache-2.0
#include "kunbr/unlearn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"

namespace kunbr::unlearn {

LossSpec npo_loss_spec(double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 0.5)) {
    throw ValidationError(fmt::format("npo epsilon must lie in (0, 0.5), got {}", epsilon));
  }
  return {"npo", [epsilon](const lm::ParamVars& params, const Batch& batch) {
            std::vector<lm::ContinuationRef> refs;
            for (const auto& ex : batch) refs.push_back({ex.prompt, ex.target});
            const auto plan = lm::plan_continuations(refs, params.store().model_config());
            ad::Var p = ad::exp(lm::continuation_log_probs(params, plan));
            return ad::scale(ad::sum(ad::log1m_clamped(p, epsilon)), 1.0 / static_cast<double>(batch.size()));
          }};
}

LossSpec ria_loss_spec() {
  return {"ria", [](const lm::ParamVars& params, const Batch& batch) {
            std::vector<lm::ContinuationRef> refs;
            std::vector<std::size_t> item_of;
            std::vector<double> incorrect_weight;  // -1 on incorrect options, 0 on the target
            std::vector<double> options(batch.size(), 0.0);
            for (std::size_t b = 0; b < batch.size(); ++b) {
              const auto& ex = batch[b];
              if (ex.incorrect.empty()) {
                throw ValidationError(fmt::format("ria: item {} carries no incorrect option", b));
              }
              refs.push_back({ex.prompt, ex.target});
              item_of.push_back(b);
              incorrect_weight.push_back(0.0);
              for (const auto& wrong : ex.incorrect) {
                refs.push_back({ex.prompt, wrong});
                item_of.push_back(b);
                incorrect_weight.push_back(-1.0);
              }
              options[b] = static_cast<double>(ex.incorrect.size());
            }
            const auto plan = lm::plan_continuations(refs, params.store().model_config());
            ad::Graph& g = params.graph();
            ad::Var lp = lm::continuation_log_probs(params, plan);

            // log-sum-exp per item, shifted by the per-item max for range.
            std::vector<double> peak(batch.size(), -INFINITY);
            for (std::size_t c = 0; c < refs.size(); ++c) peak[item_of[c]] = std::max(peak[item_of[c]], lp.value()[c]);
            Tensor shift({refs.size()});
            for (std::size_t c = 0; c < refs.size(); ++c) shift[c] = -peak[item_of[c]];
            Tensor peak_t({batch.size()});
            std::copy(peak.begin(), peak.end(), peak_t.data().begin());
            ad::Var lse = ad::add(ad::log(ad::segment_sum(ad::exp(ad::add(lp, g.constant(shift))), item_of, batch.size())),
                                  g.constant(peak_t));

            Tensor w({refs.size()});
            std::copy(incorrect_weight.begin(), incorrect_weight.end(), w.data().begin());
            Tensor n({batch.size()});
            std::copy(options.begin(), options.end(), n.data().begin());
            ad::Var total = ad::add(ad::sum(ad::mul(lp, g.constant(w))), ad::sum(ad::mul(lse, g.constant(n))));
            return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
          }};
}

namespace {

std::pair<lm::PaddedBatch, std::vector<std::size_t>> prompt_rows(const Batch& batch, const ModelConfig& cfg) {
  if (batch.empty()) throw ValidationError("rmu: empty batch");
  std::vector<std::vector<int>> prompts;
  for (const auto& ex : batch) prompts.push_back(ex.prompt);
  lm::PaddedBatch padded = lm::pad_sequences(prompts, cfg);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t t = 0; t < batch[b].prompt.size(); ++t) rows.push_back(b * padded.length + t);
  }
  return {std::move(padded), std::move(rows)};
}

}  // namespace

ad::Var rmu_representation(const lm::ParamVars& params, const Batch& batch) {
  const auto [padded, rows] = prompt_rows(batch, params.store().model_config());
  return ad::select_rows(lm::hidden_states(params, padded), rows);
}

Tensor rmu_representation(const ParameterStore& model, const Batch& batch) {
  ad::Graph graph;
  lm::ParamVars params(graph, model, FreezeMask::none());
  return rmu_representation(params, batch).value();
}

ParameterStore make_rmu_perturbation(const ParameterStore& model, double delta_scale, std::uint64_t seed) {
  if (!(delta_scale > 0.0)) throw ValidationError(fmt::format("rmu delta_scale must be positive, got {}", delta_scale));
  Rng rng(derive_seed(seed, "rmu_delta"));
  ParameterStore delta = model.config() ? ParameterStore(*model.config()) : ParameterStore();
  for (std::size_t i = 0; i < model.size(); ++i) {
    const Tensor& t = model.value(i);
    double sq = 0.0;
    for (double v : t.data()) sq += v * v;
    const double rms = std::sqrt(sq / static_cast<double>(t.size()));
    Tensor d(t.shape());
    for (auto& v : d.data()) v = delta_scale * rms * standard_normal(rng);
    delta.add(model.name(i), std::move(d));
  }
  return delta;
}

ParameterStore add_stores(const ParameterStore& a, const ParameterStore& b) {
  ParameterStore out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Tensor& t = out.value(i);
    const Tensor& u = b.at(out.name(i));
    if (u.shape() != t.shape()) throw ShapeError(fmt::format("add_stores: '{}' differs in shape", out.name(i)));
    for (std::size_t k = 0; k < t.size(); ++k) t[k] += u[k];
  }
  return out;
}

LossSpec rmu_loss_spec(std::shared_ptr<const ParameterStore> delta, std::shared_ptr<const ParameterStore> anchor) {
  if (!delta) throw ValidationError("rmu: missing perturbation");
  return {"rmu", [delta, anchor](const lm::ParamVars& params, const Batch& batch) {
            const ParameterStore& base = anchor ? *anchor : params.store();
            const Tensor target = rmu_representation(add_stores(base, *delta), batch);
            return ad::scale(ad::squared_distance(rmu_representation(params, batch), target),
                             1.0 / static_cast<double>(batch.size()));
          }};
}

std::vector<std::string> registered_loss_names() { return {"nll", "npo", "ria", "rmu"}; }

LossSpec registered_loss(std::string_view name, const ParameterStore& model, std::uint64_t seed) {
  if (name == "nll") return lm::nll_loss_spec();
  if (name == "npo") return npo_loss_spec();
  if (name == "ria") return ria_loss_spec();
  if (name == "rmu") {
    auto delta = std::make_shared<const ParameterStore>(make_rmu_perturbation(model, 1.0, seed));
    return rmu_loss_spec(delta, std::make_shared<const ParameterStore>(model));
  }
  throw ValidationError(fmt::format("unknown loss '{}'", name));
}

}  // namespace kunbr::unlearn
