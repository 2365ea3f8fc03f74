// SPDX-License-Identifier: Apache-2.0
#include "kunbr/unlearn/unlearn.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"
#include "kunbr/gradbackend/rng.hpp"
#include "kunbr/lm/optim.hpp"

namespace kunbr::unlearn {

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kGA: return "GA";
    case Method::kGD: return "GD";
    case Method::kNPO: return "NPO";
    case Method::kRIA: return "RIA";
    case Method::kRMU: return "RMU";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (Method m : all_methods()) {
    if (method_name(m) == upper) return m;
  }
  throw ValidationError(fmt::format("unknown unlearning method '{}' (expected GA, GD, NPO, RIA or RMU)", name));
}

std::vector<Method> all_methods() { return {Method::kGA, Method::kGD, Method::kNPO, Method::kRIA, Method::kRMU}; }

std::vector<std::string> UnlearnConfig::violations() const {
  std::vector<std::string> out;
  if (!(lr > 0.0) || !std::isfinite(lr)) out.push_back(fmt::format("lr must be positive, got {}", lr));
  if (batch_size == 0) out.push_back("batch_size must be positive");
  if (method == Method::kGD && !(retain_coeff >= 0.0)) {
    out.push_back(fmt::format("retain_coeff must be non-negative, got {}", retain_coeff));
  }
  if (method == Method::kRMU && !(rmu_delta_scale > 0.0)) {
    out.push_back(fmt::format("rmu_delta_scale must be positive, got {}", rmu_delta_scale));
  }
  if (method == Method::kNPO && !(npo_epsilon > 0.0 && npo_epsilon < 0.5)) {
    out.push_back(fmt::format("npo_epsilon must lie in (0, 0.5), got {}", npo_epsilon));
  }
  if (loss_ceiling && method != Method::kGA && method != Method::kGD) {
    out.push_back(fmt::format("loss_ceiling applies to GA and GD only, not {}", method_name(method)));
  }
  return out;
}

void UnlearnConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid unlearning config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ValidationError(msg);
}

namespace {

void require_mask(const FreezeMask& mask) {
  if (mask.empty()) throw ValidationError("unlearning step with an empty trainable set");
}

void require_batch(const Batch& b, const char* what) {
  if (b.empty()) throw ValidationError(fmt::format("unlearning step with an empty {} batch", what));
}

StepResult descend(ParameterStore& model, const Batch& batch, const LossSpec& loss, double lr, const FreezeMask& mask) {
  require_mask(mask);
  require_batch(batch, "forget");
  const auto lg = loss_and_gradients(model, batch, loss, mask);
  lm::sgd_apply(model, lg.gradients, lr, lm::Direction::kDescend, mask);
  return {lg.loss, std::nullopt};
}

}  // namespace

GradientMap gd_direction(const GradientMap& forget, const GradientMap& retain, double alpha) {
  GradientMap out;
  for (const auto& [name, gf] : forget) {
    auto it = retain.find(name);
    if (it == retain.end()) throw ValidationError(fmt::format("gd: no retain gradient for '{}'", name));
    const Tensor& gr = it->second;
    if (gr.shape() != gf.shape()) throw ShapeError(fmt::format("gd: gradient shapes differ for '{}'", name));
    Tensor c(gf.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = alpha * gr[i] - gf[i];
    out.emplace(name, std::move(c));
  }
  if (out.size() != retain.size()) throw ValidationError("gd: retain and forget gradients cover different parameters");
  return out;
}

StepResult ga_step(ParameterStore& model, const Batch& forget, double lr, const FreezeMask& mask) {
  require_mask(mask);
  require_batch(forget, "forget");
  const auto lg = loss_and_gradients(model, forget, lm::nll_loss_spec(), mask);
  lm::sgd_apply(model, lg.gradients, lr, lm::Direction::kAscend, mask);
  return {lg.loss, std::nullopt};
}

StepResult gd_step(ParameterStore& model, const Batch& forget, const Batch& retain, double lr, double alpha,
                   const FreezeMask& mask) {
  require_mask(mask);
  require_batch(forget, "forget");
  require_batch(retain, "retain");
  const LossSpec nll = lm::nll_loss_spec();
  const auto f = loss_and_gradients(model, forget, nll, mask);
  const auto r = loss_and_gradients(model, retain, nll, mask);
  lm::sgd_apply(model, gd_direction(f.gradients, r.gradients, alpha), lr, lm::Direction::kDescend, mask);
  return {f.loss, r.loss};
}

StepResult npo_step(ParameterStore& model, const Batch& forget, double lr, double epsilon, const FreezeMask& mask) {
  return descend(model, forget, npo_loss_spec(epsilon), lr, mask);
}

StepResult ria_step(ParameterStore& model, const Batch& items, double lr, const FreezeMask& mask) {
  return descend(model, items, ria_loss_spec(), lr, mask);
}

StepResult rmu_step(ParameterStore& model, const Batch& forget, double lr, const ParameterStore& delta,
                    const FreezeMask& mask) {
  // The anchor is the pre-step model, so the target is constant for this step.
  auto d = std::make_shared<const ParameterStore>(delta);
  auto anchor = std::make_shared<const ParameterStore>(model);
  return descend(model, forget, rmu_loss_spec(d, anchor), lr, mask);
}

UnlearnResult run_unlearning(ParameterStore& model, const corpus::BatchStream& forget, corpus::BatchStream* retain,
                             const UnlearnConfig& config, const FreezeMask& mask) {
  config.validate();
  require_mask(mask);
  mask.validate_against(model);
  if (config.method == Method::kGD && retain == nullptr) throw ValidationError("GD unlearning needs a retain stream");

  std::optional<ParameterStore> delta;
  if (config.method == Method::kRMU) {
    delta = make_rmu_perturbation(model, config.rmu_delta_scale, derive_seed(config.seed, "rmu"));
  }

  UnlearnResult result;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const auto batches = forget.epoch(e);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      StepResult step;
      try {
        switch (config.method) {
          case Method::kGA: step = ga_step(model, batches[b], config.lr, mask); break;
          case Method::kGD:
            step = gd_step(model, batches[b], retain->next(), config.lr, config.retain_coeff, mask);
            break;
          case Method::kNPO: step = npo_step(model, batches[b], config.lr, config.npo_epsilon, mask); break;
          case Method::kRIA: step = ria_step(model, batches[b], config.lr, mask); break;
          case Method::kRMU: step = rmu_step(model, batches[b], config.lr, *delta, mask); break;
        }
      } catch (const NumericError& err) {
        result.status = "aborted";
        result.error = fmt::format("epoch {} batch {}: {}", e, b, err.what());
        return result;
      }
      result.trace.push_back({e, b, config.method, step.loss_forget, step.loss_retain});
      if (config.loss_ceiling && step.loss_forget > *config.loss_ceiling) {
        result.status = "loss_ceiling";
        return result;
      }
    }
  }
  return result;
}

UnlearnResult run_unlearning(ParameterStore& model, const corpus::DatasetSplits& splits,
                             const corpus::Tokenizer& tokenizer, const UnlearnConfig& config, const FreezeMask& mask) {
  config.validate();
  const auto forget =
      corpus::training_batches(splits, corpus::SplitName::kForget, tokenizer, config.batch_size, config.seed);
  auto retain = corpus::training_batches(splits, corpus::SplitName::kRetain, tokenizer, config.batch_size,
                                         derive_seed(config.seed, "retain"));
  return run_unlearning(model, forget, &retain, config, mask);
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "epoch,batch,method,loss_forget,loss_retain\n";
  for (const auto& r : trace) {
    out += fmt::format("{},{},{},{:.17g},{}\n", r.epoch, r.batch, method_name(r.method), r.loss_forget,
                       r.loss_retain ? fmt::format("{:.17g}", *r.loss_retain) : std::string());
  }
  return out;
}

}  // namespace kunbr::unlearn
