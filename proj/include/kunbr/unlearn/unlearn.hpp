// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kunbr/corpus/corpus.hpp"
#include "kunbr/lm/params.hpp"
#include "kunbr/unlearn/losses.hpp"

namespace kunbr::unlearn {

enum class Method { kGA, kGD, kNPO, kRIA, kRMU };

std::string_view method_name(Method method);
// Case-insensitive.
Method parse_method(std::string_view name);
std::vector<Method> all_methods();

struct UnlearnConfig {
  Method method = Method::kGD;
  double lr = 5e-3;
  double retain_coeff = 0.1;  // GD only
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  double rmu_delta_scale = 1.0;  // RMU only
  double npo_epsilon = kDefaultNpoEpsilon;  // NPO only
  std::uint64_t seed = 0;
  // GA/GD: stop once the forget NLL of a step exceeds this value.
  std::optional<double> loss_ceiling;

  std::vector<std::string> violations() const;
  void validate() const;
};

struct StepResult {
  double loss_forget = 0.0;
  std::optional<double> loss_retain;
};

// alpha * g_retain - g_forget, the descent direction of a GD step.
GradientMap gd_direction(const GradientMap& forget, const GradientMap& retain, double alpha);

// theta + lr * grad NLL(forget).
StepResult ga_step(ParameterStore& model, const Batch& forget, double lr, const FreezeMask& mask);
// theta - lr * (alpha * grad NLL(retain) - grad NLL(forget)).
StepResult gd_step(ParameterStore& model, const Batch& forget, const Batch& retain, double lr, double alpha,
                   const FreezeMask& mask);
// theta - lr * grad NPO(forget).
StepResult npo_step(ParameterStore& model, const Batch& forget, double lr, double epsilon, const FreezeMask& mask);
// theta - lr * grad RIA(items).
StepResult ria_step(ParameterStore& model, const Batch& items, double lr, const FreezeMask& mask);
// theta - lr * grad RMU(forget) with the perturbation held fixed.
StepResult rmu_step(ParameterStore& model, const Batch& forget, double lr, const ParameterStore& delta,
                    const FreezeMask& mask);

struct TraceRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  Method method = Method::kGD;
  double loss_forget = 0.0;
  std::optional<double> loss_retain;
};

struct UnlearnResult {
  std::vector<TraceRow> trace;
  // "completed", "loss_ceiling" or "aborted".
  std::string status = "completed";
  std::string error;

  bool ok() const { return status != "aborted"; }
};

// epochs x batches applications of the configured step. Forget batches come
// from `forget` epoch by epoch; GD draws retain batches from `retain` in
// sequence. A failing step stops the run with status "aborted", leaving the
// model at its last good state.
UnlearnResult run_unlearning(ParameterStore& model, const corpus::BatchStream& forget, corpus::BatchStream* retain,
                             const UnlearnConfig& config, const FreezeMask& mask);

// Forget set is T + V; batch streams are seeded from config.seed.
UnlearnResult run_unlearning(ParameterStore& model, const corpus::DatasetSplits& splits,
                             const corpus::Tokenizer& tokenizer, const UnlearnConfig& config, const FreezeMask& mask);

// epoch,batch,method,loss_forget,loss_retain
std::string trace_csv(const std::vector<TraceRow>& trace);

}  // namespace kunbr::unlearn
