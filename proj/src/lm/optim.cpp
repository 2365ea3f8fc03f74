// SPDX-License-Identifier: Apache-2.0
#include "kunbr/lm/optim.hpp"

#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/gradients.hpp"

namespace kunbr::lm {

void sgd_apply(ParameterStore& model, const GradientMap& gradients, double lr, Direction direction,
               const FreezeMask& mask) {
  for (const auto& [name, grad] : gradients) {
    if (!mask.trainable(name)) {
      throw ValidationError(fmt::format("sgd_apply: gradient supplied for frozen parameter '{}'", name));
    }
    const Tensor& slot = model.at(name);
    if (slot.shape() != grad.shape()) {
      throw ShapeError(fmt::format("sgd_apply: gradient for '{}' has shape {}, parameter has {}", name,
                                   shape_string(grad.shape()), shape_string(slot.shape())));
    }
  }
  if (lr == 0.0) return;
  const double sign = direction == Direction::kAscend ? 1.0 : -1.0;
  for (const auto& [name, grad] : gradients) {
    Tensor& theta = model.at(name);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += sign * lr * grad[i];
  }
}

AdamTrainer::AdamTrainer(const ParameterStore& model, double lr, FreezeMask trainable)
    : lr_(lr), trainable_(std::move(trainable)), loss_(nll_loss_spec()) {
  if (!(lr > 0.0)) throw ValidationError(fmt::format("Adam learning rate must be positive, got {}", lr));
  trainable_.validate_against(model);
  for (const auto& name : trainable_.names()) {
    first_moment_.emplace(name, Tensor(model.at(name).shape(), 0.0));
    second_moment_.emplace(name, Tensor(model.at(name).shape(), 0.0));
  }
}

double AdamTrainer::step(ParameterStore& model, const Batch& batch) {
  auto [loss, grads] = loss_and_gradients(model, batch, loss_, trainable_);
  if (!(loss <= kDivergenceLoss)) {
    throw NumericError(fmt::format("training diverged at step {}: loss {} exceeds {}", steps_, loss, kDivergenceLoss));
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(AdamConstants::kBeta1, t);
  const double correction2 = 1.0 - std::pow(AdamConstants::kBeta2, t);
  for (auto& [name, g] : grads) {
    Tensor& theta = model.at(name);
    Tensor& m = first_moment_.at(name);
    Tensor& v = second_moment_.at(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = AdamConstants::kBeta1 * m[i] + (1.0 - AdamConstants::kBeta1) * g[i];
      v[i] = AdamConstants::kBeta2 * v[i] + (1.0 - AdamConstants::kBeta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      theta[i] -= lr_ * m_hat / (std::sqrt(v_hat) + AdamConstants::kEpsilon);
    }
  }
  return loss;
}

std::vector<double> adam_train(ParameterStore& model, const std::vector<Batch>& batches, double lr, std::size_t steps) {
  std::vector<double> trace;
  if (steps == 0) return trace;
  if (batches.empty()) throw ValidationError("adam_train: no batches");
  AdamTrainer trainer(model, lr, FreezeMask::all(model));
  for (std::size_t s = 0; s < steps; ++s) trace.push_back(trainer.step(model, batches[s % batches.size()]));
  return trace;
}

}  // namespace kunbr::lm
