// SPDX-License-Identifier: Apache-2.0
#include "kunbr/gradbackend/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"

namespace kunbr {

LossAndGradients loss_and_gradients(const ParameterStore& params, const Batch& batch, const LossSpec& loss,
                                    const FreezeMask& trainable) {
  ad::Graph graph;
  lm::ParamVars vars(graph, params, trainable);
  const ad::Var root = loss.build(vars, batch);
  LossAndGradients out;
  out.loss = root.value().item();
  if (trainable.empty()) return out;
  graph.backward(root);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.trainable(params.name(i))) continue;
    Tensor g = graph.grad(vars.at(i));
    if (!g.all_finite()) {
      throw NumericError(fmt::format("non-finite gradient for '{}' under loss '{}'", params.name(i), loss.name));
    }
    out.gradients.emplace(params.name(i), std::move(g));
  }
  return out;
}

double evaluate_loss(const ParameterStore& params, const Batch& batch, const LossSpec& loss) {
  ad::Graph graph;
  lm::ParamVars vars(graph, params, FreezeMask::none());
  return loss.build(vars, batch).value().item();
}

GradientMap finite_difference_gradients(const ParameterStore& params, const Batch& batch, const LossSpec& loss,
                                        double step, std::size_t budget) {
  const std::size_t count = params.parameter_count();
  if (count > budget) {
    throw ValidationError(fmt::format("finite-difference oracle refused: {} parameters exceed the budget of {}", count,
                                      budget));
  }
  if (!(step > 0.0)) throw ValidationError(fmt::format("finite-difference step must be positive, got {}", step));
  ParameterStore probe = params;
  GradientMap out;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    Tensor grad(probe.value(i).shape());
    for (std::size_t j = 0; j < grad.size(); ++j) {
      const double original = probe.value(i)[j];
      probe.value(i)[j] = original + step;
      const double up = evaluate_loss(probe, batch, loss);
      probe.value(i)[j] = original - step;
      const double down = evaluate_loss(probe, batch, loss);
      probe.value(i)[j] = original;
      grad[j] = (up - down) / (2.0 * step);
    }
    out.emplace(probe.name(i), std::move(grad));
  }
  return out;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

double max_relative_error(const GradientMap& a, const GradientMap& b, double floor) {
  if (a.size() != b.size()) {
    throw ValidationError(fmt::format("gradient maps differ in size: {} vs {}", a.size(), b.size()));
  }
  double worst = 0.0;
  for (const auto& [name, ga] : a) {
    const auto it = b.find(name);
    if (it == b.end()) throw ValidationError(fmt::format("gradient '{}' missing from second map", name));
    if (ga.shape() != it->second.shape()) throw ShapeError(fmt::format("gradient '{}' shapes differ", name));
    for (std::size_t j = 0; j < ga.size(); ++j) worst = std::max(worst, relative_error(ga[j], it->second[j], floor));
  }
  return worst;
}

}  // namespace kunbr
