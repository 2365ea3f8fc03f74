// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "kunbr/lm/loss.hpp"
#include "kunbr/lm/params.hpp"

namespace kunbr {

struct LossAndGradients {
  double loss = 0.0;
  GradientMap gradients;  // exactly the trainable names
};

// Exact reverse-mode gradients of `loss` w.r.t. the trainable parameters.
// The store is only read.
LossAndGradients loss_and_gradients(const ParameterStore& params, const Batch& batch, const LossSpec& loss,
                                    const FreezeMask& trainable);

double evaluate_loss(const ParameterStore& params, const Batch& batch, const LossSpec& loss);

inline constexpr std::size_t kDefaultOracleBudget = 5000;

// Central differences (f(x+h) - f(x-h)) / 2h for every coordinate of every
// parameter. Refuses stores larger than `budget` scalars.
GradientMap finite_difference_gradients(const ParameterStore& params, const Batch& batch, const LossSpec& loss,
                                        double step, std::size_t budget = kDefaultOracleBudget);

// |a - b| / max(|a|, |b|, floor), the comparison used by gradient checks.
double relative_error(double a, double b, double floor = 1e-6);

// Max relative_error over every coordinate of the names both maps share;
// throws if the key sets or shapes differ.
double max_relative_error(const GradientMap& a, const GradientMap& b, double floor = 1e-6);

}  // namespace kunbr
