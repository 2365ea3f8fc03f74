// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "kunbr/lm/batch.hpp"
#include "kunbr/lm/loss.hpp"
#include "kunbr/lm/params.hpp"

namespace kunbr::lm {

enum class Direction { kDescend, kAscend };

// theta <- theta -/+ lr * g for every gradient entry. Every gradient name
// must be trainable under `mask`; parameters without a gradient entry are
// not touched.
void sgd_apply(ParameterStore& model, const GradientMap& gradients, double lr, Direction direction,
               const FreezeMask& mask);

struct AdamConstants {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;
};

inline constexpr double kDivergenceLoss = 1e4;

// Adaptive-moment trainer on NLL. Moment state persists across step() calls.
class AdamTrainer {
 public:
  AdamTrainer(const ParameterStore& model, double lr, FreezeMask trainable);

  // One update on `batch`; returns the pre-update loss. Throws NumericError
  // when the loss exceeds kDivergenceLoss.
  double step(ParameterStore& model, const Batch& batch);

  std::size_t steps_taken() const { return steps_; }

 private:
  double lr_;
  FreezeMask trainable_;
  LossSpec loss_;
  GradientMap first_moment_;
  GradientMap second_moment_;
  std::size_t steps_ = 0;
};

// `steps` Adam updates cycling through `batches` in order; returns the loss
// trace. steps == 0 leaves the model untouched.
std::vector<double> adam_train(ParameterStore& model, const std::vector<Batch>& batches, double lr, std::size_t steps);

}  // namespace kunbr::lm
