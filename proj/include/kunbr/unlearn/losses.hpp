// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "kunbr/lm/batch.hpp"
#include "kunbr/lm/loss.hpp"
#include "kunbr/lm/params.hpp"

namespace kunbr::unlearn {

inline constexpr double kDefaultNpoEpsilon = 1e-6;

// Batch mean of log(1 - min(p, 1 - epsilon)) with p the probability of the
// whole target continuation.
LossSpec npo_loss_spec(double epsilon = kDefaultNpoEpsilon);

// Batch mean of -sum_k log q(incorrect_k | x), where q renormalizes the
// model likelihoods over the item's choices (target plus incorrect options).
LossSpec ria_loss_spec();

// Final hidden states (before the output norm) at the real prompt positions,
// concatenated over the batch: [sum of prompt lengths, d_model].
ad::Var rmu_representation(const lm::ParamVars& params, const Batch& batch);
Tensor rmu_representation(const ParameterStore& model, const Batch& batch);

// Per tensor: delta_scale * RMS(tensor) * N(0, 1), same layout as the model.
ParameterStore make_rmu_perturbation(const ParameterStore& model, double delta_scale, std::uint64_t seed);

// Sum over positions of ||f(x, theta) - f(x, theta + delta)||^2 divided by
// the batch size. The perturbed branch is a constant: with an anchor it is
// f(x, anchor + delta), otherwise it is recomputed from the current theta
// on every evaluation.
LossSpec rmu_loss_spec(std::shared_ptr<const ParameterStore> delta,
                       std::shared_ptr<const ParameterStore> anchor = nullptr);

ParameterStore add_stores(const ParameterStore& a, const ParameterStore& b);

// nll, npo, ria, rmu.
std::vector<std::string> registered_loss_names();
// RMU is anchored at `model` with a perturbation drawn from `seed`.
LossSpec registered_loss(std::string_view name, const ParameterStore& model, std::uint64_t seed = 0);

}  // namespace kunbr::unlearn
