// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace kunbr {

struct ModelConfig {
  std::size_t layers = 8;      // H
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab = 128;     // V
  std::size_t context = 64;    // L_ctx
  std::uint64_t seed = 0;
  // Weights are drawn from U(-s, s) with s = init_scale / sqrt(d_model).
  double init_scale = 1.0;

  bool operator==(const ModelConfig&) const = default;

  std::vector<std::string> violations() const;
  // Throws ValidationError listing every violation.
  void validate() const;
};

}  // namespace kunbr
