// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kunbr/gradbackend/autodiff.hpp"
#include "kunbr/lm/params.hpp"

namespace kunbr::lm {

// Pre-norm decoder-only transformer with learned positions and an untied
// output head. Parameter layout (store order):
//   embed.tok [V, d], embed.pos [L_ctx, d]
//   layers.<l>.{ln1.gamma, ln1.beta, attn.wq, attn.wk, attn.wv, attn.wo,
//               ln2.gamma, ln2.beta, mlp.w1, mlp.b1, mlp.w2, mlp.b2}
//   head.ln_f.gamma, head.ln_f.beta, head.out.w [d, V]
ParameterStore init_model(const ModelConfig& config);

// Parameters of a store bound as leaves of a graph. Trainable names get
// requires_grad; the rest are constants.
class ParamVars {
 public:
  ParamVars(ad::Graph& graph, const ParameterStore& store, const FreezeMask& trainable);

  ad::Var operator[](std::string_view name) const;
  ad::Var at(std::size_t i) const { return vars_.at(i); }
  const ParameterStore& store() const { return *store_; }
  ad::Graph& graph() const { return *graph_; }

 private:
  ad::Graph* graph_;
  const ParameterStore* store_;
  std::vector<ad::Var> vars_;
};

// Right-padded token batch. Padding only ever sits after the real tokens,
// so causal attention keeps it from influencing real positions.
struct PaddedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;            // batch * length
  std::vector<std::size_t> lengths;  // real length per sequence
};

inline constexpr int kPadId = 0;

PaddedBatch pad_sequences(const std::vector<std::vector<int>>& sequences, const ModelConfig& config);

// Residual stream after the last transformer block, [B, T, d].
ad::Var hidden_states(const ParamVars& params, const PaddedBatch& batch);
// Final norm + output head applied to the listed flat rows (b * T + t).
ad::Var logits_for_rows(const ParamVars& params, ad::Var hidden, std::span<const std::size_t> rows);

// Logits for every position of one sequence, [len, V].
Tensor forward(const ParameterStore& model, std::span<const int> tokens);

struct LayerParams {
  std::size_t layer_index = 0;
  // (name suffix after "layers.<l>.", tensor)
  std::vector<std::pair<std::string, Tensor>> tensors;
};

// Deep copies of the named layers.
std::vector<LayerParams> extract_layers(const ParameterStore& model, const std::vector<std::size_t>& indices);
// Replaces the listed layer slots in place.
void insert_layers(ParameterStore& model, const std::vector<LayerParams>& layers);

}  // namespace kunbr::lm
