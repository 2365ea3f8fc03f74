// SPDX-License-Identifier: Apache-2.0
#include "kunbr/lm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <set>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"

namespace kunbr::lm {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

const char* const kLayerSuffixes[] = {"ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                                      "ln2.gamma", "ln2.beta", "mlp.w1",  "mlp.b1",  "mlp.w2",  "mlp.b2"};

}  // namespace

ParameterStore init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, "init_model"));
  const double bound = config.init_scale / std::sqrt(static_cast<double>(config.d_model));
  const std::size_t d = config.d_model;

  ParameterStore store(config);
  store.add("embed.tok", uniform_tensor({config.vocab, d}, bound, rng));
  store.add("embed.pos", uniform_tensor({config.context, d}, bound, rng));
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = layer_prefix(l);
    store.add(p + "ln1.gamma", Tensor({d}, 1.0));
    store.add(p + "ln1.beta", Tensor({d}, 0.0));
    store.add(p + "attn.wq", uniform_tensor({d, d}, bound, rng));
    store.add(p + "attn.wk", uniform_tensor({d, d}, bound, rng));
    store.add(p + "attn.wv", uniform_tensor({d, d}, bound, rng));
    store.add(p + "attn.wo", uniform_tensor({d, d}, bound, rng));
    store.add(p + "ln2.gamma", Tensor({d}, 1.0));
    store.add(p + "ln2.beta", Tensor({d}, 0.0));
    store.add(p + "mlp.w1", uniform_tensor({d, config.d_ff}, bound, rng));
    store.add(p + "mlp.b1", Tensor({config.d_ff}, 0.0));
    store.add(p + "mlp.w2", uniform_tensor({config.d_ff, d}, bound, rng));
    store.add(p + "mlp.b2", Tensor({d}, 0.0));
  }
  store.add("head.ln_f.gamma", Tensor({d}, 1.0));
  store.add("head.ln_f.beta", Tensor({d}, 0.0));
  store.add("head.out.w", uniform_tensor({d, config.vocab}, bound, rng));
  return store;
}

ParamVars::ParamVars(ad::Graph& graph, const ParameterStore& store, const FreezeMask& trainable)
    : graph_(&graph), store_(&store) {
  trainable.validate_against(store);
  vars_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    vars_.push_back(graph.leaf(store.value(i), trainable.trainable(store.name(i)), store.name(i)));
  }
}

ad::Var ParamVars::operator[](std::string_view name) const {
  const auto i = store_->find(name);
  if (!i) throw ValidationError(fmt::format("model has no parameter '{}'", name));
  return vars_[*i];
}

PaddedBatch pad_sequences(const std::vector<std::vector<int>>& sequences, const ModelConfig& config) {
  if (sequences.empty()) throw ValidationError("pad_sequences: empty batch");
  PaddedBatch out;
  out.batch = sequences.size();
  for (const auto& s : sequences) out.length = std::max(out.length, s.size());
  if (out.length == 0) throw ValidationError("pad_sequences: all sequences are empty");
  if (out.length > config.context) {
    throw ValidationError(fmt::format("sequence length {} exceeds context length {}", out.length, config.context));
  }
  out.tokens.assign(out.batch * out.length, kPadId);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const auto& s = sequences[b];
    if (s.empty()) throw ValidationError(fmt::format("pad_sequences: sequence {} is empty", b));
    for (std::size_t t = 0; t < s.size(); ++t) {
      if (s[t] < 0 || static_cast<std::size_t>(s[t]) >= config.vocab) {
        throw ValidationError(fmt::format("token {} at position {} of sequence {} is outside vocabulary of size {}",
                                          s[t], t, b, config.vocab));
      }
      out.tokens[b * out.length + t] = s[t];
    }
    out.lengths.push_back(s.size());
  }
  return out;
}

ad::Var hidden_states(const ParamVars& params, const PaddedBatch& batch) {
  const ModelConfig& cfg = params.store().model_config();
  const Shape prefix{batch.batch, batch.length};
  std::vector<int> positions(batch.batch * batch.length);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.length);

  ad::Var x = ad::add(ad::embedding(params["embed.tok"], batch.tokens, prefix),
                      ad::embedding(params["embed.pos"], positions, prefix));
  const std::size_t d_head = cfg.d_model / cfg.n_heads;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(l);
    auto w = [&](const char* suffix) { return params[p + suffix]; };

    ad::Var h = ad::layer_norm(x, w("ln1.gamma"), w("ln1.beta"));
    ad::Var q = ad::split_heads(ad::matmul(h, w("attn.wq")), cfg.n_heads);
    ad::Var k = ad::split_heads(ad::matmul(h, w("attn.wk")), cfg.n_heads);
    ad::Var v = ad::split_heads(ad::matmul(h, w("attn.wv")), cfg.n_heads);
    ad::Var scores = ad::causal_mask(ad::scale(ad::bmm(q, k, /*transpose_b=*/true), score_scale));
    ad::Var attended = ad::merge_heads(ad::bmm(ad::softmax(scores), v), cfg.n_heads);
    x = ad::add(x, ad::matmul(attended, w("attn.wo")));

    ad::Var h2 = ad::layer_norm(x, w("ln2.gamma"), w("ln2.beta"));
    ad::Var ff = ad::gelu(ad::add_bias(ad::matmul(h2, w("mlp.w1")), w("mlp.b1")));
    x = ad::add(x, ad::add_bias(ad::matmul(ff, w("mlp.w2")), w("mlp.b2")));
  }
  return x;
}

ad::Var logits_for_rows(const ParamVars& params, ad::Var hidden, std::span<const std::size_t> rows) {
  ad::Var h = ad::select_rows(hidden, rows);
  h = ad::layer_norm(h, params["head.ln_f.gamma"], params["head.ln_f.beta"]);
  return ad::matmul(h, params["head.out.w"]);
}

Tensor forward(const ParameterStore& model, std::span<const int> tokens) {
  const ModelConfig& cfg = model.model_config();
  if (tokens.empty()) throw ValidationError("forward: empty token sequence");
  ad::Graph graph;
  ParamVars params(graph, model, FreezeMask::none());
  const PaddedBatch batch = pad_sequences({std::vector<int>(tokens.begin(), tokens.end())}, cfg);
  std::vector<std::size_t> rows(tokens.size());
  for (std::size_t t = 0; t < rows.size(); ++t) rows[t] = t;
  return logits_for_rows(params, hidden_states(params, batch), rows).value();
}

std::vector<LayerParams> extract_layers(const ParameterStore& model, const std::vector<std::size_t>& indices) {
  const ModelConfig& cfg = model.model_config();
  std::set<std::size_t> seen;
  std::vector<LayerParams> out;
  for (auto layer : indices) {
    if (layer >= cfg.layers) throw ValidationError(fmt::format("layer index {} out of range [0, {})", layer, cfg.layers));
    if (!seen.insert(layer).second) throw ValidationError(fmt::format("duplicate layer index {}", layer));
    LayerParams lp{layer, {}};
    const std::string prefix = layer_prefix(layer);
    for (const char* suffix : kLayerSuffixes) {
      lp.tensors.emplace_back(suffix, model.at(prefix + suffix));
    }
    out.push_back(std::move(lp));
  }
  return out;
}

void insert_layers(ParameterStore& model, const std::vector<LayerParams>& layers) {
  const ModelConfig& cfg = model.model_config();
  std::set<std::size_t> seen;
  // Validate everything before the first write.
  for (const auto& lp : layers) {
    if (lp.layer_index >= cfg.layers) {
      throw ValidationError(fmt::format("layer index {} out of range [0, {})", lp.layer_index, cfg.layers));
    }
    if (!seen.insert(lp.layer_index).second) throw ValidationError(fmt::format("duplicate layer index {}", lp.layer_index));
    const std::string prefix = layer_prefix(lp.layer_index);
    if (lp.tensors.size() != std::size(kLayerSuffixes)) {
      throw ShapeError(fmt::format("layer {} carries {} tensors, expected {}", lp.layer_index, lp.tensors.size(),
                                   std::size(kLayerSuffixes)));
    }
    for (const auto& [suffix, tensor] : lp.tensors) {
      const Tensor& slot = model.at(prefix + suffix);
      if (slot.shape() != tensor.shape()) {
        throw ShapeError(fmt::format("layer {} tensor '{}' has shape {}, slot expects {}", lp.layer_index, suffix,
                                     shape_string(tensor.shape()), shape_string(slot.shape())));
      }
    }
  }
  for (const auto& lp : layers) {
    const std::string prefix = layer_prefix(lp.layer_index);
    for (const auto& [suffix, tensor] : lp.tensors) model.at(prefix + suffix) = tensor;
  }
}

}  // namespace kunbr::lm
