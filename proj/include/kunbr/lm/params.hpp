// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kunbr/gradbackend/tensor.hpp"
#include "kunbr/lm/model_config.hpp"

namespace kunbr {

// Where a parameter lives in the model.
struct ParamSlot {
  enum class Kind { kEmbed, kLayer, kHead, kOther };
  Kind kind = Kind::kOther;
  std::size_t layer = 0;  // meaningful for kLayer only

  bool operator==(const ParamSlot&) const = default;
};

// "layers.<l>.<...>" -> layer l, "embed.<...>" -> embed, "head.<...>" -> head.
ParamSlot parse_slot(std::string_view name);
std::string layer_prefix(std::size_t layer);

// Ordered collection of named tensors. Insertion order is the canonical
// order for checkpoints, checksums and gradient maps.
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(ModelConfig config) : config_(std::move(config)) {}

  void add(std::string name, Tensor value);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  Tensor& value(std::size_t i) { return entries_[i].value; }
  const Tensor& value(std::size_t i) const { return entries_[i].value; }

  std::optional<std::size_t> find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name).has_value(); }
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  std::vector<std::string> names() const;
  // Names whose slot is layer `layer`, in store order.
  std::vector<std::string> layer_names(std::size_t layer) const;
  // Total scalar count.
  std::size_t parameter_count() const;

  const std::optional<ModelConfig>& config() const { return config_; }
  const ModelConfig& model_config() const;

  // FNV-1a over names, shapes and raw bytes.
  std::uint64_t fingerprint() const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::optional<ModelConfig> config_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool bit_equal(const ParameterStore& a, const ParameterStore& b);
// Names whose tensors differ bitwise (both stores must share layout).
std::vector<std::string> differing_names(const ParameterStore& a, const ParameterStore& b);

// Gradient (or any per-parameter tensor) keyed by parameter name.
using GradientMap = std::map<std::string, Tensor>;

// The set of trainable parameter names; everything else is frozen.
class FreezeMask {
 public:
  FreezeMask() = default;
  explicit FreezeMask(std::set<std::string> trainable) : trainable_(std::move(trainable)) {}

  static FreezeMask all(const ParameterStore& store);
  static FreezeMask none() { return FreezeMask{}; }
  // Every parameter named under the given layers; with mlp_only, only the
  // feed-forward tensors of those layers.
  static FreezeMask layers(const ParameterStore& store, const std::vector<std::size_t>& layers, bool mlp_only = false);

  bool trainable(std::string_view name) const { return trainable_.contains(std::string(name)); }
  bool empty() const { return trainable_.empty(); }
  std::size_t size() const { return trainable_.size(); }
  const std::set<std::string>& names() const { return trainable_; }

  // Throws ValidationError if any name is not a parameter of `store`.
  void validate_against(const ParameterStore& store) const;

 private:
  std::set<std::string> trainable_;
};

}  // namespace kunbr
