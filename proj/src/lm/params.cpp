// SPDX-License-Identifier: Apache-2.0
#include "kunbr/lm/params.hpp"

#include <charconv>
#include <cstring>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "kunbr/gradbackend/error.hpp"

namespace kunbr {

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> out;
  if (layers < 2) out.push_back(fmt::format("layers (H) must be >= 2, got {}", layers));
  if (d_model == 0) out.push_back("d_model must be positive");
  if (n_heads == 0 || (d_model % n_heads) != 0) {
    out.push_back(fmt::format("d_model {} must be divisible by n_heads {}", d_model, n_heads));
  }
  if (d_ff == 0) out.push_back("d_ff must be positive");
  if (vocab < 8) out.push_back(fmt::format("vocab (V) must be >= 8, got {}", vocab));
  if (context == 0) out.push_back("context (L_ctx) must be positive");
  if (!(init_scale >= 0.0)) out.push_back(fmt::format("init_scale must be >= 0, got {}", init_scale));
  return out;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (!v.empty()) throw ValidationError(fmt::format("invalid model config: {}", fmt::join(v, "; ")));
}

std::string layer_prefix(std::size_t layer) { return fmt::format("layers.{}.", layer); }

ParamSlot parse_slot(std::string_view name) {
  if (name.starts_with("embed.")) return {ParamSlot::Kind::kEmbed, 0};
  if (name.starts_with("head.")) return {ParamSlot::Kind::kHead, 0};
  constexpr std::string_view kLayers = "layers.";
  if (name.starts_with(kLayers)) {
    const std::string_view rest = name.substr(kLayers.size());
    std::size_t layer = 0;
    const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), layer);
    if (ec == std::errc{} && ptr != rest.data() && ptr < rest.data() + rest.size() && *ptr == '.') {
      return {ParamSlot::Kind::kLayer, layer};
    }
  }
  return {ParamSlot::Kind::kOther, 0};
}

void ParameterStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw ValidationError(fmt::format("duplicate parameter name '{}'", name));
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), std::move(value)});
}

std::optional<std::size_t> ParameterStore::find(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Tensor& ParameterStore::at(std::string_view name) {
  const auto i = find(name);
  if (!i) throw ValidationError(fmt::format("unknown parameter '{}'", name));
  return entries_[*i].value;
}

const Tensor& ParameterStore::at(std::string_view name) const {
  const auto i = find(name);
  if (!i) throw ValidationError(fmt::format("unknown parameter '{}'", name));
  return entries_[*i].value;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::vector<std::string> ParameterStore::layer_names(std::size_t layer) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    const auto slot = parse_slot(e.name);
    if (slot.kind == ParamSlot::Kind::kLayer && slot.layer == layer) out.push_back(e.name);
  }
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

const ModelConfig& ParameterStore::model_config() const {
  if (!config_) throw ValidationError("parameter store carries no model config");
  return *config_;
}

std::uint64_t ParameterStore::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    for (auto d : e.value.shape()) mix(&d, sizeof(d));
    mix(e.value.ptr(), e.value.size() * sizeof(double));
  }
  return h;
}

bool bit_equal(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i) || !bit_equal(a.value(i), b.value(i))) return false;
  }
  return true;
}

std::vector<std::string> differing_names(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) throw ValidationError("differing_names: stores have different layouts");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i)) throw ValidationError("differing_names: stores have different layouts");
    if (!bit_equal(a.value(i), b.value(i))) out.push_back(a.name(i));
  }
  return out;
}

FreezeMask FreezeMask::all(const ParameterStore& store) {
  const auto names = store.names();
  return FreezeMask(std::set<std::string>(names.begin(), names.end()));
}

FreezeMask FreezeMask::layers(const ParameterStore& store, const std::vector<std::size_t>& layers, bool mlp_only) {
  std::set<std::string> out;
  for (auto layer : layers) {
    for (auto& name : store.layer_names(layer)) {
      if (!mlp_only || name.find(".mlp.") != std::string::npos) out.insert(std::move(name));
    }
  }
  return FreezeMask(std::move(out));
}

void FreezeMask::validate_against(const ParameterStore& store) const {
  for (const auto& name : trainable_) {
    if (!store.contains(name)) throw ValidationError(fmt::format("freeze mask names unknown parameter '{}'", name));
  }
}

}  // namespace kunbr
