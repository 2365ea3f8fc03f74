// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "kunbr/lm/params.hpp"

namespace kunbr {

// Container layout:
//   8 bytes   magic "KUNBR001"
//   8 bytes   little-endian u64 header length
//   header    UTF-8 JSON {format, config, precision, metadata, tensors:
//             [{name, dtype, shape, byte_offset}], payload_bytes}
//   payload   raw little-endian tensors in index order; offsets are
//             relative to the start of the payload
inline constexpr std::string_view kCheckpointMagic = "KUNBR001";

enum class Precision { kF64, kF32 };

std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view name);

struct Checkpoint {
  ParameterStore params;
  Precision precision = Precision::kF64;
  nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

std::string serialize_checkpoint(const ParameterStore& params, const nlohmann::json& metadata,
                                 Precision precision = Precision::kF64);
// Throws IoError on bad magic, truncation (naming expected vs actual byte
// counts) or a malformed header.
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const nlohmann::json& metadata = nlohmann::json::object(), Precision precision = Precision::kF64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kunbr
