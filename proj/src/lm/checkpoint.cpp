// SPDX-License-Identifier: Apache-2.0
#include "kunbr/lm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/io.hpp"

namespace kunbr {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::size_t dtype_size(Precision p) { return p == Precision::kF64 ? 8 : 4; }

}  // namespace

std::string_view precision_name(Precision p) { return p == Precision::kF64 ? "f64" : "f32"; }

Precision parse_precision(std::string_view name) {
  if (name == "f64") return Precision::kF64;
  if (name == "f32") return Precision::kF32;
  throw ValidationError(fmt::format("unknown precision '{}' (expected f32 or f64)", name));
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"vocab", c.vocab},   {"context", c.context}, {"seed", c.seed},       {"init_scale", c.init_scale}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.init_scale = j.at("init_scale").get<double>();
  return c;
}

std::string serialize_checkpoint(const ParameterStore& params, const nlohmann::json& metadata, Precision precision) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.value(i);
    index.push_back({{"name", params.name(i)},
                     {"dtype", precision_name(precision)},
                     {"shape", t.shape()},
                     {"byte_offset", offset}});
    offset += t.size() * dtype_size(precision);
  }
  nlohmann::json header = {{"format", kCheckpointMagic},
                           {"config", params.config() ? model_config_to_json(*params.config()) : nlohmann::json()},
                           {"precision", precision_name(precision)},
                           {"metadata", metadata},
                           {"tensors", index},
                           {"payload_bytes", offset}};
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(16 + header_text.size() + offset);
  out.append(kCheckpointMagic);
  put_u64(out, header_text.size());
  out.append(header_text);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double v : params.value(i).data()) {
      if (precision == Precision::kF64) {
        put_u64(out, std::bit_cast<std::uint64_t>(v));
      } else {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16) {
    throw IoError(fmt::format("checkpoint truncated: expected at least 16 bytes of preamble, got {}", bytes.size()));
  }
  if (bytes.substr(0, 8) != kCheckpointMagic) throw IoError("checkpoint has bad magic (expected KUNBR001)");
  const std::uint64_t header_len = get_u64(data + 8);
  if (bytes.size() < 16 + header_len) {
    throw IoError(fmt::format("checkpoint truncated: expected {} header bytes, got {}", 16 + header_len, bytes.size()));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("checkpoint header is not valid JSON: {}", e.what()));
  }

  Checkpoint ckpt;
  try {
    ckpt.precision = parse_precision(header.at("precision").get<std::string>());
    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    const std::uint64_t expected = 16 + header_len + payload_bytes;
    if (bytes.size() != expected) {
      throw IoError(fmt::format("checkpoint size mismatch: expected {} bytes, got {}", expected, bytes.size()));
    }
    ckpt.metadata = header.at("metadata");
    ckpt.params = header.at("config").is_null() ? ParameterStore() : ParameterStore(model_config_from_json(header.at("config")));
    const unsigned char* payload = data + 16 + header_len;
    const std::size_t width = dtype_size(ckpt.precision);
    std::uint64_t cursor = 0;
    for (const auto& entry : header.at("tensors")) {
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::uint64_t>();
      if (entry.at("dtype").get<std::string>() != precision_name(ckpt.precision)) {
        throw IoError("checkpoint tensor dtype disagrees with header precision");
      }
      if (offset != cursor) throw IoError(fmt::format("checkpoint tensor offset {} out of order (expected {})", offset, cursor));
      Tensor t(shape);
      if (offset + t.size() * width > payload_bytes) throw IoError("checkpoint tensor extends past payload");
      for (std::size_t i = 0; i < t.size(); ++i) {
        const unsigned char* p = payload + offset + i * width;
        t[i] = width == 8 ? std::bit_cast<double>(get_u64(p)) : static_cast<double>(std::bit_cast<float>(get_u32(p)));
      }
      cursor = offset + t.size() * width;
      ckpt.params.add(entry.at("name").get<std::string>(), std::move(t));
    }
    if (cursor != payload_bytes) throw IoError("checkpoint payload has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("checkpoint header is malformed: {}", e.what()));
  } catch (const ShapeError& e) {
    throw IoError(fmt::format("checkpoint header is malformed: {}", e.what()));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const nlohmann::json& metadata,
                     Precision precision) {
  write_file_atomic(path, serialize_checkpoint(params, metadata, precision));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace kunbr
