// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace kunbr::cli {

inline constexpr std::string_view kManifestSchema = "kunbr.manifest/1";
inline constexpr std::string_view kManifestFile = "manifest.json";

std::string tool_version();

struct ManifestEntry {
  std::string path;  // relative to the run directory
  std::string stage;
  std::string sha256;
  std::uint64_t bytes = 0;
  std::string recorded_at;
};

// Per-run-directory record of every artifact and its content hash.
struct RunManifest {
  std::string tool_version;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string status = "in_progress";
  std::string created_at;
  std::string updated_at;
  std::map<std::string, ManifestEntry> files;  // keyed by artifact id

  // Hashes `dir / relative` and stores it under `id`.
  void record(const std::filesystem::path& dir, const std::string& id, const std::string& relative,
              const std::string& stage);
  // One message per missing or mismatching file; empty when clean.
  std::vector<std::string> verify(const std::filesystem::path& dir) const;
  // Throws IoError unless `id` is recorded and its file matches the hash.
  std::filesystem::path require(const std::filesystem::path& dir, const std::string& id) const;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

// A fresh manifest if the directory has none.
RunManifest load_manifest(const std::filesystem::path& dir);
void save_manifest(const std::filesystem::path& dir, RunManifest manifest);

// UTC, second resolution, e.g. 2026-01-02T03:04:05Z.
std::string utc_timestamp();

}  // namespace kunbr::cli
