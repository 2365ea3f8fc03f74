// SPDX-License-Identifier: Apache-2.0
#include "kunbr/cli/manifest.hpp"

#include <chrono>
#include <ctime>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/io.hpp"

namespace kunbr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string tool_version() { return KUNBR_VERSION; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void RunManifest::record(const fs::path& dir, const std::string& id, const std::string& relative,
                         const std::string& stage) {
  const fs::path full = dir / relative;
  if (!fs::exists(full)) throw IoError(fmt::format("manifest: cannot record missing file {}", full.string()));
  files[id] = {relative, stage, sha256_file(full), static_cast<std::uint64_t>(fs::file_size(full)), utc_timestamp()};
}

std::vector<std::string> RunManifest::verify(const fs::path& dir) const {
  std::vector<std::string> out;
  for (const auto& [id, e] : files) {
    const fs::path full = dir / e.path;
    if (!fs::exists(full)) {
      out.push_back(fmt::format("{}: file {} is missing", id, full.string()));
      continue;
    }
    const auto size = static_cast<std::uint64_t>(fs::file_size(full));
    if (size != e.bytes) {
      out.push_back(fmt::format("{}: {} has {} bytes, manifest records {}", id, full.string(), size, e.bytes));
      continue;
    }
    const std::string hash = sha256_file(full);
    if (hash != e.sha256) {
      out.push_back(fmt::format("{}: {} hashes to {}, manifest records {}", id, full.string(), hash, e.sha256));
    }
  }
  return out;
}

fs::path RunManifest::require(const fs::path& dir, const std::string& id) const {
  const auto it = files.find(id);
  if (it == files.end()) {
    throw IoError(fmt::format("run directory {} has no '{}' artifact in its manifest", dir.string(), id));
  }
  const fs::path full = dir / it->second.path;
  if (!fs::exists(full)) throw IoError(fmt::format("{}: file {} is missing", id, full.string()));
  const std::string hash = sha256_file(full);
  if (hash != it->second.sha256) {
    throw IoError(fmt::format("{}: {} hashes to {}, manifest records {}", id, full.string(), hash, it->second.sha256));
  }
  return full;
}

json to_json(const RunManifest& m) {
  json files = json::object();
  for (const auto& [id, e] : m.files) {
    files[id] = {{"path", e.path}, {"stage", e.stage}, {"sha256", e.sha256}, {"bytes", e.bytes},
                 {"recorded_at", e.recorded_at}};
  }
  return {{"schema", kManifestSchema}, {"tool_version", m.tool_version}, {"config_hash", m.config_hash},
          {"seed", m.seed},            {"status", m.status},             {"created_at", m.created_at},
          {"updated_at", m.updated_at}, {"files", files}};
}

RunManifest manifest_from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != kManifestSchema) {
      throw IoError(fmt::format("manifest schema {} is not {}", j.at("schema").dump(), kManifestSchema));
    }
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.status = j.at("status").get<std::string>();
    m.created_at = j.at("created_at").get<std::string>();
    m.updated_at = j.at("updated_at").get<std::string>();
    for (const auto& [id, e] : j.at("files").items()) {
      m.files[id] = {e.at("path").get<std::string>(), e.at("stage").get<std::string>(),
                     e.at("sha256").get<std::string>(), e.at("bytes").get<std::uint64_t>(),
                     e.at("recorded_at").get<std::string>()};
    }
    return m;
  } catch (const json::exception& e) {
    throw IoError(fmt::format("manifest is malformed: {}", e.what()));
  }
}

RunManifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestFile;
  if (!fs::exists(path)) {
    RunManifest m;
    m.tool_version = tool_version();
    m.created_at = utc_timestamp();
    return m;
  }
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(fmt::format("manifest {} is not valid JSON: {}", path.string(), e.what()));
  }
  return manifest_from_json(j);
}

void save_manifest(const fs::path& dir, RunManifest manifest) {
  manifest.tool_version = tool_version();
  manifest.updated_at = utc_timestamp();
  if (manifest.created_at.empty()) manifest.created_at = manifest.updated_at;
  write_file_atomic(dir / kManifestFile, to_json(manifest).dump(2) + "\n");
}

}  // namespace kunbr::cli
