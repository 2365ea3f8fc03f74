// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "kunbr/evalrtt/experiment.hpp"

namespace kunbr::cli {

inline constexpr std::string_view kRunSchema = "kunbr.run/1";

struct RunConfig {
  eval::ExperimentConfig experiment;
  std::uint64_t seed = 0;
  // Empty: fall back to KUNBR_OUT_DIR, then "kunbr-out".
  std::string out_dir;
};

// Every section and key is optional except "schema"; unknown keys and
// keys that do not apply to a method are rejected. The result is validated.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Values the toy defaults were scaled from, emitted under "provenance".
nlohmann::json reference_setting();

// Full config with every default spelled out; parse_run_config round-trips it.
nlohmann::json to_json(const RunConfig& config);

}  // namespace kunbr::cli
