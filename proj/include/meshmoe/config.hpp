// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "meshmoe/engine.hpp"

namespace meshmoe {

struct OutputConfig {
  std::string dir = "out";
  bool expert_trace = false;  // also write the sampled expert choices
};

/// Everything one experiment needs. Built only through parse_config*.
struct SimConfig {
  std::string name;  // defaults to the config file stem
  EngineConfig engine;
  std::uint64_t iterations = 20;
  OutputConfig output;
  std::string trace_file;  // expert-choice CSV to replay, if any
  /// The effective configuration after defaults and overrides, for provenance.
  nlohmann::json resolved;
};

/// Reads a YAML (nested blocks) or JSON file. `overrides` are
/// "block.key=value" assignments applied before validation. On failure
/// throws ConfigError whose message lists every problem found.
SimConfig parse_config_file(const std::filesystem::path& path,
                            const std::vector<std::string>& overrides = {});

/// Same, from text. Relative trace paths resolve against `base_dir`.
SimConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {},
                            const std::filesystem::path& base_dir = ".",
                            const std::string& name = "config");

}  // namespace meshmoe
