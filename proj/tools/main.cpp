// SPDX-License-Identifier: Apache-2.0
//
// meshmoe command line: map | heatmap | simulate | balance-trace | compare.
// Log verbosity comes from SPDLOG_LEVEL (e.g. SPDLOG_LEVEL=debug).

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "meshmoe/commands.hpp"
#include "meshmoe/error.hpp"

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct Options {
  std::vector<std::string> configs;
  std::vector<std::string> variants;  // name:key=value,key=value
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<long long> iterations;
  std::string out;
  int jobs = 1;
};

void add_common(CLI::App* sub, Options& o, bool many_configs) {
  if (many_configs) {
    sub->add_option("--config", o.configs, "Config file (repeat to compare several)")->required();
    sub->add_option("--variant", o.variants,
                    "Extra run derived from the first config: name:block.key=value[,block.key=value]");
    sub->add_option("--jobs", o.jobs, "Configs evaluated concurrently")->check(CLI::PositiveNumber);
  } else {
    sub->add_option("--config", o.configs, "Config file (YAML or JSON)")->required()->expected(1);
  }
  sub->add_option("--seed", o.seed, "Workload seed (overrides the config)");
  sub->add_option("--iterations", o.iterations, "Iterations to simulate (overrides the config)");
  sub->add_option("--out", o.out, "Output directory (overrides output.dir)");
  sub->add_option("--set", o.sets, "Override a config field: block.key=value");
}

std::vector<std::string> overrides_for(const Options& o) {
  std::vector<std::string> ov = o.sets;
  if (o.seed) ov.push_back("workload.seed=" + std::to_string(*o.seed));
  if (o.iterations) ov.push_back("simulation.iterations=" + std::to_string(*o.iterations));
  return ov;
}

std::filesystem::path out_dir(const Options& o, const meshmoe::SimConfig& cfg) {
  return o.out.empty() ? std::filesystem::path(cfg.output.dir) : std::filesystem::path(o.out);
}

std::vector<meshmoe::SimConfig> load_compare_set(const Options& o) {
  const auto base_ov = overrides_for(o);
  std::vector<meshmoe::SimConfig> cfgs;
  for (const auto& path : o.configs) cfgs.push_back(meshmoe::parse_config_file(path, base_ov));
  for (const auto& v : o.variants) {
    const auto colon = v.find(':');
    if (colon == std::string::npos || colon == 0) {
      throw meshmoe::ConfigError("--variant '" + v + "': expected name:block.key=value[,...]");
    }
    auto ov = base_ov;
    std::string rest = v.substr(colon + 1);
    std::size_t start = 0;
    while (start <= rest.size()) {
      const auto comma = rest.find(',', start);
      const auto item = rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!item.empty()) ov.push_back(item);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    ov.push_back("name=" + v.substr(0, colon));
    cfgs.push_back(meshmoe::parse_config_file(o.configs.front(), ov));
  }
  return cfgs;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("meshmoe");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  spdlog::cfg::load_env_levels();

  CLI::App app{"Analytical simulator for MoE inference on wafer-scale meshes"};
  app.require_subcommand(1);
  Options o;
  auto* map = app.add_subcommand("map", "Write the device mapping, FTDs and an ASCII grid");
  auto* heatmap = app.add_subcommand("heatmap", "Write per-link traffic and hot/cold classes");
  auto* simulate = app.add_subcommand("simulate", "Run iterations; write trace.csv and summary.json");
  auto* balance = app.add_subcommand("balance-trace", "Run iterations; write balance.csv");
  auto* compare = app.add_subcommand("compare", "Run several configs side by side; write compare.csv");
  for (auto* sub : {map, heatmap, simulate, balance}) add_common(sub, o, false);
  add_common(compare, o, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }
  if (o.iterations && *o.iterations < 1) {
    std::cerr << "error: --iterations must be >= 1 (got " << *o.iterations << ")\n";
    return kUsageError;
  }

  try {
    if (compare->parsed()) {
      const auto cfgs = load_compare_set(o);
      meshmoe::command_compare(cfgs, out_dir(o, cfgs.front()), std::cout, o.jobs);
      return 0;
    }
    const auto cfg = meshmoe::parse_config_file(o.configs.front(), overrides_for(o));
    const auto out = out_dir(o, cfg);
    if (map->parsed()) meshmoe::command_map(cfg, out, std::cout);
    if (heatmap->parsed()) meshmoe::command_heatmap(cfg, out, std::cout);
    if (simulate->parsed()) meshmoe::command_simulate(cfg, out, std::cout);
    if (balance->parsed()) meshmoe::command_balance_trace(cfg, out, std::cout);
    return 0;
  } catch (const meshmoe::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}
