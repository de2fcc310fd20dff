// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "meshmoe/config.hpp"

namespace meshmoe {

/// Collects output files under temporary names and renames them into place
/// on commit(). Anything not committed is removed on destruction, so a failed
/// command leaves no partial outputs behind.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir);
  ~OutputSet();
  OutputSet(const OutputSet&) = delete;
  OutputSet& operator=(const OutputSet&) = delete;

  /// Throws std::runtime_error naming the path on I/O failure.
  void write(const std::string& filename, const std::string& content);
  void commit();
  std::vector<std::filesystem::path> files() const;

 private:
  std::filesystem::path dir_;
  std::vector<std::pair<std::filesystem::path, std::filesystem::path>> pending_;  // tmp, final
  bool committed_ = false;
};

/// TP group / rank grid and FTD grid, one block per wafer, row y = 0 first.
std::string ascii_grid(const MeshTopology& topo, const Mapping& mapping, const std::vector<int>& ftd_of);

/// Each command writes its files into `out` and a short report to `console`.
void command_map(const SimConfig& cfg, const std::filesystem::path& out, std::ostream& console);
void command_heatmap(const SimConfig& cfg, const std::filesystem::path& out, std::ostream& console);
void command_simulate(const SimConfig& cfg, const std::filesystem::path& out, std::ostream& console);
void command_balance_trace(const SimConfig& cfg, const std::filesystem::path& out,
                           std::ostream& console);
/// Runs every config (up to `jobs` at a time) and writes compare.csv with
/// reference/this ratio columns, the first config being the reference.
void command_compare(const std::vector<SimConfig>& cfgs, const std::filesystem::path& out,
                     std::ostream& console, int jobs = 1);

/// CSV text of a simulation trace; the bytes depend only on config and seed.
std::string trace_csv(const std::vector<IterationMetrics>& trace);

}  // namespace meshmoe
