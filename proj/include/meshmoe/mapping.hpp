// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "meshmoe/topology.hpp"

namespace meshmoe {

enum class Layout { baseline, er, hier_er };

const char* to_string(Layout layout);
/// Accepts "baseline", "er", "hier_er"; throws ConfigError listing valid names.
Layout parse_layout(const std::string& name);

struct ParallelismConfig {
  int dp = 1;
  int tp = 1;
  int ep = 0;  // 0 means "one expert partition per device"
  int tokens_per_tp_group = 256;
};

struct MappingOptions {
  int experts_total = 0;  // 0 means one native expert per device
  int shadow_slots = 1;
};

struct DeviceAssignment {
  int tp_group = 0;
  int rank = 0;      // equals the device's FTD slot
  std::vector<int> native_experts;
  int shadow_slots = 0;
};

/// Device placement for attention (TP groups) and MoE (experts).
///
/// Baseline packs each TP group into a contiguous block; ER interleaves the
/// groups so that every block of dp neighbouring devices holds one member of
/// each group. In both cases member `rank` of every group sits in FTD slot
/// `rank`, so FTD r is {groups[g][r] for every g}.
struct Mapping {
  Layout layout = Layout::baseline;
  ParallelismConfig cfg;
  std::vector<DeviceAssignment> devices;
  /// groups[g][r]: device holding rank r of TP group g.
  std::vector<std::vector<DeviceIndex>> groups;
  /// Ring traversal order used by the group's all-reduce.
  std::vector<std::vector<DeviceIndex>> rings;
  /// Native device per expert id.
  std::vector<DeviceIndex> expert_home;
  /// Tile shape: TP block (baseline) or FTD block (er / hier_er).
  int block_width = 1;
  int block_height = 1;

  int ftd_slot(DeviceIndex d) const { return devices.at(d).rank; }
  int group_of(DeviceIndex d) const { return devices.at(d).tp_group; }
  std::size_t device_count() const { return devices.size(); }
};

/// Full Token Domain: devices that together hold every TP group's tokens.
struct Ftd {
  std::vector<DeviceIndex> members;
  // Inclusive bounding box in the global grid.
  int min_gx = 0;
  int max_gx = 0;
  int min_y = 0;
  int max_y = 0;

  bool region_contains(const MeshTopology& topo, DeviceIndex d) const;
};

/// Hamiltonian cycle over a w x h grid as (x, y) cells, starting at (0, 0).
/// Throws ConfigError when no cycle exists (odd cell count, or a 1 x n line
/// with n > 2). 1x1 and 1x2 / 2x1 degenerate cycles are allowed.
std::vector<std::pair<int, int>> grid_cycle(int w, int h);

Mapping baseline_mapping(const MeshTopology& topo, const ParallelismConfig& cfg,
                         const MappingOptions& opts = {});
Mapping er_mapping(const MeshTopology& topo, const ParallelismConfig& cfg,
                   const MappingOptions& opts = {});
Mapping hier_er_mapping(const MeshTopology& topo, const ParallelismConfig& cfg,
                        const MappingOptions& opts = {});
Mapping make_mapping(Layout layout, const MeshTopology& topo, const ParallelismConfig& cfg,
                     const MappingOptions& opts = {});

/// FTDs of a mapping. Baseline/ER: one per slot, members ordered by group.
/// Hierarchical ER: one per wafer containing every device on it.
std::vector<Ftd> compute_ftds(const MeshTopology& topo, const Mapping& mapping);

/// ftd_index[d] for a partition into FTDs (every device in exactly one).
std::vector<int> ftd_membership(const MeshTopology& topo, const std::vector<Ftd>& ftds);

/// Expected hops from an FTD member to the peer it fetches tokens from, with
/// each of the other k-1 members equally likely; pooled over all members.
double avg_hops(const MeshTopology& topo, const std::vector<Ftd>& ftds);

/// FTD regions are bounding boxes. The shared area is where every region
/// overlaps (empty with fewer than two FTDs); links there are crossed by all
/// FTDs' traffic. `multiply_covered` is the looser count of devices inside at
/// least two regions.
struct FtdOverlap {
  std::vector<DeviceIndex> shared_devices;
  std::size_t shared_links = 0;  // undirected links with both ends shared
  std::vector<DeviceIndex> multiply_covered;
};

FtdOverlap ftd_intersections(const MeshTopology& topo, const std::vector<Ftd>& ftds);

}  // namespace meshmoe
