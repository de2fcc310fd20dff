// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "meshmoe/mapping.hpp"
#include "meshmoe/topology.hpp"

namespace meshmoe {

enum class CollectiveKind { reduce_scatter, all_gather, all_to_all, migration };

const char* to_string(CollectiveKind kind);

/// One logical point-to-point transfer inside a phase.
struct Transfer {
  DeviceIndex src = 0;
  DeviceIndex dst = 0;
  double bytes = 0.0;
  int hops = 0;
};

/// Transfers that run concurrently. Bytes on the same directed link add up.
struct Phase {
  CollectiveKind kind = CollectiveKind::all_to_all;
  std::vector<Transfer> transfers;
  std::vector<double> link_bytes;         // per directed link
  std::vector<std::uint32_t> link_uses;   // transfers crossing each link
  double max_path_latency = 0.0;          // largest summed link latency of any transfer
  int max_hops = 0;

  explicit Phase(std::size_t link_count = 0, CollectiveKind k = CollectiveKind::all_to_all)
      : kind(k), link_bytes(link_count, 0.0), link_uses(link_count, 0) {}

  /// Routes src -> dst with route_xy and accounts it.
  void add_routed(const MeshTopology& topo, DeviceIndex src, DeviceIndex dst, double bytes);
  /// Accounts a transfer over exactly one link.
  void add_hop(const MeshTopology& topo, LinkIndex link, double bytes);
  bool empty() const { return transfers.empty(); }
};

/// Phases execute strictly one after another.
struct CollectivePlan {
  std::vector<Phase> phases;

  bool empty() const { return phases.empty(); }
  std::size_t phase_count(CollectiveKind kind) const;
  /// Sum over phases and links.
  double total_link_bytes() const;
  /// Bytes injected by `d` (sum of transfers it sources).
  double bytes_sent_by(DeviceIndex d) const;
};

/// Dense device -> device byte matrix.
class DemandMatrix {
 public:
  explicit DemandMatrix(std::size_t devices = 0) : n_(devices), bytes_(devices * devices, 0.0) {}
  std::size_t size() const { return n_; }
  double& at(DeviceIndex src, DeviceIndex dst) { return bytes_[src * n_ + dst]; }
  double at(DeviceIndex src, DeviceIndex dst) const { return bytes_[src * n_ + dst]; }
  DemandMatrix transposed() const;
  double total() const;

 private:
  std::size_t n_;
  std::vector<double> bytes_;
};

/// Ring all-reduce over `ring` (traversal order). Reduce-scatter takes N-1
/// phases of volume/N per member; a retained all-gather adds N-1 more.
CollectivePlan plan_ring_allreduce(const MeshTopology& topo, std::span<const DeviceIndex> ring,
                                   double volume_per_device, bool with_allgather);

/// Runs several plans side by side: phase i of the result merges phase i of
/// every input.
CollectivePlan merge_concurrent(const MeshTopology& topo, std::span<const CollectivePlan> plans);

/// Concurrent ring all-reduce of every TP group of a mapping, one phase per
/// ring step (baseline layout rings are single hop).
CollectivePlan plan_group_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                    double volume_per_device, bool with_allgather);

/// ER all-reduce: every ring step is forwarded hop by hop, and hops of the
/// intertwined rings are staggered into sub-phases so that no directed link
/// carries two transfers in one phase. Requires an ER mapping.
CollectivePlan plan_entwined_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                       double volume_per_device, bool with_allgather);

/// Two-level all-reduce for a hierarchical ER mapping: entwined reduce-scatter
/// inside each wafer, then a bidirectional all-gather between peer devices of
/// neighbouring wafers.
CollectivePlan plan_hier_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                   double volume_per_device);

/// Picks the all-reduce matching the mapping's layout.
CollectivePlan plan_attention_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                        double volume_per_device, bool with_allgather);

/// Routes every non-zero demand along route_xy in a single phase. Throws
/// DomainError for a matrix of the wrong size or a negative entry.
CollectivePlan plan_all_to_all(const MeshTopology& topo, const DemandMatrix& demands);

/// Bottleneck model: each phase costs its heaviest link's transfer time plus
/// the link latency of its longest path. `scale` multiplies all bytes.
double phase_latency(const CollectivePlan& plan, const MeshTopology& topo, double scale = 1.0);

/// True when some phase puts two transfers on one directed link.
bool has_link_conflict(const CollectivePlan& plan);

struct TrafficMatrix {
  std::vector<double> bytes;  // per directed link
  std::vector<double> duty;   // fraction of phases in which the link is active

  static TrafficMatrix from_plan(const CollectivePlan& plan, std::size_t link_count);
  void accumulate(const TrafficMatrix& other);
};

enum class LinkClass { idle, cold, hot };

const char* to_string(LinkClass c);

struct LinkClassification {
  std::vector<LinkClass> attention;
  std::vector<LinkClass> moe;
  /// Links hot during all-reduce that still carry all-to-all traffic.
  std::vector<LinkIndex> complementarity_violations;

  bool complementary() const { return complementarity_violations.empty(); }
};

LinkClass classify(double bytes, double duty, double cold_threshold);

/// Throws DomainError when the matrices come from different topologies.
LinkClassification classify_links(const TrafficMatrix& attention, const TrafficMatrix& moe,
                                  double cold_threshold = 0.5);

}  // namespace meshmoe
