// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "meshmoe/collectives.hpp"
#include "meshmoe/mapping.hpp"
#include "meshmoe/topology.hpp"
#include "meshmoe/workload.hpp"

namespace meshmoe {

/// Imbalance summed over layers: sum of (max - mean) / mean, skipping layers
/// whose mean load is zero.
double cumulative_imbalance(const std::vector<std::vector<double>>& per_layer_loads);

/// Fires when the cumulative imbalance exceeds `alpha` and the time gate is
/// open. beta == 0 disables the gate; otherwise it requires
/// iterations_since_last > beta. Throws DomainError for an empty layer list.
bool should_trigger(const std::vector<std::vector<double>>& per_layer_loads, double alpha,
                    double beta, double iterations_since_last);

/// Replica bookkeeping for one MoE layer.
class BalancerState {
 public:
  BalancerState() = default;
  /// `load` is load_e per expert; every expert must have at least one host.
  BalancerState(std::vector<double> load, ExpertPlacement placement, std::vector<int> slot_capacity);

  const std::vector<double>& load() const { return load_; }
  const ExpertPlacement& placement() const { return placement_; }
  const std::vector<double>& heat() const { return heat_; }
  int num(int expert) const { return placement_.replicas(expert); }
  double share(int expert) const { return load_[static_cast<std::size_t>(expert)] / num(expert); }
  int free_slots(DeviceIndex d) const { return capacity_[d] - used_[d]; }
  int slots_used(DeviceIndex d) const { return used_[d]; }
  int total_free_slots() const;
  std::size_t device_count() const { return heat_.size(); }
  std::size_t expert_count() const { return load_.size(); }

  /// Replaces load_e and recomputes heats.
  void set_load(std::vector<double> load);
  /// Adds a shadow replica. Throws InvariantError if `d` already hosts the
  /// expert or has no free slot.
  void add_replica(int expert, DeviceIndex d);
  /// Drops a shadow replica (the native copy cannot be removed).
  void remove_replica(int expert, DeviceIndex d);
  double max_heat() const;
  DeviceIndex hottest() const;
  /// Heat recomputed from scratch; used to check the incremental bookkeeping.
  std::vector<double> recompute_heat() const;

 private:
  std::vector<double> load_;
  ExpertPlacement placement_;
  std::vector<int> capacity_;
  std::vector<int> used_;
  std::vector<double> heat_;
};

/// Exponential moving average of per-expert token counts over a window of
/// `window` iterations (alpha = 2 / (window + 1)).
class LoadEstimator {
 public:
  explicit LoadEstimator(int window = 16);
  void observe(const std::vector<double>& counts);
  const std::vector<double>& estimate() const { return ema_; }

 private:
  double alpha_;
  std::vector<double> ema_;
};

struct Move {
  int expert = 0;
  DeviceIndex src = 0;  // device the weights are copied from
  DeviceIndex dst = 0;
  double bytes = 0;
  int hops = 0;
};

struct MigrationPlan {
  std::vector<Move> moves;
  std::vector<std::pair<int, DeviceIndex>> evictions;  // (expert, device), metadata only

  bool empty() const { return moves.empty(); }
  double hop_bytes() const;
};

enum class CandidateRule {
  /// heat_d + load_src / (num_src + 1) < max heat
  prose,
  /// heat_d < max heat - load_src / num_src, as the algorithm listing prints it
  literal,
};

/// Copies the globally hottest per-replica expert (from its native device) to
/// the coldest device with a free slot, while that lowers the hottest heat.
MigrationPlan greedy_rebalance(BalancerState& state, const MeshTopology& topo, double expert_bytes);

/// Takes the hottest device's heaviest expert and replicates it onto the
/// candidate nearest to any existing host. Candidates are devices with a free
/// slot that do not host the expert and satisfy `rule`. Ties go to the lower
/// device index.
MigrationPlan topology_aware_rebalance(BalancerState& state, const MeshTopology& topo,
                                       double expert_bytes,
                                       CandidateRule rule = CandidateRule::prose);

/// When no slot is free anywhere, evicts the replica with the lowest
/// load_e / num_e and retries the topology-aware pass. The eviction is kept
/// only if the resulting max heat is lower than before.
MigrationPlan rebalance_with_eviction(BalancerState& state, const MeshTopology& topo,
                                      double expert_bytes, CandidateRule rule = CandidateRule::prose);

enum class StageKind { local, global };

const char* to_string(StageKind kind);

struct MigrationStage {
  StageKind kind = StageKind::local;
  std::vector<LinkIndex> path;
};

struct StagedMove {
  Move move;
  int layer = 0;
  std::vector<MigrationStage> stages;
};

/// Intra-FTD (both endpoints share an FTD) vs. inter-FTD links.
std::vector<StageKind> link_stage_kinds(const MeshTopology& topo, const std::vector<int>& ftd_of);

/// Shortest route from src to dst, cut into alternating Local / Global stages.
/// Among shortest routes it takes one with the fewest stages. Throws
/// PlanningError when src and dst are disconnected.
StagedMove decompose_migration(const Move& move, const std::vector<int>& ftd_of,
                               const MeshTopology& topo);

enum class MigrationMode { invasive, non_invasive };

enum class LayerPhase { attention, moe };

/// Serialized critical-path cost of copying every move of a plan at once.
double invasive_stall(const MigrationPlan& plan, const MeshTopology& topo);

struct CompletedMove {
  StagedMove move;
  std::uint64_t completed_iteration = 0;
};

/// Non-invasive migration: advances in-flight moves through each layer phase
/// using only the spare capacity of links that are not hot in that phase.
/// Local stages move during attention phases and Global stages during MoE
/// phases. Moves are served first come first served.
class MigrationScheduler {
 public:
  explicit MigrationScheduler(const MeshTopology& topo, double cold_threshold = 0.5)
      : topo_(&topo), cold_threshold_(cold_threshold), link_bytes_(topo.links().size(), 0.0) {}

  void enqueue(StagedMove move);
  /// One phase of `duration` seconds whose background traffic is `traffic`.
  void advance(LayerPhase phase, double duration, const TrafficMatrix& traffic,
               std::uint64_t iteration);
  /// Moves finished since the last call.
  std::vector<CompletedMove> take_completed();

  std::size_t in_flight() const { return queue_.size(); }
  double bytes_in_flight() const;
  /// Migration bytes carried per link since construction.
  const std::vector<double>& link_bytes() const { return link_bytes_; }
  /// Migration bytes placed on a link while that link was hot. Stays 0.
  double hot_link_bytes() const { return hot_link_bytes_; }
  /// True if some in-flight move of `layer` targets expert `e` on `d`.
  bool pending(int layer, int expert, DeviceIndex d) const;
  /// Drops the in-flight move of `layer` copying `expert` to `d`, if any.
  bool cancel(int layer, int expert, DeviceIndex d);

 private:
  struct Progress {
    StagedMove move;
    std::size_t stage = 0;
    double stage_done = 0;
  };
  const MeshTopology* topo_;
  double cold_threshold_;
  std::deque<Progress> queue_;
  std::vector<CompletedMove> done_;
  std::vector<double> link_bytes_;
  double hot_link_bytes_ = 0;
};

}  // namespace meshmoe
