// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meshmoe/balancer.hpp"
#include "meshmoe/collectives.hpp"
#include "meshmoe/mapping.hpp"
#include "meshmoe/topology.hpp"
#include "meshmoe/workload.hpp"

namespace meshmoe {

struct ComputeModel {
  double peak_flops = 2250e12;
  double mem_bw = 8e12;
  int expert_bytes_per_element = 1;     // INT8 expert weights
  int attention_bytes_per_element = 2;  // FP16 attention weights
  double attention_flops_coeff = 8.0;   // FLOPs per token, times hidden^2
  double attention_weight_coeff = 4.0;  // weight elements, times hidden^2

  void validate() const;
};

/// Roofline for one device's expert work: the larger of FLOP time over all
/// routed tokens and the time to stream every resident expert with tokens.
double compute_time_moe(double tokens, int resident_experts, const ModelSpec& model,
                        const ComputeModel& compute);

/// Roofline for one TP shard of an attention block.
double compute_time_attention(double tokens, int hidden_size, int tp, const ComputeModel& compute);

/// Two-stream pipeline over `micro_batches` stages whose per-stage compute
/// and communication times are `c` and `t`: m * max(c, t) + min(c, t).
double pipeline_time(double c, double t, int micro_batches);

/// Device -> device bytes for MoE dispatch. Every (token, expert) pair moves
/// one activation vector, split evenly over the expert's hosts, from the
/// device that holds the token after the all-reduce.
DemandMatrix moe_dispatch_demand(const MeshTopology& topo, const Mapping& mapping,
                                 const ExpertAssignment& assignment,
                                 const ExpertPlacement& placement, double token_bytes,
                                 bool with_allgather);

enum class BalancerMode { off, greedy, topo, topo_noninvasive };

const char* to_string(BalancerMode mode);
/// Throws ConfigError listing the valid names.
BalancerMode parse_balancer_mode(const std::string& name);

struct BalancerConfig {
  BalancerMode mode = BalancerMode::off;
  std::optional<double> alpha;  // default 0.2 * simulated MoE layers
  std::optional<double> beta;   // default 0 non-invasive, 10 invasive
  int slots = 1;
  int window = 16;
  CandidateRule rule = CandidateRule::prose;
  double cold_threshold = 0.5;
};

struct EngineConfig {
  MeshTopology topo = build_mesh(1, 4, 4, 8e12, 9e12, 0.2e-6);
  ModelSpec model;
  ParallelismConfig parallelism;
  Layout layout = Layout::baseline;
  bool with_allgather = true;
  int micro_batches = 1;
  int moe_layers = 0;  // 0 = every sparse layer of the model
  ComputeModel compute;
  BalancerConfig balancer;
  GatingParams gating;
  /// Replays recorded expert choices instead of sampling when non-empty.
  std::map<TraceKey, ExpertAssignment> replay_trace;

  void validate() const;
};

struct LayerMetrics {
  double attention_compute = 0;
  double allreduce = 0;
  double dispatch = 0;
  double expert_compute = 0;
  double combine = 0;
  double attention_time = 0;  // pipelined
  double moe_time = 0;        // pipelined
  double imbalance = 1;       // max / mean device load
};

struct PlacementEvent {
  std::uint64_t iteration = 0;
  int layer = 0;
  int expert = 0;
  DeviceIndex device = 0;
  bool add = true;
};

struct IterationMetrics {
  std::uint64_t iteration = 0;
  std::vector<LayerMetrics> layers;
  double dense_layer_time = 0;  // one attention-only layer
  int dense_layers = 0;
  double migration_stall = 0;
  double wall_time = 0;
  double heat_ratio = 1;  // planned max / mean heat, averaged over layers
  double imbalance = 1;   // observed max / mean device load, averaged over layers
  bool triggered = false;
  int moves_issued = 0;
  int moves_completed = 0;
  double migration_bytes_in_flight = 0;
  std::vector<double> device_tokens;  // expert tokens per device, summed over layers
  std::vector<double> link_bytes;     // collective + migration bytes per link
  std::vector<PlacementEvent> placement_events;
};

/// Runs iterations one at a time. Every random stream is derived from the
/// gating seed, so two simulators with equal configs produce equal metrics.
class Simulator {
 public:
  explicit Simulator(EngineConfig cfg);
  // The migration scheduler points into the owned config.
  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  IterationMetrics step();
  const EngineConfig& config() const { return cfg_; }
  const Mapping& mapping() const { return mapping_; }
  const std::vector<Ftd>& ftds() const { return ftds_; }
  const CollectivePlan& attention_plan() const { return attention_plan_; }
  const TrafficMatrix& attention_traffic() const { return attention_traffic_; }
  const MigrationScheduler& scheduler() const { return scheduler_; }
  /// Active (usable) placement of one MoE layer.
  const ExpertPlacement& placement(int layer) const;
  int moe_layers() const { return static_cast<int>(active_.size()); }
  double alpha() const { return alpha_; }
  double beta() const { return beta_; }
  std::uint64_t next_iteration() const { return iteration_; }
  /// Applies the given placement changes at the end of their iterations
  /// instead of running the balancer. Used to re-time a balanced run with
  /// migration traffic removed.
  void replay_placements(std::vector<PlacementEvent> events);
  /// Expert choices of the last step, per layer.
  const std::vector<ExpertAssignment>& last_assignments() const { return last_assignments_; }

 private:
  void apply(const PlacementEvent& ev, IterationMetrics& m);
  void run_balancer(IterationMetrics& m);

  EngineConfig cfg_;
  Mapping mapping_;
  std::vector<Ftd> ftds_;
  std::vector<int> ftd_of_;
  CollectivePlan attention_plan_;
  TrafficMatrix attention_traffic_;
  double allreduce_stage_ = 0;
  double attention_stage_ = 0;
  GatingModel gating_;
  std::vector<ExpertPlacement> active_;
  std::vector<BalancerState> planned_;
  std::vector<LoadEstimator> estimators_;
  MigrationScheduler scheduler_;
  std::vector<ExpertAssignment> last_assignments_;
  std::vector<PlacementEvent> replay_;
  bool replaying_ = false;
  double alpha_ = 0;
  double beta_ = 0;
  std::uint64_t iteration_ = 0;
  std::optional<std::uint64_t> last_trigger_;
};

struct SimulationSummary {
  std::uint64_t iterations = 0;
  double mean_wall_time = 0;
  double p50_wall_time = 0;
  double p95_wall_time = 0;
  double max_wall_time = 0;
  double tokens_per_second_per_device = 0;
  int triggers = 0;
  int moves_issued = 0;
  int moves_completed = 0;
  double total_migration_stall = 0;
  double mean_imbalance = 1;
  double final_imbalance = 1;
  double breakdown_attention_compute = 0;
  double breakdown_allreduce = 0;
  double breakdown_dispatch = 0;
  double breakdown_expert_compute = 0;
  double breakdown_combine = 0;
};

struct SimulationResult {
  std::vector<IterationMetrics> trace;
  SimulationSummary summary;
};

/// Throws ConfigError for iterations < 1.
SimulationResult run_simulation(const EngineConfig& cfg, std::uint64_t iterations);

SimulationSummary summarize(const EngineConfig& cfg, const std::vector<IterationMetrics>& trace);

}  // namespace meshmoe
