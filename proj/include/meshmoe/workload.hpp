// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "meshmoe/mapping.hpp"
#include "meshmoe/topology.hpp"

namespace meshmoe {

struct ModelSpec {
  std::string name;
  double total_params = 0;  // parameter count
  int sparse_layers = 0;
  int total_layers = 0;
  double expert_size = 0;  // bytes
  int top_k = 1;
  int experts_total = 1;
  int hidden_size = 0;  // elements
  int bytes_per_element = 2;

  /// Throws ConfigError naming every violated field.
  void validate() const;
  /// Bytes of one token's activation vector.
  double token_bytes() const { return static_cast<double>(hidden_size) * bytes_per_element; }
};

/// DeepSeek-V3, Qwen3, DeepSeek-V2, DBRX, Mixtral-8x22B.
std::vector<ModelSpec> preset_models();
/// Case-insensitive lookup; ConfigError lists the known names.
ModelSpec find_preset(const std::string& name);

struct GatingParams {
  double zipf_exponent = 1.0;
  int scenarios = 4;
  double drift_rate = 0.0;
  int scenario_dwell = 50;  // iterations spent drifting toward one scenario
  std::vector<double> scenario_mix;  // initial weights; empty = scenario 0 only
  std::uint64_t seed = 0;
};

/// Per-layer expert popularity and the scenario vectors it drifts between.
struct GatingModel {
  std::vector<std::vector<double>> popularity;                // [layer][expert]
  std::vector<std::vector<std::vector<double>>> scenarios;    // [scenario][layer][expert]
  double drift_rate = 0.0;
  int scenario_dwell = 50;
  std::uint64_t seed = 0;

  int layers() const { return static_cast<int>(popularity.size()); }
  int experts() const { return popularity.empty() ? 0 : static_cast<int>(popularity[0].size()); }
};

/// Zipf popularity over a seeded permutation of the experts, per scenario and layer.
GatingModel make_gating(int experts_total, int layers, const GatingParams& params);
/// Same popularity vector on every layer (normalised); no scenarios to drift to.
GatingModel fixed_gating(const std::vector<double>& popularity, int layers, std::uint64_t seed);

/// Top-k experts per token, flattened token-major.
struct ExpertAssignment {
  int top_k = 0;
  std::vector<int> experts;
  std::vector<double> weights;  // affinity weights, sum to 1 per token

  std::size_t token_count() const {
    return top_k == 0 ? 0 : experts.size() / static_cast<std::size_t>(top_k);
  }
  int expert(std::size_t token, int rank) const {
    return experts[token * static_cast<std::size_t>(top_k) + static_cast<std::size_t>(rank)];
  }
};

/// Samples top_k distinct experts per token, each draw proportional to the
/// layer's popularity among experts not yet chosen. `iteration` selects an
/// independent random stream.
ExpertAssignment gate_tokens(const ModelSpec& model, std::size_t token_count,
                             const GatingModel& gating, int layer, std::uint64_t iteration = 0);

/// Mixes every layer toward the next scenario in the cycle.
GatingModel evolve_popularity(const GatingModel& gating, std::uint64_t iteration);

/// Hosts of every expert. hosts[e][0] is the native device.
struct ExpertPlacement {
  std::size_t device_count = 0;
  std::vector<std::vector<DeviceIndex>> hosts;

  static ExpertPlacement from_mapping(const Mapping& mapping);
  int replicas(int expert) const { return static_cast<int>(hosts.at(static_cast<std::size_t>(expert)).size()); }
  bool hosts_expert(DeviceIndex d, int expert) const;
  /// Experts hosted on `d` (native or shadow).
  std::vector<int> experts_on(DeviceIndex d) const;
};

/// Tokens routed to each expert.
std::vector<double> expert_loads(const ExpertAssignment& assignment, int experts_total);

/// Splits each expert's load evenly over its hosts. Throws InvariantError if a
/// loaded expert has no host.
std::vector<double> device_loads(const std::vector<double>& expert_load,
                                 const ExpertPlacement& placement);
std::vector<double> device_loads(const ExpertAssignment& assignment, const ExpertPlacement& placement);

/// max/mean of a load vector (1 for an all-zero vector).
double imbalance_ratio(const std::vector<double>& loads);

/// Exponentially smoothed per-device load shares.
class LoadRatioTracker {
 public:
  explicit LoadRatioTracker(double alpha = 0.2) : alpha_(alpha) {}
  /// Folds in one iteration and returns the largest relative change of any
  /// device's smoothed share (0 on the first call).
  double update(const std::vector<double>& loads);
  const std::vector<double>& ratios() const { return ratios_; }

 private:
  double alpha_;
  std::vector<double> ratios_;
};

struct TraceKey {
  std::uint64_t iteration = 0;
  int layer = 0;
  auto operator<=>(const TraceKey&) const = default;
};

/// Header: iteration,layer,token,expert_rank_1..expert_rank_k
void write_trace_header(std::ostream& out, int top_k);
void write_trace_rows(std::ostream& out, std::uint64_t iteration, int layer,
                      const ExpertAssignment& assignment);
/// Reads a trace written by the functions above (or by hand). Affinity
/// weights are set uniform. Throws ConfigError on malformed rows.
std::map<TraceKey, ExpertAssignment> read_trace(std::istream& in);

}  // namespace meshmoe
