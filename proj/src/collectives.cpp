// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/collectives.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

const char* to_string(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::reduce_scatter:
      return "reduce_scatter";
    case CollectiveKind::all_gather:
      return "all_gather";
    case CollectiveKind::all_to_all:
      return "all_to_all";
    case CollectiveKind::migration:
      return "migration";
  }
  return "?";
}

const char* to_string(LinkClass c) {
  switch (c) {
    case LinkClass::idle:
      return "idle";
    case LinkClass::cold:
      return "cold";
    case LinkClass::hot:
      return "hot";
  }
  return "?";
}

void Phase::add_routed(const MeshTopology& topo, DeviceIndex src, DeviceIndex dst, double bytes) {
  int hops = 0;
  double lat = 0.0;
  for_each_route_link(topo, src, dst, [&](LinkIndex l) {
    link_bytes[l] += bytes;
    ++link_uses[l];
    lat += topo.link(l).link_latency;
    ++hops;
  });
  transfers.push_back({src, dst, bytes, hops});
  max_hops = std::max(max_hops, hops);
  max_path_latency = std::max(max_path_latency, lat);
}

void Phase::add_hop(const MeshTopology& topo, LinkIndex link, double bytes) {
  const Link& l = topo.link(link);
  link_bytes[link] += bytes;
  ++link_uses[link];
  transfers.push_back({l.src, l.dst, bytes, 1});
  max_hops = std::max(max_hops, 1);
  max_path_latency = std::max(max_path_latency, l.link_latency);
}

std::size_t CollectivePlan::phase_count(CollectiveKind kind) const {
  return static_cast<std::size_t>(std::count_if(
      phases.begin(), phases.end(), [kind](const Phase& p) { return p.kind == kind; }));
}

double CollectivePlan::total_link_bytes() const {
  double total = 0.0;
  for (const auto& p : phases) {
    for (double b : p.link_bytes) total += b;
  }
  return total;
}

double CollectivePlan::bytes_sent_by(DeviceIndex d) const {
  double total = 0.0;
  for (const auto& p : phases) {
    for (const auto& t : p.transfers) {
      if (t.src == d) total += t.bytes;
    }
  }
  return total;
}

DemandMatrix DemandMatrix::transposed() const {
  DemandMatrix t(n_);
  for (std::size_t s = 0; s < n_; ++s) {
    for (std::size_t d = 0; d < n_; ++d) t.bytes_[d * n_ + s] = bytes_[s * n_ + d];
  }
  return t;
}

double DemandMatrix::total() const {
  double sum = 0.0;
  for (double b : bytes_) sum += b;
  return sum;
}

CollectivePlan plan_ring_allreduce(const MeshTopology& topo, std::span<const DeviceIndex> ring,
                                   double volume_per_device, bool with_allgather) {
  CollectivePlan plan;
  const std::size_t n = ring.size();
  if (n < 2) return plan;
  const double chunk = volume_per_device / static_cast<double>(n);
  const std::size_t links = topo.links().size();
  auto add_steps = [&](CollectiveKind kind) {
    for (std::size_t step = 0; step + 1 < n; ++step) {
      Phase phase(links, kind);
      for (std::size_t i = 0; i < n; ++i) {
        phase.add_routed(topo, ring[i], ring[(i + 1) % n], chunk);
      }
      plan.phases.push_back(std::move(phase));
    }
  };
  add_steps(CollectiveKind::reduce_scatter);
  if (with_allgather) add_steps(CollectiveKind::all_gather);
  return plan;
}

CollectivePlan merge_concurrent(const MeshTopology& topo, std::span<const CollectivePlan> plans) {
  CollectivePlan out;
  std::size_t depth = 0;
  for (const auto& p : plans) depth = std::max(depth, p.phases.size());
  const std::size_t links = topo.links().size();
  for (std::size_t i = 0; i < depth; ++i) {
    Phase merged(links);
    bool kind_set = false;
    for (const auto& p : plans) {
      if (i >= p.phases.size()) continue;
      const Phase& src = p.phases[i];
      if (!kind_set) {
        merged.kind = src.kind;
        kind_set = true;
      }
      for (std::size_t l = 0; l < links; ++l) {
        merged.link_bytes[l] += src.link_bytes[l];
        merged.link_uses[l] += src.link_uses[l];
      }
      merged.transfers.insert(merged.transfers.end(), src.transfers.begin(), src.transfers.end());
      merged.max_hops = std::max(merged.max_hops, src.max_hops);
      merged.max_path_latency = std::max(merged.max_path_latency, src.max_path_latency);
    }
    out.phases.push_back(std::move(merged));
  }
  return out;
}

CollectivePlan plan_group_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                    double volume_per_device, bool with_allgather) {
  std::vector<CollectivePlan> per_group;
  per_group.reserve(mapping.rings.size());
  for (const auto& ring : mapping.rings) {
    per_group.push_back(plan_ring_allreduce(topo, ring, volume_per_device, with_allgather));
  }
  return merge_concurrent(topo, per_group);
}

namespace {

struct RingFlow {
  DeviceIndex src;
  DeviceIndex dst;
};

// Greedy list scheduling of multi-hop flows into single-hop sub-phases: hop j
// of a flow goes to the earliest sub-phase after hop j-1 whose link is free.
void schedule_hop_by_hop(const MeshTopology& topo, std::span<const RingFlow> flows, double bytes,
                         CollectiveKind kind, CollectivePlan& plan) {
  const std::size_t links = topo.links().size();
  std::vector<Phase> slots;
  std::vector<LinkIndex> path;
  for (const auto& f : flows) {
    path.clear();
    for_each_route_link(topo, f.src, f.dst, [&](LinkIndex l) { path.push_back(l); });
    std::size_t t = 0;
    for (LinkIndex l : path) {
      while (t < slots.size() && slots[t].link_uses[l] != 0) ++t;
      if (t == slots.size()) slots.emplace_back(links, kind);
      slots[t].add_hop(topo, l, bytes);
      ++t;
    }
  }
  for (auto& s : slots) plan.phases.push_back(std::move(s));
}

std::vector<RingFlow> ring_step_flows(std::span<const std::vector<DeviceIndex>> rings) {
  std::vector<RingFlow> flows;
  for (const auto& ring : rings) {
    const std::size_t n = ring.size();
    if (n < 2) continue;
    for (std::size_t i = 0; i < n; ++i) flows.push_back({ring[i], ring[(i + 1) % n]});
  }
  return flows;
}

std::size_t max_ring_size(std::span<const std::vector<DeviceIndex>> rings) {
  std::size_t n = 0;
  for (const auto& r : rings) n = std::max(n, r.size());
  return n;
}

void add_entwined_steps(const MeshTopology& topo, std::span<const std::vector<DeviceIndex>> rings,
                        double volume_per_device, CollectiveKind kind, CollectivePlan& plan) {
  const std::size_t n = max_ring_size(rings);
  if (n < 2) return;
  const double chunk = volume_per_device / static_cast<double>(n);
  const auto flows = ring_step_flows(rings);
  for (std::size_t step = 0; step + 1 < n; ++step) {
    schedule_hop_by_hop(topo, flows, chunk, kind, plan);
  }
}

}  // namespace

CollectivePlan plan_entwined_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                       double volume_per_device, bool with_allgather) {
  if (mapping.layout != Layout::er) {
    throw ConfigError(fmt::format("entwined all-reduce needs an ER mapping, got {}",
                                  to_string(mapping.layout)));
  }
  CollectivePlan plan;
  add_entwined_steps(topo, mapping.rings, volume_per_device, CollectiveKind::reduce_scatter, plan);
  if (with_allgather) {
    add_entwined_steps(topo, mapping.rings, volume_per_device, CollectiveKind::all_gather, plan);
  }
  return plan;
}

CollectivePlan plan_hier_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                   double volume_per_device) {
  if (topo.wafer_count() < 2) {
    throw ConfigError("hierarchical all-reduce needs at least 2 wafers");
  }
  if (mapping.layout != Layout::hier_er) {
    throw ConfigError(fmt::format("hierarchical all-reduce needs a hier_er mapping, got {}",
                                  to_string(mapping.layout)));
  }
  CollectivePlan plan;
  add_entwined_steps(topo, mapping.rings, volume_per_device, CollectiveKind::reduce_scatter, plan);

  // After the reduce-scatter every device owns 1/tp of its group's tokens.
  // Peers at the same (x, y) relay those chunks along the wafer chain in both
  // directions; after wafers-1 steps every wafer holds every chunk.
  const double chunk = volume_per_device / static_cast<double>(mapping.cfg.tp);
  const int wafers = topo.wafer_count();
  const std::size_t links = topo.links().size();
  for (int step = 1; step < wafers; ++step) {
    Phase phase(links, CollectiveKind::all_gather);
    for (DeviceIndex d = 0; d < topo.device_count(); ++d) {
      const auto c = topo.coord_of(d);
      const int origin_right = c.wafer - step + 1;  // chunk forwarded eastwards
      if (origin_right >= 0 && c.wafer + 1 < wafers) {
        phase.add_routed(topo, d, topo.index_of({c.wafer + 1, c.x, c.y}), chunk);
      }
      const int origin_left = c.wafer + step - 1;  // chunk forwarded westwards
      if (origin_left < wafers && c.wafer - 1 >= 0) {
        phase.add_routed(topo, d, topo.index_of({c.wafer - 1, c.x, c.y}), chunk);
      }
    }
    plan.phases.push_back(std::move(phase));
  }
  return plan;
}

CollectivePlan plan_attention_allreduce(const MeshTopology& topo, const Mapping& mapping,
                                        double volume_per_device, bool with_allgather) {
  switch (mapping.layout) {
    case Layout::baseline:
      return plan_group_allreduce(topo, mapping, volume_per_device, with_allgather);
    case Layout::er:
      return plan_entwined_allreduce(topo, mapping, volume_per_device, with_allgather);
    case Layout::hier_er:
      return plan_hier_allreduce(topo, mapping, volume_per_device);
  }
  throw ConfigError("unknown layout");
}

CollectivePlan plan_all_to_all(const MeshTopology& topo, const DemandMatrix& demands) {
  const std::size_t n = topo.device_count();
  if (demands.size() != n) {
    throw DomainError(fmt::format("demand matrix covers {} devices, topology has {}",
                                  demands.size(), n));
  }
  CollectivePlan plan;
  Phase phase(topo.links().size(), CollectiveKind::all_to_all);
  for (DeviceIndex s = 0; s < n; ++s) {
    for (DeviceIndex d = 0; d < n; ++d) {
      const double b = demands.at(s, d);
      if (b < 0) {
        throw DomainError(fmt::format("negative demand {} from {} to {}", b, s, d));
      }
      if (b == 0 || s == d) continue;
      phase.add_routed(topo, s, d, b);
    }
  }
  if (!phase.empty()) plan.phases.push_back(std::move(phase));
  return plan;
}

double phase_latency(const CollectivePlan& plan, const MeshTopology& topo, double scale) {
  // Compensated (Neumaier) sum: plans whose phases repeat the same cost then
  // total to the correctly rounded multiple, so ratios between such plans
  // come out exact.
  double total = 0.0;
  double comp = 0.0;
  auto add = [&](double v) {
    const double t = total + v;
    comp += std::abs(total) >= std::abs(v) ? (total - t) + v : (v - t) + total;
    total = t;
  };
  const auto links = topo.links();
  for (const auto& p : plan.phases) {
    double worst = 0.0;
    for (std::size_t l = 0; l < p.link_bytes.size(); ++l) {
      if (p.link_bytes[l] > 0) worst = std::max(worst, p.link_bytes[l] * scale / links[l].bandwidth);
    }
    add(worst + p.max_path_latency);
  }
  return total + comp;
}

bool has_link_conflict(const CollectivePlan& plan) {
  for (const auto& p : plan.phases) {
    for (auto uses : p.link_uses) {
      if (uses > 1) return true;
    }
  }
  return false;
}

TrafficMatrix TrafficMatrix::from_plan(const CollectivePlan& plan, std::size_t link_count) {
  TrafficMatrix t;
  t.bytes.assign(link_count, 0.0);
  t.duty.assign(link_count, 0.0);
  if (plan.phases.empty()) return t;
  std::vector<std::size_t> active(link_count, 0);
  for (const auto& p : plan.phases) {
    for (std::size_t l = 0; l < link_count; ++l) {
      if (p.link_bytes[l] > 0) {
        t.bytes[l] += p.link_bytes[l];
        ++active[l];
      }
    }
  }
  const auto phases = static_cast<double>(plan.phases.size());
  for (std::size_t l = 0; l < link_count; ++l) t.duty[l] = static_cast<double>(active[l]) / phases;
  return t;
}

void TrafficMatrix::accumulate(const TrafficMatrix& other) {
  if (bytes.empty()) {
    *this = other;
    return;
  }
  for (std::size_t l = 0; l < bytes.size(); ++l) {
    bytes[l] += other.bytes[l];
    duty[l] = std::max(duty[l], other.duty[l]);
  }
}

LinkClass classify(double bytes, double duty, double cold_threshold) {
  if (bytes <= 0) return LinkClass::idle;
  return duty <= cold_threshold ? LinkClass::cold : LinkClass::hot;
}

LinkClassification classify_links(const TrafficMatrix& attention, const TrafficMatrix& moe,
                                  double cold_threshold) {
  if (attention.bytes.size() != moe.bytes.size() || attention.duty.size() != attention.bytes.size() ||
      moe.duty.size() != moe.bytes.size()) {
    throw DomainError(fmt::format("traffic matrices disagree on link count ({} vs {})",
                                  attention.bytes.size(), moe.bytes.size()));
  }
  LinkClassification out;
  const std::size_t n = attention.bytes.size();
  out.attention.resize(n);
  out.moe.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    out.attention[l] = classify(attention.bytes[l], attention.duty[l], cold_threshold);
    out.moe[l] = classify(moe.bytes[l], moe.duty[l], cold_threshold);
    // A link hot in all-to-all may stay cold in all-reduce; a link hot in
    // all-reduce must be idle in all-to-all. The latter also rules out hot/hot.
    if (out.attention[l] == LinkClass::hot && out.moe[l] != LinkClass::idle) {
      out.complementarity_violations.push_back(static_cast<LinkIndex>(l));
    }
  }
  return out;
}

}  // namespace meshmoe
