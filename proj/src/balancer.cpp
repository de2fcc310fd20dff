// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/balancer.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <tuple>

#include <fmt/format.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

double cumulative_imbalance(const std::vector<std::vector<double>>& per_layer_loads) {
  double sum = 0.0;
  for (const auto& loads : per_layer_loads) {
    if (loads.empty()) continue;
    const double mean =
        std::accumulate(loads.begin(), loads.end(), 0.0) / static_cast<double>(loads.size());
    if (!(mean > 0)) continue;
    sum += (*std::max_element(loads.begin(), loads.end()) - mean) / mean;
  }
  return sum;
}

bool should_trigger(const std::vector<std::vector<double>>& per_layer_loads, double alpha,
                    double beta, double iterations_since_last) {
  if (per_layer_loads.empty()) throw DomainError("trigger needs at least one layer");
  if (cumulative_imbalance(per_layer_loads) <= alpha) return false;
  return beta == 0 || iterations_since_last > beta;
}

BalancerState::BalancerState(std::vector<double> load, ExpertPlacement placement,
                             std::vector<int> slot_capacity)
    : load_(std::move(load)), placement_(std::move(placement)), capacity_(std::move(slot_capacity)) {
  if (load_.size() != placement_.hosts.size()) {
    throw InvariantError(fmt::format("{} expert loads for {} placed experts", load_.size(),
                                     placement_.hosts.size()));
  }
  if (capacity_.size() != placement_.device_count) {
    throw InvariantError(fmt::format("{} slot capacities for {} devices", capacity_.size(),
                                     placement_.device_count));
  }
  used_.assign(capacity_.size(), 0);
  for (std::size_t e = 0; e < placement_.hosts.size(); ++e) {
    const auto& hosts = placement_.hosts[e];
    if (hosts.empty()) throw InvariantError(fmt::format("expert {} has no host", e));
    for (std::size_t i = 1; i < hosts.size(); ++i) ++used_.at(hosts[i]);
  }
  for (std::size_t d = 0; d < used_.size(); ++d) {
    if (used_[d] > capacity_[d]) {
      throw InvariantError(fmt::format("device {} holds {} shadow replicas with {} slots", d,
                                       used_[d], capacity_[d]));
    }
  }
  heat_ = recompute_heat();
}

int BalancerState::total_free_slots() const {
  int free = 0;
  for (std::size_t d = 0; d < used_.size(); ++d) free += capacity_[d] - used_[d];
  return free;
}

void BalancerState::set_load(std::vector<double> load) {
  if (load.size() != load_.size()) {
    throw InvariantError(fmt::format("load vector has {} experts, expected {}", load.size(),
                                     load_.size()));
  }
  load_ = std::move(load);
  heat_ = recompute_heat();
}

void BalancerState::add_replica(int expert, DeviceIndex d) {
  if (placement_.hosts_expert(d, expert)) {
    throw InvariantError(fmt::format("device {} already hosts expert {}", d, expert));
  }
  if (free_slots(d) <= 0) throw InvariantError(fmt::format("device {} has no free slot", d));
  auto& hosts = placement_.hosts[static_cast<std::size_t>(expert)];
  const double load = load_[static_cast<std::size_t>(expert)];
  const double before = load / static_cast<double>(hosts.size());
  const double after = load / static_cast<double>(hosts.size() + 1);
  for (DeviceIndex h : hosts) heat_[h] += after - before;
  hosts.push_back(d);
  heat_[d] += after;
  ++used_[d];
}

void BalancerState::remove_replica(int expert, DeviceIndex d) {
  auto& hosts = placement_.hosts.at(static_cast<std::size_t>(expert));
  auto it = std::find(hosts.begin(), hosts.end(), d);
  if (it == hosts.end()) throw InvariantError(fmt::format("device {} does not host expert {}", d, expert));
  if (it == hosts.begin()) {
    throw InvariantError(fmt::format("native copy of expert {} on device {} cannot be evicted", expert, d));
  }
  const double load = load_[static_cast<std::size_t>(expert)];
  const double before = load / static_cast<double>(hosts.size());
  const double after = load / static_cast<double>(hosts.size() - 1);
  hosts.erase(it);
  heat_[d] -= before;
  for (DeviceIndex h : hosts) heat_[h] += after - before;
  --used_[d];
}

double BalancerState::max_heat() const {
  return heat_.empty() ? 0.0 : *std::max_element(heat_.begin(), heat_.end());
}

DeviceIndex BalancerState::hottest() const {
  return static_cast<DeviceIndex>(std::max_element(heat_.begin(), heat_.end()) - heat_.begin());
}

std::vector<double> BalancerState::recompute_heat() const {
  std::vector<double> heat(placement_.device_count, 0.0);
  for (std::size_t e = 0; e < placement_.hosts.size(); ++e) {
    const auto& hosts = placement_.hosts[e];
    const double share = load_[e] / static_cast<double>(hosts.size());
    for (DeviceIndex h : hosts) heat[h] += share;
  }
  return heat;
}

LoadEstimator::LoadEstimator(int window) {
  if (window < 1) throw ConfigError(fmt::format("load window must be >= 1, got {}", window));
  alpha_ = 2.0 / (window + 1.0);
}

void LoadEstimator::observe(const std::vector<double>& counts) {
  if (ema_.size() != counts.size()) {
    ema_ = counts;
    return;
  }
  for (std::size_t i = 0; i < counts.size(); ++i) ema_[i] += alpha_ * (counts[i] - ema_[i]);
}

double MigrationPlan::hop_bytes() const {
  double total = 0.0;
  for (const auto& m : moves) total += m.bytes * m.hops;
  return total;
}

namespace {

// Nearest current host of `expert` to `d`; ties to the lower device index.
std::pair<DeviceIndex, int> nearest_host(const BalancerState& state, const MeshTopology& topo,
                                         int expert, DeviceIndex d) {
  DeviceIndex best = 0;
  int best_hops = std::numeric_limits<int>::max();
  for (DeviceIndex h : state.placement().hosts[static_cast<std::size_t>(expert)]) {
    const int hops = manhattan_hops(topo, h, d);
    if (hops < best_hops || (hops == best_hops && h < best)) {
      best = h;
      best_hops = hops;
    }
  }
  return {best, best_hops};
}

}  // namespace

MigrationPlan greedy_rebalance(BalancerState& state, const MeshTopology& topo, double expert_bytes) {
  MigrationPlan plan;
  const std::size_t n = state.device_count();
  while (true) {
    const double max_heat = state.max_heat();
    if (!(max_heat > 0)) break;
    int hot = -1;
    double hot_share = 0.0;
    for (std::size_t e = 0; e < state.expert_count(); ++e) {
      const double s = state.share(static_cast<int>(e));
      if (s > hot_share) {
        hot = static_cast<int>(e);
        hot_share = s;
      }
    }
    if (hot < 0) break;
    std::optional<DeviceIndex> coldest;
    for (DeviceIndex d = 0; d < n; ++d) {
      if (state.free_slots(d) <= 0 || state.placement().hosts_expert(d, hot)) continue;
      if (!coldest || state.heat()[d] < state.heat()[*coldest]) coldest = d;
    }
    if (!coldest) break;
    const double new_share = state.load()[static_cast<std::size_t>(hot)] / (state.num(hot) + 1);
    if (!(state.heat()[*coldest] + new_share < max_heat)) break;
    const DeviceIndex native = state.placement().hosts[static_cast<std::size_t>(hot)][0];
    plan.moves.push_back({hot, native, *coldest, expert_bytes, manhattan_hops(topo, native, *coldest)});
    state.add_replica(hot, *coldest);
  }
  return plan;
}

MigrationPlan topology_aware_rebalance(BalancerState& state, const MeshTopology& topo,
                                       double expert_bytes, CandidateRule rule) {
  MigrationPlan plan;
  const std::size_t n = state.device_count();
  while (true) {
    const DeviceIndex hottest = state.hottest();
    const double max_heat = state.heat()[hottest];
    if (!(max_heat > 0)) break;
    int src = -1;
    double src_share = 0.0;
    for (int e : state.placement().experts_on(hottest)) {
      const double s = state.share(e);
      if (s > src_share) {
        src = e;
        src_share = s;
      }
    }
    if (src < 0) break;
    const double new_share = state.load()[static_cast<std::size_t>(src)] / (state.num(src) + 1);

    std::optional<DeviceIndex> best;
    int best_hops = std::numeric_limits<int>::max();
    DeviceIndex best_src = 0;
    for (DeviceIndex d = 0; d < n; ++d) {
      if (state.free_slots(d) <= 0 || state.placement().hosts_expert(d, src)) continue;
      const double heat = state.heat()[d];
      const bool ok = rule == CandidateRule::prose ? heat + new_share < max_heat
                                                   : heat < max_heat - src_share;
      if (!ok) continue;
      const auto [host, hops] = nearest_host(state, topo, src, d);
      if (hops < best_hops) {  // ascending d keeps the lower index on ties
        best = d;
        best_hops = hops;
        best_src = host;
      }
    }
    if (!best) break;
    plan.moves.push_back({src, best_src, *best, expert_bytes, best_hops});
    state.add_replica(src, *best);
  }
  return plan;
}

MigrationPlan rebalance_with_eviction(BalancerState& state, const MeshTopology& topo,
                                      double expert_bytes, CandidateRule rule) {
  if (state.total_free_slots() > 0) return topology_aware_rebalance(state, topo, expert_bytes, rule);
  std::optional<std::pair<int, DeviceIndex>> victim;
  double victim_share = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < state.expert_count(); ++e) {
    const auto& hosts = state.placement().hosts[e];
    if (hosts.size() < 2) continue;
    const double s = state.share(static_cast<int>(e));
    if (s < victim_share) {
      victim_share = s;
      victim = std::pair{static_cast<int>(e), *std::min_element(hosts.begin() + 1, hosts.end())};
    }
  }
  if (!victim) return {};
  const double before = state.max_heat();
  BalancerState trial = state;
  trial.remove_replica(victim->first, victim->second);
  MigrationPlan plan = topology_aware_rebalance(trial, topo, expert_bytes, rule);
  if (!(trial.max_heat() < before)) return {};
  plan.evictions.push_back(*victim);
  state = std::move(trial);
  return plan;
}

const char* to_string(StageKind kind) { return kind == StageKind::local ? "local" : "global"; }

std::vector<StageKind> link_stage_kinds(const MeshTopology& topo, const std::vector<int>& ftd_of) {
  if (ftd_of.size() != topo.device_count()) {
    throw DomainError(fmt::format("FTD membership covers {} devices, topology has {}",
                                  ftd_of.size(), topo.device_count()));
  }
  std::vector<StageKind> kinds;
  kinds.reserve(topo.links().size());
  for (const Link& l : topo.links()) {
    kinds.push_back(ftd_of[l.src] == ftd_of[l.dst] ? StageKind::local : StageKind::global);
  }
  return kinds;
}

StagedMove decompose_migration(const Move& move, const std::vector<int>& ftd_of,
                               const MeshTopology& topo) {
  const auto kinds = link_stage_kinds(topo, ftd_of);
  const std::size_t n = topo.device_count();
  if (move.src >= n || move.dst >= n) {
    throw DomainError(fmt::format("move {} -> {} outside topology", move.src, move.dst));
  }
  // State = (device, kind of the link used to enter it); kind 2 marks the start.
  constexpr int kStart = 2;
  auto state_id = [](DeviceIndex d, int k) { return static_cast<std::size_t>(d) * 3 + static_cast<std::size_t>(k); };
  using Cost = std::pair<int, int>;  // (hops, stages)
  const Cost inf{std::numeric_limits<int>::max(), 0};
  std::vector<Cost> best(n * 3, inf);
  std::vector<std::size_t> prev_state(n * 3, 0);
  std::vector<LinkIndex> prev_link(n * 3, kNoLink);
  using Entry = std::tuple<int, int, DeviceIndex, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> pq;
  best[state_id(move.src, kStart)] = {0, 0};
  pq.emplace(0, 0, move.src, kStart);
  while (!pq.empty()) {
    const auto [hops, stages, d, k] = pq.top();
    pq.pop();
    if (Cost{hops, stages} != best[state_id(d, k)]) continue;
    if (d == move.dst) continue;
    for (int dir = 0; dir < 4; ++dir) {
      const LinkIndex l = topo.out_link(d, static_cast<Direction>(dir));
      if (l == kNoLink) continue;
      const int lk = static_cast<int>(kinds[l]);
      const Cost c{hops + 1, stages + (lk == k ? 0 : 1)};
      const DeviceIndex next = topo.link(l).dst;
      const auto sid = state_id(next, lk);
      if (c < best[sid]) {
        best[sid] = c;
        prev_state[sid] = state_id(d, k);
        prev_link[sid] = l;
        pq.emplace(c.first, c.second, next, lk);
      }
    }
  }
  StagedMove out;
  out.move = move;
  if (move.src == move.dst) {
    out.move.hops = 0;
    return out;
  }
  std::size_t end = state_id(move.dst, 0);
  if (best[state_id(move.dst, 1)] < best[end]) end = state_id(move.dst, 1);
  if (best[end] == inf) {
    throw PlanningError(fmt::format("no route from device {} to {}", move.src, move.dst));
  }
  std::vector<LinkIndex> path;
  for (std::size_t s = end; s != state_id(move.src, kStart); s = prev_state[s]) path.push_back(prev_link[s]);
  std::reverse(path.begin(), path.end());
  for (LinkIndex l : path) {
    if (out.stages.empty() || out.stages.back().kind != kinds[l]) out.stages.push_back({kinds[l], {}});
    out.stages.back().path.push_back(l);
  }
  out.move.hops = static_cast<int>(path.size());
  return out;
}

double invasive_stall(const MigrationPlan& plan, const MeshTopology& topo) {
  double total = 0.0;
  for (const auto& m : plan.moves) {
    const auto path = route_xy(topo, m.src, m.dst);
    if (path.empty()) continue;
    double bw = std::numeric_limits<double>::infinity();
    double lat = 0.0;
    for (LinkIndex l : path) {
      bw = std::min(bw, topo.link(l).bandwidth);
      lat = std::max(lat, topo.link(l).link_latency);
    }
    total += transfer_latency(m.bytes, bw, lat, static_cast<int>(path.size()));
  }
  return total;
}

void MigrationScheduler::enqueue(StagedMove move) {
  Progress p;
  p.move = std::move(move);
  if (p.move.stages.empty()) {
    done_.push_back({std::move(p.move), 0});
    return;
  }
  queue_.push_back(std::move(p));
}

void MigrationScheduler::advance(LayerPhase phase, double duration, const TrafficMatrix& traffic,
                                 std::uint64_t iteration) {
  if (queue_.empty() || !(duration > 0)) return;
  const auto links = topo_->links();
  const StageKind wanted = phase == LayerPhase::attention ? StageKind::local : StageKind::global;
  std::vector<double> residual(links.size());
  std::vector<char> hot(links.size(), 0);
  for (std::size_t l = 0; l < links.size(); ++l) {
    const double bytes = traffic.bytes.empty() ? 0.0 : traffic.bytes[l];
    const double duty = traffic.duty.empty() ? 0.0 : traffic.duty[l];
    const LinkClass c = classify(bytes, duty, cold_threshold_);
    hot[l] = c == LinkClass::hot;
    residual[l] = hot[l] ? 0.0 : (c == LinkClass::idle ? 1.0 : 1.0 - duty) * links[l].bandwidth * duration;
  }
  for (auto it = queue_.begin(); it != queue_.end();) {
    auto& p = *it;
    const auto& stage = p.move.stages[p.stage];
    if (stage.kind == wanted) {
      double cap = std::numeric_limits<double>::infinity();
      for (LinkIndex l : stage.path) cap = std::min(cap, residual[l]);
      const double remaining = p.move.move.bytes - p.stage_done;
      const double amount = std::min(remaining, cap);
      if (amount > 0) {
        for (LinkIndex l : stage.path) {
          residual[l] -= amount;
          link_bytes_[l] += amount;
          if (hot[l]) hot_link_bytes_ += amount;
        }
        if (amount == remaining) {
          ++p.stage;
          p.stage_done = 0;
        } else {
          p.stage_done += amount;
        }
      }
    }
    if (p.stage == p.move.stages.size()) {
      done_.push_back({std::move(p.move), iteration});
      it = queue_.erase(it);
    } else {
      ++it;
    }
  }
}

std::vector<CompletedMove> MigrationScheduler::take_completed() {
  std::vector<CompletedMove> out;
  out.swap(done_);
  return out;
}

double MigrationScheduler::bytes_in_flight() const {
  double total = 0.0;
  for (const auto& p : queue_) {
    const double per_stage = p.move.move.bytes;
    total += per_stage * static_cast<double>(p.move.stages.size() - p.stage) - p.stage_done;
  }
  return total;
}

bool MigrationScheduler::pending(int layer, int expert, DeviceIndex d) const {
  return std::any_of(queue_.begin(), queue_.end(), [&](const Progress& p) {
    return p.move.layer == layer && p.move.move.expert == expert && p.move.move.dst == d;
  });
}

bool MigrationScheduler::cancel(int layer, int expert, DeviceIndex d) {
  auto it = std::find_if(queue_.begin(), queue_.end(), [&](const Progress& p) {
    return p.move.layer == layer && p.move.move.expert == expert && p.move.move.dst == d;
  });
  if (it == queue_.end()) return false;
  queue_.erase(it);
  return true;
}

}  // namespace meshmoe
