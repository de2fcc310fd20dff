// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

void ComputeModel::validate() const {
  std::string problems;
  if (!(peak_flops > 0)) problems += fmt::format(" peak_flops={}", peak_flops);
  if (!(mem_bw > 0)) problems += fmt::format(" mem_bw={}", mem_bw);
  if (expert_bytes_per_element < 1) {
    problems += fmt::format(" expert_bytes_per_element={}", expert_bytes_per_element);
  }
  if (attention_bytes_per_element < 1) {
    problems += fmt::format(" attention_bytes_per_element={}", attention_bytes_per_element);
  }
  if (!(attention_flops_coeff >= 0)) problems += fmt::format(" attention_flops_coeff={}", attention_flops_coeff);
  if (!(attention_weight_coeff >= 0)) {
    problems += fmt::format(" attention_weight_coeff={}", attention_weight_coeff);
  }
  if (!problems.empty()) throw ConfigError("invalid compute model:" + problems);
}

double compute_time_moe(double tokens, int resident_experts, const ModelSpec& model,
                        const ComputeModel& compute) {
  if (tokens < 0) throw DomainError(fmt::format("token count {} is negative", tokens));
  const double params = model.expert_size / compute.expert_bytes_per_element;
  const double flop_time = 2.0 * tokens * params / compute.peak_flops;
  const double mem_time = resident_experts * model.expert_size / compute.mem_bw;
  return std::max(flop_time, mem_time);
}

double compute_time_attention(double tokens, int hidden_size, int tp, const ComputeModel& compute) {
  if (tokens < 0) throw DomainError(fmt::format("token count {} is negative", tokens));
  if (tp < 1) throw DomainError(fmt::format("tp={} must be >= 1", tp));
  if (tokens == 0) return 0.0;
  const double h2 = static_cast<double>(hidden_size) * hidden_size;
  const double flops = compute.attention_flops_coeff * h2 * tokens / tp;
  const double bytes = compute.attention_weight_coeff * h2 * compute.attention_bytes_per_element / tp;
  return std::max(flops / compute.peak_flops, bytes / compute.mem_bw);
}

double pipeline_time(double c, double t, int micro_batches) {
  if (micro_batches < 1) throw DomainError(fmt::format("micro_batches={} must be >= 1", micro_batches));
  return micro_batches * std::max(c, t) + std::min(c, t);
}

DemandMatrix moe_dispatch_demand(const MeshTopology& topo, const Mapping& mapping,
                                 const ExpertAssignment& assignment,
                                 const ExpertPlacement& placement, double token_bytes,
                                 bool with_allgather) {
  const auto per_group = static_cast<std::size_t>(mapping.cfg.tokens_per_tp_group);
  const std::size_t groups = mapping.groups.size();
  if (assignment.token_count() != per_group * groups) {
    throw DomainError(fmt::format("assignment has {} tokens, mapping expects {} x {}",
                                  assignment.token_count(), groups, per_group));
  }
  const auto tp = static_cast<std::size_t>(mapping.cfg.tp);
  DemandMatrix demand(topo.device_count());
  const bool hier = mapping.layout == Layout::hier_er;
  for (std::size_t t = 0; t < assignment.token_count(); ++t) {
    const std::size_t g = t / per_group;
    const std::size_t i = t % per_group;
    const DeviceIndex owner = mapping.groups[g][i * tp / per_group];
    const auto oc = topo.coord_of(owner);
    for (int r = 0; r < assignment.top_k; ++r) {
      const int e = assignment.expert(t, r);
      const auto& hosts = placement.hosts.at(static_cast<std::size_t>(e));
      if (hosts.empty()) throw InvariantError(fmt::format("expert {} has no host", e));
      const double share = token_bytes / static_cast<double>(hosts.size());
      for (DeviceIndex h : hosts) {
        DeviceIndex src;
        if (hier) {
          src = topo.index_of({topo.coord_of(h).wafer, oc.x, oc.y});
        } else if (with_allgather) {
          src = mapping.groups[g][static_cast<std::size_t>(mapping.ftd_slot(h))];
        } else {
          src = owner;
        }
        if (src != h) demand.at(src, h) += share;
      }
    }
  }
  return demand;
}

const char* to_string(BalancerMode mode) {
  switch (mode) {
    case BalancerMode::off:
      return "off";
    case BalancerMode::greedy:
      return "greedy";
    case BalancerMode::topo:
      return "topo";
    case BalancerMode::topo_noninvasive:
      return "topo_noninvasive";
  }
  return "?";
}

BalancerMode parse_balancer_mode(const std::string& name) {
  for (auto m : {BalancerMode::off, BalancerMode::greedy, BalancerMode::topo,
                 BalancerMode::topo_noninvasive}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError(fmt::format(
      "unknown balancer mode '{}' (valid: off, greedy, topo, topo_noninvasive)", name));
}

void EngineConfig::validate() const {
  model.validate();
  compute.validate();
  std::string problems;
  if (micro_batches < 1) problems += fmt::format(" micro_batches={}", micro_batches);
  if (moe_layers < 0) problems += fmt::format(" moe_layers={}", moe_layers);
  if (balancer.slots < 0) problems += fmt::format(" balancer.slots={}", balancer.slots);
  if (balancer.window < 1) problems += fmt::format(" balancer.window={}", balancer.window);
  if (balancer.alpha && !(*balancer.alpha >= 0)) problems += fmt::format(" balancer.alpha={}", *balancer.alpha);
  if (balancer.beta && !(*balancer.beta >= 0)) problems += fmt::format(" balancer.beta={}", *balancer.beta);
  if (!(balancer.cold_threshold >= 0 && balancer.cold_threshold <= 1)) {
    problems += fmt::format(" balancer.cold_threshold={}", balancer.cold_threshold);
  }
  if (!problems.empty()) throw ConfigError("invalid engine configuration:" + problems);
}

Simulator::Simulator(EngineConfig cfg) : cfg_(std::move(cfg)), scheduler_(cfg_.topo, cfg_.balancer.cold_threshold) {
  cfg_.validate();
  const auto& topo = cfg_.topo;
  mapping_ = make_mapping(cfg_.layout, topo, cfg_.parallelism,
                          {cfg_.model.experts_total, cfg_.balancer.slots});
  ftds_ = compute_ftds(topo, mapping_);
  ftd_of_ = ftd_membership(topo, ftds_);

  const double tokens = cfg_.parallelism.tokens_per_tp_group;
  const double volume = tokens * cfg_.model.token_bytes();
  attention_plan_ = plan_attention_allreduce(topo, mapping_, volume, cfg_.with_allgather);
  attention_traffic_ = TrafficMatrix::from_plan(attention_plan_, topo.links().size());
  const double scale = 1.0 / cfg_.micro_batches;
  allreduce_stage_ = phase_latency(attention_plan_, topo, scale);
  attention_stage_ = compute_time_attention(tokens * scale, cfg_.model.hidden_size,
                                            cfg_.parallelism.tp, cfg_.compute);

  const int layers = cfg_.moe_layers > 0 ? cfg_.moe_layers : cfg_.model.sparse_layers;
  gating_ = make_gating(cfg_.model.experts_total, layers, cfg_.gating);
  const auto base = ExpertPlacement::from_mapping(mapping_);
  active_.assign(static_cast<std::size_t>(layers), base);
  const std::vector<int> capacity(topo.device_count(), cfg_.balancer.slots);
  planned_.assign(static_cast<std::size_t>(layers),
                  BalancerState(std::vector<double>(base.hosts.size(), 0.0), base, capacity));
  estimators_.assign(static_cast<std::size_t>(layers), LoadEstimator(cfg_.balancer.window));

  const bool noninvasive = cfg_.balancer.mode == BalancerMode::topo_noninvasive;
  alpha_ = cfg_.balancer.alpha.value_or(0.2 * layers);
  beta_ = cfg_.balancer.beta.value_or(noninvasive ? 0.0 : 10.0);
  spdlog::debug("simulator: {} on {} devices, {} MoE layers, alpha={} beta={}",
                to_string(cfg_.layout), topo.device_count(), layers, alpha_, beta_);
}

const ExpertPlacement& Simulator::placement(int layer) const {
  return active_.at(static_cast<std::size_t>(layer));
}

void Simulator::replay_placements(std::vector<PlacementEvent> events) {
  replay_ = std::move(events);
  replaying_ = true;
}

void Simulator::apply(const PlacementEvent& ev, IterationMetrics& m) {
  auto& hosts = active_.at(static_cast<std::size_t>(ev.layer)).hosts.at(static_cast<std::size_t>(ev.expert));
  auto it = std::find(hosts.begin(), hosts.end(), ev.device);
  if (ev.add) {
    if (it != hosts.end()) {
      throw InvariantError(fmt::format("layer {}: expert {} already on device {}", ev.layer,
                                       ev.expert, ev.device));
    }
    hosts.push_back(ev.device);
  } else {
    if (it == hosts.end() || it == hosts.begin()) {
      throw InvariantError(fmt::format("layer {}: no shadow of expert {} on device {}", ev.layer,
                                       ev.expert, ev.device));
    }
    hosts.erase(it);
  }
  m.placement_events.push_back(ev);
}

void Simulator::run_balancer(IterationMetrics& m) {
  const auto it = m.iteration;
  std::vector<std::vector<double>> heats;
  heats.reserve(planned_.size());
  double ratio_sum = 0.0;
  for (std::size_t l = 0; l < planned_.size(); ++l) {
    planned_[l].set_load(estimators_[l].estimate());
    heats.push_back(planned_[l].heat());
    ratio_sum += imbalance_ratio(planned_[l].heat());
  }
  m.heat_ratio = planned_.empty() ? 1.0 : ratio_sum / static_cast<double>(planned_.size());
  if (heats.empty()) return;
  const double since = last_trigger_ ? static_cast<double>(it - *last_trigger_)
                                     : static_cast<double>(it + 1);
  if (!should_trigger(heats, alpha_, beta_, since)) return;
  m.triggered = true;
  last_trigger_ = it;

  const double bytes = cfg_.model.expert_size;
  const bool noninvasive = cfg_.balancer.mode == BalancerMode::topo_noninvasive;
  for (std::size_t l = 0; l < planned_.size(); ++l) {
    const int layer = static_cast<int>(l);
    MigrationPlan plan = cfg_.balancer.mode == BalancerMode::greedy
                             ? greedy_rebalance(planned_[l], cfg_.topo, bytes)
                             : rebalance_with_eviction(planned_[l], cfg_.topo, bytes, cfg_.balancer.rule);
    m.moves_issued += static_cast<int>(plan.moves.size());
    for (const auto& [expert, device] : plan.evictions) {
      if (!scheduler_.cancel(layer, expert, device)) apply({it, layer, expert, device, false}, m);
    }
    if (noninvasive) {
      for (const auto& mv : plan.moves) {
        StagedMove staged = decompose_migration(mv, ftd_of_, cfg_.topo);
        staged.layer = layer;
        scheduler_.enqueue(std::move(staged));
      }
    } else {
      m.migration_stall += invasive_stall(plan, cfg_.topo);
      for (const auto& mv : plan.moves) apply({it, layer, mv.expert, mv.dst, true}, m);
    }
  }
}

IterationMetrics Simulator::step() {
  const auto& topo = cfg_.topo;
  const auto& model = cfg_.model;
  const int mb = cfg_.micro_batches;
  const double scale = 1.0 / mb;
  IterationMetrics m;
  m.iteration = iteration_;
  m.dense_layers = std::max(0, model.total_layers - model.sparse_layers);
  m.device_tokens.assign(topo.device_count(), 0.0);
  m.link_bytes.assign(topo.links().size(), 0.0);
  const std::vector<double> migrated_before = scheduler_.link_bytes();

  const double attention_time = pipeline_time(attention_stage_, allreduce_stage_, mb);
  m.dense_layer_time = attention_time;
  double wall = m.dense_layers * attention_time;
  for (int d = 0; d < m.dense_layers; ++d) {
    scheduler_.advance(LayerPhase::attention, attention_time, attention_traffic_, iteration_);
  }

  const std::size_t tokens = mapping_.groups.size() * static_cast<std::size_t>(cfg_.parallelism.tokens_per_tp_group);
  const int experts = model.experts_total;
  last_assignments_.clear();
  double imbalance_sum = 0.0;
  for (int l = 0; l < moe_layers(); ++l) {
    ExpertAssignment assignment;
    if (!cfg_.replay_trace.empty()) {
      auto found = cfg_.replay_trace.find(TraceKey{iteration_, l});
      if (found == cfg_.replay_trace.end()) {
        throw ConfigError(fmt::format("replay trace has no rows for iteration {} layer {}",
                                      iteration_, l));
      }
      assignment = found->second;
      if (assignment.top_k != model.top_k || assignment.token_count() != tokens) {
        throw ConfigError(fmt::format(
            "replay trace iteration {} layer {}: {} tokens x top-{}, expected {} x top-{}",
            iteration_, l, assignment.token_count(), assignment.top_k, tokens, model.top_k));
      }
    } else {
      assignment = gate_tokens(model, tokens, gating_, l, iteration_);
    }
    const auto& placement = active_[static_cast<std::size_t>(l)];
    const auto counts = expert_loads(assignment, experts);
    const auto loads = device_loads(counts, placement);

    const auto demand = moe_dispatch_demand(topo, mapping_, assignment, placement,
                                            model.token_bytes(), cfg_.with_allgather);
    CollectivePlan moe_plan = plan_all_to_all(topo, demand);
    const std::size_t dispatch_phases = moe_plan.phases.size();
    CollectivePlan combine = plan_all_to_all(topo, demand.transposed());
    for (auto& p : combine.phases) moe_plan.phases.push_back(std::move(p));

    LayerMetrics lm;
    lm.attention_compute = mb * attention_stage_;
    lm.allreduce = mb * allreduce_stage_;
    lm.attention_time = attention_time;
    double dispatch_stage = 0.0;
    double combine_stage = 0.0;
    {
      CollectivePlan part;
      part.phases.assign(moe_plan.phases.begin(), moe_plan.phases.begin() + static_cast<long>(dispatch_phases));
      dispatch_stage = phase_latency(part, topo, scale);
      part.phases.assign(moe_plan.phases.begin() + static_cast<long>(dispatch_phases), moe_plan.phases.end());
      combine_stage = phase_latency(part, topo, scale);
    }
    std::vector<int> resident(topo.device_count(), 0);
    for (std::size_t e = 0; e < counts.size(); ++e) {
      if (counts[e] > 0) {
        for (DeviceIndex h : placement.hosts[e]) ++resident[h];
      }
    }
    double compute_stage = 0.0;
    for (DeviceIndex d = 0; d < topo.device_count(); ++d) {
      compute_stage = std::max(compute_stage, compute_time_moe(loads[d] * scale, resident[d], model, cfg_.compute));
    }
    lm.dispatch = mb * dispatch_stage;
    lm.combine = mb * combine_stage;
    lm.expert_compute = mb * compute_stage;
    lm.moe_time = pipeline_time(compute_stage, dispatch_stage + combine_stage, mb);
    lm.imbalance = imbalance_ratio(loads);
    imbalance_sum += lm.imbalance;
    wall += lm.attention_time + lm.moe_time;

    for (DeviceIndex d = 0; d < topo.device_count(); ++d) m.device_tokens[d] += loads[d];
    const auto moe_traffic = TrafficMatrix::from_plan(moe_plan, topo.links().size());
    for (std::size_t k = 0; k < m.link_bytes.size(); ++k) {
      m.link_bytes[k] += attention_traffic_.bytes[k] + moe_traffic.bytes[k];
    }
    scheduler_.advance(LayerPhase::attention, lm.attention_time, attention_traffic_, iteration_);
    scheduler_.advance(LayerPhase::moe, lm.moe_time, moe_traffic, iteration_);

    estimators_[static_cast<std::size_t>(l)].observe(counts);
    m.layers.push_back(lm);
    last_assignments_.push_back(std::move(assignment));
  }
  for (std::size_t k = 0; k < m.link_bytes.size(); ++k) {
    m.link_bytes[k] += m.dense_layers * attention_traffic_.bytes[k] +
                       (scheduler_.link_bytes()[k] - migrated_before[k]);
  }
  m.imbalance = m.layers.empty() ? 1.0 : imbalance_sum / static_cast<double>(m.layers.size());

  for (auto& done : scheduler_.take_completed()) {
    apply({iteration_, done.move.layer, done.move.move.expert, done.move.move.dst, true}, m);
    ++m.moves_completed;
  }
  if (replaying_) {
    for (const auto& ev : replay_) {
      if (ev.iteration == iteration_) apply(ev, m);
    }
  } else if (cfg_.balancer.mode != BalancerMode::off) {
    run_balancer(m);
    if (cfg_.balancer.mode != BalancerMode::topo_noninvasive) m.moves_completed += m.moves_issued;
  }
  m.migration_bytes_in_flight = scheduler_.bytes_in_flight();
  m.wall_time = wall + m.migration_stall;
  if (cfg_.balancer.mode != BalancerMode::off && !replaying_) {
    spdlog::debug("iteration {}: wall={:.4g}s imbalance={:.3f} trigger={} moves={}", iteration_,
                  m.wall_time, m.imbalance, m.triggered, m.moves_issued);
  }
  ++iteration_;
  return m;
}

namespace {

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, rank == 0 ? 0 : rank - 1)];
}

}  // namespace

SimulationSummary summarize(const EngineConfig& cfg, const std::vector<IterationMetrics>& trace) {
  SimulationSummary s;
  s.iterations = trace.size();
  if (trace.empty()) return s;
  std::vector<double> walls;
  double imbalance = 0.0;
  for (const auto& m : trace) {
    walls.push_back(m.wall_time);
    s.triggers += m.triggered ? 1 : 0;
    s.moves_issued += m.moves_issued;
    s.moves_completed += m.moves_completed;
    s.total_migration_stall += m.migration_stall;
    imbalance += m.imbalance;
    for (const auto& l : m.layers) {
      s.breakdown_attention_compute += l.attention_compute;
      s.breakdown_allreduce += l.allreduce;
      s.breakdown_dispatch += l.dispatch;
      s.breakdown_expert_compute += l.expert_compute;
      s.breakdown_combine += l.combine;
    }
  }
  const double n = static_cast<double>(trace.size());
  s.mean_wall_time = std::accumulate(walls.begin(), walls.end(), 0.0) / n;
  s.p50_wall_time = percentile(walls, 0.5);
  s.p95_wall_time = percentile(walls, 0.95);
  s.max_wall_time = *std::max_element(walls.begin(), walls.end());
  s.mean_imbalance = imbalance / n;
  s.final_imbalance = trace.back().imbalance;
  for (double* b : {&s.breakdown_attention_compute, &s.breakdown_allreduce, &s.breakdown_dispatch,
                    &s.breakdown_expert_compute, &s.breakdown_combine}) {
    *b /= n;
  }
  const double devices = static_cast<double>(cfg.topo.device_count());
  const double tokens = static_cast<double>(cfg.parallelism.dp) * cfg.parallelism.tokens_per_tp_group;
  if (s.mean_wall_time > 0) s.tokens_per_second_per_device = tokens / s.mean_wall_time / devices;
  return s;
}

SimulationResult run_simulation(const EngineConfig& cfg, std::uint64_t iterations) {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  Simulator sim(cfg);
  SimulationResult r;
  r.trace.reserve(iterations);
  for (std::uint64_t i = 0; i < iterations; ++i) r.trace.push_back(sim.step());
  r.summary = summarize(sim.config(), r.trace);
  return r;
}

}  // namespace meshmoe
