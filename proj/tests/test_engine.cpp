// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numeric>

#include "meshmoe/engine.hpp"
#include "meshmoe/error.hpp"

using namespace meshmoe;

namespace {

EngineConfig small_config(Layout layout = Layout::er) {
  EngineConfig c;
  c.topo = build_mesh(1, 4, 4, 8e12, 9e12, 0.2e-6);
  c.model = find_preset("qwen3");
  c.parallelism = {4, 4, 0, 64};
  c.layout = layout;
  c.moe_layers = 2;
  c.gating.seed = 11;
  return c;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(Roofline, MoeExamples) {
  const ComputeModel cm;
  ModelSpec m = find_preset("DeepSeek-V3");
  EXPECT_EQ(compute_time_moe(0, 0, m, cm), 0.0);
  // 42 MB streamed at 8 TB/s.
  EXPECT_NEAR(compute_time_moe(4, 1, m, cm), 5.25e-6, 1e-15);
  // Compute bound: 2 * tokens * 42e6 params / 2250 TFLOP/s.
  const double t1 = compute_time_moe(1e5, 1, m, cm);
  EXPECT_DOUBLE_EQ(t1, 2.0 * 1e5 * 42e6 / 2250e12);
  EXPECT_DOUBLE_EQ(compute_time_moe(2e5, 1, m, cm), 2 * t1);
  EXPECT_THROW(compute_time_moe(-1, 0, m, cm), DomainError);
}

TEST(Roofline, AttentionExamples) {
  const ComputeModel cm;
  EXPECT_EQ(compute_time_attention(0, 2048, 1, cm), 0.0);
  // Hand roofline: FLOPs 8 * 2048^2 * 256 = 8.59e9 -> 3.818 us;
  // weights 4 * 2048^2 * 2 B = 33.55 MB -> 4.194 us. Memory bound.
  EXPECT_NEAR(compute_time_attention(256, 2048, 1, cm), 4.194304e-6, 1e-15);
  const double a = compute_time_attention(1e5, 2048, 1, cm);
  EXPECT_DOUBLE_EQ(compute_time_attention(2e5, 2048, 1, cm), 2 * a);
  EXPECT_DOUBLE_EQ(compute_time_attention(1e5, 2048, 4, cm), a / 4);
  EXPECT_THROW(compute_time_attention(1, 2048, 0, cm), DomainError);
}

TEST(Pipeline, Bounds) {
  EXPECT_DOUBLE_EQ(pipeline_time(3, 5, 1), 8);
  EXPECT_DOUBLE_EQ(pipeline_time(3, 5, 4), 23);
  EXPECT_THROW(pipeline_time(1, 1, 0), DomainError);
  // Per-stage c, t over m stages: between max(mc, mt) and mc + mt.
  for (int m = 1; m <= 8; ++m) {
    for (double c : {0.0, 0.5, 1.0, 7.0}) {
      for (double t : {0.0, 0.25, 1.0, 3.0}) {
        const double p = pipeline_time(c, t, m);
        EXPECT_GE(p, std::max(m * c, m * t));
        EXPECT_LE(p, m * c + m * t + 1e-12);
      }
    }
  }
  // Communication far below compute: layer time tends to compute time.
  EXPECT_NEAR(pipeline_time(1.0, 1e-9, 16) / 16.0, 1.0, 1e-9);
  EXPECT_NEAR(pipeline_time(1e-9, 1.0, 16) / 16.0, 1.0, 1e-9);
}

TEST(Engine, LayerTimesRespectOverlapBounds) {
  for (int mb : {1, 2, 4}) {
    auto cfg = small_config();
    cfg.micro_batches = mb;
    Simulator sim(cfg);
    const auto m = sim.step();
    ASSERT_EQ(m.layers.size(), 2u);
    for (const auto& l : m.layers) {
      const double comm = l.dispatch + l.combine;
      EXPECT_GE(l.moe_time, std::max(l.expert_compute, comm) * (1 - 1e-12));
      EXPECT_LE(l.moe_time, (l.expert_compute + comm) * (1 + 1e-12));
      EXPECT_GE(l.attention_time, std::max(l.attention_compute, l.allreduce) * (1 - 1e-12));
      EXPECT_LE(l.attention_time, (l.attention_compute + l.allreduce) * (1 + 1e-12));
      if (mb == 1) {
        EXPECT_DOUBLE_EQ(l.moe_time, l.expert_compute + comm);
        EXPECT_DOUBLE_EQ(l.attention_time, l.attention_compute + l.allreduce);
      }
    }
  }
}

TEST(Engine, WallTimeIsSumOfLayers) {
  auto cfg = small_config();
  Simulator sim(cfg);
  const auto m = sim.step();
  double expect = m.dense_layers * m.dense_layer_time;
  for (const auto& l : m.layers) expect += l.attention_time + l.moe_time;
  EXPECT_DOUBLE_EQ(m.wall_time, expect);
  EXPECT_EQ(m.dense_layers, 0);  // Qwen3 is sparse in every layer
}

TEST(Engine, MoreBandwidthNeverSlower) {
  for (auto layout : {Layout::baseline, Layout::er}) {
    auto cfg = small_config(layout);
    const double base = run_simulation(cfg, 2).summary.mean_wall_time;
    for (double f : {1.5, 2.0, 10.0}) {
      auto fast = cfg;
      fast.topo = build_mesh(1, 4, 4, 8e12 * f, 9e12, 0.2e-6);
      EXPECT_LE(run_simulation(fast, 2).summary.mean_wall_time, base) << f;
    }
  }
}

TEST(Engine, LinkBytesMatchPlans) {
  auto cfg = small_config();
  Simulator sim(cfg);
  const auto m = sim.step();
  // Attention all-reduce once per layer plus dispatch and combine of the
  // actual demand.
  std::vector<double> expect(cfg.topo.links().size(), 0.0);
  const auto& assignments = sim.last_assignments();
  for (int l = 0; l < sim.moe_layers(); ++l) {
    const auto demand = moe_dispatch_demand(cfg.topo, sim.mapping(), assignments[static_cast<std::size_t>(l)],
                                            sim.placement(l), cfg.model.token_bytes(), cfg.with_allgather);
    const auto d = TrafficMatrix::from_plan(plan_all_to_all(cfg.topo, demand), expect.size());
    const auto c = TrafficMatrix::from_plan(plan_all_to_all(cfg.topo, demand.transposed()), expect.size());
    for (std::size_t k = 0; k < expect.size(); ++k) {
      expect[k] += sim.attention_traffic().bytes[k] + d.bytes[k] + c.bytes[k];
    }
  }
  ASSERT_EQ(m.link_bytes.size(), expect.size());
  for (std::size_t k = 0; k < expect.size(); ++k) EXPECT_NEAR(m.link_bytes[k], expect[k], 1e-6 * (1 + expect[k]));
}

TEST(Engine, TokensConserved) {
  auto cfg = small_config();
  Simulator sim(cfg);
  const auto m = sim.step();
  // Every token goes to top_k experts on every MoE layer.
  EXPECT_DOUBLE_EQ(sum(m.device_tokens), 4.0 * 64 * cfg.model.top_k * 2);
}

TEST(Engine, DeterministicForEqualSeeds) {
  auto cfg = small_config();
  cfg.balancer.mode = BalancerMode::topo;
  cfg.balancer.alpha = 0.0;
  const auto a = run_simulation(cfg, 4);
  const auto b = run_simulation(cfg, 4);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].wall_time, b.trace[i].wall_time);
    EXPECT_EQ(a.trace[i].device_tokens, b.trace[i].device_tokens);
    EXPECT_EQ(a.trace[i].link_bytes, b.trace[i].link_bytes);
  }
  cfg.gating.seed = 12;
  EXPECT_NE(run_simulation(cfg, 4).trace[0].device_tokens, a.trace[0].device_tokens);
}

TEST(Engine, SingleIterationAndErrors) {
  auto cfg = small_config();
  EXPECT_EQ(run_simulation(cfg, 1).trace.size(), 1u);
  EXPECT_THROW(run_simulation(cfg, 0), ConfigError);
  cfg.micro_batches = 0;
  EXPECT_THROW(Simulator{cfg}, ConfigError);
}

TEST(Engine, InvasiveMigrationStalls) {
  auto cfg = small_config();
  cfg.gating.zipf_exponent = 1.2;
  cfg.balancer.mode = BalancerMode::topo;
  cfg.balancer.alpha = 0.0;
  cfg.balancer.beta = 0.0;
  const auto r = run_simulation(cfg, 3);
  EXPECT_GT(r.summary.moves_issued, 0);
  EXPECT_GT(r.summary.total_migration_stall, 0.0);
  EXPECT_EQ(r.summary.moves_completed, r.summary.moves_issued);
}

TEST(Engine, NonInvasiveReplayMatchesWallTime) {
  auto cfg = small_config();
  cfg.gating.zipf_exponent = 1.2;
  cfg.balancer.mode = BalancerMode::topo_noninvasive;
  cfg.balancer.alpha = 0.0;
  Simulator live(cfg);
  std::vector<IterationMetrics> trace;
  for (int i = 0; i < 6; ++i) trace.push_back(live.step());
  EXPECT_EQ(live.scheduler().hot_link_bytes(), 0.0);

  std::vector<PlacementEvent> events;
  int issued = 0;
  for (const auto& m : trace) {
    issued += m.moves_issued;
    events.insert(events.end(), m.placement_events.begin(), m.placement_events.end());
  }
  ASSERT_GT(issued, 0);
  ASSERT_FALSE(events.empty());

  auto off = cfg;
  off.balancer.mode = BalancerMode::off;
  Simulator replay(off);
  replay.replay_placements(events);
  for (const auto& m : trace) {
    const auto r = replay.step();
    EXPECT_EQ(r.wall_time, m.wall_time) << "iteration " << m.iteration;
    EXPECT_EQ(m.migration_stall, 0.0);
  }
}

TEST(Engine, StableWorkloadTriggersOnlyEarly) {
  auto cfg = small_config();
  cfg.gating.zipf_exponent = 1.0;
  cfg.gating.drift_rate = 0.0;
  cfg.parallelism.tokens_per_tp_group = 256;
  cfg.balancer.mode = BalancerMode::topo;
  // Two slots bring the heat below alpha, so the trigger goes quiet.
  cfg.balancer.slots = 2;
  int last = -1;
  for (const auto& m : run_simulation(cfg, 40).trace) {
    if (m.triggered) last = static_cast<int>(m.iteration);
  }
  EXPECT_GE(last, 0);
  EXPECT_LT(last, 20);

  // One slot leaves a residual imbalance above alpha. The trigger keeps
  // firing, but nothing moves after the first plan.
  cfg.balancer.slots = 1;
  const auto r = run_simulation(cfg, 40);
  int first = -1;
  for (const auto& m : r.trace) {
    if (m.moves_issued > 0) {
      if (first < 0) first = static_cast<int>(m.iteration);
      EXPECT_EQ(static_cast<int>(m.iteration), first);
    }
  }
  EXPECT_GE(first, 0);
  EXPECT_LT(first, 20);
}

TEST(BalancerMode, Names) {
  EXPECT_EQ(parse_balancer_mode("topo_noninvasive"), BalancerMode::topo_noninvasive);
  try {
    parse_balancer_mode("fast");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("greedy"), std::string::npos);
  }
}
