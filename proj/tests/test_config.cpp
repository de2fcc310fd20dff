// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "meshmoe/config.hpp"
#include "meshmoe/error.hpp"

using namespace meshmoe;
namespace fs = std::filesystem;

namespace {

const char* kMinimal = R"(
topology:
  width: 4
  height: 4
model:
  preset: qwen3
parallelism:
  dp: 4
  tp: 4
)";

std::string error_of(const std::string& text, const std::vector<std::string>& ov = {}) {
  try {
    parse_config_text(text, ov);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& needle) {
  return s.find(needle) != std::string::npos;
}

}  // namespace

TEST(Config, MinimalQwen3FillsDefaults) {
  const auto c = parse_config_text(kMinimal, {}, ".", "mini");
  EXPECT_EQ(c.name, "mini");
  EXPECT_EQ(c.engine.model.name, "Qwen3");
  EXPECT_EQ(c.engine.model.experts_total, 128);
  EXPECT_EQ(c.engine.topo.device_count(), 16u);
  EXPECT_EQ(c.engine.topo.wafer_count(), 1);
  EXPECT_DOUBLE_EQ(c.engine.topo.intra_bandwidth(), 8e12);
  EXPECT_DOUBLE_EQ(c.engine.topo.inter_bandwidth(), 9e12);
  EXPECT_DOUBLE_EQ(c.engine.topo.link_latency(), 0.2e-6);
  EXPECT_EQ(c.engine.layout, Layout::baseline);
  EXPECT_EQ(c.engine.parallelism.tokens_per_tp_group, 256);
  EXPECT_EQ(c.engine.micro_batches, 1);
  EXPECT_TRUE(c.engine.with_allgather);
  EXPECT_EQ(c.engine.balancer.mode, BalancerMode::off);
  EXPECT_FALSE(c.engine.balancer.alpha.has_value());
  EXPECT_EQ(c.iterations, 20u);
  EXPECT_EQ(c.resolved["model"]["name"], "Qwen3");
  EXPECT_EQ(c.resolved["parallelism"]["mapping"], "baseline");
}

TEST(Config, DpTimesTpMismatchNamesBothValues) {
  const auto msg = error_of(kMinimal, {"parallelism.dp=3"});
  EXPECT_TRUE(contains(msg, "dp=3")) << msg;
  EXPECT_TRUE(contains(msg, "tp=4")) << msg;
  EXPECT_TRUE(contains(msg, "16")) << msg;
}

TEST(Config, UnknownMappingListsOptions) {
  const auto msg = error_of(kMinimal, {"parallelism.mapping=spiral"});
  EXPECT_TRUE(contains(msg, "spiral")) << msg;
  for (const char* name : {"baseline", "er", "hier_er"}) EXPECT_TRUE(contains(msg, name)) << msg;
}

TEST(Config, AllErrorsReportedTogether) {
  const auto msg = error_of(R"(
topology:
  width: 4
model:
  preset: nonesuch
parallelism:
  dp: x
  tp: 4
balancer:
  mode: sometimes
  colour: red
extras:
  a: 1
)");
  EXPECT_TRUE(contains(msg, "topology.height: missing required field")) << msg;
  EXPECT_TRUE(contains(msg, "nonesuch")) << msg;
  EXPECT_TRUE(contains(msg, "parallelism.dp")) << msg;
  EXPECT_TRUE(contains(msg, "sometimes")) << msg;
  EXPECT_TRUE(contains(msg, "balancer.colour: unknown field")) << msg;
  EXPECT_TRUE(contains(msg, "unknown block 'extras'")) << msg;
  EXPECT_TRUE(contains(msg, "6 configuration errors")) << msg;
}

TEST(Config, ModuleChecksSurface) {
  // ER has no tiling for tp=3 on a 6x2 wafer.
  const auto msg = error_of(kMinimal, {"topology.width=6", "topology.height=2", "parallelism.tp=3",
                                       "parallelism.mapping=er"});
  EXPECT_TRUE(contains(msg, "parallelism")) << msg;
  EXPECT_TRUE(contains(error_of(kMinimal, {"simulation.iterations=0"}), "iterations"));
  EXPECT_TRUE(contains(error_of(kMinimal, {"parallelism.micro_batches=0"}), "micro_batches"));
}

TEST(Config, JsonInputMatchesYaml) {
  const auto yaml = parse_config_text(kMinimal);
  const auto json = parse_config_text(R"({"topology": {"width": 4, "height": 4},
    "model": {"preset": "qwen3"}, "parallelism": {"dp": 4, "tp": 4}})");
  EXPECT_EQ(yaml.resolved, json.resolved);
}

TEST(Config, ExplicitModel) {
  const auto c = parse_config_text(R"(
topology: {width: 4, height: 4}
model: {name: toy, sparse_layers: 2, total_layers: 3, expert_size: 1.0e6, top_k: 2,
        experts_total: 16, hidden_size: 256}
parallelism: {dp: 4, tp: 4, mapping: er}
)");
  EXPECT_EQ(c.engine.model.name, "toy");
  EXPECT_EQ(c.engine.model.experts_total, 16);
  EXPECT_EQ(c.engine.layout, Layout::er);
  const auto msg = error_of(R"(
topology: {width: 2, height: 2}
model: {top_k: 2}
parallelism: {dp: 2, tp: 2}
)");
  EXPECT_TRUE(contains(msg, "model.experts_total: missing required field")) << msg;
}

TEST(Config, OverridesAndFiles) {
  const auto dir = fs::temp_directory_path() / "meshmoe_config_test";
  fs::create_directories(dir);
  const auto path = dir / "exp1.yaml";
  std::ofstream(path) << kMinimal;
  const auto c = parse_config_file(path, {"workload.seed=99", "balancer.mode=topo", "name=renamed"});
  EXPECT_EQ(c.engine.gating.seed, 99u);
  EXPECT_EQ(c.engine.balancer.mode, BalancerMode::topo);
  EXPECT_EQ(c.name, "renamed");
  EXPECT_EQ(parse_config_file(path).name, "exp1");
  EXPECT_THROW(parse_config_file(dir / "missing.yaml"), ConfigError);
  EXPECT_TRUE(contains(error_of(kMinimal, {"noequals"}), "expected block.key=value"));

  const auto trace_msg = error_of(std::string(kMinimal) + "workload:\n  trace_file: nothere.csv\n");
  EXPECT_TRUE(contains(trace_msg, "nothere.csv")) << trace_msg;
  fs::remove_all(dir);
}
