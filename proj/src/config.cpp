// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

namespace {

namespace fs = std::filesystem;

const std::vector<std::pair<std::string, std::set<std::string>>> kSchema = {
    {"topology",
     {"wafers", "width", "height", "intra_bw", "inter_bw", "link_latency", "compute_flops",
      "mem_bw", "mem_cap"}},
    {"model",
     {"preset", "name", "total_params", "sparse_layers", "total_layers", "expert_size", "top_k",
      "experts_total", "hidden_size", "bytes_per_element"}},
    {"parallelism",
     {"dp", "tp", "tokens_per_tp_group", "micro_batches", "with_allgather", "mapping",
      "moe_layers"}},
    {"compute",
     {"expert_bytes_per_element", "attention_bytes_per_element", "attention_flops_coeff",
      "attention_weight_coeff"}},
    {"balancer", {"mode", "alpha", "beta", "slots", "window", "rule", "cold_threshold"}},
    {"workload",
     {"zipf_exponent", "scenarios", "drift", "dwell", "scenario_mix", "seed", "trace_file"}},
    {"output", {"dir", "expert_trace"}},
    {"simulation", {"iterations"}},
};

class Reader {
 public:
  std::vector<std::string> errors;

  void check_layout(const YAML::Node& root) {
    if (!root.IsMap()) {
      errors.push_back("top level must be a mapping of blocks");
      return;
    }
    for (const auto& kv : root) {
      const auto key = kv.first.as<std::string>();
      if (key == "name") continue;
      auto it = std::find_if(kSchema.begin(), kSchema.end(), [&](const auto& b) { return b.first == key; });
      if (it == kSchema.end()) {
        errors.push_back(fmt::format("unknown block '{}'", key));
        continue;
      }
      if (!kv.second.IsMap()) {
        if (!kv.second.IsNull()) errors.push_back(fmt::format("{}: must be a block of key/value pairs", key));
        continue;
      }
      for (const auto& field : kv.second) {
        const auto fname = field.first.as<std::string>();
        if (!it->second.count(fname)) errors.push_back(fmt::format("{}.{}: unknown field", key, fname));
      }
    }
  }

  template <typename T>
  bool get(const YAML::Node& root, const char* block, const char* key, T& out) {
    const YAML::Node b = root[block];
    if (!b || !b.IsMap()) return false;
    const YAML::Node v = b[key];
    if (!v || v.IsNull()) return false;
    try {
      out = v.as<T>();
      return true;
    } catch (const YAML::Exception&) {
      errors.push_back(fmt::format("{}.{}: cannot read '{}' as {}", block, key,
                                   v.IsScalar() ? v.Scalar() : std::string("<non-scalar>"),
                                   type_name<T>()));
      return false;
    }
  }

  template <typename T>
  void require(const YAML::Node& root, const char* block, const char* key, T& out) {
    const YAML::Node b = root[block];
    const bool present = b && b.IsMap() && b[key] && !b[key].IsNull();
    if (!present) {
      errors.push_back(fmt::format("{}.{}: missing required field", block, key));
      return;
    }
    get(root, block, key, out);
  }

 private:
  template <typename T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a list of numbers";
  }
};

void set_path(YAML::Node node, const std::vector<std::string>& parts, std::size_t i,
              const YAML::Node& value) {
  if (i + 1 == parts.size()) {
    node[parts[i]] = value;
    return;
  }
  set_path(node[parts[i]], parts, i + 1, value);
}

void apply_overrides(YAML::Node& root, const std::vector<std::string>& overrides,
                     std::vector<std::string>& errors) {
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) {
      errors.push_back(fmt::format("override '{}': expected block.key=value", ov));
      continue;
    }
    std::vector<std::string> parts;
    std::stringstream ss(ov.substr(0, eq));
    std::string part;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.size() != 2 && !(parts.size() == 1 && parts[0] == "name")) {
      errors.push_back(fmt::format("override '{}': expected block.key=value", ov));
      continue;
    }
    YAML::Node value;
    try {
      value = YAML::Load(ov.substr(eq + 1));
    } catch (const YAML::Exception& e) {
      errors.push_back(fmt::format("override '{}': {}", ov, e.msg));
      continue;
    }
    if (!root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
    set_path(root, parts, 0, value);
  }
}

nlohmann::json resolved_json(const SimConfig& c) {
  const auto& e = c.engine;
  const auto& t = e.topo;
  nlohmann::json j;
  j["name"] = c.name;
  j["topology"] = {{"wafers", t.wafer_count()},        {"width", t.width()},
                   {"height", t.height()},             {"intra_bw", t.intra_bandwidth()},
                   {"inter_bw", t.inter_bandwidth()},  {"link_latency", t.link_latency()},
                   {"compute_flops", t.device().compute_flops}, {"mem_bw", t.device().mem_bw},
                   {"mem_cap", t.device().mem_cap}};
  j["model"] = {{"name", e.model.name},
                {"total_params", e.model.total_params},
                {"sparse_layers", e.model.sparse_layers},
                {"total_layers", e.model.total_layers},
                {"expert_size", e.model.expert_size},
                {"top_k", e.model.top_k},
                {"experts_total", e.model.experts_total},
                {"hidden_size", e.model.hidden_size},
                {"bytes_per_element", e.model.bytes_per_element}};
  j["parallelism"] = {{"dp", e.parallelism.dp},
                      {"tp", e.parallelism.tp},
                      {"tokens_per_tp_group", e.parallelism.tokens_per_tp_group},
                      {"micro_batches", e.micro_batches},
                      {"with_allgather", e.with_allgather},
                      {"mapping", to_string(e.layout)},
                      {"moe_layers", e.moe_layers}};
  j["compute"] = {{"expert_bytes_per_element", e.compute.expert_bytes_per_element},
                  {"attention_bytes_per_element", e.compute.attention_bytes_per_element},
                  {"attention_flops_coeff", e.compute.attention_flops_coeff},
                  {"attention_weight_coeff", e.compute.attention_weight_coeff}};
  j["balancer"] = {{"mode", to_string(e.balancer.mode)},
                   {"alpha", e.balancer.alpha ? nlohmann::json(*e.balancer.alpha) : nlohmann::json("default")},
                   {"beta", e.balancer.beta ? nlohmann::json(*e.balancer.beta) : nlohmann::json("default")},
                   {"slots", e.balancer.slots},
                   {"window", e.balancer.window},
                   {"rule", e.balancer.rule == CandidateRule::prose ? "prose" : "literal"},
                   {"cold_threshold", e.balancer.cold_threshold}};
  j["workload"] = {{"zipf_exponent", e.gating.zipf_exponent},
                   {"scenarios", e.gating.scenarios},
                   {"drift", e.gating.drift_rate},
                   {"dwell", e.gating.scenario_dwell},
                   {"scenario_mix", e.gating.scenario_mix},
                   {"seed", e.gating.seed},
                   {"trace_file", c.trace_file}};
  j["output"] = {{"dir", c.output.dir}, {"expert_trace", c.output.expert_trace}};
  j["simulation"] = {{"iterations", c.iterations}};
  return j;
}

}  // namespace

SimConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides,
                            const fs::path& base_dir, const std::string& name) {
  Reader r;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("{}: cannot parse: {}", name, e.what()));
  }
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  apply_overrides(root, overrides, r.errors);
  r.check_layout(root);
  if (!root.IsMap()) throw ConfigError(fmt::format("{}: top level must be a mapping of blocks", name));

  SimConfig c;
  c.name = name;
  if (root["name"]) {
    try {
      c.name = root["name"].as<std::string>();
    } catch (const YAML::Exception&) {
      r.errors.push_back("name: must be a string");
    }
  }

  // topology
  int wafers = 1, width = 0, height = 0;
  double intra_bw = 8e12, inter_bw = 9e12, link_latency = 0.2e-6;
  DeviceParams device;
  r.get(root, "topology", "wafers", wafers);
  r.require(root, "topology", "width", width);
  r.require(root, "topology", "height", height);
  r.get(root, "topology", "intra_bw", intra_bw);
  r.get(root, "topology", "inter_bw", inter_bw);
  r.get(root, "topology", "link_latency", link_latency);
  r.get(root, "topology", "compute_flops", device.compute_flops);
  r.get(root, "topology", "mem_bw", device.mem_bw);
  r.get(root, "topology", "mem_cap", device.mem_cap);
  bool topo_ok = false;
  try {
    c.engine.topo = build_mesh(wafers, width, height, intra_bw, inter_bw, link_latency, device);
    topo_ok = true;
  } catch (const ConfigError& e) {
    if (width != 0 && height != 0) r.errors.push_back(fmt::format("topology: {}", e.what()));
  }

  // model
  ModelSpec model;
  std::string preset;
  const bool has_preset = r.get(root, "model", "preset", preset);
  bool model_ok = true;
  if (has_preset) {
    try {
      model = find_preset(preset);
    } catch (const ConfigError& e) {
      r.errors.push_back(fmt::format("model.preset: {}", e.what()));
      model_ok = false;
    }
  } else if (!root["model"]) {
    r.errors.push_back("model: missing (set model.preset or give the explicit fields)");
    model_ok = false;
  }
  auto model_field = [&](const char* key, auto& out) {
    if (has_preset) {
      r.get(root, "model", key, out);
    } else if (root["model"]) {
      r.require(root, "model", key, out);
    }
  };
  if (!has_preset && root["model"]) model.name = "custom";
  r.get(root, "model", "name", model.name);
  r.get(root, "model", "total_params", model.total_params);
  model_field("sparse_layers", model.sparse_layers);
  model_field("total_layers", model.total_layers);
  model_field("expert_size", model.expert_size);
  model_field("top_k", model.top_k);
  model_field("experts_total", model.experts_total);
  model_field("hidden_size", model.hidden_size);
  r.get(root, "model", "bytes_per_element", model.bytes_per_element);
  if (model_ok && root["model"]) {
    try {
      model.validate();
    } catch (const ConfigError& e) {
      r.errors.push_back(fmt::format("model: {}", e.what()));
      model_ok = false;
    }
  }
  c.engine.model = model;

  // parallelism
  auto& par = c.engine.parallelism;
  r.require(root, "parallelism", "dp", par.dp);
  r.require(root, "parallelism", "tp", par.tp);
  r.get(root, "parallelism", "tokens_per_tp_group", par.tokens_per_tp_group);
  r.get(root, "parallelism", "micro_batches", c.engine.micro_batches);
  r.get(root, "parallelism", "with_allgather", c.engine.with_allgather);
  r.get(root, "parallelism", "moe_layers", c.engine.moe_layers);
  std::string mapping = "baseline";
  r.get(root, "parallelism", "mapping", mapping);
  bool layout_ok = true;
  try {
    c.engine.layout = parse_layout(mapping);
  } catch (const ConfigError& e) {
    r.errors.push_back(fmt::format("parallelism.mapping: {}", e.what()));
    layout_ok = false;
  }
  if (topo_ok && par.dp >= 1 && par.tp >= 1 &&
      static_cast<std::size_t>(par.dp) * static_cast<std::size_t>(par.tp) != c.engine.topo.device_count()) {
    r.errors.push_back(fmt::format(
        "parallelism: dp x tp must equal the device count; dp={} tp={} gives {} but {}x{}x{} has {}",
        par.dp, par.tp, par.dp * par.tp, wafers, width, height, c.engine.topo.device_count()));
  }

  // compute
  auto& cm = c.engine.compute;
  cm.peak_flops = device.compute_flops;
  cm.mem_bw = device.mem_bw;
  r.get(root, "compute", "expert_bytes_per_element", cm.expert_bytes_per_element);
  r.get(root, "compute", "attention_bytes_per_element", cm.attention_bytes_per_element);
  r.get(root, "compute", "attention_flops_coeff", cm.attention_flops_coeff);
  r.get(root, "compute", "attention_weight_coeff", cm.attention_weight_coeff);

  // balancer
  auto& bal = c.engine.balancer;
  std::string mode = "off";
  r.get(root, "balancer", "mode", mode);
  try {
    bal.mode = parse_balancer_mode(mode);
  } catch (const ConfigError& e) {
    r.errors.push_back(fmt::format("balancer.mode: {}", e.what()));
  }
  double alpha = 0, beta = 0;
  if (r.get(root, "balancer", "alpha", alpha)) bal.alpha = alpha;
  if (r.get(root, "balancer", "beta", beta)) bal.beta = beta;
  r.get(root, "balancer", "slots", bal.slots);
  r.get(root, "balancer", "window", bal.window);
  r.get(root, "balancer", "cold_threshold", bal.cold_threshold);
  std::string rule = "prose";
  r.get(root, "balancer", "rule", rule);
  if (rule == "prose") {
    bal.rule = CandidateRule::prose;
  } else if (rule == "literal") {
    bal.rule = CandidateRule::literal;
  } else {
    r.errors.push_back(fmt::format("balancer.rule: unknown rule '{}' (valid: prose, literal)", rule));
  }

  // workload
  auto& g = c.engine.gating;
  r.get(root, "workload", "zipf_exponent", g.zipf_exponent);
  r.get(root, "workload", "scenarios", g.scenarios);
  r.get(root, "workload", "drift", g.drift_rate);
  r.get(root, "workload", "dwell", g.scenario_dwell);
  r.get(root, "workload", "scenario_mix", g.scenario_mix);
  r.get(root, "workload", "seed", g.seed);
  r.get(root, "workload", "trace_file", c.trace_file);

  // output / simulation
  r.get(root, "output", "dir", c.output.dir);
  r.get(root, "output", "expert_trace", c.output.expert_trace);
  r.get(root, "simulation", "iterations", c.iterations);
  if (c.iterations < 1) r.errors.push_back("simulation.iterations: must be >= 1");

  // Module-level checks only make sense once the basics parsed.
  if (r.errors.empty()) {
    try {
      c.engine.validate();
    } catch (const ConfigError& e) {
      r.errors.push_back(e.what());
    }
    try {
      make_gating(model.experts_total, 1, g);
    } catch (const ConfigError& e) {
      r.errors.push_back(fmt::format("workload: {}", e.what()));
    }
    if (layout_ok && model_ok) {
      try {
        make_mapping(c.engine.layout, c.engine.topo, par, {model.experts_total, bal.slots});
      } catch (const ConfigError& e) {
        r.errors.push_back(fmt::format("parallelism: {}", e.what()));
      }
    }
  }
  if (r.errors.empty() && !c.trace_file.empty()) {
    fs::path p = c.trace_file;
    if (p.is_relative()) p = base_dir / p;
    std::ifstream in(p);
    if (!in) {
      r.errors.push_back(fmt::format("workload.trace_file: cannot open '{}'", p.string()));
    } else {
      try {
        c.engine.replay_trace = read_trace(in);
      } catch (const ConfigError& e) {
        r.errors.push_back(fmt::format("workload.trace_file '{}': {}", p.string(), e.what()));
      }
    }
  }

  if (!r.errors.empty()) {
    std::string msg = fmt::format("{}: {} configuration error{}", name, r.errors.size(),
                                  r.errors.size() == 1 ? "" : "s");
    for (const auto& e : r.errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  c.resolved = resolved_json(c);
  return c;
}

SimConfig parse_config_file(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides, path.parent_path(), path.stem().string());
}

}  // namespace meshmoe
