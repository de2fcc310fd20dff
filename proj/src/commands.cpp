// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/commands.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

namespace fs = std::filesystem;

OutputSet::OutputSet(fs::path dir) : dir_(std::move(dir)) {}

OutputSet::~OutputSet() {
  if (committed_) return;
  std::error_code ec;
  for (const auto& [tmp, final_path] : pending_) fs::remove(tmp, ec);
}

void OutputSet::write(const std::string& filename, const std::string& content) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw std::runtime_error(fmt::format("cannot create '{}': {}", dir_.string(), ec.message()));
  const fs::path final_path = dir_ / filename;
  const fs::path tmp = dir_ / fmt::format(".{}.tmp.{}", filename, ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", tmp.string()));
    pending_.emplace_back(tmp, final_path);
    out << content;
    out.flush();
    if (!out) throw std::runtime_error(fmt::format("write to '{}' failed", tmp.string()));
  }
}

void OutputSet::commit() {
  std::vector<fs::path> done;
  for (const auto& [tmp, final_path] : pending_) {
    std::error_code ec;
    fs::rename(tmp, final_path, ec);
    if (ec) {
      for (const auto& p : done) fs::remove(p, ec);
      throw std::runtime_error(fmt::format("cannot move '{}' into place: {}", final_path.string(), ec.message()));
    }
    done.push_back(final_path);
  }
  committed_ = true;
}

std::vector<fs::path> OutputSet::files() const {
  std::vector<fs::path> out;
  for (const auto& [tmp, final_path] : pending_) out.push_back(final_path);
  return out;
}

std::string ascii_grid(const MeshTopology& topo, const Mapping& mapping, const std::vector<int>& ftd_of) {
  std::string out;
  for (int w = 0; w < topo.wafer_count(); ++w) {
    out += fmt::format("wafer {}: group.rank\n", w);
    for (int y = 0; y < topo.height(); ++y) {
      for (int x = 0; x < topo.width(); ++x) {
        const auto d = topo.index_of({w, x, y});
        out += fmt::format(" {:>3}.{:<3}", mapping.group_of(d), mapping.ftd_slot(d));
      }
      out += '\n';
    }
    out += fmt::format("wafer {}: FTD\n", w);
    for (int y = 0; y < topo.height(); ++y) {
      for (int x = 0; x < topo.width(); ++x) {
        out += fmt::format(" {:>3}", ftd_of[topo.index_of({w, x, y})]);
      }
      out += '\n';
    }
  }
  return out;
}

namespace {

std::string num(double v) { return fmt::format("{}", v); }

nlohmann::json mapping_json(const MeshTopology& topo, const Mapping& m, const std::vector<Ftd>& ftds,
                            const std::vector<int>& ftd_of) {
  nlohmann::json j;
  j["layout"] = to_string(m.layout);
  j["dp"] = m.cfg.dp;
  j["tp"] = m.cfg.tp;
  j["block"] = {m.block_width, m.block_height};
  nlohmann::json devices = nlohmann::json::array();
  for (DeviceIndex d = 0; d < topo.device_count(); ++d) {
    const auto c = topo.coord_of(d);
    devices.push_back({{"index", d},
                       {"wafer", c.wafer},
                       {"x", c.x},
                       {"y", c.y},
                       {"tp_group", m.devices[d].tp_group},
                       {"rank", m.devices[d].rank},
                       {"ftd", ftd_of[d]},
                       {"native_experts", m.devices[d].native_experts},
                       {"shadow_slots", m.devices[d].shadow_slots}});
  }
  j["devices"] = std::move(devices);
  j["groups"] = m.groups;
  j["rings"] = m.rings;
  nlohmann::json fj = nlohmann::json::array();
  for (std::size_t i = 0; i < ftds.size(); ++i) {
    fj.push_back({{"index", i},
                  {"members", ftds[i].members},
                  {"bbox", {{"min_gx", ftds[i].min_gx}, {"max_gx", ftds[i].max_gx},
                            {"min_y", ftds[i].min_y}, {"max_y", ftds[i].max_y}}}});
  }
  j["ftds"] = std::move(fj);
  const auto overlap = ftd_intersections(topo, ftds);
  j["avg_hops"] = avg_hops(topo, ftds);
  j["intersections"] = {{"shared_devices", overlap.shared_devices},
                        {"shared_links", overlap.shared_links},
                        {"multiply_covered", overlap.multiply_covered}};
  return j;
}

std::string traffic_csv(const MeshTopology& topo, const TrafficMatrix& t,
                        const std::vector<LinkClass>& classes, const std::vector<StageKind>& scope) {
  std::string out = "src,dst,bytes,duty,class,scope\n";
  const auto links = topo.links();
  for (std::size_t l = 0; l < links.size(); ++l) {
    out += fmt::format("{},{},{},{},{},{}\n", links[l].src, links[l].dst, num(t.bytes[l]),
                       num(t.duty[l]), to_string(classes[l]),
                       scope[l] == StageKind::local ? "intra_ftd" : "inter_ftd");
  }
  return out;
}

struct SweepRow {
  SimulationSummary summary;
  double allreduce = 0;
  double all_to_all = 0;
};

}  // namespace

void command_map(const SimConfig& cfg, const fs::path& out, std::ostream& console) {
  const auto& e = cfg.engine;
  const Mapping m = make_mapping(e.layout, e.topo, e.parallelism,
                                 {e.model.experts_total, e.balancer.slots});
  const auto ftds = compute_ftds(e.topo, m);
  const auto ftd_of = ftd_membership(e.topo, ftds);
  nlohmann::json j = mapping_json(e.topo, m, ftds, ftd_of);
  j["config"] = cfg.resolved;
  j["topology"] = adjacency_json(e.topo);
  const std::string grid = ascii_grid(e.topo, m, ftd_of);
  OutputSet files(out);
  files.write("mapping.json", j.dump(2) + "\n");
  files.write("mapping.txt", grid);
  files.commit();
  console << grid;
  console << fmt::format("{} FTDs, avg hops {:.4f}, {} shared devices\n", ftds.size(),
                         j["avg_hops"].get<double>(), j["intersections"]["shared_devices"].size());
}

void command_heatmap(const SimConfig& cfg, const fs::path& out, std::ostream& console) {
  const auto& e = cfg.engine;
  Simulator sim(e);
  sim.step();  // samples layer 0 of iteration 0 with the configured gating
  const auto& topo = e.topo;
  const auto& assignment = sim.last_assignments().at(0);
  const auto demand = moe_dispatch_demand(topo, sim.mapping(), assignment, sim.placement(0),
                                          e.model.token_bytes(), e.with_allgather);
  CollectivePlan moe = plan_all_to_all(topo, demand);
  for (auto& p : plan_all_to_all(topo, demand.transposed()).phases) moe.phases.push_back(std::move(p));
  const auto moe_traffic = TrafficMatrix::from_plan(moe, topo.links().size());
  const auto& att = sim.attention_traffic();
  const auto classes = classify_links(att, moe_traffic, e.balancer.cold_threshold);
  const auto scope = link_stage_kinds(topo, ftd_membership(topo, sim.ftds()));

  auto count = [](const std::vector<LinkClass>& v, LinkClass c) {
    return static_cast<int>(std::count(v.begin(), v.end(), c));
  };
  double max_intra_duty = 0.0;
  double inter_moe_bytes = 0.0;
  for (std::size_t l = 0; l < scope.size(); ++l) {
    if (scope[l] == StageKind::local) {
      max_intra_duty = std::max(max_intra_duty, att.duty[l]);
    } else {
      inter_moe_bytes += moe_traffic.bytes[l];
    }
  }
  nlohmann::json summary = {
      {"config", cfg.resolved},
      {"attention", {{"hot", count(classes.attention, LinkClass::hot)},
                     {"cold", count(classes.attention, LinkClass::cold)},
                     {"idle", count(classes.attention, LinkClass::idle)}}},
      {"moe", {{"hot", count(classes.moe, LinkClass::hot)},
               {"cold", count(classes.moe, LinkClass::cold)},
               {"idle", count(classes.moe, LinkClass::idle)}}},
      {"complementarity_violations", classes.complementarity_violations},
      {"max_intra_ftd_attention_duty", max_intra_duty},
      {"inter_ftd_moe_bytes", inter_moe_bytes},
  };
  OutputSet files(out);
  files.write("heatmap_attention.csv", traffic_csv(topo, att, classes.attention, scope));
  files.write("heatmap_moe.csv", traffic_csv(topo, moe_traffic, classes.moe, scope));
  files.write("heatmap_summary.json", summary.dump(2) + "\n");
  files.commit();
  console << fmt::format("attention: {} hot / {} cold / {} idle links; moe: {} hot / {} cold / {} idle; "
                         "{} complementarity violations\n",
                         count(classes.attention, LinkClass::hot), count(classes.attention, LinkClass::cold),
                         count(classes.attention, LinkClass::idle), count(classes.moe, LinkClass::hot),
                         count(classes.moe, LinkClass::cold), count(classes.moe, LinkClass::idle),
                         classes.complementarity_violations.size());
}

std::string trace_csv(const std::vector<IterationMetrics>& trace) {
  std::string out =
      "iteration,wall_time,attention_compute,allreduce,dispatch,expert_compute,combine,"
      "migration_stall,imbalance,heat_ratio,triggered,moves_issued,moves_completed,"
      "migration_bytes_in_flight\n";
  for (const auto& m : trace) {
    LayerMetrics sum;
    for (const auto& l : m.layers) {
      sum.attention_compute += l.attention_compute;
      sum.allreduce += l.allreduce;
      sum.dispatch += l.dispatch;
      sum.expert_compute += l.expert_compute;
      sum.combine += l.combine;
    }
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", m.iteration, num(m.wall_time),
                       num(sum.attention_compute), num(sum.allreduce), num(sum.dispatch),
                       num(sum.expert_compute), num(sum.combine), num(m.migration_stall),
                       num(m.imbalance), num(m.heat_ratio), m.triggered ? 1 : 0, m.moves_issued,
                       m.moves_completed, num(m.migration_bytes_in_flight));
  }
  return out;
}

namespace {

nlohmann::json summary_json(const SimulationSummary& s) {
  return {{"iterations", s.iterations},
          {"mean_wall_time", s.mean_wall_time},
          {"p50_wall_time", s.p50_wall_time},
          {"p95_wall_time", s.p95_wall_time},
          {"max_wall_time", s.max_wall_time},
          {"tokens_per_second_per_device", s.tokens_per_second_per_device},
          {"triggers", s.triggers},
          {"moves_issued", s.moves_issued},
          {"moves_completed", s.moves_completed},
          {"total_migration_stall", s.total_migration_stall},
          {"mean_imbalance", s.mean_imbalance},
          {"final_imbalance", s.final_imbalance},
          {"breakdown_per_iteration",
           {{"attention_compute", s.breakdown_attention_compute},
            {"allreduce", s.breakdown_allreduce},
            {"dispatch", s.breakdown_dispatch},
            {"expert_compute", s.breakdown_expert_compute},
            {"combine", s.breakdown_combine}}}};
}

}  // namespace

void command_simulate(const SimConfig& cfg, const fs::path& out, std::ostream& console) {
  Simulator sim(cfg.engine);
  std::vector<IterationMetrics> trace;
  std::string experts;
  if (cfg.output.expert_trace) {
    std::ostringstream os;
    write_trace_header(os, cfg.engine.model.top_k);
    experts = os.str();
  }
  for (std::uint64_t i = 0; i < cfg.iterations; ++i) {
    trace.push_back(sim.step());
    if (cfg.output.expert_trace) {
      std::ostringstream os;
      for (std::size_t l = 0; l < sim.last_assignments().size(); ++l) {
        write_trace_rows(os, trace.back().iteration, static_cast<int>(l), sim.last_assignments()[l]);
      }
      experts += os.str();
    }
  }
  const auto summary = summarize(cfg.engine, trace);
  nlohmann::json j = {{"config", cfg.resolved},
                      {"summary", summary_json(summary)},
                      {"alpha", sim.alpha()},
                      {"beta", sim.beta()},
                      {"avg_hops", avg_hops(cfg.engine.topo, sim.ftds())}};
  OutputSet files(out);
  files.write("trace.csv", trace_csv(trace));
  files.write("summary.json", j.dump(2) + "\n");
  if (cfg.output.expert_trace) files.write("experts.csv", experts);
  files.commit();
  console << fmt::format("{}: {} iterations, mean wall {:.6g} s, p95 {:.6g} s, {} moves\n", cfg.name,
                         summary.iterations, summary.mean_wall_time, summary.p95_wall_time,
                         summary.moves_issued);
}

void command_balance_trace(const SimConfig& cfg, const fs::path& out, std::ostream& console) {
  Simulator sim(cfg.engine);
  std::string csv =
      "iteration,heat_ratio,imbalance,triggered,moves_issued,moves_completed,"
      "migration_bytes_in_flight,added_time\n";
  int triggers = 0;
  for (std::uint64_t i = 0; i < cfg.iterations; ++i) {
    const auto m = sim.step();
    triggers += m.triggered ? 1 : 0;
    csv += fmt::format("{},{},{},{},{},{},{},{}\n", m.iteration, num(m.heat_ratio), num(m.imbalance),
                       m.triggered ? 1 : 0, m.moves_issued, m.moves_completed,
                       num(m.migration_bytes_in_flight), num(m.migration_stall));
  }
  OutputSet files(out);
  files.write("balance.csv", csv);
  files.commit();
  console << fmt::format("{}: {} iterations, {} triggers\n", cfg.name, cfg.iterations, triggers);
}

void command_compare(const std::vector<SimConfig>& cfgs, const fs::path& out, std::ostream& console,
                     int jobs) {
  if (cfgs.empty()) throw ConfigError("compare needs at least one config");
  std::vector<SweepRow> rows(cfgs.size());
  std::vector<std::exception_ptr> failures(cfgs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfgs.size(); i = next++) {
      try {
        const auto r = run_simulation(cfgs[i].engine, cfgs[i].iterations);
        rows[i].summary = r.summary;
        rows[i].allreduce = r.summary.breakdown_allreduce;
        rows[i].all_to_all = r.summary.breakdown_dispatch + r.summary.breakdown_combine;
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(cfgs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    if (failures[i]) {
      try {
        std::rethrow_exception(failures[i]);
      } catch (const std::exception& e) {
        throw std::runtime_error(fmt::format("compare: config '{}' failed: {}", cfgs[i].name, e.what()));
      }
    }
  }

  auto ratio = [](double ref, double v) { return v > 0 ? ref / v : 0.0; };
  std::string csv =
      "name,mapping,wafers,width,height,dp,tp,model,micro_batches,with_allgather,balancer,seed,"
      "iterations,mean_wall_time,allreduce,all_to_all,attention_compute,expert_compute,"
      "wall_ratio,allreduce_ratio,all_to_all_ratio\n";
  nlohmann::json provenance = nlohmann::json::array();
  const auto& ref = rows.front();
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const auto& c = cfgs[i];
    const auto& e = c.engine;
    const auto& s = rows[i].summary;
    csv += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", c.name,
                       to_string(e.layout), e.topo.wafer_count(), e.topo.width(), e.topo.height(),
                       e.parallelism.dp, e.parallelism.tp, e.model.name, e.micro_batches,
                       e.with_allgather ? 1 : 0, to_string(e.balancer.mode), e.gating.seed,
                       c.iterations, num(s.mean_wall_time), num(rows[i].allreduce),
                       num(rows[i].all_to_all), num(s.breakdown_attention_compute),
                       num(s.breakdown_expert_compute),
                       num(ratio(ref.summary.mean_wall_time, s.mean_wall_time)),
                       num(ratio(ref.allreduce, rows[i].allreduce)),
                       num(ratio(ref.all_to_all, rows[i].all_to_all)));
    provenance.push_back({{"name", c.name}, {"config", c.resolved}, {"summary", summary_json(s)}});
  }
  OutputSet files(out);
  files.write("compare.csv", csv);
  files.write("compare.json", provenance.dump(2) + "\n");
  files.commit();
  console << csv;
}

}  // namespace meshmoe
