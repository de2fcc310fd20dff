// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/workload.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "meshmoe/error.hpp"
#include "meshmoe/rng.hpp"

namespace meshmoe {

void ModelSpec::validate() const {
  std::string problems;
  if (top_k < 1) problems += fmt::format(" top_k={}", top_k);
  if (experts_total < 1) problems += fmt::format(" experts_total={}", experts_total);
  if (top_k > experts_total) problems += fmt::format(" top_k={} > experts_total={}", top_k, experts_total);
  if (sparse_layers < 0 || sparse_layers > total_layers) {
    problems += fmt::format(" sparse_layers={} (total_layers={})", sparse_layers, total_layers);
  }
  if (!(expert_size > 0)) problems += fmt::format(" expert_size={}", expert_size);
  if (hidden_size < 1) problems += fmt::format(" hidden_size={}", hidden_size);
  if (bytes_per_element < 1) problems += fmt::format(" bytes_per_element={}", bytes_per_element);
  if (!problems.empty()) throw ConfigError(fmt::format("model '{}' invalid:{}", name, problems));
}

std::vector<ModelSpec> preset_models() {
  // Hidden sizes come from the models' public configuration files.
  return {
      {"DeepSeek-V3", 671e9, 58, 61, 42e6, 8, 256, 7168, 2},
      {"Qwen3", 235e9, 94, 94, 18e6, 8, 128, 4096, 2},
      {"DeepSeek-V2", 236e9, 59, 60, 23e6, 6, 160, 5120, 2},
      {"DBRX", 132e9, 40, 40, 189e6, 4, 16, 6144, 2},
      {"Mixtral-8x22B", 141e9, 56, 56, 288e6, 2, 8, 6144, 2},
  };
}

ModelSpec find_preset(const std::string& name) {
  auto lower = [](std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  std::string known;
  for (auto& m : preset_models()) {
    if (lower(m.name) == lower(name)) return m;
    known += (known.empty() ? "" : ", ") + m.name;
  }
  throw ConfigError(fmt::format("unknown model preset '{}' (known: {})", name, known));
}

namespace {

void normalise(std::vector<double>& v) {
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  if (sum <= 0) {
    std::fill(v.begin(), v.end(), v.empty() ? 0.0 : 1.0 / static_cast<double>(v.size()));
    return;
  }
  for (double& x : v) x /= sum;
}

std::vector<double> zipf_vector(int experts, double exponent, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(experts));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<int>(order));
  std::vector<double> pop(static_cast<std::size_t>(experts));
  for (int rank = 0; rank < experts; ++rank) {
    pop[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] =
        1.0 / std::pow(static_cast<double>(rank + 1), exponent);
  }
  normalise(pop);
  return pop;
}

}  // namespace

GatingModel make_gating(int experts_total, int layers, const GatingParams& params) {
  std::string problems;
  if (experts_total < 1) problems += fmt::format(" experts_total={}", experts_total);
  if (layers < 0) problems += fmt::format(" layers={}", layers);
  if (params.scenarios < 1) problems += fmt::format(" scenarios={}", params.scenarios);
  if (!(params.drift_rate >= 0 && params.drift_rate <= 1)) {
    problems += fmt::format(" drift_rate={}", params.drift_rate);
  }
  if (params.scenario_dwell < 1) problems += fmt::format(" scenario_dwell={}", params.scenario_dwell);
  if (!(params.zipf_exponent >= 0)) problems += fmt::format(" zipf_exponent={}", params.zipf_exponent);
  if (!params.scenario_mix.empty() &&
      params.scenario_mix.size() != static_cast<std::size_t>(params.scenarios)) {
    problems += fmt::format(" scenario_mix has {} weights for {} scenarios",
                            params.scenario_mix.size(), params.scenarios);
  }
  if (!problems.empty()) throw ConfigError("invalid gating parameters:" + problems);

  GatingModel g;
  g.drift_rate = params.drift_rate;
  g.scenario_dwell = params.scenario_dwell;
  g.seed = params.seed;
  g.scenarios.resize(static_cast<std::size_t>(params.scenarios));
  for (int s = 0; s < params.scenarios; ++s) {
    auto& sc = g.scenarios[static_cast<std::size_t>(s)];
    for (int l = 0; l < layers; ++l) {
      Rng rng(derive_seed(params.seed, {0x5CE0, static_cast<std::uint64_t>(s),
                                        static_cast<std::uint64_t>(l)}));
      sc.push_back(zipf_vector(experts_total, params.zipf_exponent, rng));
    }
  }
  std::vector<double> mix = params.scenario_mix;
  if (mix.empty()) {
    mix.assign(static_cast<std::size_t>(params.scenarios), 0.0);
    mix[0] = 1.0;
  }
  normalise(mix);
  g.popularity.assign(static_cast<std::size_t>(layers),
                      std::vector<double>(static_cast<std::size_t>(experts_total), 0.0));
  for (int l = 0; l < layers; ++l) {
    auto& pop = g.popularity[static_cast<std::size_t>(l)];
    for (std::size_t s = 0; s < mix.size(); ++s) {
      const auto& v = g.scenarios[s][static_cast<std::size_t>(l)];
      for (std::size_t e = 0; e < pop.size(); ++e) pop[e] += mix[s] * v[e];
    }
    normalise(pop);
  }
  return g;
}

GatingModel fixed_gating(const std::vector<double>& popularity, int layers, std::uint64_t seed) {
  if (popularity.empty()) throw ConfigError("popularity vector is empty");
  for (double p : popularity) {
    if (!(p >= 0)) throw ConfigError(fmt::format("popularity weight {} is negative", p));
  }
  GatingModel g;
  g.seed = seed;
  auto pop = popularity;
  normalise(pop);
  g.popularity.assign(static_cast<std::size_t>(std::max(layers, 0)), pop);
  g.scenarios.push_back(g.popularity);
  return g;
}

ExpertAssignment gate_tokens(const ModelSpec& model, std::size_t token_count,
                             const GatingModel& gating, int layer, std::uint64_t iteration) {
  if (model.top_k > model.experts_total || model.top_k < 1) {
    throw ConfigError(fmt::format("model '{}': top_k={} with {} experts", model.name, model.top_k,
                                  model.experts_total));
  }
  if (layer < 0 || layer >= gating.layers()) {
    throw DomainError(fmt::format("layer {} outside gating model with {} layers", layer,
                                  gating.layers()));
  }
  const auto& pop = gating.popularity[static_cast<std::size_t>(layer)];
  const auto experts = pop.size();
  if (experts != static_cast<std::size_t>(model.experts_total)) {
    throw ConfigError(fmt::format("gating has {} experts, model '{}' has {}", experts, model.name,
                                  model.experts_total));
  }
  const auto k = static_cast<std::size_t>(model.top_k);
  ExpertAssignment out;
  out.top_k = model.top_k;
  out.experts.reserve(token_count * k);
  out.weights.reserve(token_count * k);

  std::vector<double> cdf(experts);
  std::partial_sum(pop.begin(), pop.end(), cdf.begin());
  const double total = cdf.back();

  Rng rng(derive_seed(gating.seed, {0x6A7E, static_cast<std::uint64_t>(layer), iteration}));
  std::vector<char> taken(experts, 0);
  std::vector<int> chosen;
  chosen.reserve(k);
  for (std::size_t t = 0; t < token_count; ++t) {
    chosen.clear();
    double chosen_mass = 0.0;
    while (chosen.size() < k) {
      int pick = -1;
      // Rejection sampling is cheap while the chosen experts hold little mass.
      for (int attempt = 0; attempt < 32 && total > 0; ++attempt) {
        const double u = rng.uniform() * total;
        auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        if (it == cdf.end()) --it;
        const auto e = static_cast<std::size_t>(it - cdf.begin());
        if (!taken[e] && pop[e] > 0) {
          pick = static_cast<int>(e);
          break;
        }
      }
      if (pick < 0) {
        const double remaining = total - chosen_mass;
        if (remaining > 1e-12 * total) {
          double u = rng.uniform() * remaining;
          for (std::size_t e = 0; e < experts; ++e) {
            if (taken[e] || pop[e] <= 0) continue;
            pick = static_cast<int>(e);
            u -= pop[e];
            if (u < 0) break;
          }
        }
        if (pick < 0) {
          // Every expert with mass is taken; fill uniformly from the rest.
          std::size_t free_count = 0;
          for (std::size_t e = 0; e < experts; ++e) free_count += taken[e] ? 0 : 1;
          auto r = rng.below(free_count);
          for (std::size_t e = 0; e < experts; ++e) {
            if (taken[e]) continue;
            if (r-- == 0) {
              pick = static_cast<int>(e);
              break;
            }
          }
        }
      }
      taken[static_cast<std::size_t>(pick)] = 1;
      chosen_mass += pop[static_cast<std::size_t>(pick)];
      chosen.push_back(pick);
    }
    double wsum = 0.0;
    for (int e : chosen) wsum += pop[static_cast<std::size_t>(e)];
    for (int e : chosen) {
      out.experts.push_back(e);
      out.weights.push_back(wsum > 0 ? pop[static_cast<std::size_t>(e)] / wsum
                                     : 1.0 / static_cast<double>(k));
      taken[static_cast<std::size_t>(e)] = 0;
    }
  }
  return out;
}

GatingModel evolve_popularity(const GatingModel& gating, std::uint64_t iteration) {
  GatingModel next = gating;
  if (gating.drift_rate == 0 || gating.scenarios.empty()) return next;
  const auto s_count = gating.scenarios.size();
  const auto target = static_cast<std::size_t>(
      (1 + iteration / static_cast<std::uint64_t>(gating.scenario_dwell)) % s_count);
  const double d = gating.drift_rate;
  for (std::size_t l = 0; l < next.popularity.size(); ++l) {
    auto& pop = next.popularity[l];
    const auto& goal = gating.scenarios[target][l];
    if (d == 1.0) {
      pop = goal;  // already normalised; copying keeps it bit-identical
      continue;
    }
    for (std::size_t e = 0; e < pop.size(); ++e) pop[e] = (1 - d) * pop[e] + d * goal[e];
    normalise(pop);
  }
  return next;
}

ExpertPlacement ExpertPlacement::from_mapping(const Mapping& mapping) {
  ExpertPlacement p;
  p.device_count = mapping.device_count();
  p.hosts.resize(mapping.expert_home.size());
  for (std::size_t e = 0; e < mapping.expert_home.size(); ++e) p.hosts[e] = {mapping.expert_home[e]};
  return p;
}

bool ExpertPlacement::hosts_expert(DeviceIndex d, int expert) const {
  const auto& h = hosts.at(static_cast<std::size_t>(expert));
  return std::find(h.begin(), h.end(), d) != h.end();
}

std::vector<int> ExpertPlacement::experts_on(DeviceIndex d) const {
  std::vector<int> out;
  for (std::size_t e = 0; e < hosts.size(); ++e) {
    if (hosts_expert(d, static_cast<int>(e))) out.push_back(static_cast<int>(e));
  }
  return out;
}

std::vector<double> expert_loads(const ExpertAssignment& assignment, int experts_total) {
  std::vector<double> load(static_cast<std::size_t>(experts_total), 0.0);
  for (int e : assignment.experts) {
    if (e < 0 || e >= experts_total) {
      throw DomainError(fmt::format("expert id {} outside [0, {})", e, experts_total));
    }
    load[static_cast<std::size_t>(e)] += 1.0;
  }
  return load;
}

std::vector<double> device_loads(const std::vector<double>& expert_load,
                                 const ExpertPlacement& placement) {
  if (expert_load.size() > placement.hosts.size()) {
    throw InvariantError(fmt::format("{} experts loaded but placement covers {}",
                                     expert_load.size(), placement.hosts.size()));
  }
  std::vector<double> load(placement.device_count, 0.0);
  for (std::size_t e = 0; e < expert_load.size(); ++e) {
    if (expert_load[e] == 0) continue;
    const auto& hosts = placement.hosts[e];
    if (hosts.empty()) {
      throw InvariantError(fmt::format("expert {} receives tokens but has no host", e));
    }
    const double share = expert_load[e] / static_cast<double>(hosts.size());
    for (DeviceIndex d : hosts) load.at(d) += share;
  }
  return load;
}

std::vector<double> device_loads(const ExpertAssignment& assignment, const ExpertPlacement& placement) {
  return device_loads(expert_loads(assignment, static_cast<int>(placement.hosts.size())), placement);
}

double imbalance_ratio(const std::vector<double>& loads) {
  if (loads.empty()) return 1.0;
  const double sum = std::accumulate(loads.begin(), loads.end(), 0.0);
  if (sum <= 0) return 1.0;
  const double mean = sum / static_cast<double>(loads.size());
  return *std::max_element(loads.begin(), loads.end()) / mean;
}

double LoadRatioTracker::update(const std::vector<double>& loads) {
  const double sum = std::accumulate(loads.begin(), loads.end(), 0.0);
  std::vector<double> share(loads.size(), 0.0);
  if (sum > 0) {
    for (std::size_t i = 0; i < loads.size(); ++i) share[i] = loads[i] / sum;
  }
  if (ratios_.size() != loads.size()) {
    ratios_ = share;
    return 0.0;
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < share.size(); ++i) {
    const double prev = ratios_[i];
    ratios_[i] = (1 - alpha_) * prev + alpha_ * share[i];
    if (prev > 0) worst = std::max(worst, std::abs(ratios_[i] - prev) / prev);
  }
  return worst;
}

void write_trace_header(std::ostream& out, int top_k) {
  out << "iteration,layer,token";
  for (int r = 1; r <= top_k; ++r) out << ",expert_rank_" << r;
  out << '\n';
}

void write_trace_rows(std::ostream& out, std::uint64_t iteration, int layer,
                      const ExpertAssignment& assignment) {
  const auto k = static_cast<std::size_t>(assignment.top_k);
  std::string line;
  for (std::size_t t = 0; t < assignment.token_count(); ++t) {
    line = fmt::format("{},{},{}", iteration, layer, t);
    for (std::size_t r = 0; r < k; ++r) fmt::format_to(std::back_inserter(line), ",{}", assignment.experts[t * k + r]);
    line.push_back('\n');
    out << line;
  }
}

std::map<TraceKey, ExpertAssignment> read_trace(std::istream& in) {
  std::map<TraceKey, ExpertAssignment> out;
  std::string line;
  std::size_t line_no = 0;
  int top_k = -1;
  auto bad = [&](const std::string& why) {
    return ConfigError(fmt::format("trace line {}: {}", line_no, why));
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line_no == 1 && !cells.empty() && cells[0] == "iteration") {
      top_k = static_cast<int>(cells.size()) - 3;
      if (top_k < 1) throw bad("header has no expert columns");
      continue;
    }
    if (top_k < 0) top_k = static_cast<int>(cells.size()) - 3;
    if (static_cast<int>(cells.size()) != top_k + 3) {
      throw bad(fmt::format("expected {} columns, found {}", top_k + 3, cells.size()));
    }
    try {
      TraceKey key{std::stoull(cells[0]), std::stoi(cells[1])};
      auto& a = out[key];
      a.top_k = top_k;
      for (int r = 0; r < top_k; ++r) {
        a.experts.push_back(std::stoi(cells[static_cast<std::size_t>(r) + 3]));
        a.weights.push_back(1.0 / top_k);
      }
    } catch (const std::logic_error&) {
      throw bad("non-numeric field");
    }
  }
  return out;
}

}  // namespace meshmoe
