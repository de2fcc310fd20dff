// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/mapping.hpp"

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <optional>

#include <fmt/format.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

const char* to_string(Layout layout) {
  switch (layout) {
    case Layout::baseline:
      return "baseline";
    case Layout::er:
      return "er";
    case Layout::hier_er:
      return "hier_er";
  }
  return "?";
}

Layout parse_layout(const std::string& name) {
  if (name == "baseline") return Layout::baseline;
  if (name == "er") return Layout::er;
  if (name == "hier_er") return Layout::hier_er;
  throw ConfigError(fmt::format("unknown mapping '{}' (valid: baseline, er, hier_er)", name));
}

bool Ftd::region_contains(const MeshTopology& topo, DeviceIndex d) const {
  const auto c = topo.coord_of(d);
  const int gx = topo.global_x(c);
  return gx >= min_gx && gx <= max_gx && c.y >= min_y && c.y <= max_y;
}

std::vector<std::pair<int, int>> grid_cycle(int w, int h) {
  if (w < 1 || h < 1) {
    throw ConfigError(fmt::format("grid {}x{} has no cells", w, h));
  }
  const int cells = w * h;
  if (cells == 1) return {{0, 0}};
  if (cells == 2) return w == 2 ? std::vector<std::pair<int, int>>{{0, 0}, {1, 0}}
                                : std::vector<std::pair<int, int>>{{0, 0}, {0, 1}};
  if (w == 1 || h == 1 || cells % 2 != 0) {
    throw ConfigError(fmt::format("grid {}x{} has no Hamiltonian cycle", w, h));
  }
  if (h % 2 != 0) {
    auto t = grid_cycle(h, w);
    for (auto& [a, b] : t) std::swap(a, b);
    return t;
  }
  std::vector<std::pair<int, int>> cyc;
  cyc.reserve(static_cast<std::size_t>(cells));
  for (int x = 0; x < w; ++x) cyc.emplace_back(x, 0);
  for (int y = 1; y < h; ++y) {
    if (y % 2 == 1) {
      for (int x = w - 1; x >= 1; --x) cyc.emplace_back(x, y);
    } else {
      for (int x = 1; x < w; ++x) cyc.emplace_back(x, y);
    }
  }
  for (int y = h - 1; y >= 1; --y) cyc.emplace_back(0, y);
  return cyc;
}

namespace {

bool has_cycle(int w, int h) {
  const int cells = w * h;
  if (cells <= 2) return true;
  return w > 1 && h > 1 && cells % 2 == 0;
}

void validate_parallelism(const MeshTopology& topo, const ParallelismConfig& cfg) {
  const auto n = static_cast<long>(topo.device_count());
  std::vector<std::string> errors;
  if (cfg.dp < 1) errors.push_back(fmt::format("dp={} must be >= 1", cfg.dp));
  if (cfg.tp < 1) errors.push_back(fmt::format("tp={} must be >= 1", cfg.tp));
  if (cfg.tokens_per_tp_group < 1) {
    errors.push_back(fmt::format("tokens_per_tp_group={} must be >= 1", cfg.tokens_per_tp_group));
  }
  if (cfg.dp >= 1 && cfg.tp >= 1 && static_cast<long>(cfg.dp) * cfg.tp != n) {
    errors.push_back(fmt::format("dp x tp = {} x {} = {} but the system has {} devices", cfg.dp,
                                 cfg.tp, static_cast<long>(cfg.dp) * cfg.tp, n));
  }
  if (cfg.ep != 0 && cfg.ep != n) {
    errors.push_back(fmt::format("ep={} must equal the device count {}", cfg.ep, n));
  }
  if (!errors.empty()) {
    std::string msg = "invalid parallelism:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw ConfigError(msg);
  }
}

struct Shape {
  int w = 1;
  int h = 1;
};

// Most square w x h with w * h == cells tiling a width x height wafer; the
// longer side runs along x. `ok` filters further constraints.
template <typename Pred>
std::optional<Shape> choose_tile(int cells, int width, int height, Pred ok) {
  std::optional<Shape> best;
  for (int w = 1; w <= cells; ++w) {
    if (cells % w != 0) continue;
    const int h = cells / w;
    if (width % w != 0 || height % h != 0) continue;
    if (!ok(w, h)) continue;
    const auto skew = [](const Shape& s) { return std::abs(s.w - s.h); };
    const Shape cand{w, h};
    if (!best || skew(cand) < skew(*best) || (skew(cand) == skew(*best) && cand.w > best->w)) {
      best = cand;
    }
  }
  return best;
}

void assign_experts(const MeshTopology& topo, Mapping& m, const MappingOptions& opts) {
  const std::size_t n = m.devices.size();
  const int experts = opts.experts_total > 0 ? opts.experts_total : static_cast<int>(n);
  if (opts.shadow_slots < 0) {
    throw ConfigError(fmt::format("shadow_slots={} must be >= 0", opts.shadow_slots));
  }
  std::vector<DeviceIndex> order(n);
  std::iota(order.begin(), order.end(), 0);
  const bool per_wafer = m.layout == Layout::hier_er;
  std::stable_sort(order.begin(), order.end(), [&](DeviceIndex a, DeviceIndex b) {
    const int wa = per_wafer ? topo.coord_of(a).wafer : 0;
    const int wb = per_wafer ? topo.coord_of(b).wafer : 0;
    if (wa != wb) return wa < wb;
    return m.devices[a].rank < m.devices[b].rank;
  });
  m.expert_home.assign(static_cast<std::size_t>(experts), 0);
  for (int e = 0; e < experts; ++e) {
    const DeviceIndex d = order[static_cast<std::size_t>(e) % n];
    m.devices[d].native_experts.push_back(e);
    m.expert_home[static_cast<std::size_t>(e)] = d;
  }
  for (auto& dev : m.devices) dev.shadow_slots = opts.shadow_slots;
}

// Interleaved layout over the wafers [wafer_lo, wafer_hi). Each tile is one
// FTD slot; the position inside a tile selects the TP group.
void layout_er_region(const MeshTopology& topo, Mapping& m, int wafer_lo, int wafer_hi,
                      Shape tile, int group_offset) {
  const int W = topo.width();
  const int H = topo.height();
  const int region_w = (wafer_hi - wafer_lo) * W;
  const int grid_w = region_w / tile.w;
  const int grid_h = H / tile.h;
  const auto cycle = grid_cycle(grid_w, grid_h);
  const int tp = grid_w * grid_h;

  for (int ly = 0; ly < tile.h; ++ly) {
    for (int lx = 0; lx < tile.w; ++lx) {
      const int g = group_offset + ly * tile.w + lx;
      auto& members = m.groups[static_cast<std::size_t>(g)];
      members.assign(static_cast<std::size_t>(tp), 0);
      auto device_at = [&](int cx, int cy) {
        const int gx = wafer_lo * W + cx * tile.w + lx;
        return topo.index_of({gx / W, gx % W, cy * tile.h + ly});
      };
      for (int cy = 0; cy < grid_h; ++cy) {
        for (int cx = 0; cx < grid_w; ++cx) {
          const int rank = cy * grid_w + cx;
          const DeviceIndex d = device_at(cx, cy);
          members[static_cast<std::size_t>(rank)] = d;
          m.devices[d].tp_group = g;
          m.devices[d].rank = rank;
        }
      }
      // Neighbouring groups circulate in opposite directions so that a
      // member leaving a tile and one entering it never share an intra-tile
      // link; this keeps intra-FTD links at half duty.
      auto& ring = m.rings[static_cast<std::size_t>(g)];
      ring.clear();
      for (const auto& [cx, cy] : cycle) ring.push_back(device_at(cx, cy));
      if ((lx + ly) % 2 == 1 && ring.size() > 2) {
        std::reverse(ring.begin() + 1, ring.end());
      }
    }
  }
}

std::string supported_er_shapes() {
  return "supported: tp in {4, 8, 16} on square wafers from 4x4 to 8x8 with dp x tp equal to the "
         "device count and a tile grid admitting a ring, or tp = 1 on any mesh";
}

void check_er_support(const MeshTopology& topo, const ParallelismConfig& cfg, int tp) {
  if (tp == 1) return;
  const bool tp_ok = tp == 4 || tp == 8 || tp == 16;
  const bool mesh_ok =
      topo.width() == topo.height() && topo.width() >= 4 && topo.width() <= 8;
  if (!tp_ok || !mesh_ok) {
    throw ConfigError(fmt::format("ER mapping does not support tp={} on {}x{} wafers ({})",
                                  cfg.tp, topo.width(), topo.height(), supported_er_shapes()));
  }
}

}  // namespace

Mapping baseline_mapping(const MeshTopology& topo, const ParallelismConfig& cfg,
                         const MappingOptions& opts) {
  validate_parallelism(topo, cfg);
  const auto tile = choose_tile(cfg.tp, topo.width(), topo.height(),
                                [](int w, int h) { return has_cycle(w, h); });
  if (!tile) {
    throw ConfigError(fmt::format(
        "tp={} cannot be packed into ring-capable blocks dividing a {}x{} wafer", cfg.tp,
        topo.width(), topo.height()));
  }
  Mapping m;
  m.layout = Layout::baseline;
  m.cfg = cfg;
  m.block_width = tile->w;
  m.block_height = tile->h;
  m.devices.resize(topo.device_count());
  m.groups.resize(static_cast<std::size_t>(cfg.dp));
  m.rings.resize(static_cast<std::size_t>(cfg.dp));

  const int W = topo.width();
  const int blocks_x = topo.wafer_count() * W / tile->w;
  const int blocks_y = topo.height() / tile->h;
  const auto cycle = grid_cycle(tile->w, tile->h);
  for (int by = 0; by < blocks_y; ++by) {
    for (int bx = 0; bx < blocks_x; ++bx) {
      const int g = by * blocks_x + bx;
      auto device_at = [&](int lx, int ly) {
        const int gx = bx * tile->w + lx;
        return topo.index_of({gx / W, gx % W, by * tile->h + ly});
      };
      auto& members = m.groups[static_cast<std::size_t>(g)];
      for (int ly = 0; ly < tile->h; ++ly) {
        for (int lx = 0; lx < tile->w; ++lx) {
          const DeviceIndex d = device_at(lx, ly);
          m.devices[d].tp_group = g;
          m.devices[d].rank = ly * tile->w + lx;
          members.push_back(d);
        }
      }
      for (const auto& [lx, ly] : cycle) {
        m.rings[static_cast<std::size_t>(g)].push_back(device_at(lx, ly));
      }
    }
  }
  assign_experts(topo, m, opts);
  return m;
}

Mapping er_mapping(const MeshTopology& topo, const ParallelismConfig& cfg,
                   const MappingOptions& opts) {
  validate_parallelism(topo, cfg);
  check_er_support(topo, cfg, cfg.tp);
  const int grid_total_w = topo.wafer_count() * topo.width();
  const auto tile = choose_tile(cfg.dp, topo.width(), topo.height(), [&](int w, int h) {
    return has_cycle(grid_total_w / w, topo.height() / h);
  });
  if (!tile) {
    throw ConfigError(fmt::format("no FTD tiling for dp={} tp={} on {}x{} wafers ({})", cfg.dp,
                                  cfg.tp, topo.width(), topo.height(), supported_er_shapes()));
  }
  Mapping m;
  m.layout = Layout::er;
  m.cfg = cfg;
  m.block_width = tile->w;
  m.block_height = tile->h;
  m.devices.resize(topo.device_count());
  m.groups.resize(static_cast<std::size_t>(cfg.dp));
  m.rings.resize(static_cast<std::size_t>(cfg.dp));
  layout_er_region(topo, m, 0, topo.wafer_count(), *tile, 0);
  assign_experts(topo, m, opts);
  return m;
}

Mapping hier_er_mapping(const MeshTopology& topo, const ParallelismConfig& cfg,
                        const MappingOptions& opts) {
  if (topo.wafer_count() < 2) {
    throw ConfigError("hierarchical ER mapping needs at least 2 wafers; use 'er' on one wafer");
  }
  validate_parallelism(topo, cfg);
  if (cfg.dp % topo.wafer_count() != 0) {
    throw ConfigError(fmt::format("hierarchical ER needs dp={} divisible by wafer count {}",
                                  cfg.dp, topo.wafer_count()));
  }
  check_er_support(topo, cfg, cfg.tp);
  const int dp_local = cfg.dp / topo.wafer_count();
  const auto tile = choose_tile(dp_local, topo.width(), topo.height(), [&](int w, int h) {
    return has_cycle(topo.width() / w, topo.height() / h);
  });
  if (!tile) {
    throw ConfigError(fmt::format("no per-wafer FTD tiling for dp={} tp={} on {}x{} wafers ({})",
                                  cfg.dp, cfg.tp, topo.width(), topo.height(),
                                  supported_er_shapes()));
  }
  Mapping m;
  m.layout = Layout::hier_er;
  m.cfg = cfg;
  m.block_width = tile->w;
  m.block_height = tile->h;
  m.devices.resize(topo.device_count());
  m.groups.resize(static_cast<std::size_t>(cfg.dp));
  m.rings.resize(static_cast<std::size_t>(cfg.dp));
  for (int w = 0; w < topo.wafer_count(); ++w) {
    layout_er_region(topo, m, w, w + 1, *tile, w * dp_local);
  }
  assign_experts(topo, m, opts);
  return m;
}

Mapping make_mapping(Layout layout, const MeshTopology& topo, const ParallelismConfig& cfg,
                     const MappingOptions& opts) {
  switch (layout) {
    case Layout::baseline:
      return baseline_mapping(topo, cfg, opts);
    case Layout::er:
      return er_mapping(topo, cfg, opts);
    case Layout::hier_er:
      return hier_er_mapping(topo, cfg, opts);
  }
  throw ConfigError("unknown layout");
}

namespace {

Ftd make_ftd(const MeshTopology& topo, std::vector<DeviceIndex> members) {
  Ftd f;
  f.min_gx = f.min_y = std::numeric_limits<int>::max();
  f.max_gx = f.max_y = std::numeric_limits<int>::min();
  for (DeviceIndex d : members) {
    const auto c = topo.coord_of(d);
    const int gx = topo.global_x(c);
    f.min_gx = std::min(f.min_gx, gx);
    f.max_gx = std::max(f.max_gx, gx);
    f.min_y = std::min(f.min_y, c.y);
    f.max_y = std::max(f.max_y, c.y);
  }
  f.members = std::move(members);
  return f;
}

}  // namespace

std::vector<Ftd> compute_ftds(const MeshTopology& topo, const Mapping& mapping) {
  std::vector<Ftd> out;
  if (mapping.layout == Layout::hier_er) {
    const auto per = topo.devices_per_wafer();
    for (int w = 0; w < topo.wafer_count(); ++w) {
      std::vector<DeviceIndex> members(per);
      std::iota(members.begin(), members.end(), static_cast<DeviceIndex>(w * per));
      out.push_back(make_ftd(topo, std::move(members)));
    }
    return out;
  }
  const int tp = mapping.cfg.tp;
  for (int r = 0; r < tp; ++r) {
    std::vector<DeviceIndex> members;
    members.reserve(mapping.groups.size());
    for (const auto& g : mapping.groups) members.push_back(g[static_cast<std::size_t>(r)]);
    out.push_back(make_ftd(topo, std::move(members)));
  }
  return out;
}

std::vector<int> ftd_membership(const MeshTopology& topo, const std::vector<Ftd>& ftds) {
  std::vector<int> of(topo.device_count(), -1);
  for (std::size_t i = 0; i < ftds.size(); ++i) {
    for (DeviceIndex d : ftds[i].members) {
      if (of[d] != -1) {
        throw InvariantError(fmt::format("device {} belongs to FTDs {} and {}", d, of[d], i));
      }
      of[d] = static_cast<int>(i);
    }
  }
  return of;
}

double avg_hops(const MeshTopology& topo, const std::vector<Ftd>& ftds) {
  double total = 0.0;
  std::size_t members = 0;
  for (const auto& f : ftds) {
    const std::size_t k = f.members.size();
    if (k < 2) {
      members += k;
      continue;
    }
    for (DeviceIndex a : f.members) {
      double sum = 0.0;
      for (DeviceIndex b : f.members) {
        if (a != b) sum += manhattan_hops(topo, a, b);
      }
      total += sum / static_cast<double>(k - 1);
      ++members;
    }
  }
  return members == 0 ? 0.0 : total / static_cast<double>(members);
}

FtdOverlap ftd_intersections(const MeshTopology& topo, const std::vector<Ftd>& ftds) {
  FtdOverlap out;
  if (ftds.size() < 2) return out;
  std::vector<char> shared(topo.device_count(), 0);
  for (DeviceIndex d = 0; d < topo.device_count(); ++d) {
    std::size_t coverage = 0;
    for (const auto& f : ftds) coverage += f.region_contains(topo, d) ? 1 : 0;
    if (coverage >= 2) out.multiply_covered.push_back(d);
    if (coverage == ftds.size()) {
      shared[d] = 1;
      out.shared_devices.push_back(d);
    }
  }
  std::size_t directed = 0;
  for (const Link& l : topo.links()) directed += (shared[l.src] && shared[l.dst]) ? 1 : 0;
  out.shared_links = directed / 2;
  return out;
}

}  // namespace meshmoe
