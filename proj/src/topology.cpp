// SPDX-License-Identifier: Apache-2.0

#include "meshmoe/topology.hpp"

#include <cstdlib>

#include <fmt/format.h>

#include "meshmoe/error.hpp"

namespace meshmoe {

std::string to_string(const DeviceCoord& c) {
  return fmt::format("w{}:({},{})", c.wafer, c.x, c.y);
}

const char* to_string(LinkKind kind) {
  return kind == LinkKind::intra_wafer ? "intra_wafer" : "inter_wafer";
}

MeshTopology::MeshTopology(int wafer_count, int width, int height, double intra_bw,
                           double inter_bw, double link_latency, DeviceParams device)
    : wafer_count_(wafer_count),
      width_(width),
      height_(height),
      intra_bw_(intra_bw),
      inter_bw_(inter_bw),
      link_latency_(link_latency),
      device_(device) {
  const std::size_t n = device_count();
  out_.assign(n, {kNoLink, kNoLink, kNoLink, kNoLink});

  auto add_pair = [&](DeviceIndex a, DeviceIndex b, Direction ab, Direction ba, LinkKind kind) {
    const double bw = kind == LinkKind::intra_wafer ? intra_bw_ : inter_bw_;
    out_[a][static_cast<int>(ab)] = static_cast<LinkIndex>(links_.size());
    links_.push_back(Link{a, b, kind, bw, link_latency_});
    out_[b][static_cast<int>(ba)] = static_cast<LinkIndex>(links_.size());
    links_.push_back(Link{b, a, kind, bw, link_latency_});
  };

  const int global_width = wafer_count_ * width_;
  for (int y = 0; y < height_; ++y) {
    for (int gx = 0; gx < global_width; ++gx) {
      const DeviceCoord here{gx / width_, gx % width_, y};
      const DeviceIndex a = index_of(here);
      if (gx + 1 < global_width) {
        const DeviceCoord east{(gx + 1) / width_, (gx + 1) % width_, y};
        const LinkKind kind =
            east.wafer == here.wafer ? LinkKind::intra_wafer : LinkKind::inter_wafer;
        add_pair(a, index_of(east), Direction::east, Direction::west, kind);
      }
      if (y + 1 < height_) {
        add_pair(a, index_of({here.wafer, here.x, y + 1}), Direction::north, Direction::south,
                 LinkKind::intra_wafer);
      }
    }
  }
}

bool MeshTopology::contains(const DeviceCoord& c) const {
  return c.wafer >= 0 && c.wafer < wafer_count_ && c.x >= 0 && c.x < width_ && c.y >= 0 &&
         c.y < height_;
}

DeviceIndex MeshTopology::index_of(const DeviceCoord& c) const {
  if (!contains(c)) {
    throw DomainError(fmt::format("device {} outside {}x{}x{} system", to_string(c),
                                  wafer_count_, width_, height_));
  }
  return static_cast<DeviceIndex>((static_cast<std::size_t>(c.wafer) * height_ + c.y) * width_ +
                                  c.x);
}

DeviceCoord MeshTopology::coord_of(DeviceIndex d) const {
  if (d >= device_count()) {
    throw DomainError(fmt::format("device index {} out of range", d));
  }
  const auto per_wafer = devices_per_wafer();
  const int wafer = static_cast<int>(d / per_wafer);
  const auto rem = d % per_wafer;
  return {wafer, static_cast<int>(rem % width_), static_cast<int>(rem / width_)};
}

std::optional<LinkIndex> MeshTopology::find_link(DeviceIndex a, DeviceIndex b) const {
  if (a >= out_.size()) return std::nullopt;
  for (LinkIndex l : out_[a]) {
    if (l != kNoLink && links_[l].dst == b) return l;
  }
  return std::nullopt;
}

LinkIndex MeshTopology::reverse(LinkIndex l) const {
  // Pairs are appended back to back.
  return l ^ 1U;
}

MeshTopology build_mesh(int wafer_count, int width, int height, double intra_bw,
                        double inter_bw, double link_latency, DeviceParams device) {
  std::string problems;
  if (wafer_count < 1) problems += fmt::format(" wafer_count={}", wafer_count);
  if (width < 1) problems += fmt::format(" width={}", width);
  if (height < 1) problems += fmt::format(" height={}", height);
  if (!(intra_bw > 0)) problems += fmt::format(" intra_bw={}", intra_bw);
  if (!(inter_bw > 0)) problems += fmt::format(" inter_bw={}", inter_bw);
  if (!(link_latency >= 0)) problems += fmt::format(" link_latency={}", link_latency);
  if (!(device.compute_flops > 0)) problems += fmt::format(" compute_flops={}", device.compute_flops);
  if (!(device.mem_bw > 0)) problems += fmt::format(" mem_bw={}", device.mem_bw);
  if (!problems.empty()) {
    throw ConfigError("invalid mesh parameters:" + problems);
  }
  return MeshTopology(wafer_count, width, height, intra_bw, inter_bw, link_latency, device);
}

int manhattan_hops(const MeshTopology& topo, const DeviceCoord& a, const DeviceCoord& b) {
  if (!topo.contains(a) || !topo.contains(b)) {
    throw DomainError(fmt::format("invalid coordinate in hop query {} -> {}", to_string(a),
                                  to_string(b)));
  }
  return std::abs(topo.global_x(a) - topo.global_x(b)) + std::abs(a.y - b.y);
}

int manhattan_hops(const MeshTopology& topo, DeviceIndex a, DeviceIndex b) {
  return manhattan_hops(topo, topo.coord_of(a), topo.coord_of(b));
}

std::vector<LinkIndex> route_xy(const MeshTopology& topo, DeviceIndex a, DeviceIndex b) {
  std::vector<LinkIndex> path;
  for_each_route_link(topo, a, b, [&](LinkIndex l) { path.push_back(l); });
  return path;
}

std::vector<LinkIndex> route_xy(const MeshTopology& topo, const DeviceCoord& a,
                                const DeviceCoord& b) {
  return route_xy(topo, topo.index_of(a), topo.index_of(b));
}

double transfer_latency(double volume, double bandwidth, double link_latency, int hops) {
  if (!(bandwidth > 0)) {
    throw DomainError(fmt::format("bandwidth must be positive, got {}", bandwidth));
  }
  if (hops < 0) {
    throw DomainError(fmt::format("hop count must be non-negative, got {}", hops));
  }
  return (volume / bandwidth + link_latency) * hops;
}

nlohmann::json adjacency_json(const MeshTopology& topo) {
  nlohmann::json out;
  out["wafers"] = topo.wafer_count();
  out["width"] = topo.width();
  out["height"] = topo.height();
  nlohmann::json devices = nlohmann::json::array();
  for (DeviceIndex d = 0; d < topo.device_count(); ++d) {
    const auto c = topo.coord_of(d);
    devices.push_back({{"index", d}, {"wafer", c.wafer}, {"x", c.x}, {"y", c.y}});
  }
  out["devices"] = std::move(devices);
  nlohmann::json links = nlohmann::json::array();
  for (const Link& l : topo.links()) {
    links.push_back({{"src", l.src},
                     {"dst", l.dst},
                     {"kind", to_string(l.kind)},
                     {"bandwidth", l.bandwidth},
                     {"link_latency", l.link_latency}});
  }
  out["links"] = std::move(links);
  return out;
}

}  // namespace meshmoe
