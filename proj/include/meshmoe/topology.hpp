// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace meshmoe {

using DeviceIndex = std::uint32_t;
using LinkIndex = std::uint32_t;

inline constexpr LinkIndex kNoLink = std::numeric_limits<LinkIndex>::max();

/// Position of a device: wafer in the chain, then column/row inside the wafer.
struct DeviceCoord {
  int wafer = 0;
  int x = 0;
  int y = 0;

  auto operator<=>(const DeviceCoord&) const = default;
};

std::string to_string(const DeviceCoord& c);

enum class LinkKind { intra_wafer, inter_wafer };

const char* to_string(LinkKind kind);

/// One direction of a physical mesh link.
struct Link {
  DeviceIndex src = 0;
  DeviceIndex dst = 0;
  LinkKind kind = LinkKind::intra_wafer;
  double bandwidth = 0.0;     // bytes/s
  double link_latency = 0.0;  // s
};

struct DeviceParams {
  double compute_flops = 2250e12;  // flops/s
  double mem_bw = 8e12;            // bytes/s
  double mem_cap = 180e9;          // bytes
};

/// Unit steps in the global grid, in the order routes and neighbor scans use.
enum class Direction : int { east = 0, west = 1, north = 2, south = 3 };

/// A chain of `wafer_count` W x H meshes. Wafer s's east edge (x = W-1) is
/// wired to wafer s+1's west edge (x = 0) row by row, so the whole system is a
/// (wafer_count * W) x H grid whose boundary-crossing links are inter-wafer.
///
/// Immutable once built; share freely across threads.
class MeshTopology {
 public:
  MeshTopology(int wafer_count, int width, int height, double intra_bw, double inter_bw,
               double link_latency, DeviceParams device);

  int wafer_count() const { return wafer_count_; }
  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t device_count() const {
    return static_cast<std::size_t>(wafer_count_) * width_ * height_;
  }
  std::size_t devices_per_wafer() const { return static_cast<std::size_t>(width_) * height_; }
  const DeviceParams& device() const { return device_; }
  double intra_bandwidth() const { return intra_bw_; }
  double inter_bandwidth() const { return inter_bw_; }
  double link_latency() const { return link_latency_; }

  bool contains(const DeviceCoord& c) const;
  /// Throws DomainError for coordinates outside the system.
  DeviceIndex index_of(const DeviceCoord& c) const;
  DeviceCoord coord_of(DeviceIndex d) const;
  /// Column in the chained global grid.
  int global_x(const DeviceCoord& c) const { return c.wafer * width_ + c.x; }

  std::span<const Link> links() const { return links_; }
  const Link& link(LinkIndex l) const { return links_.at(l); }
  /// Outgoing link of `d` in direction `dir`, or kNoLink at the system edge.
  LinkIndex out_link(DeviceIndex d, Direction dir) const {
    return out_[d][static_cast<int>(dir)];
  }
  std::optional<LinkIndex> find_link(DeviceIndex a, DeviceIndex b) const;
  LinkIndex reverse(LinkIndex l) const;

 private:
  int wafer_count_;
  int width_;
  int height_;
  double intra_bw_;
  double inter_bw_;
  double link_latency_;
  DeviceParams device_;
  std::vector<Link> links_;
  std::vector<std::array<LinkIndex, 4>> out_;
};

/// Validates parameters and builds the chained mesh. Throws ConfigError on
/// non-positive dimensions or bandwidths, or a negative link latency.
MeshTopology build_mesh(int wafer_count, int width, int height, double intra_bw,
                        double inter_bw, double link_latency, DeviceParams device = {});

/// Hop count of the dimension-ordered route between two devices. Crossing a
/// wafer boundary costs exactly one hop.
int manhattan_hops(const MeshTopology& topo, const DeviceCoord& a, const DeviceCoord& b);
int manhattan_hops(const MeshTopology& topo, DeviceIndex a, DeviceIndex b);

/// X-then-Y route in the global grid; wafer crossings therefore happen on the
/// source row. Empty when a == b.
std::vector<LinkIndex> route_xy(const MeshTopology& topo, const DeviceCoord& a,
                                const DeviceCoord& b);
std::vector<LinkIndex> route_xy(const MeshTopology& topo, DeviceIndex a, DeviceIndex b);

/// Allocation-free variant of route_xy; calls fn(LinkIndex) for every hop in order.
template <typename Fn>
void for_each_route_link(const MeshTopology& topo, DeviceIndex a, DeviceIndex b, Fn&& fn) {
  const DeviceCoord ca = topo.coord_of(a);
  const DeviceCoord cb = topo.coord_of(b);
  int gx = topo.global_x(ca);
  const int tx = topo.global_x(cb);
  int y = ca.y;
  DeviceIndex cur = a;
  while (gx != tx) {
    const Direction dir = gx < tx ? Direction::east : Direction::west;
    const LinkIndex l = topo.out_link(cur, dir);
    fn(l);
    cur = topo.link(l).dst;
    gx += gx < tx ? 1 : -1;
  }
  while (y != cb.y) {
    const Direction dir = y < cb.y ? Direction::north : Direction::south;
    const LinkIndex l = topo.out_link(cur, dir);
    fn(l);
    cur = topo.link(l).dst;
    y += y < cb.y ? 1 : -1;
  }
}

/// (volume / bandwidth + link_latency) * hops. Throws DomainError when
/// bandwidth <= 0 or hops < 0.
double transfer_latency(double volume, double bandwidth, double link_latency, int hops);

/// Debug dump: devices plus a directed adjacency list with link parameters.
nlohmann::json adjacency_json(const MeshTopology& topo);

}  // namespace meshmoe
