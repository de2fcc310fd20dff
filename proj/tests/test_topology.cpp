// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "meshmoe/error.hpp"
#include "meshmoe/topology.hpp"

using namespace meshmoe;

namespace {

MeshTopology mesh(int wafers, int w, int h, double lat = 0.0) {
  return build_mesh(wafers, w, h, 8e12, 9e12, lat);
}

int count_kind(const MeshTopology& t, LinkKind k) {
  int n = 0;
  for (const auto& l : t.links()) n += l.kind == k;
  return n;
}

}  // namespace

TEST(Topology, FourByFourHas48DirectedLinks) {
  const auto t = mesh(1, 4, 4);
  EXPECT_EQ(t.device_count(), 16u);
  EXPECT_EQ(t.links().size(), 48u);
  EXPECT_EQ(count_kind(t, LinkKind::inter_wafer), 0);
  for (const auto& l : t.links()) EXPECT_DOUBLE_EQ(l.bandwidth, 8e12);
}

TEST(Topology, SingleDeviceHasNoLinks) {
  const auto t = mesh(1, 1, 1);
  EXPECT_EQ(t.device_count(), 1u);
  EXPECT_TRUE(t.links().empty());
}

TEST(Topology, TwoWafersOfTwoByTwo) {
  const auto t = mesh(2, 2, 2);
  EXPECT_EQ(t.device_count(), 8u);
  // One border pair per row, two directions each.
  EXPECT_EQ(count_kind(t, LinkKind::inter_wafer), 4);
  EXPECT_EQ(count_kind(t, LinkKind::intra_wafer), 16);
  for (const auto& l : t.links()) {
    if (l.kind == LinkKind::inter_wafer) {
      EXPECT_DOUBLE_EQ(l.bandwidth, 9e12);
      EXPECT_NE(t.coord_of(l.src).wafer, t.coord_of(l.dst).wafer);
    }
  }
}

TEST(Topology, InvalidParametersRejected) {
  EXPECT_THROW(mesh(0, 4, 4), ConfigError);
  EXPECT_THROW(mesh(1, 0, 4), ConfigError);
  EXPECT_THROW(mesh(1, 4, -1), ConfigError);
  EXPECT_THROW(build_mesh(1, 4, 4, 0.0, 9e12, 0), ConfigError);
  EXPECT_THROW(build_mesh(1, 4, 4, 8e12, -1.0, 0), ConfigError);
  EXPECT_THROW(build_mesh(1, 4, 4, 8e12, 9e12, -1e-6), ConfigError);
}

TEST(Topology, ReverseLinksPair) {
  const auto t = mesh(3, 3, 2);
  for (LinkIndex l = 0; l < t.links().size(); ++l) {
    const auto r = t.reverse(l);
    EXPECT_EQ(t.link(r).src, t.link(l).dst);
    EXPECT_EQ(t.link(r).dst, t.link(l).src);
    EXPECT_EQ(t.reverse(r), l);
  }
}

TEST(Topology, CoordinateRoundTrip) {
  const auto t = mesh(2, 3, 4);
  for (DeviceIndex d = 0; d < t.device_count(); ++d) EXPECT_EQ(t.index_of(t.coord_of(d)), d);
  EXPECT_THROW(t.index_of({2, 0, 0}), DomainError);
  EXPECT_THROW(t.index_of({0, 3, 0}), DomainError);
  EXPECT_THROW(t.index_of({0, 0, -1}), DomainError);
}

TEST(Topology, ManhattanHops) {
  const auto t = mesh(2, 4, 4);
  EXPECT_EQ(manhattan_hops(t, DeviceCoord{0, 1, 1}, DeviceCoord{0, 1, 1}), 0);
  EXPECT_EQ(manhattan_hops(t, DeviceCoord{0, 1, 1}, DeviceCoord{0, 3, 3}), 4);
  EXPECT_EQ(manhattan_hops(t, DeviceCoord{0, 3, 2}, DeviceCoord{1, 0, 2}), 1);
  EXPECT_EQ(manhattan_hops(t, DeviceCoord{0, 0, 0}, DeviceCoord{1, 3, 3}), 10);
  EXPECT_THROW(manhattan_hops(t, DeviceCoord{0, 4, 0}, DeviceCoord{0, 0, 0}), DomainError);
}

TEST(Topology, RouteXyOrder) {
  const auto t = mesh(1, 4, 4);
  EXPECT_TRUE(route_xy(t, DeviceCoord{0, 2, 2}, DeviceCoord{0, 2, 2}).empty());

  const auto r = route_xy(t, DeviceCoord{0, 0, 0}, DeviceCoord{0, 2, 1});
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(t.coord_of(t.link(r[0]).src), (DeviceCoord{0, 0, 0}));
  EXPECT_EQ(t.coord_of(t.link(r[0]).dst), (DeviceCoord{0, 1, 0}));
  EXPECT_EQ(t.coord_of(t.link(r[1]).dst), (DeviceCoord{0, 2, 0}));
  EXPECT_EQ(t.coord_of(t.link(r[2]).dst), (DeviceCoord{0, 2, 1}));

  const auto v = route_xy(t, DeviceCoord{0, 0, 0}, DeviceCoord{0, 0, 3});
  ASSERT_EQ(v.size(), 3u);
  for (auto l : v) EXPECT_EQ(t.coord_of(t.link(l).src).x, 0);
}

TEST(Topology, RoutesAreContiguousAndMatchHops) {
  const auto t = mesh(3, 3, 3);
  std::vector<LinkIndex> via_callback;
  for (DeviceIndex a = 0; a < t.device_count(); ++a) {
    for (DeviceIndex b = 0; b < t.device_count(); ++b) {
      const auto r = route_xy(t, a, b);
      ASSERT_EQ(static_cast<int>(r.size()), manhattan_hops(t, a, b));
      DeviceIndex cur = a;
      std::set<LinkIndex> seen;
      for (auto l : r) {
        EXPECT_EQ(t.link(l).src, cur);
        EXPECT_TRUE(seen.insert(l).second);
        cur = t.link(l).dst;
      }
      EXPECT_EQ(cur, b);
      via_callback.clear();
      for_each_route_link(t, a, b, [&](LinkIndex l) { via_callback.push_back(l); });
      EXPECT_EQ(via_callback, r);
    }
  }
}

TEST(Topology, TransferLatency) {
  EXPECT_DOUBLE_EQ(transfer_latency(8e6, 8e12, 0.5e-6, 2), 3.0e-6);
  EXPECT_DOUBLE_EQ(transfer_latency(123.0, 1.0, 7.0, 0), 0.0);
  EXPECT_DOUBLE_EQ(transfer_latency(1e6, 1e12, 0.0, 3), 3e-6);
  EXPECT_THROW(transfer_latency(1.0, 0.0, 0.0, 1), DomainError);
  EXPECT_THROW(transfer_latency(1.0, 1.0, 0.0, -1), DomainError);
}

TEST(Topology, AdjacencyDump) {
  const auto t = mesh(2, 2, 2);
  const auto j = adjacency_json(t);
  EXPECT_EQ(j["devices"].size(), 8u);
  ASSERT_EQ(j["links"].size(), t.links().size());
  int inter = 0;
  for (const auto& l : j["links"]) inter += l["kind"] == "inter_wafer";
  EXPECT_EQ(inter, 4);
}
