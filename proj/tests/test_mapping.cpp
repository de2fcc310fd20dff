// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "meshmoe/error.hpp"
#include "meshmoe/mapping.hpp"

using namespace meshmoe;

namespace {

MeshTopology mesh(int wafers, int w, int h) { return build_mesh(wafers, w, h, 8e12, 9e12, 0); }

ParallelismConfig par(int dp, int tp) {
  ParallelismConfig c;
  c.dp = dp;
  c.tp = tp;
  return c;
}

// Every device in exactly one group at a rank matching its slot, and rings
// visiting each member once through single-hop steps when `adjacent`.
void check_mapping(const MeshTopology& t, const Mapping& m, bool adjacent_rings) {
  ASSERT_EQ(m.devices.size(), t.device_count());
  std::vector<int> seen(t.device_count(), 0);
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    ASSERT_EQ(static_cast<int>(m.groups[g].size()), m.cfg.tp);
    for (int r = 0; r < m.cfg.tp; ++r) {
      const DeviceIndex d = m.groups[g][static_cast<std::size_t>(r)];
      ++seen[d];
      EXPECT_EQ(m.group_of(d), static_cast<int>(g));
      EXPECT_EQ(m.ftd_slot(d), r);
    }
    auto ring = m.rings[g];
    auto members = m.groups[g];
    std::sort(ring.begin(), ring.end());
    std::sort(members.begin(), members.end());
    EXPECT_EQ(ring, members);
    if (adjacent_rings && m.rings[g].size() > 1) {
      const auto& rg = m.rings[g];
      for (std::size_t i = 0; i < rg.size(); ++i) {
        EXPECT_EQ(manhattan_hops(t, rg[i], rg[(i + 1) % rg.size()]), 1);
      }
    }
  }
  for (auto c : seen) EXPECT_EQ(c, 1);
}

void check_ftds_partition(const MeshTopology& t, const std::vector<Ftd>& ftds) {
  std::vector<int> seen(t.device_count(), 0);
  for (const auto& f : ftds)
    for (auto d : f.members) ++seen[d];
  for (auto c : seen) EXPECT_EQ(c, 1);
}

}  // namespace

TEST(GridCycle, VisitsEveryCellWithUnitSteps) {
  for (auto [w, h] : std::vector<std::pair<int, int>>{{2, 2}, {4, 2}, {2, 4}, {4, 4}, {3, 4}, {6, 6}}) {
    const auto c = grid_cycle(w, h);
    ASSERT_EQ(static_cast<int>(c.size()), w * h);
    EXPECT_EQ(c.front(), (std::pair{0, 0}));
    std::set<std::pair<int, int>> cells(c.begin(), c.end());
    EXPECT_EQ(cells.size(), c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& a = c[i];
      const auto& b = c[(i + 1) % c.size()];
      EXPECT_EQ(std::abs(a.first - b.first) + std::abs(a.second - b.second), 1) << w << "x" << h;
    }
  }
  EXPECT_EQ(grid_cycle(1, 1).size(), 1u);
  EXPECT_EQ(grid_cycle(1, 2).size(), 2u);
  EXPECT_THROW(grid_cycle(3, 3), ConfigError);
  EXPECT_THROW(grid_cycle(1, 4), ConfigError);
}

TEST(Mapping, LayoutNames) {
  EXPECT_EQ(parse_layout("er"), Layout::er);
  EXPECT_EQ(parse_layout("hier_er"), Layout::hier_er);
  EXPECT_EQ(parse_layout("baseline"), Layout::baseline);
  try {
    parse_layout("zigzag");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hier_er"), std::string::npos);
  }
}

TEST(Mapping, BaselineQuadrants) {
  const auto t = mesh(1, 4, 4);
  const auto m = baseline_mapping(t, par(4, 4));
  check_mapping(t, m, true);
  for (const auto& g : m.groups) {
    int minx = 9, maxx = -1, miny = 9, maxy = -1;
    for (auto d : g) {
      const auto c = t.coord_of(d);
      minx = std::min(minx, c.x), maxx = std::max(maxx, c.x);
      miny = std::min(miny, c.y), maxy = std::max(maxy, c.y);
    }
    EXPECT_EQ(maxx - minx, 1);
    EXPECT_EQ(maxy - miny, 1);
    EXPECT_EQ(minx % 2, 0);
    EXPECT_EQ(miny % 2, 0);
  }
}

TEST(Mapping, BaselineTrivialAndHalves) {
  const auto t1 = mesh(1, 1, 1);
  const auto m1 = baseline_mapping(t1, par(1, 1));
  EXPECT_EQ(m1.groups.size(), 1u);
  EXPECT_EQ(m1.groups[0], std::vector<DeviceIndex>{0});

  const auto t = mesh(1, 4, 4);
  const auto m = baseline_mapping(t, par(2, 8));
  check_mapping(t, m, true);
  EXPECT_EQ(m.block_width * m.block_height, 8);
  for (const auto& g : m.groups) {
    std::set<int> rows, cols;
    for (auto d : g) rows.insert(t.coord_of(d).y), cols.insert(t.coord_of(d).x);
    EXPECT_EQ(rows.size() * cols.size(), 8u);
  }
}

TEST(Mapping, ParallelismErrorsNameBothValues) {
  const auto t = mesh(1, 4, 4);
  try {
    baseline_mapping(t, par(3, 4));
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("16"), std::string::npos);
  }
  EXPECT_THROW(baseline_mapping(t, par(0, 16)), ConfigError);
  EXPECT_THROW(baseline_mapping(mesh(1, 3, 3), par(1, 9)), ConfigError);
}

TEST(Mapping, ErFormsDisjointTwoByTwoFtds) {
  const auto t = mesh(1, 4, 4);
  const auto m = er_mapping(t, par(4, 4));
  check_mapping(t, m, false);
  const auto ftds = compute_ftds(t, m);
  ASSERT_EQ(ftds.size(), 4u);
  check_ftds_partition(t, ftds);
  for (const auto& f : ftds) {
    EXPECT_EQ(f.members.size(), 4u);
    EXPECT_EQ(f.max_gx - f.min_gx, 1);
    EXPECT_EQ(f.max_y - f.min_y, 1);
  }
  // One member of each TP group per quadrant.
  for (const auto& f : ftds) {
    std::set<int> groups;
    for (auto d : f.members) groups.insert(m.group_of(d));
    EXPECT_EQ(groups.size(), 4u);
  }
  // Ring steps are two hops apart.
  for (const auto& r : m.rings) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_EQ(manhattan_hops(t, r[i], r[(i + 1) % r.size()]), 2);
    }
  }
}

TEST(Mapping, ErWithTpOneMatchesBaseline) {
  const auto t = mesh(1, 4, 4);
  const auto e = er_mapping(t, par(16, 1));
  const auto b = baseline_mapping(t, par(16, 1));
  const auto fe = compute_ftds(t, e);
  const auto fb = compute_ftds(t, b);
  EXPECT_EQ(fe.size(), 1u);
  EXPECT_EQ(fb.size(), 1u);
  for (DeviceIndex d = 0; d < 16; ++d) EXPECT_EQ(e.ftd_slot(d), b.ftd_slot(d));
}

TEST(Mapping, ErEightByEightTp16) {
  const auto t = mesh(1, 8, 8);
  const auto m = er_mapping(t, par(4, 16));
  check_mapping(t, m, false);
  const auto ftds = compute_ftds(t, m);
  // dp = 4, so an FTD holds four devices.
  ASSERT_EQ(ftds.size(), 16u);
  check_ftds_partition(t, ftds);
  EXPECT_TRUE(ftd_intersections(t, ftds).shared_devices.empty());
  for (const auto& f : ftds) {
    EXPECT_EQ((f.max_gx - f.min_gx + 1) * (f.max_y - f.min_y + 1), 4);
  }
}

TEST(Mapping, ErUnsupportedShapesListed) {
  try {
    er_mapping(mesh(1, 4, 4), par(8, 2));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("supported"), std::string::npos);
  }
  EXPECT_THROW(er_mapping(mesh(1, 6, 4), par(6, 4)), ConfigError);
}

TEST(Mapping, HierErWaferFtds) {
  const auto t = mesh(2, 4, 4);
  const auto m = hier_er_mapping(t, par(4, 8));
  check_mapping(t, m, false);
  const auto ftds = compute_ftds(t, m);
  ASSERT_EQ(ftds.size(), 2u);
  check_ftds_partition(t, ftds);
  for (const auto& f : ftds) {
    EXPECT_EQ(f.members.size(), 16u);
    std::set<int> wafers;
    for (auto d : f.members) wafers.insert(t.coord_of(d).wafer);
    EXPECT_EQ(wafers.size(), 1u);
  }
  EXPECT_TRUE(ftd_intersections(t, ftds).shared_devices.empty());
}

TEST(Mapping, HierErFourWafers) {
  const auto t = mesh(4, 8, 8);
  const auto m = hier_er_mapping(t, par(16, 16));
  const auto ftds = compute_ftds(t, m);
  ASSERT_EQ(ftds.size(), 4u);
  check_ftds_partition(t, ftds);
}

TEST(Mapping, HierErDegenerateTp1) {
  // With tp = 1 every device is its own TP group, so covering all groups of a
  // wafer takes the whole wafer.
  const auto t = mesh(2, 4, 4);
  const auto ftds = compute_ftds(t, hier_er_mapping(t, par(32, 1)));
  ASSERT_EQ(ftds.size(), 2u);
  EXPECT_EQ(ftds[0].members.size(), 16u);
  EXPECT_NEAR(avg_hops(t, ftds), 8.0 / 3.0, 1e-12);
}

TEST(Mapping, HierErNeedsSeveralWafers) {
  EXPECT_THROW(hier_er_mapping(mesh(1, 4, 4), par(4, 4)), ConfigError);
}

TEST(Mapping, BaselineFtdsSpanThreeByThree) {
  const auto t = mesh(1, 4, 4);
  const auto m = baseline_mapping(t, par(4, 4));
  const auto ftds = compute_ftds(t, m);
  ASSERT_EQ(ftds.size(), 4u);
  std::set<DeviceIndex> expected{t.index_of({0, 1, 1}), t.index_of({0, 1, 3}),
                                 t.index_of({0, 3, 1}), t.index_of({0, 3, 3})};
  bool found = false;
  for (const auto& f : ftds) {
    EXPECT_EQ(f.max_gx - f.min_gx, 2);
    EXPECT_EQ(f.max_y - f.min_y, 2);
    found |= std::set<DeviceIndex>(f.members.begin(), f.members.end()) == expected;
  }
  EXPECT_TRUE(found);
}

TEST(Mapping, AverageHops) {
  const auto t = mesh(1, 4, 4);
  const auto b = compute_ftds(t, baseline_mapping(t, par(4, 4)));
  const auto e = compute_ftds(t, er_mapping(t, par(4, 4)));
  EXPECT_NEAR(avg_hops(t, b), 8.0 / 3.0, 1e-12);
  EXPECT_NEAR(avg_hops(t, e), 4.0 / 3.0, 1e-12);
  const auto s = compute_ftds(t, baseline_mapping(t, par(16, 1)));
  // tp = 1: one FTD per slot containing all devices, the whole mesh.
  EXPECT_GT(avg_hops(t, s), 0.0);
}

TEST(Mapping, SingletonFtdsHaveZeroHops) {
  const auto t = mesh(1, 2, 2);
  const auto f = compute_ftds(t, baseline_mapping(t, par(1, 4)));
  ASSERT_EQ(f.size(), 4u);
  EXPECT_DOUBLE_EQ(avg_hops(t, f), 0.0);
  EXPECT_TRUE(ftd_intersections(t, f).shared_devices.empty());
}

TEST(Mapping, Intersections) {
  const auto t = mesh(1, 4, 4);
  const auto b = ftd_intersections(t, compute_ftds(t, baseline_mapping(t, par(4, 4))));
  std::vector<DeviceIndex> centre{t.index_of({0, 1, 1}), t.index_of({0, 2, 1}),
                                  t.index_of({0, 1, 2}), t.index_of({0, 2, 2})};
  std::sort(centre.begin(), centre.end());
  auto shared = b.shared_devices;
  std::sort(shared.begin(), shared.end());
  EXPECT_EQ(shared, centre);
  EXPECT_EQ(b.shared_links, 4u);
  EXPECT_EQ(b.multiply_covered.size(), 12u);

  const auto e = ftd_intersections(t, compute_ftds(t, er_mapping(t, par(4, 4))));
  EXPECT_TRUE(e.shared_devices.empty());
  EXPECT_EQ(e.shared_links, 0u);
  EXPECT_TRUE(e.multiply_covered.empty());

  const auto single = ftd_intersections(t, compute_ftds(t, er_mapping(t, par(16, 1))));
  EXPECT_TRUE(single.shared_devices.empty());
}

TEST(Mapping, ExpertsRoundRobinWithSlots) {
  const auto t = mesh(1, 4, 4);
  MappingOptions o;
  o.experts_total = 128;
  o.shadow_slots = 2;
  const auto m = er_mapping(t, par(4, 4), o);
  ASSERT_EQ(m.expert_home.size(), 128u);
  for (const auto& d : m.devices) {
    EXPECT_EQ(d.native_experts.size(), 8u);
    EXPECT_EQ(d.shadow_slots, 2);
  }
  for (int e = 0; e < 128; ++e) {
    const auto& natives = m.devices[m.expert_home[static_cast<std::size_t>(e)]].native_experts;
    EXPECT_NE(std::find(natives.begin(), natives.end(), e), natives.end());
  }
}
