#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "fd_check.hpp"
#include "tars/od_stub.hpp"
#include "tars/optim.hpp"
#include "tars/synthworld.hpp"

using namespace tars;

namespace {

OdStubConfig small_config() {
  OdStubConfig c;
  c.base_grid = GridSpec{Vec2(0.0, -4.0), 1.0, 8, 8};
  c.pillar_channels = 4;
  c.map_channels = 6;
  c.levels = 3;
  return c;
}

PointCloud cloud(std::vector<Vec3> pos) {
  PointCloud q;
  q.positions = std::move(pos);
  for (std::size_t i = 0; i < q.positions.size(); ++i) {
    q.rrv.push_back(0.3 * static_cast<double>(i) - 1.0);
    q.rcs.push_back(2.0 - 0.5 * static_cast<double>(i));
  }
  return q;
}

}  // namespace

TEST(OdStub, LevelGridsHalve) {
  const OdStub stub(OdStubConfig{});
  const auto grids = stub.level_grids();
  ASSERT_EQ(grids.size(), 3u);
  EXPECT_EQ(grids[0].height, 32);
  EXPECT_EQ(grids[1].height, 16);
  EXPECT_EQ(grids[2].width, 8);
  EXPECT_EQ(grids[2].cell_size, 4.0);
  for (const auto& g : grids) EXPECT_EQ(g.origin, Vec2(0.0, -16.0));
}

TEST(OdStub, UntrainedPyramidShapesAndFiniteness) {
  const OdStub stub(OdStubConfig{});
  ParamStore p;
  stub.init_params(p, 1);
  const auto seq = simulate_sequence(ScenarioConfig{});
  const BEVPyramid pyr = stub.pyramid(p, seq.frames[0].cloud);
  ASSERT_EQ(pyr.levels.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    const auto& l = pyr.levels[i];
    EXPECT_EQ(l.level, 2 + i);
    EXPECT_EQ(l.map.rows, l.grid.cells());
    EXPECT_EQ(l.map.cols, 32);
    for (double v : l.map.data) EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(pyr.at(3).grid.height, 16);
  EXPECT_THROW(pyr.at(5), std::out_of_range);
}

TEST(OdStub, EmptyFrameGivesZeroPyramid) {
  const OdStub stub(small_config());
  ParamStore p;
  stub.init_params(p, 2);
  const BEVPyramid pyr = stub.pyramid(p, cloud({Vec3(-50, 0, 0), Vec3(3, 40, 0)}));
  for (const auto& l : pyr.levels)
    for (double v : l.map.data) EXPECT_EQ(v, 0.0);
}

TEST(OdStub, PillarFeaturesSingletonAndEmptyCells) {
  const OdStubConfig c = small_config();
  const OdStub stub(c);
  ParamStore p;
  stub.init_params(p, 3);
  const PointCloud q = cloud({Vec3(0.25, -3.5, 0.4), Vec3(5.5, 1.75, -0.2)});
  ad::Graph g;
  const ad::Tensor f = stub.pillar_features(g, p, q).value();
  ASSERT_EQ(f.rows, 64);
  const std::vector<int> cells = voxelize_2d(q.positions, c.base_grid);
  // one point per pillar: the pillar holds that point's MLP feature
  const blocks::Mlp mlp{"od.pillar", {5, c.pillar_channels, c.pillar_channels}};
  for (int i = 0; i < 2; ++i) {
    const int cell = cells[i];
    const Vec2 ctr = c.base_grid.cell_center(cell / c.base_grid.width, cell % c.base_grid.width);
    const ad::Tensor raw = ad::Tensor::from(1, 5, {q.positions[i].x() - ctr.x(), q.positions[i].y() - ctr.y(),
                                                   q.positions[i].z(), q.rrv[i], q.rcs[i]});
    ad::Graph g2;
    const ad::Tensor one = mlp(g2, p, g2.constant(raw)).value();
    for (int k = 0; k < c.pillar_channels; ++k) EXPECT_NEAR(f(cell, k), one(0, k), 1e-15);
  }
  for (int cell = 0; cell < 64; ++cell) {
    if (cell == cells[0] || cell == cells[1]) continue;
    for (int k = 0; k < c.pillar_channels; ++k) EXPECT_EQ(f(cell, k), 0.0);
  }
}

TEST(OdStub, PillarPoolingIsPermutationInvariant) {
  const OdStub stub(small_config());
  ParamStore p;
  stub.init_params(p, 4);
  std::vector<Vec3> pos{Vec3(1.1, 0.2, 0), Vec3(1.4, 0.6, 0.3), Vec3(1.8, 0.1, -0.1), Vec3(6.2, -2.7, 0.5)};
  PointCloud a = cloud(pos);
  PointCloud b;
  for (int i : {2, 3, 0, 1}) {
    b.positions.push_back(a.positions[i]);
    b.rrv.push_back(a.rrv[i]);
    b.rcs.push_back(a.rcs[i]);
  }
  ad::Graph g;
  const ad::Tensor fa = stub.pillar_features(g, p, a).value();
  const ad::Tensor fb = stub.pillar_features(g, p, b).value();
  EXPECT_EQ(fa.data, fb.data);
  EXPECT_EQ(stub.pyramid(p, a).levels[2].map.data, stub.pyramid(p, b).levels[2].map.data);
}

TEST(OdStub, CellLabelsMajorityClass) {
  const GridSpec grid{Vec2(0, 0), 1.0, 2, 2};
  const PointCloud q = cloud({Vec3(0.5, 0.5, 0), Vec3(0.6, 0.5, 0), Vec3(0.7, 0.5, 0), Vec3(1.5, 1.5, 0),
                              Vec3(0.5, 1.5, 0)});
  const std::vector<std::uint8_t> cls{2, 1, 2, 4, 0};
  const CellLabels l = cell_labels(q, cls, grid);
  EXPECT_EQ(l.occupied, (std::vector<std::uint8_t>{1, 0, 0, 1}));
  EXPECT_EQ(l.cls, (std::vector<std::uint8_t>{2, 0, 0, 4}));
  EXPECT_THROW(cell_labels(q, std::vector<std::uint8_t>{1}, grid), ShapeError);
}

TEST(OdStub, ProxyLossGradientsMatchFiniteDifferences) {
  const OdStub stub(small_config());
  ParamStore p;
  stub.init_params(p, 5);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ux(0.0, 8.0), uy(-4.0, 4.0);
  std::vector<Vec3> pos;
  for (int i = 0; i < 10; ++i) pos.push_back(Vec3(ux(rng), uy(rng), 0.1 * i));
  const PointCloud q = cloud(pos);
  std::vector<std::uint8_t> cls;
  for (int i = 0; i < 10; ++i) cls.push_back(static_cast<std::uint8_t>(i % 5));
  const auto r = tars::testing::check_params(
      [&](ad::Graph& g, const ParamStore& ps) { return stub.proxy_loss(g, ps, q, cls); }, p);
  EXPECT_GT(r.checked, 100);
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST(OdStub, ProxyTrainingDecreasesAndFreezes) {
  const OdStub stub(OdStubConfig{});
  ParamStore p;
  stub.init_params(p, 6);
  std::vector<PointCloud> clouds;
  std::vector<std::vector<std::uint8_t>> ids;
  const ScenarioConfig base;
  for (int i = 0; i < 16; ++i) {
    const auto seq = simulate_sequence(sequence_config(base, i));
    clouds.push_back(seq.frames[0].cloud);
    ids.push_back(seq.frames[0].class_id);
  }
  const OdTrainResult r = train_od_proxy(stub, p, clouds, ids, 200, 1e-3);
  ASSERT_EQ(r.losses.size(), 200u);
  // window means over one pass of the 16 scenes at each end
  const double first = std::accumulate(r.losses.begin(), r.losses.begin() + 16, 0.0) / 16;
  const double last = std::accumulate(r.losses.end() - 16, r.losses.end(), 0.0) / 16;
  EXPECT_LT(last, 0.5 * first);
  for (const auto& e : p.entries()) EXPECT_TRUE(e.frozen) << e.name;

  // a later optimizer step leaves every frozen value bit-identical
  const auto before = p.hash();
  ad::Graph g;
  ad::Var loss = stub.proxy_loss(g, p, clouds[0], ids[0]);
  g.backward(loss);
  p.zero_grad();
  g.accumulate_param_grads(p);
  for (const auto& e : p.entries())
    for (double v : e.grad.data) EXPECT_EQ(v, 0.0);
  Optimizer opt(OptimizerConfig{});
  opt.step(p);
  EXPECT_EQ(p.hash(), before);
}

TEST(OdStub, InvalidConfigThrows) {
  OdStubConfig c;
  c.levels = 0;
  EXPECT_THROW(OdStub{c}, std::invalid_argument);
}
