#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tars/geometry.hpp"

using namespace tars;

namespace {

std::vector<Vec3> random_points(int n, unsigned seed, double scale = 10.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) out.emplace_back(u(rng), u(rng), u(rng));
  return out;
}

// Brute-force oracle: stable sort of all target indices by distance.
std::vector<int> knn_oracle(const Vec3& q, const std::vector<Vec3>& t, int k) {
  std::vector<int> idx(t.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return (t[a] - q).squaredNorm() < (t[b] - q).squaredNorm(); });
  idx.resize(k);
  return idx;
}

SE3Transform random_transform(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  const Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return SE3Transform(q.normalized().toRotationMatrix(), Vec3(n(rng), n(rng), n(rng)));
}

}  // namespace

TEST(Knn, NearestByInspection) {
  const std::vector<Vec3> q{Vec3::Zero()};
  const std::vector<Vec3> t{Vec3(1, 0, 0), Vec3(2, 0, 0)};
  const Neighbors nb = knn_points(q, t, 1);
  EXPECT_EQ(nb.at(0, 0), 0);
}

TEST(Knn, CoincidentQueryReturnsThatPoint) {
  const auto t = random_points(20, 3);
  const std::vector<Vec3> q{t[7]};
  EXPECT_EQ(knn_points(q, t, 1).at(0, 0), 7);
}

TEST(Knn, TiesBreakByLowerIndex) {
  const std::vector<Vec3> t{Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 1, 0)};
  const std::vector<Vec3> q{Vec3::Zero()};
  const Neighbors nb = knn_points(q, t, 3);
  EXPECT_EQ(nb.at(0, 0), 0);
  EXPECT_EQ(nb.at(0, 1), 1);
  EXPECT_EQ(nb.at(0, 2), 2);
}

TEST(Knn, TooManyNeighboursThrows) {
  const auto t = random_points(4, 1);
  EXPECT_THROW(knn_points(t, t, 5), SizeError);
}

TEST(Knn, MatchesBruteForceOracle) {
  for (int n : {1, 7, 50, 200}) {
    const auto t = random_points(n, 10 + n);
    const auto q = random_points(30, 20 + n);
    for (int k : {1, 5, 16}) {
      if (k > n) continue;
      const Neighbors nb = knn_points(q, t, k);
      ASSERT_EQ(nb.rows(), 30);
      for (int i = 0; i < 30; ++i) {
        const auto oracle = knn_oracle(q[i], t, k);
        for (int j = 0; j < k; ++j) EXPECT_EQ(nb.at(i, j), oracle[j]);
      }
    }
  }
}

TEST(Knn, SelfExcludedNeverReturnsSelf) {
  const auto p = random_points(30, 5);
  const Neighbors nb = knn_self_excluded(p, 4);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NE(nb.at(i, j), i);
}

TEST(Fps, FullSelectionIsPermutation) {
  const auto p = random_points(25, 6);
  auto idx = farthest_point_sampling(p, 25);
  std::sort(idx.begin(), idx.end());
  for (int i = 0; i < 25; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Fps, CollinearPicksEndpoint) {
  const std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)};
  EXPECT_EQ(farthest_point_sampling(p, 2, 0), (std::vector<int>{0, 2}));
}

TEST(Fps, SingleSampleIsSeed) {
  const auto p = random_points(10, 7);
  EXPECT_EQ(farthest_point_sampling(p, 1, 4), (std::vector<int>{4}));
}

TEST(Fps, PrefixMonotone) {
  const auto p = random_points(60, 8);
  const auto full = farthest_point_sampling(p, 20);
  const auto shorter = farthest_point_sampling(p, 19);
  EXPECT_TRUE(std::equal(shorter.begin(), shorter.end(), full.begin()));
}

TEST(Fps, TooManyThrows) {
  const auto p = random_points(3, 9);
  EXPECT_THROW(farthest_point_sampling(p, 4), SizeError);
}

TEST(Interp, ExactAtSources) {
  const auto s = random_points(12, 11);
  ad::Tensor v(12, 2);
  for (int i = 0; i < 12; ++i) {
    v(i, 0) = i;
    v(i, 1) = -2.0 * i;
  }
  const ad::Tensor out = inverse_distance_interpolate(s, v, s, 3);
  for (int i = 0; i < 12; ++i) {
    EXPECT_EQ(out(i, 0), v(i, 0));
    EXPECT_EQ(out(i, 1), v(i, 1));
  }
}

TEST(Interp, MidpointIsMean) {
  const std::vector<Vec3> s{Vec3(-1, 0, 0), Vec3(1, 0, 0)};
  const ad::Tensor v = ad::Tensor::from(2, 1, {2.0, 6.0});
  const std::vector<Vec3> q{Vec3::Zero()};
  EXPECT_NEAR(inverse_distance_interpolate(s, v, q, 2)(0, 0), 4.0, 1e-15);
}

TEST(Interp, MatchesDirectFormula) {
  const auto s = random_points(15, 12);
  const auto q = random_points(8, 13);
  const ad::Tensor v = [] {
    ad::Tensor t(15, 1);
    for (int i = 0; i < 15; ++i) t.data[i] = std::sin(i);
    return t;
  }();
  const ad::Tensor out = inverse_distance_interpolate(s, v, q, 3);
  for (int i = 0; i < 8; ++i) {
    const auto nn = knn_oracle(q[i], s, 3);
    double num = 0, den = 0;
    for (int j : nn) {
      const double w = 1.0 / ((s[j] - q[i]).norm() + kInterpEps);
      num += w * v.data[j];
      den += w;
    }
    EXPECT_NEAR(out(i, 0), num / den, 1e-13);
  }
}

TEST(Interp, EmptySourcesThrow) {
  const std::vector<Vec3> s;
  const std::vector<Vec3> q{Vec3::Zero()};
  EXPECT_THROW(idw_weights(s, q, 1), SizeError);
}

TEST(Se3, RejectsNonOrthonormal) {
  Mat4 m = Mat4::Identity();
  m(0, 0) = 1.1;
  EXPECT_THROW(SE3Transform::from_matrix(m), std::invalid_argument);
  Mat4 refl = Mat4::Identity();
  refl(2, 2) = -1.0;
  EXPECT_THROW(SE3Transform::from_matrix(refl), std::invalid_argument);
  Mat4 bad_row = Mat4::Identity();
  bad_row(3, 0) = 0.5;
  EXPECT_THROW(SE3Transform::from_matrix(bad_row), std::invalid_argument);
}

TEST(Se3, IdentityAndTranslation) {
  PointCloud c;
  c.positions = random_points(5, 1);
  c.rrv.assign(5, 0.5);
  c.rcs.assign(5, 1.5);
  const PointCloud same = apply_se3(SE3Transform::identity(), c);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(same.positions[i], c.positions[i]);
  PointCloud origin;
  origin.positions = {Vec3::Zero()};
  origin.rrv = {0.0};
  origin.rcs = {0.0};
  const PointCloud moved = apply_se3(SE3Transform(Mat3::Identity(), Vec3(1, 2, 3)), origin);
  EXPECT_EQ(moved.positions[0], Vec3(1, 2, 3));
  EXPECT_EQ(same.rrv, c.rrv);
  EXPECT_EQ(same.rcs, c.rcs);
}

TEST(Se3, CompositionAndDistances) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const SE3Transform a = random_transform(rng), b = random_transform(rng);
    PointCloud c;
    c.positions = random_points(10, 100 + trial);
    c.rrv.assign(10, 0.0);
    c.rcs.assign(10, 0.0);
    const PointCloud seq = apply_se3(b, apply_se3(a, c));
    const PointCloud comp = apply_se3(b * a, c);
    for (int i = 0; i < 10; ++i) {
      EXPECT_LT((seq.positions[i] - comp.positions[i]).norm(), 1e-12);
      for (int j = 0; j < 10; ++j) {
        EXPECT_NEAR((comp.positions[i] - comp.positions[j]).norm(), (c.positions[i] - c.positions[j]).norm(),
                    1e-9);
      }
    }
    const SE3Transform id = a * a.inverse();
    EXPECT_LT((id.matrix() - Mat4::Identity()).norm(), 1e-12);
  }
}

TEST(Warp, ZeroUniformAndInverse) {
  PointCloud c;
  c.positions = random_points(6, 2);
  c.rrv.assign(6, 0.0);
  c.rcs.assign(6, 0.0);
  FlowField zero;
  zero.vectors.assign(6, Vec3::Zero());
  EXPECT_EQ(warp(c, zero).positions, c.positions);
  FlowField ux;
  ux.vectors.assign(6, Vec3(1, 0, 0));
  const PointCloud w = warp(c, ux);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(w.positions[i].x(), c.positions[i].x() + 1.0);
  FlowField f, nf;
  for (const auto& v : random_points(6, 3)) {
    f.vectors.push_back(v);
    nf.vectors.push_back(-v);
  }
  const PointCloud back = warp(warp(c, f), nf);
  for (int i = 0; i < 6; ++i) EXPECT_LT((back.positions[i] - c.positions[i]).norm(), 1e-12);
  FlowField short_flow;
  short_flow.vectors.assign(5, Vec3::Zero());
  EXPECT_THROW(warp(c, short_flow), ShapeError);
}

TEST(EgoCompensate, StaticFlowVanishes) {
  std::mt19937_64 rng(9);
  const SE3Transform omega = random_transform(rng);
  RadarFrame f;
  f.cloud.positions = random_points(40, 4);
  f.cloud.rrv.assign(40, 0.0);
  f.cloud.rcs.assign(40, 0.0);
  for (const auto& p : f.cloud.positions) f.gt_flow.vectors.push_back(omega.apply(p) - p);
  f.moving_mask.assign(40, 0);
  f.class_id.assign(40, 0);
  const RadarFrame c = ego_compensate(f, omega);
  for (const auto& v : c.gt_flow.vectors) EXPECT_LT(v.norm(), 1e-9);
}

TEST(EgoCompensate, IdentityLeavesFrameUnchanged) {
  RadarFrame f;
  f.cloud.positions = random_points(10, 5);
  f.cloud.rrv.assign(10, 1.25);
  f.cloud.rcs.assign(10, 0.0);
  for (const auto& p : random_points(10, 6, 1.0)) f.gt_flow.vectors.push_back(p);
  const RadarFrame c = ego_compensate(f, SE3Transform::identity());
  EXPECT_EQ(c.cloud.positions, f.cloud.positions);
  EXPECT_EQ(c.gt_flow.vectors, f.gt_flow.vectors);
  EXPECT_EQ(c.cloud.rrv, f.cloud.rrv);
}

TEST(EgoCompensate, FiveDegreeRotationMatchesPerPointOracle) {
  const double a = 5.0 * M_PI / 180.0;
  const SE3Transform omega = SE3Transform::from_yaw(a, Vec3(0.5, -0.2, 0.0));
  RadarFrame f;
  f.cloud.positions = random_points(15, 7);
  f.cloud.rrv.assign(15, 0.0);
  f.cloud.rcs.assign(15, 0.0);
  f.gt_flow.vectors.assign(15, Vec3::Zero());
  const RadarFrame c = ego_compensate(f, omega);
  for (int i = 0; i < 15; ++i) {
    const Vec3& p = f.cloud.positions[i];
    const Vec3 oracle(std::cos(a) * p.x() - std::sin(a) * p.y() + 0.5, std::sin(a) * p.x() + std::cos(a) * p.y() - 0.2,
                      p.z());
    EXPECT_LT((c.cloud.positions[i] - oracle).norm(), 1e-12);
  }
}

TEST(Voxelize, CentersEdgesAndOutOfRange) {
  const GridSpec g{Vec2(0.0, -2.0), 1.0, 4, 4};
  const std::vector<Vec3> p{Vec3(0.5, -1.5, 0), Vec3(1.0, -1.5, 0), Vec3(-0.01, 0, 0), Vec3(4.0, 0, 0),
                            Vec3(3.99, 1.99, 0)};
  const auto cells = voxelize_2d(p, g);
  EXPECT_EQ(cells[0], 0);
  EXPECT_EQ(cells[1], 1);  // shared edge goes to the upper neighbour
  EXPECT_EQ(cells[2], kOutOfGrid);
  EXPECT_EQ(cells[3], kOutOfGrid);
  EXPECT_EQ(cells[4], 15);
}

TEST(Voxelize, MatchesFloorOracleAndIsIdempotent) {
  const GridSpec g{Vec2(-3.0, -5.0), 0.7, 9, 11};
  const auto p = random_points(100, 8, 6.0);
  const auto cells = voxelize_2d(p, g);
  for (int i = 0; i < 100; ++i) {
    const int col = static_cast<int>(std::floor((p[i].x() - g.origin.x()) / g.cell_size));
    const int row = static_cast<int>(std::floor((p[i].y() - g.origin.y()) / g.cell_size));
    const bool inside = col >= 0 && col < g.width && row >= 0 && row < g.height;
    EXPECT_EQ(cells[i], inside ? row * g.width + col : kOutOfGrid);
    if (inside) {
      const Vec2 c = g.cell_center(row, col);
      const std::vector<Vec3> cc{Vec3(c.x(), c.y(), 0.0)};
      EXPECT_EQ(voxelize_2d(cc, g)[0], cells[i]);
    }
  }
}

TEST(Kde, SingleAndCoincident) {
  const std::vector<Vec3> one{Vec3(1, 2, 3)};
  EXPECT_DOUBLE_EQ(gaussian_kde(one, 1.0)[0], 1.0);
  const std::vector<Vec3> two{Vec3(1, 2, 3), Vec3(1, 2, 3)};
  const auto v = gaussian_kde(two, 0.5);
  EXPECT_DOUBLE_EQ(v[0], 1.0);
  EXPECT_DOUBLE_EQ(v[1], 1.0);
}

TEST(Kde, MatchesDoubleLoop) {
  const auto p = random_points(10, 9, 2.0);
  const double h = 1.3;
  const auto v = gaussian_kde(p, h);
  for (int i = 0; i < 10; ++i) {
    double s = 0;
    for (int j = 0; j < 10; ++j) s += std::exp(-(p[i] - p[j]).squaredNorm() / (2 * h * h));
    EXPECT_NEAR(v[i], s / 10, 1e-14);
  }
}

TEST(PointCloudValidate, RejectsBadClouds) {
  PointCloud empty;
  EXPECT_THROW(empty.validate(), SizeError);
  PointCloud c;
  c.positions = {Vec3::Zero(), Vec3::Ones()};
  c.rrv = {0.0};
  c.rcs = {0.0, 0.0};
  EXPECT_THROW(c.validate(), ShapeError);
  c.rrv = {0.0, 0.0};
  EXPECT_NO_THROW(c.validate());
  c.positions[1].x() = std::nan("");
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
