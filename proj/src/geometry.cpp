#include "tars/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tars {

void PointCloud::validate() const {
  if (positions.empty()) throw SizeError("PointCloud: empty");
  if (rrv.size() != positions.size() || rcs.size() != positions.size()) {
    throw ShapeError("PointCloud: rrv/rcs row count differs from positions");
  }
  for (const auto& p : positions) {
    if (!p.allFinite()) throw std::invalid_argument("PointCloud: non-finite position");
  }
  if (!features.empty() && features.rows != static_cast<int>(positions.size())) {
    throw ShapeError("PointCloud: feature rows differ from point count");
  }
}

SE3Transform::SE3Transform(const Mat3& rotation, const Vec3& translation) : m_(Mat4::Identity()) {
  m_.topLeftCorner<3, 3>() = rotation;
  m_.topRightCorner<3, 1>() = translation;
}

SE3Transform SE3Transform::from_matrix(const Mat4& m) {
  const Mat3 r = m.topLeftCorner<3, 3>();
  if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw std::invalid_argument("SE3Transform: rotation block is not orthonormal");
  }
  if (std::fabs(r.determinant() - 1.0) > 1e-9) {
    throw std::invalid_argument("SE3Transform: rotation determinant is not +1");
  }
  if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0) {
    throw std::invalid_argument("SE3Transform: last row must be (0,0,0,1)");
  }
  return SE3Transform(m);
}

SE3Transform SE3Transform::from_yaw(double yaw, const Vec3& translation) {
  return {Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(), translation};
}

SE3Transform SE3Transform::inverse() const {
  const Mat3 rt = rotation().transpose();
  return {rt, -rt * translation()};
}

SE3Transform SE3Transform::operator*(const SE3Transform& other) const {
  return SE3Transform(Mat3(rotation() * other.rotation()), Vec3(rotation() * other.translation() + translation()));
}

void GridSpec::validate() const {
  if (!(cell_size > 0.0)) throw std::invalid_argument("GridSpec: cell_size must be positive");
  if (height < 1 || width < 1) throw std::invalid_argument("GridSpec: shape must be at least 1x1");
}

namespace {

Neighbors knn_impl(std::span<const Vec3> query, std::span<const Vec3> target, int k, bool exclude_self) {
  const int avail = static_cast<int>(target.size()) - (exclude_self ? 1 : 0);
  if (k < 1 || k > avail) {
    throw SizeError("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(avail) + " candidates");
  }
  Neighbors out;
  out.k = k;
  out.index.resize(query.size() * static_cast<std::size_t>(k));
  out.sq_dist.resize(out.index.size());
  std::vector<std::pair<double, int>> cand(target.size());
  for (std::size_t i = 0; i < query.size(); ++i) {
    int n = 0;
    for (std::size_t j = 0; j < target.size(); ++j) {
      if (exclude_self && j == i) continue;
      cand[n++] = {(query[i] - target[j]).squaredNorm(), static_cast<int>(j)};
    }
    // pair ordering breaks distance ties by the lower index
    std::partial_sort(cand.begin(), cand.begin() + k, cand.begin() + n);
    for (int j = 0; j < k; ++j) {
      out.index[i * k + j] = cand[j].second;
      out.sq_dist[i * k + j] = cand[j].first;
    }
  }
  return out;
}

}  // namespace

Neighbors knn_points(std::span<const Vec3> query, std::span<const Vec3> target, int k) {
  return knn_impl(query, target, k, false);
}

Neighbors knn_self_excluded(std::span<const Vec3> points, int k) {
  return knn_impl(points, points, k, true);
}

std::vector<int> farthest_point_sampling(std::span<const Vec3> points, int m, int seed_index) {
  const int n = static_cast<int>(points.size());
  if (m < 1 || m > n) {
    throw SizeError("farthest_point_sampling: m=" + std::to_string(m) + " with N=" + std::to_string(n));
  }
  if (seed_index < 0 || seed_index >= n) throw SizeError("farthest_point_sampling: bad seed index");
  std::vector<int> selected{seed_index};
  selected.reserve(m);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  taken[seed_index] = 1;
  int last = seed_index;
  while (static_cast<int>(selected.size()) < m) {
    int best = -1;
    double best_d = -1.0;
    for (int j = 0; j < n; ++j) {
      if (taken[j]) continue;
      min_d[j] = std::min(min_d[j], (points[j] - points[last]).squaredNorm());
      if (min_d[j] > best_d) {
        best_d = min_d[j];
        best = j;
      }
    }
    selected.push_back(best);
    taken[best] = 1;
    last = best;
  }
  return selected;
}

InterpWeights idw_weights(std::span<const Vec3> sources, std::span<const Vec3> queries, int k,
                          double eps) {
  if (sources.empty()) throw SizeError("inverse_distance_interpolate: no sources");
  const Neighbors nb = knn_points(queries, sources, k);
  InterpWeights w;
  w.k = k;
  w.index = nb.index;
  w.weight.resize(nb.index.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const std::size_t base = i * static_cast<std::size_t>(k);
    if (nb.sq_dist[base] == 0.0) {
      for (int j = 0; j < k; ++j) w.weight[base + j] = j == 0 ? 1.0 : 0.0;
      continue;
    }
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      w.weight[base + j] = 1.0 / (std::sqrt(nb.sq_dist[base + j]) + eps);
      total += w.weight[base + j];
    }
    for (int j = 0; j < k; ++j) w.weight[base + j] /= total;
  }
  return w;
}

ad::Tensor inverse_distance_interpolate(std::span<const Vec3> sources, const ad::Tensor& values,
                                        std::span<const Vec3> queries, int k, double eps) {
  if (values.rows != static_cast<int>(sources.size())) {
    throw ShapeError("inverse_distance_interpolate: one value row per source required");
  }
  const InterpWeights w = idw_weights(sources, queries, k, eps);
  ad::Tensor out(static_cast<int>(queries.size()), values.cols);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < k; ++j) {
      const std::size_t s = static_cast<std::size_t>(i) * k + j;
      for (int c = 0; c < values.cols; ++c) out(i, c) += w.weight[s] * values(w.index[s], c);
    }
  return out;
}

PointCloud apply_se3(const SE3Transform& t, const PointCloud& cloud) {
  PointCloud out = cloud;
  const Mat3 r = t.rotation();
  const Vec3 tr = t.translation();
  for (auto& p : out.positions) p = r * p + tr;
  return out;
}

std::vector<Vec3> warp(std::span<const Vec3> positions, const FlowField& flow) {
  if (flow.size() != positions.size()) throw ShapeError("warp: flow rows differ from point count");
  std::vector<Vec3> out(positions.begin(), positions.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += flow.vectors[i];
  return out;
}

PointCloud warp(const PointCloud& cloud, const FlowField& flow) {
  PointCloud out = cloud;
  out.positions = warp(cloud.positions, flow);
  return out;
}

std::vector<double> ego_radial_rate(std::span<const Vec3> positions, const SE3Transform& omega,
                                    double dt) {
  std::vector<double> rate(positions.size(), 0.0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const double r = positions[i].norm();
    if (r == 0.0) continue;
    rate[i] = (omega.apply(positions[i]) - positions[i]).dot(positions[i] / r) / dt;
  }
  return rate;
}

RadarFrame ego_compensate(const RadarFrame& p, const SE3Transform& omega) {
  RadarFrame out = p;
  const std::vector<double> rate = ego_radial_rate(p.cloud.positions, omega, p.dt);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Vec3 moved = omega.apply(p.cloud.positions[i]);
    if (i < p.gt_flow.size()) {
      // f - (omega p - p): the part of the motion not explained by the sensor.
      // Written this way a static point's flow cancels bit-exactly.
      out.gt_flow.vectors[i] = p.gt_flow.vectors[i] - (moved - p.cloud.positions[i]);
    }
    out.cloud.positions[i] = moved;
    out.cloud.rrv[i] = p.cloud.rrv[i] - rate[i];
  }
  return out;
}

std::vector<int> voxelize_2d(std::span<const Vec3> positions, const GridSpec& grid) {
  grid.validate();
  std::vector<int> cells(positions.size(), kOutOfGrid);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const double fx = std::floor((positions[i].x() - grid.origin.x()) / grid.cell_size);
    const double fy = std::floor((positions[i].y() - grid.origin.y()) / grid.cell_size);
    if (fx < 0 || fy < 0 || fx >= grid.width || fy >= grid.height) continue;
    cells[i] = static_cast<int>(fy) * grid.width + static_cast<int>(fx);
  }
  return cells;
}

std::vector<double> gaussian_kde(std::span<const Vec3> positions, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("gaussian_kde: bandwidth must be positive");
  const std::size_t n = positions.size();
  std::vector<double> nu(n, 0.0);
  const double denom = 2.0 * bandwidth * bandwidth;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(-(positions[i] - positions[j]).squaredNorm() / denom);
    nu[i] = s / static_cast<double>(n);
  }
  return nu;
}

ad::Tensor positions_tensor(std::span<const Vec3> positions) {
  ad::Tensor t(static_cast<int>(positions.size()), 3);
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (int c = 0; c < 3; ++c) t(static_cast<int>(i), c) = positions[i](c);
  return t;
}

std::vector<Vec3> positions_from_tensor(const ad::Tensor& t) {
  if (t.cols != 3) throw ShapeError("positions_from_tensor: expects N x 3");
  std::vector<Vec3> out(static_cast<std::size_t>(t.rows));
  for (int i = 0; i < t.rows; ++i) out[i] = Vec3(t(i, 0), t(i, 1), t(i, 2));
  return out;
}

}  // namespace tars
