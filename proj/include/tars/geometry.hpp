// Point-cloud and rigid-motion primitives shared by the network, the losses,
// the simulator and the metrics. Everything here is a pure function.

#ifndef TARS_GEOMETRY_HPP
#define TARS_GEOMETRY_HPP

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <span>
#include <vector>

#include "tars/autodiff.hpp"
#include "tars/errors.hpp"

namespace tars {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Radar scan: positions plus relative radial velocity and cross-section.
struct PointCloud {
  std::vector<Vec3> positions;  // meters
  std::vector<double> rrv;      // m/s
  std::vector<double> rcs;
  ad::Tensor features;          // optional N x C

  std::size_t size() const { return positions.size(); }
  /// Throws SizeError/ShapeError if the invariants do not hold.
  void validate() const;
};

/// Per-point displacement over one frame interval.
struct FlowField {
  std::vector<Vec3> vectors;
  std::size_t size() const { return vectors.size(); }
};

/// 4x4 homogeneous rigid transform with an orthonormal, det +1 rotation.
class SE3Transform {
 public:
  SE3Transform() : m_(Mat4::Identity()) {}
  SE3Transform(const Mat3& rotation, const Vec3& translation);
  /// Validates the rotation block (orthonormal, det +1 within 1e-9) and the
  /// last row; throws std::invalid_argument otherwise.
  static SE3Transform from_matrix(const Mat4& m);
  static SE3Transform identity() { return {}; }
  /// Rotation about +z by `yaw` radians followed by `translation`.
  static SE3Transform from_yaw(double yaw, const Vec3& translation);

  const Mat4& matrix() const { return m_; }
  Mat3 rotation() const { return m_.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return m_.topRightCorner<3, 1>(); }

  Vec3 apply(const Vec3& p) const { return rotation() * p + translation(); }
  SE3Transform inverse() const;
  /// (*this) o other: apply `other` first.
  SE3Transform operator*(const SE3Transform& other) const;

 private:
  explicit SE3Transform(const Mat4& m) : m_(m) {}
  Mat4 m_;
};

/// Regular 2-D grid on the x-y plane. Row index follows y, column follows x.
struct GridSpec {
  Vec2 origin = Vec2::Zero();
  double cell_size = 1.0;
  int height = 1;
  int width = 1;

  int cells() const { return height * width; }
  Vec2 cell_center(int row, int col) const {
    return origin + Vec2((col + 0.5) * cell_size, (row + 0.5) * cell_size);
  }
  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

inline constexpr int kOutOfGrid = -1;

/// One radar frame with ground truth attached.
struct RadarFrame {
  PointCloud cloud;
  FlowField gt_flow;
  std::vector<std::uint8_t> moving_mask;
  std::vector<std::uint8_t> class_id;
  SE3Transform ego_pose;  // sensor -> world
  double dt = 0.1;
  std::uint32_t frame_index = 0;

  std::size_t size() const { return cloud.size(); }
};

/// Row-major N x k neighbour table; rows sorted by ascending distance.
struct Neighbors {
  int k = 0;
  std::vector<int> index;
  std::vector<double> sq_dist;

  int rows() const { return k == 0 ? 0 : static_cast<int>(index.size()) / k; }
  int at(int row, int j) const { return index[static_cast<std::size_t>(row) * k + j]; }
};

Neighbors knn_points(std::span<const Vec3> query, std::span<const Vec3> target, int k);
/// Like knn_points but never returns the query row itself (query == target).
Neighbors knn_self_excluded(std::span<const Vec3> points, int k);

std::vector<int> farthest_point_sampling(std::span<const Vec3> points, int m, int seed_index = 0);

inline constexpr double kInterpEps = 1e-8;

/// Normalised inverse-distance weights over the k nearest sources.
/// A query that coincides with a source takes that source's value exactly.
struct InterpWeights {
  int k = 0;
  std::vector<int> index;
  std::vector<double> weight;
};

InterpWeights idw_weights(std::span<const Vec3> sources, std::span<const Vec3> queries, int k,
                          double eps = kInterpEps);
ad::Tensor inverse_distance_interpolate(std::span<const Vec3> sources, const ad::Tensor& values,
                                        std::span<const Vec3> queries, int k,
                                        double eps = kInterpEps);

PointCloud apply_se3(const SE3Transform& t, const PointCloud& cloud);
PointCloud warp(const PointCloud& cloud, const FlowField& flow);
std::vector<Vec3> warp(std::span<const Vec3> positions, const FlowField& flow);

/// Moves frame P into the coordinates of the next frame using `omega`.
/// Ground-truth flow is re-expressed so that static points get zero flow, and
/// RRV loses its ego-induced radial rate.
RadarFrame ego_compensate(const RadarFrame& p, const SE3Transform& omega);

/// Ego-induced radial displacement rate of each point under `omega`, m/s.
std::vector<double> ego_radial_rate(std::span<const Vec3> positions, const SE3Transform& omega,
                                    double dt);

/// Flat cell index (row * width + col) per point, or kOutOfGrid.
std::vector<int> voxelize_2d(std::span<const Vec3> positions, const GridSpec& grid);

std::vector<double> gaussian_kde(std::span<const Vec3> positions, double bandwidth);

ad::Tensor positions_tensor(std::span<const Vec3> positions);
std::vector<Vec3> positions_from_tensor(const ad::Tensor& t);

}  // namespace tars

#endif  // TARS_GEOMETRY_HPP
