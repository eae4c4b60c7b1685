// Training objectives. Flow-dependent inputs are graph variables so every
// term back-propagates; geometry and labels are plain data.

#ifndef TARS_LOSSES_HPP
#define TARS_LOSSES_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tars/autodiff.hpp"
#include "tars/geometry.hpp"

namespace tars {

enum class Supervision { kCross, kCrossPlus, kSelf, kFull };

struct LossConfig {
  double delta = 0.05;         // KDE density threshold
  double eps_chamfer = 1e-3;   // hinge slack, m^2
  double alpha = 0.5;          // RBF width, m^2
  double lambda_bg = 0.5;
  double lambda_opt = 0.1;
  double dt = 0.1;
  int k_smooth = 4;
  double kde_bandwidth = 1.0;

  void validate() const;
};

/// Pinhole camera rigidly attached to the radar.
struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();
  SE3Transform extrinsics;  // sensor -> camera
  int width = 640;
  int height = 480;

  /// Forward-looking camera at the sensor origin (camera z = sensor x).
  static CameraModel front_default();
  void validate() const;
  /// Pixel of a sensor-frame point; empty when at or behind the image plane.
  std::optional<Vec2> project(const Vec3& sensor_point) const;
  bool inside(const Vec2& pixel) const;
  /// Unit direction (camera frame) of the ray through a pixel.
  Vec3 ray(const Vec2& pixel) const;
};

namespace loss {

using ad::Var;

/// Symmetric hinge Chamfer over density-filtered points. `p_warp` is N x 3.
/// Sets *all_discarded when no point survives the density filter.
Var soft_chamfer(Var p_warp, std::span<const Vec3> q, const LossConfig& cfg,
                 bool* all_discarded = nullptr);

/// Softmax-normalised RBF weights over the k nearest neighbours (self excluded).
Var spatial_smoothness(std::span<const Vec3> p, Var flow, const LossConfig& cfg);

/// Sum of |f . p/|p| - rrv dt|; points at the origin are skipped.
Var radial_displacement(std::span<const Vec3> p, Var flow, std::span<const double> rrv,
                        const LossConfig& cfg);

/// Mean L2 error over rows with mask == 1 (zero when no row is selected).
Var masked_epe(Var pred, const FlowField& target, std::span<const std::uint8_t> mask);
inline Var foreground_loss(Var pred, const FlowField& pseudo_gt, std::span<const std::uint8_t> moving) {
  return masked_epe(pred, pseudo_gt, moving);
}
inline Var background_loss(Var pred, const FlowField& pseudo_gt, std::span<const std::uint8_t> stat) {
  return masked_epe(pred, pseudo_gt, stat);
}

inline constexpr double kSegClamp = 1e-7;
/// Half the summed binary cross-entropy between S (N x 1) and the pseudo mask.
Var seg_loss(Var s, std::span<const std::uint8_t> pseudo_mask);

/// (1/N) sum |(omega - omega_pred) [p; 1]| with omega_pred = (rot 3x3, trans 1x3).
Var ego_loss(Var rot, Var trans, const SE3Transform& omega_gt, std::span<const Vec3> p);

/// Pixel displacement of each point under `flow` (the synthetic optical-flow label).
/// Points that cannot be projected at either end get NaN.
std::vector<Vec2> pseudo_optical_flow(std::span<const Vec3> p, const FlowField& flow,
                                      const CameraModel& cam);

/// Mean distance from p + f to the ray through pixel(p) + opt_flow, over
/// moving points that project in front of the camera and inside the image.
Var optical_flow_loss(std::span<const Vec3> p, Var flow, const CameraModel& cam,
                      std::span<const Vec2> pseudo_opt_flow, std::span<const std::uint8_t> moving);

struct LevelTargets {
  Var flow;  // N_l x 3 prediction
  FlowField fg_target;
  std::vector<std::uint8_t> moving;
  FlowField bg_target;
  std::vector<std::uint8_t> stat;
};

struct LossInputs {
  std::span<const Vec3> p;
  std::span<const double> rrv;
  std::span<const Vec3> q;
  Var flow;  // final N x 3 prediction
  std::vector<LevelTargets> levels;
  Var seg;   // optional N x 1
  std::vector<std::uint8_t> seg_pseudo;
  Var rot;   // optional 3 x 3
  Var trans; // optional 1 x 3
  SE3Transform ego_gt;
  const CameraModel* camera = nullptr;
  std::vector<Vec2> pseudo_opt;
  std::vector<std::uint8_t> moving;
};

/// Weighted contribution of each active term, in summation order.
struct LossReport {
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;
  bool chamfer_all_discarded = false;
};

struct TotalLoss {
  Var total;
  LossReport report;
};

TotalLoss total_loss(const LossInputs& in, const LossConfig& cfg, Supervision mode);

}  // namespace loss
}  // namespace tars

#endif  // TARS_LOSSES_HPP
