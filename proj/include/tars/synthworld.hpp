// Synthetic rigid-body radar world: an ego vehicle, rigid actors and static
// landmarks observed by a forward-looking radar that measures position,
// relative radial velocity and cross-section. Ground truth is exact.

#ifndef TARS_SYNTHWORLD_HPP
#define TARS_SYNTHWORLD_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tars/geometry.hpp"

namespace tars {

enum class ActorClass : std::uint8_t { kStatic = 0, kCar = 1, kPedestrian = 2, kCyclist = 3, kTruck = 4 };

struct ScenarioConfig {
  int points_per_frame = 64;
  int min_actors = 2;
  int max_actors = 4;
  int min_points_per_actor = 2;
  int max_points_per_actor = 40;
  double min_actor_speed = 2.0;   // m/s
  double max_actor_speed = 10.0;
  double max_actor_yaw_rate = 0.3;  // rad/s
  double parked_probability = 0.15;
  double min_ego_speed = 0.0;
  double max_ego_speed = 8.0;
  double max_ego_yaw_rate = 0.15;
  double fov_deg = 120.0;
  double min_range = 2.0;
  double max_range = 30.0;
  double position_noise = 0.05;  // m
  double rrv_noise = 0.1;        // m/s
  double dt = 0.1;
  int clip_length = 3;           // frames per sequence
  double moving_threshold = 0.05;  // m per frame interval
  double seg_threshold = 0.5;      // m/s, pseudo segmentation
  double resolution_ratio = 2.5;   // radar-to-lidar resolution ratio used for RNE
  bool static_world = false;       // no moving actors (parked ones remain)
  std::uint64_t seed = 1;

  void validate() const;
};

struct RigidActor {
  Vec3 extent;  // full box size (length, width, height)
  ActorClass cls = ActorClass::kCar;
  std::vector<SE3Transform> trajectory;  // object -> world, one pose per timestep
  double reflectivity = 0.0;
};

struct Sequence {
  std::vector<RadarFrame> frames;
  std::vector<RigidActor> actors;
};

/// Frames t = 0..clip_length-1. Each frame's gt_flow moves its points to
/// frame t+1 and is expressed in sensor coordinates of the respective frames.
Sequence simulate_sequence(const ScenarioConfig& cfg);

/// Radial component of the relative velocity, all vectors in sensor coordinates.
double measure_rrv(const Vec3& position, const Vec3& point_velocity, const Vec3& ego_velocity);

/// Sensor motion between consecutive frames: maps frame-t sensor coordinates
/// into frame-(t+1) sensor coordinates.
SE3Transform relative_ego_motion(const SE3Transform& pose_t, const SE3Transform& pose_next);

/// Flow of a world-static point under `omega`, computed exactly as ego_compensate subtracts it.
inline Vec3 static_flow(const SE3Transform& omega, const Vec3& p) { return omega.apply(p) - p; }

struct GtFlow {
  FlowField flow;
  std::vector<std::uint8_t> moving_mask;
};

/// Per-point flow from the owning body's motion. `owner[i]` is an actor index
/// or -1 for static points. `observed` are sensor-frame positions at t.
GtFlow derive_gt_flow(std::span<const Vec3> observed, std::span<const int> owner,
                      std::span<const RigidActor> actors, const SE3Transform& pose_t,
                      const SE3Transform& pose_next, int t, double moving_threshold);

struct PseudoLabels {
  std::vector<std::uint8_t> seg_moving;  // from RRV vs odometry
  std::vector<std::uint8_t> fg_mask;     // tracker stand-in: simulator moving mask
  FlowField fg_flow;
  FlowField bg_flow;                     // odometry displacement (zero after compensation)
};

/// `odometry` is the sensor motion of the frame (identity for compensated frames).
PseudoLabels derive_pseudo_labels(const RadarFrame& frame, const SE3Transform& odometry,
                                  double seg_threshold);

// ---- serialization --------------------------------------------------------

inline constexpr std::uint32_t kFrameFormatVersion = 1;

/// Rounds every stored quantity to float32, as the on-disk format does.
RadarFrame quantize_frame(const RadarFrame& frame);

std::uint64_t frame_record_size(std::uint32_t point_count);
void write_frame(const std::filesystem::path& path, const RadarFrame& frame);
/// Throws FormatError on bad magic, version or size.
RadarFrame read_frame(const std::filesystem::path& path);

void write_sequence(const std::filesystem::path& dir, const Sequence& seq);
std::vector<RadarFrame> read_sequence(const std::filesystem::path& dir);

struct DatasetManifest {
  std::uint32_t version = kFrameFormatVersion;
  std::uint64_t seed = 0;
  int frames_per_sequence = 0;
  double resolution_ratio = 2.5;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Writes `num_train + num_test` sequences plus manifest.json under `root`.
DatasetManifest generate_dataset(const std::filesystem::path& root, const ScenarioConfig& cfg,
                                 int num_train, int num_test);
/// Sequence seeds used by generate_dataset, so in-memory callers can match it.
ScenarioConfig sequence_config(const ScenarioConfig& cfg, int index);
void write_manifest(const std::filesystem::path& root, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& root);

}  // namespace tars

#endif  // TARS_SYNTHWORLD_HPP
