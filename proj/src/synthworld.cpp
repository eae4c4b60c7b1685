#include "tars/synthworld.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace tars {

void ScenarioConfig::validate() const {
  if (points_per_frame < 1) throw std::invalid_argument("ScenarioConfig: points_per_frame must be >= 1");
  if (min_actors < 0 || max_actors < min_actors) throw std::invalid_argument("ScenarioConfig: bad actor range");
  if (min_points_per_actor < 1 || max_points_per_actor < min_points_per_actor) {
    throw std::invalid_argument("ScenarioConfig: bad points-per-actor range");
  }
  if (min_actor_speed < 0 || max_actor_speed < min_actor_speed || min_ego_speed < 0 ||
      max_ego_speed < min_ego_speed) {
    throw std::invalid_argument("ScenarioConfig: bad speed range");
  }
  if (!(fov_deg > 0 && fov_deg <= 360) || !(min_range > 0) || !(max_range > min_range)) {
    throw std::invalid_argument("ScenarioConfig: bad field of view");
  }
  if (position_noise < 0 || rrv_noise < 0 || !(dt > 0) || !(moving_threshold >= 0) ||
      !(resolution_ratio > 0)) {
    throw std::invalid_argument("ScenarioConfig: noise, dt and thresholds must be non-negative");
  }
  if (clip_length < 2) throw std::invalid_argument("ScenarioConfig: clip length must be >= 2");
}

double measure_rrv(const Vec3& position, const Vec3& point_velocity, const Vec3& ego_velocity) {
  const double r = position.norm();
  if (r == 0.0) throw std::invalid_argument("measure_rrv: point at the sensor origin");
  // divide last: an exactly orthogonal velocity then reads exactly zero
  return (point_velocity - ego_velocity).dot(position) / r;
}

SE3Transform relative_ego_motion(const SE3Transform& pose_t, const SE3Transform& pose_next) {
  return pose_next.inverse() * pose_t;
}

GtFlow derive_gt_flow(std::span<const Vec3> observed, std::span<const int> owner,
                      std::span<const RigidActor> actors, const SE3Transform& pose_t,
                      const SE3Transform& pose_next, int t, double moving_threshold) {
  if (owner.size() != observed.size()) throw ShapeError("derive_gt_flow: one owner per point required");
  const SE3Transform omega = relative_ego_motion(pose_t, pose_next);
  const SE3Transform next_inv = pose_next.inverse();
  GtFlow out;
  out.flow.vectors.resize(observed.size());
  out.moving_mask.assign(observed.size(), 0);
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const Vec3& p = observed[i];
    const int a = owner[i];
    const bool still = a < 0 || actors[a].trajectory[t].matrix() == actors[a].trajectory[t + 1].matrix();
    if (still) {
      out.flow.vectors[i] = static_flow(omega, p);
      continue;
    }
    const SE3Transform motion = actors[a].trajectory[t + 1] * actors[a].trajectory[t].inverse();
    const Vec3 x = pose_t.apply(p);
    const Vec3 x_next = motion.apply(x);
    out.flow.vectors[i] = next_inv.apply(x_next) - p;
    out.moving_mask[i] = (x_next - x).norm() > moving_threshold ? 1 : 0;
  }
  return out;
}

PseudoLabels derive_pseudo_labels(const RadarFrame& frame, const SE3Transform& odometry, double seg_threshold) {
  const auto& pos = frame.cloud.positions;
  const std::vector<double> rate = ego_radial_rate(pos, odometry, frame.dt);
  PseudoLabels out;
  out.seg_moving.resize(pos.size());
  out.bg_flow.vectors.resize(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    out.seg_moving[i] = std::fabs(frame.cloud.rrv[i] - rate[i]) > seg_threshold ? 1 : 0;
    out.bg_flow.vectors[i] = static_flow(odometry, pos[i]);
  }
  out.fg_mask = frame.moving_mask;
  out.fg_flow = frame.gt_flow;
  return out;
}

// ---- simulator ------------------------------------------------------------

namespace {

struct ClassProfile {
  Vec3 extent;
  double min_speed, max_speed, reflectivity;
};

ClassProfile profile(ActorClass c, const ScenarioConfig& cfg) {
  switch (c) {
    case ActorClass::kPedestrian:
      return {Vec3(0.6, 0.6, 1.7), 0.8, 2.0, -5.0};
    case ActorClass::kCyclist:
      return {Vec3(1.8, 0.6, 1.6), 2.5, 6.0, 0.0};
    case ActorClass::kTruck:
      return {Vec3(8.0, 2.5, 3.2), cfg.min_actor_speed, cfg.max_actor_speed, 15.0};
    default:
      return {Vec3(4.5, 1.8, 1.5), cfg.min_actor_speed, cfg.max_actor_speed, 10.0};
  }
}

bool in_fov(const Vec3& p, const ScenarioConfig& cfg) {
  const double r = std::hypot(p.x(), p.y());
  if (r < cfg.min_range || r > cfg.max_range) return false;
  const double az = std::atan2(p.y(), p.x());
  return std::fabs(az) <= cfg.fov_deg * std::numbers::pi / 360.0;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::generate_canonical<double, 53>(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(std::min<double>(hi - lo, std::floor(uniform(rng, 0.0, hi - lo + 1.0))));
}

double gauss(std::mt19937_64& rng, double sigma) {
  if (sigma == 0.0) return 0.0;
  // Box-Muller keeps the stream identical across standard libraries
  const double u1 = std::max(std::generate_canonical<double, 53>(rng), 1e-300);
  const double u2 = std::generate_canonical<double, 53>(rng);
  return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<SE3Transform> integrate(double yaw0, const Vec3& start, double speed, double yaw_rate, int steps,
                                    double dt) {
  std::vector<SE3Transform> poses;
  double yaw = yaw0;
  Vec3 pos = start;
  for (int s = 0; s < steps; ++s) {
    poses.push_back(SE3Transform::from_yaw(yaw, pos));
    pos += speed * dt * Vec3(std::cos(yaw), std::sin(yaw), 0.0);
    yaw += yaw_rate * dt;
  }
  return poses;
}

struct Scatterer {
  int face;  // 0..3 sides (+x, -x, +y, -y), 4 top
  Vec3 body;
};

// fixed reflection centres on the box surface, object coordinates
std::vector<Scatterer> scatterers(std::mt19937_64& rng, const Vec3& extent, int count) {
  const Vec3 h = extent / 2.0;
  std::vector<Scatterer> out;
  for (int i = 0; i < count; ++i) {
    const int f = uniform_int(rng, 0, 4);
    Vec3 body(uniform(rng, -h.x(), h.x()), uniform(rng, -h.y(), h.y()), uniform(rng, 0.0, extent.z()));
    if (f < 4) {
      const int axis = f / 2;
      body(axis) = f % 2 == 0 ? h(axis) : -h(axis);
    } else {
      body.z() = extent.z();
    }
    out.push_back({f, body});
  }
  return out;
}

// faces that look toward the sensor at step t
std::array<bool, 5> facing(const RigidActor& a, int t, const SE3Transform& pose) {
  const Vec3 h = a.extent / 2.0;
  const Vec3 sensor_in_body = a.trajectory[t].inverse().apply(pose.translation());
  std::array<bool, 5> out{};
  for (int f = 0; f < 4; ++f) {
    const int axis = f / 2;
    const double sgn = f % 2 == 0 ? 1.0 : -1.0;
    out[f] = sgn * sensor_in_body(axis) > h(axis);
  }
  out[4] = true;
  return out;
}

}  // namespace

Sequence simulate_sequence(const ScenarioConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int T = cfg.clip_length;
  const int steps = T + 1;
  const double half_fov = cfg.fov_deg * std::numbers::pi / 360.0;

  const double ego_speed = cfg.static_world ? 0.0 : uniform(rng, cfg.min_ego_speed, cfg.max_ego_speed);
  const double ego_yaw_rate = cfg.static_world ? 0.0 : uniform(rng, -cfg.max_ego_yaw_rate, cfg.max_ego_yaw_rate);
  const std::vector<SE3Transform> ego = integrate(0.0, Vec3::Zero(), ego_speed, ego_yaw_rate, steps, cfg.dt);

  Sequence seq;
  const int n_actors = uniform_int(rng, cfg.min_actors, cfg.max_actors);
  for (int a = 0; a < n_actors; ++a) {
    const double u = uniform(rng, 0.0, 1.0);
    const ActorClass cls = u < 0.4 ? ActorClass::kCar
                           : u < 0.6 ? ActorClass::kPedestrian
                           : u < 0.8 ? ActorClass::kCyclist
                                     : ActorClass::kTruck;
    const ClassProfile prof = profile(cls, cfg);
    Vec3 center;
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      const double r = uniform(rng, std::max(cfg.min_range + 4.0, 6.0), 0.8 * cfg.max_range);
      const double az = uniform(rng, -0.8 * half_fov, 0.8 * half_fov);
      center = Vec3(r * std::cos(az), r * std::sin(az), 0.0);
      placed = true;
      for (const auto& other : seq.actors) {
        const double gap = (other.trajectory[0].translation() - center).head<2>().norm();
        if (gap < (other.extent.head<2>().norm() + prof.extent.head<2>().norm()) / 2.0 + 1.0) placed = false;
      }
    }
    if (!placed) continue;
    const bool parked = cfg.static_world || uniform(rng, 0.0, 1.0) < cfg.parked_probability;
    const double speed = parked ? 0.0 : uniform(rng, prof.min_speed, prof.max_speed);
    const double yaw_rate = parked ? 0.0 : uniform(rng, -cfg.max_actor_yaw_rate, cfg.max_actor_yaw_rate);
    const double heading = uniform(rng, -std::numbers::pi, std::numbers::pi);
    RigidActor actor;
    actor.extent = prof.extent;
    actor.cls = cls;
    actor.reflectivity = prof.reflectivity;
    actor.trajectory = integrate(heading, ego[0].apply(center), speed, yaw_rate, steps, cfg.dt);
    seq.actors.push_back(std::move(actor));
  }

  const int n = cfg.points_per_frame;
  const int actor_cap = n - std::max(1, n / 4);
  std::vector<std::vector<Scatterer>> pools;
  std::vector<int> wants;
  for (const RigidActor& actor : seq.actors) {
    wants.push_back(uniform_int(rng, cfg.min_points_per_actor, cfg.max_points_per_actor));
    pools.push_back(scatterers(rng, actor.extent, 3 * cfg.max_points_per_actor));
  }

  // persistent static landmarks: two walls plus scattered poles, world frame
  std::vector<Vec3> landmarks;
  std::vector<double> landmark_rcs;
  const double reach = cfg.max_range + ego_speed * cfg.dt * steps;
  const int per_kind = n;
  for (int i = 0; i < per_kind; ++i) {
    const double side = i % 2 == 0 ? -7.0 : 7.0;
    landmarks.emplace_back(uniform(rng, 0.0, reach), side + uniform(rng, -0.3, 0.3), uniform(rng, 0.0, 2.5));
    landmark_rcs.push_back(uniform(rng, -5.0, 5.0));
  }
  for (int i = 0; i < per_kind; ++i) {
    const double r = uniform(rng, cfg.min_range, reach);
    const double az = uniform(rng, -half_fov, half_fov);
    landmarks.emplace_back(r * std::cos(az), r * std::sin(az), uniform(rng, 0.0, 1.0));
    landmark_rcs.push_back(uniform(rng, -10.0, 5.0));
  }
  for (int t = 0; t < T; ++t) {
    const SE3Transform& pose = ego[t];
    const SE3Transform pose_inv = pose.inverse();
    std::vector<Vec3> pts;
    std::vector<int> owner;
    std::vector<double> rcs;
    for (std::size_t a = 0; a < seq.actors.size(); ++a) {
      const RigidActor& actor = seq.actors[a];
      const auto faces = facing(actor, t, pose);
      int k = 0;
      for (const Scatterer& sc : pools[a]) {
        if (k >= wants[a] || static_cast<int>(pts.size()) >= actor_cap) break;
        if (!faces[sc.face]) continue;
        Vec3 p = pose_inv.apply(actor.trajectory[t].apply(sc.body));
        if (!in_fov(p, cfg)) continue;
        p += Vec3(gauss(rng, cfg.position_noise), gauss(rng, cfg.position_noise), gauss(rng, cfg.position_noise));
        if (p.norm() == 0.0) continue;
        pts.push_back(p);
        owner.push_back(static_cast<int>(a));
        rcs.push_back(actor.reflectivity + gauss(rng, 1.0));
        ++k;
      }
    }
    std::vector<std::size_t> visible;
    for (std::size_t i = 0; i < landmarks.size(); ++i) {
      if (in_fov(pose_inv.apply(landmarks[i]), cfg)) visible.push_back(i);
    }
    std::size_t next = 0;
    while (static_cast<int>(pts.size()) < n) {
      Vec3 p;
      double refl;
      if (next < visible.size()) {
        const std::size_t i = visible[next++];
        p = pose_inv.apply(landmarks[i]);
        refl = landmark_rcs[i];
      } else {
        const double r = uniform(rng, cfg.min_range, cfg.max_range);
        const double az = uniform(rng, -half_fov, half_fov);
        p = Vec3(r * std::cos(az), r * std::sin(az), uniform(rng, 0.0, 1.0));
        refl = uniform(rng, -10.0, 5.0);
      }
      p += Vec3(gauss(rng, cfg.position_noise), gauss(rng, cfg.position_noise), gauss(rng, cfg.position_noise));
      if (p.norm() == 0.0) continue;
      pts.push_back(p);
      owner.push_back(-1);
      rcs.push_back(refl + gauss(rng, 1.0));
    }

    RadarFrame f;
    f.dt = cfg.dt;
    f.frame_index = static_cast<std::uint32_t>(t);
    f.ego_pose = pose;
    GtFlow gt = derive_gt_flow(pts, owner, seq.actors, pose, ego[t + 1], t, cfg.moving_threshold);
    f.gt_flow = std::move(gt.flow);
    f.moving_mask = std::move(gt.moving_mask);
    const Mat3 rt = pose.rotation().transpose();
    const Vec3 v_ego = rt * (ego[t + 1].translation() - pose.translation()) / cfg.dt;
    f.cloud.positions = pts;
    f.cloud.rcs = rcs;
    f.cloud.rrv.resize(pts.size());
    f.class_id.resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      Vec3 v_pt = Vec3::Zero();
      if (owner[i] >= 0) {
        const RigidActor& a = seq.actors[owner[i]];
        const Vec3 x = pose.apply(pts[i]);
        const Vec3 x_next = (a.trajectory[t + 1] * a.trajectory[t].inverse()).apply(x);
        v_pt = rt * (x_next - x) / cfg.dt;
        f.class_id[i] = static_cast<std::uint8_t>(a.cls);
      }
      f.cloud.rrv[i] = measure_rrv(pts[i], v_pt, v_ego) + gauss(rng, cfg.rrv_noise);
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

// ---- serialization ----------------------------------------------------------

namespace {

constexpr char kFrameMagic[8] = {'T', 'A', 'R', 'S', 'F', 'R', 'M', '1'};
constexpr std::uint64_t kHeaderBytes = 8 + 4 + 4 + 4 + 8;

float f32(double v) { return static_cast<float>(v); }

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& b, double v) { put_u32(b, std::bit_cast<std::uint32_t>(f32(v))); }

struct Reader {
  const std::string& b;
  std::size_t pos = 0;
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
    return v;
  }
  double f() { return std::bit_cast<float>(u32()); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(b[pos++]); }
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

RadarFrame quantize_frame(const RadarFrame& frame) {
  RadarFrame q = frame;
  auto qv = [](Vec3& v) {
    for (int c = 0; c < 3; ++c) v(c) = f32(v(c));
  };
  for (auto& p : q.cloud.positions) qv(p);
  for (auto& v : q.gt_flow.vectors) qv(v);
  for (auto& v : q.cloud.rrv) v = f32(v);
  for (auto& v : q.cloud.rcs) v = f32(v);
  // whole-matrix cast: the per-element loop lost the translation rounding under gcc 11 -O3
  const Mat4 m = frame.ego_pose.matrix().cast<float>().cast<double>();
  q.ego_pose = SE3Transform(Mat3(m.topLeftCorner<3, 3>()), Vec3(m.topRightCorner<3, 1>()));
  q.cloud.features = {};
  return q;
}

std::uint64_t frame_record_size(std::uint32_t n) { return kHeaderBytes + 34ULL * n + 64; }

void write_frame(const std::filesystem::path& path, const RadarFrame& frame) {
  const std::size_t n = frame.size();
  if (frame.gt_flow.size() != n || frame.moving_mask.size() != n || frame.class_id.size() != n ||
      frame.cloud.rrv.size() != n || frame.cloud.rcs.size() != n) {
    throw ShapeError("write_frame: per-point arrays differ in length");
  }
  std::string b;
  b.reserve(frame_record_size(static_cast<std::uint32_t>(n)));
  b.append(kFrameMagic, 8);
  put_u32(b, kFrameFormatVersion);
  put_u32(b, frame.frame_index);
  put_u32(b, static_cast<std::uint32_t>(n));
  put_u64(b, std::bit_cast<std::uint64_t>(frame.dt));
  for (const auto& p : frame.cloud.positions)
    for (int c = 0; c < 3; ++c) put_f32(b, p(c));
  for (double v : frame.cloud.rrv) put_f32(b, v);
  for (double v : frame.cloud.rcs) put_f32(b, v);
  for (const auto& v : frame.gt_flow.vectors)
    for (int c = 0; c < 3; ++c) put_f32(b, v(c));
  for (auto m : frame.moving_mask) b.push_back(static_cast<char>(m));
  for (auto c : frame.class_id) b.push_back(static_cast<char>(c));
  const Mat4& m = frame.ego_pose.matrix();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) put_f32(b, m(r, c));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

RadarFrame read_frame(const std::filesystem::path& path) {
  const std::string b = slurp(path);
  if (b.size() < kHeaderBytes || std::memcmp(b.data(), kFrameMagic, 8) != 0) {
    throw FormatError(path.string() + ": not a radar frame record");
  }
  Reader r{b, 8};
  const std::uint32_t version = r.u32();
  if (version != kFrameFormatVersion) {
    throw FormatError(path.string() + ": unsupported frame version " + std::to_string(version));
  }
  RadarFrame f;
  f.frame_index = r.u32();
  const std::uint32_t n = r.u32();
  f.dt = std::bit_cast<double>(r.u64());
  if (b.size() != frame_record_size(n)) {
    throw FormatError(path.string() + ": size " + std::to_string(b.size()) + " does not match header (" +
                      std::to_string(frame_record_size(n)) + ")");
  }
  f.cloud.positions.resize(n);
  for (auto& p : f.cloud.positions)
    for (int c = 0; c < 3; ++c) p(c) = r.f();
  f.cloud.rrv.resize(n);
  for (auto& v : f.cloud.rrv) v = r.f();
  f.cloud.rcs.resize(n);
  for (auto& v : f.cloud.rcs) v = r.f();
  f.gt_flow.vectors.resize(n);
  for (auto& v : f.gt_flow.vectors)
    for (int c = 0; c < 3; ++c) v(c) = r.f();
  f.moving_mask.resize(n);
  for (auto& m : f.moving_mask) m = r.u8();
  f.class_id.resize(n);
  for (auto& c : f.class_id) c = r.u8();
  Mat4 m;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m(i, j) = r.f();
  f.ego_pose = SE3Transform(Mat3(m.topLeftCorner<3, 3>()), Vec3(m.topRightCorner<3, 1>()));
  return f;
}

namespace {
std::string frame_name(std::size_t i) {
  std::ostringstream ss;
  ss << "frame_" << std::setw(3) << std::setfill('0') << i << ".bin";
  return ss.str();
}
}  // namespace

void write_sequence(const std::filesystem::path& dir, const Sequence& seq) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < seq.frames.size(); ++i) write_frame(dir / frame_name(i), seq.frames[i]);
}

std::vector<RadarFrame> read_sequence(const std::filesystem::path& dir) {
  std::vector<RadarFrame> out;
  for (std::size_t i = 0;; ++i) {
    const auto p = dir / frame_name(i);
    if (!std::filesystem::exists(p)) break;
    out.push_back(read_frame(p));
  }
  if (out.empty()) throw FormatError(dir.string() + ": no frames");
  return out;
}

ScenarioConfig sequence_config(const ScenarioConfig& cfg, int index) {
  ScenarioConfig c = cfg;
  // splitmix64 step keyed by the sequence index
  std::uint64_t z = cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  c.seed = z ^ (z >> 31);
  return c;
}

void write_manifest(const std::filesystem::path& root, const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["frames_per_sequence"] = m.frames_per_sequence;
  j["resolution_ratio"] = m.resolution_ratio;
  j["train"] = m.train;
  j["test"] = m.test;
  std::ofstream out(root / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + root.string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw FormatError("missing manifest.json in " + root.string());
  nlohmann::json j;
  try {
    in >> j;
    DatasetManifest m;
    m.version = j.at("version").get<std::uint32_t>();
    if (m.version != kFrameFormatVersion) throw FormatError("manifest: unsupported version");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.frames_per_sequence = j.at("frames_per_sequence").get<int>();
    m.resolution_ratio = j.value("resolution_ratio", 2.5);
    m.train = j.at("train").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

DatasetManifest generate_dataset(const std::filesystem::path& root, const ScenarioConfig& cfg, int num_train,
                                 int num_test) {
  cfg.validate();
  std::filesystem::create_directories(root);
  DatasetManifest m;
  m.seed = cfg.seed;
  m.frames_per_sequence = cfg.clip_length;
  m.resolution_ratio = cfg.resolution_ratio;
  for (int i = 0; i < num_train + num_test; ++i) {
    std::ostringstream name;
    name << "seq_" << std::setw(4) << std::setfill('0') << i;
    write_sequence(root / name.str(), simulate_sequence(sequence_config(cfg, i)));
    (i < num_train ? m.train : m.test).push_back(name.str());
  }
  write_manifest(root, m);
  return m;
}

}  // namespace tars
