#include "tars/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace tars {

using nlohmann::json;
using nlohmann::ordered_json;

// ---- configuration --------------------------------------------------------

namespace {

/// Reads known keys from one JSON object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  template <typename T>
  Reader& operator()(const std::string& key, T& field) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        it->get_to(field);
      } catch (const json::exception& e) {
        throw ConfigError(where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

ordered_json grid_json(const GridSpec& g) {
  ordered_json j;
  j["origin"] = {g.origin.x(), g.origin.y()};
  j["cell_size"] = g.cell_size;
  j["height"] = g.height;
  j["width"] = g.width;
  return j;
}

void read_grid(const json* j, GridSpec& g, const std::string& where) {
  if (j == nullptr) return;
  Reader r(*j, where);
  std::vector<double> origin{g.origin.x(), g.origin.y()};
  r("origin", origin)("cell_size", g.cell_size)("height", g.height)("width", g.width).finish();
  if (origin.size() != 2) throw ConfigError(where + ".origin: expected two numbers");
  g.origin = Vec2(origin[0], origin[1]);
}

ordered_json model_json(const TarsConfig& m) {
  ordered_json j;
  j["levels"] = m.levels;
  j["gamma"] = m.gamma;
  j["point_channels"] = m.point_channels;
  j["flow_channels"] = m.flow_channels;
  j["tvf_channels"] = m.tvf_channels;
  j["axial_blocks"] = m.axial_blocks;
  j["k_cross"] = m.k_cross;
  j["k_tvf"] = m.k_tvf;
  j["clip_length"] = m.clip_length;
  j["grid"] = grid_json(m.grid);
  j["variant"] = to_string(m.variant);
  j["supervision"] = to_string(m.supervision);
  j["use_tvf"] = m.use_tvf;
  j["use_od"] = m.use_od;
  j["decoder_pe"] = m.decoder_pe;
  j["od_channels"] = m.od_channels;
  j["k_encoder"] = m.k_encoder;
  j["k_interp"] = m.k_interp;
  j["k_gru"] = m.k_gru;
  j["position_scale"] = m.position_scale;
  j["rrv_scale"] = m.rrv_scale;
  j["rcs_scale"] = m.rcs_scale;
  return j;
}

void read_model(const json& j, TarsConfig& m) {
  Reader r(j, "model");
  std::string variant = to_string(m.variant), supervision = to_string(m.supervision);
  r("levels", m.levels)("gamma", m.gamma)("point_channels", m.point_channels)("flow_channels", m.flow_channels);
  r("tvf_channels", m.tvf_channels)("axial_blocks", m.axial_blocks)("k_cross", m.k_cross)("k_tvf", m.k_tvf);
  r("clip_length", m.clip_length)("variant", variant)("supervision", supervision)("use_tvf", m.use_tvf);
  r("use_od", m.use_od)("decoder_pe", m.decoder_pe)("od_channels", m.od_channels)("k_encoder", m.k_encoder);
  r("k_interp", m.k_interp)("k_gru", m.k_gru)("position_scale", m.position_scale)("rrv_scale", m.rrv_scale);
  r("rcs_scale", m.rcs_scale);
  read_grid(r.child("grid"), m.grid, "model.grid");
  r.finish();
  try {
    m.variant = variant_from_string(variant);
    m.supervision = supervision_from_string(supervision);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

ordered_json loss_json(const LossConfig& l) {
  ordered_json j;
  j["delta"] = l.delta;
  j["eps_chamfer"] = l.eps_chamfer;
  j["alpha"] = l.alpha;
  j["lambda_bg"] = l.lambda_bg;
  j["lambda_opt"] = l.lambda_opt;
  j["dt"] = l.dt;
  j["k_smooth"] = l.k_smooth;
  j["kde_bandwidth"] = l.kde_bandwidth;
  return j;
}

void read_loss(const json& j, LossConfig& l) {
  Reader r(j, "loss");
  r("delta", l.delta)("eps_chamfer", l.eps_chamfer)("alpha", l.alpha)("lambda_bg", l.lambda_bg);
  r("lambda_opt", l.lambda_opt)("dt", l.dt)("k_smooth", l.k_smooth)("kde_bandwidth", l.kde_bandwidth).finish();
}

ordered_json scenario_json(const ScenarioConfig& s) {
  ordered_json j;
  j["points_per_frame"] = s.points_per_frame;
  j["min_actors"] = s.min_actors;
  j["max_actors"] = s.max_actors;
  j["min_points_per_actor"] = s.min_points_per_actor;
  j["max_points_per_actor"] = s.max_points_per_actor;
  j["min_actor_speed"] = s.min_actor_speed;
  j["max_actor_speed"] = s.max_actor_speed;
  j["max_actor_yaw_rate"] = s.max_actor_yaw_rate;
  j["parked_probability"] = s.parked_probability;
  j["min_ego_speed"] = s.min_ego_speed;
  j["max_ego_speed"] = s.max_ego_speed;
  j["max_ego_yaw_rate"] = s.max_ego_yaw_rate;
  j["fov_deg"] = s.fov_deg;
  j["min_range"] = s.min_range;
  j["max_range"] = s.max_range;
  j["position_noise"] = s.position_noise;
  j["rrv_noise"] = s.rrv_noise;
  j["dt"] = s.dt;
  j["clip_length"] = s.clip_length;
  j["moving_threshold"] = s.moving_threshold;
  j["seg_threshold"] = s.seg_threshold;
  j["resolution_ratio"] = s.resolution_ratio;
  j["static_world"] = s.static_world;
  j["seed"] = s.seed;
  return j;
}

void read_scenario(const json& j, ScenarioConfig& s) {
  Reader r(j, "scenario");
  r("points_per_frame", s.points_per_frame)("min_actors", s.min_actors)("max_actors", s.max_actors);
  r("min_points_per_actor", s.min_points_per_actor)("max_points_per_actor", s.max_points_per_actor);
  r("min_actor_speed", s.min_actor_speed)("max_actor_speed", s.max_actor_speed);
  r("max_actor_yaw_rate", s.max_actor_yaw_rate)("parked_probability", s.parked_probability);
  r("min_ego_speed", s.min_ego_speed)("max_ego_speed", s.max_ego_speed)("max_ego_yaw_rate", s.max_ego_yaw_rate);
  r("fov_deg", s.fov_deg)("min_range", s.min_range)("max_range", s.max_range);
  r("position_noise", s.position_noise)("rrv_noise", s.rrv_noise)("dt", s.dt)("clip_length", s.clip_length);
  r("moving_threshold", s.moving_threshold)("seg_threshold", s.seg_threshold);
  r("resolution_ratio", s.resolution_ratio)("static_world", s.static_world)("seed", s.seed).finish();
}

ordered_json od_json(const OdStubConfig& o) {
  ordered_json j;
  j["base_grid"] = grid_json(o.base_grid);
  j["pillar_channels"] = o.pillar_channels;
  j["map_channels"] = o.map_channels;
  j["levels"] = o.levels;
  return j;
}

void read_od(const json& j, OdStubConfig& o) {
  Reader r(j, "od");
  r("pillar_channels", o.pillar_channels)("map_channels", o.map_channels)("levels", o.levels);
  read_grid(r.child("base_grid"), o.base_grid, "od.base_grid");
  r.finish();
}

ordered_json optim_json(const OptimizerConfig& o) {
  ordered_json j;
  j["kind"] = o.kind;
  j["lr"] = o.lr;
  j["decay"] = o.decay;
  j["decay_every"] = o.decay_every;
  j["clip_norm"] = o.clip_norm;
  j["rho"] = o.rho;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["eps"] = o.eps;
  return j;
}

void read_optim(const json& j, OptimizerConfig& o) {
  Reader r(j, "optim");
  r("kind", o.kind)("lr", o.lr)("decay", o.decay)("decay_every", o.decay_every)("clip_norm", o.clip_norm);
  r("rho", o.rho)("beta1", o.beta1)("beta2", o.beta2)("eps", o.eps).finish();
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    loss.validate();
    scenario.validate();
    od.validate();
    optim.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (steps < 1) throw ConfigError("steps must be positive");
  if (od_steps < 0) throw ConfigError("od_steps must be >= 0");
  if (!(od_lr > 0.0)) throw ConfigError("od_lr must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (num_train < 1 || num_test < 0) throw ConfigError("dataset split sizes must be positive");
  if (checkpoint_dtype != "float32" && checkpoint_dtype != "float64") {
    throw ConfigError("checkpoint_dtype must be float32 or float64");
  }
  if (scenario.clip_length != model.clip_length) {
    throw ConfigError("scenario.clip_length must equal model.clip_length");
  }
  if (std::fabs(scenario.dt - loss.dt) > 1e-12) throw ConfigError("scenario.dt and loss.dt differ");
  if (model.use_tvf && model.use_od && od.levels < model.levels - 1) {
    throw ConfigError("od.levels must cover scene-flow levels 2..L");
  }
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["od_steps"] = c.od_steps;
  j["od_lr"] = c.od_lr;
  j["checkpoint_every"] = c.checkpoint_every;
  j["num_train"] = c.num_train;
  j["num_test"] = c.num_test;
  j["use_camera"] = c.use_camera;
  j["checkpoint_dtype"] = c.checkpoint_dtype;
  j["data_root"] = c.data_root;
  j["out_dir"] = c.out_dir;
  j["od_checkpoint"] = c.od_checkpoint;
  j["model"] = model_json(c.model);
  j["loss"] = loss_json(c.loss);
  j["scenario"] = scenario_json(c.scenario);
  j["od"] = od_json(c.od);
  j["optim"] = optim_json(c.optim);
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "config");
  r("seed", c.seed)("steps", c.steps)("od_steps", c.od_steps)("od_lr", c.od_lr);
  r("checkpoint_every", c.checkpoint_every)("num_train", c.num_train)("num_test", c.num_test);
  r("use_camera", c.use_camera)("checkpoint_dtype", c.checkpoint_dtype)("data_root", c.data_root);
  r("out_dir", c.out_dir)("od_checkpoint", c.od_checkpoint);
  if (const json* m = r.child("model")) read_model(*m, c.model);
  if (const json* l = r.child("loss")) read_loss(*l, c.loss);
  if (const json* s = r.child("scenario")) read_scenario(*s, c.scenario);
  if (const json* o = r.child("od")) read_od(*o, c.od);
  if (const json* o = r.child("optim")) read_optim(*o, c.optim);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << to_json(cfg).dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::uint64_t config_fingerprint(const RunConfig& cfg) {
  ordered_json j;
  j["model"] = model_json(cfg.model);
  j["od"] = od_json(cfg.od);
  return fnv1a(j.dump());
}

std::filesystem::path resolve_data_root(const std::string& explicit_root) {
  if (!explicit_root.empty()) return explicit_root;
  if (const char* env = std::getenv("TARS_DATA_ROOT"); env != nullptr && *env != '\0') return env;
  throw ConfigError("no data root given and TARS_DATA_ROOT is unset");
}

// ---- data -----------------------------------------------------------------

std::vector<Clip> load_split(const std::filesystem::path& root, const std::string& split) {
  const DatasetManifest m = read_manifest(root);
  const std::vector<std::string>* names = nullptr;
  if (split == "train") {
    names = &m.train;
  } else if (split == "test") {
    names = &m.test;
  } else {
    throw ConfigError("unknown split '" + split + "' (expected train or test)");
  }
  std::vector<Clip> clips;
  for (const auto& n : *names) clips.push_back({n, read_sequence(root / n)});
  return clips;
}

std::vector<Clip> simulate_clips(const ScenarioConfig& cfg, int first_index, int count) {
  std::vector<Clip> clips;
  for (int i = first_index; i < first_index + count; ++i) {
    std::ostringstream name;
    name << "seq_" << std::setw(4) << std::setfill('0') << i;
    clips.push_back({name.str(), simulate_sequence(sequence_config(cfg, i)).frames});
  }
  return clips;
}

PreparedPair prepare_pair(const RunConfig& cfg, const RadarFrame& p, const RadarFrame& q) {
  PreparedPair out;
  out.omega = relative_ego_motion(p.ego_pose, q.ego_pose);
  SE3Transform odometry = out.omega;
  if (cfg.model.variant == Variant::kSuperEgo) {
    out.p = ego_compensate(p, out.omega);
    odometry = SE3Transform::identity();
  } else {
    out.p = p;
  }
  out.q = q.cloud;
  out.pseudo = derive_pseudo_labels(out.p, odometry, cfg.scenario.seg_threshold);
  if (cfg.model.variant == Variant::kEgo && cfg.model.supervision == Supervision::kCross && cfg.use_camera) {
    out.pseudo_opt =
        loss::pseudo_optical_flow(out.p.cloud.positions, out.pseudo.fg_flow, CameraModel::front_default());
  }
  return out;
}

// ---- losses over a clip ---------------------------------------------------

namespace {

FlowField gather_flow(const FlowField& f, const std::vector<int>& idx) {
  FlowField out;
  out.vectors.reserve(idx.size());
  for (int i : idx) out.vectors.push_back(f.vectors[i]);
  return out;
}

std::vector<std::uint8_t> gather_mask(const std::vector<std::uint8_t>& m, const std::vector<int>& idx) {
  std::vector<std::uint8_t> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(m[i]);
  return out;
}

std::vector<std::uint8_t> negate(std::vector<std::uint8_t> m) {
  for (auto& v : m) v = v ? 0 : 1;
  return m;
}

const CameraModel& front_camera() {
  static const CameraModel cam = CameraModel::front_default();
  return cam;
}

}  // namespace

ClipLoss clip_loss(ad::Graph& g, const RunConfig& cfg, const TarsModel& model, const ParamStore& params,
                   const Clip& clip, const std::vector<BEVPyramid>* pyramids) {
  if (clip.frames.size() < 2) throw SizeError("clip_loss: a clip needs at least two frames");
  const bool ego = cfg.model.variant == Variant::kEgo;
  const Supervision mode = cfg.model.supervision;
  const std::size_t pairs = clip.frames.size() - 1;
  const double inv = 1.0 / static_cast<double>(pairs);

  ClipLoss out;
  std::map<std::string, double> sums;
  std::vector<std::string> order;
  TemporalHidden hidden;
  for (std::size_t t = 0; t < pairs; ++t) {
    const PreparedPair pp = prepare_pair(cfg, clip.frames[t], clip.frames[t + 1]);
    ForwardInputs in;
    in.p = &pp.p.cloud;
    in.q = &pp.q;
    in.hidden = &hidden;
    in.od = pyramids != nullptr ? &(*pyramids)[t + 1] : nullptr;
    std::vector<std::uint8_t> override_mask;
    if (ego) {
      override_mask = negate(pp.pseudo.seg_moving);
      in.static_override = &override_mask;
    }
    ForwardOutput fo = model.forward(g, params, in);

    loss::LossInputs li;
    li.p = pp.p.cloud.positions;
    li.rrv = pp.p.cloud.rrv;
    li.q = pp.q.positions;
    li.flow = fo.flow;
    for (const LevelState& lvl : fo.levels) {
      loss::LevelTargets lt;
      lt.flow = lvl.flow;
      if (mode == Supervision::kFull) {
        lt.fg_target = gather_flow(pp.p.gt_flow, lvl.p_index);
        lt.moving = gather_mask(pp.p.moving_mask, lvl.p_index);
        lt.bg_target = lt.fg_target;
      } else {
        lt.fg_target = gather_flow(pp.pseudo.fg_flow, lvl.p_index);
        lt.moving = gather_mask(pp.pseudo.fg_mask, lvl.p_index);
        lt.bg_target = gather_flow(pp.pseudo.bg_flow, lvl.p_index);
      }
      lt.stat = negate(lt.moving);
      li.levels.push_back(std::move(lt));
    }
    if (ego) {
      li.seg = fo.seg;
      li.seg_pseudo = pp.pseudo.seg_moving;
      li.rot = fo.ego->rotation;
      li.trans = fo.ego->translation;
      li.ego_gt = pp.omega;
      if (mode == Supervision::kCross && cfg.use_camera) {
        li.camera = &front_camera();
        li.pseudo_opt = pp.pseudo_opt;
        li.moving = pp.pseudo.fg_mask;
      }
    }
    loss::TotalLoss tl = loss::total_loss(li, cfg.loss, mode);
    out.total = out.total.valid() ? ad::add(out.total, tl.total) : tl.total;
    for (const auto& [name, v] : tl.report.terms) {
      if (!sums.count(name)) order.push_back(name);
      sums[name] += v * inv;
    }
    out.report.chamfer_all_discarded = out.report.chamfer_all_discarded || tl.report.chamfer_all_discarded;
    hidden = fo.hidden;
  }
  out.total = ad::scale(out.total, inv);
  out.report.total = out.total.scalar();
  for (const auto& name : order) out.report.terms.emplace_back(name, sums[name]);
  return out;
}

// ---- trainer --------------------------------------------------------------

namespace {

constexpr std::uint64_t kOdSeedSalt = 0x6f642d7374756221ULL;

ArchiveDtype dtype_of(const RunConfig& cfg) {
  return cfg.checkpoint_dtype == "float32" ? ArchiveDtype::kFloat32 : ArchiveDtype::kFloat64;
}

std::string step_name(int step) {
  std::ostringstream s;
  s << "checkpoint_step" << std::setw(6) << std::setfill('0') << step << ".bin";
  return s.str();
}

}  // namespace

Trainer::Trainer(RunConfig cfg, std::vector<Clip> clips)
    : cfg_(std::move(cfg)), clips_(std::move(clips)), model_(cfg_.model), od_(cfg_.od), opt_(cfg_.optim) {
  cfg_.validate();
  if (clips_.empty()) throw SizeError("Trainer: no training clips");
  for (const Clip& c : clips_) {
    if (static_cast<int>(c.frames.size()) != cfg_.model.clip_length) {
      throw SizeError("Trainer: clip " + c.name + " does not have clip_length frames");
    }
  }
  model_.init_params(params_, cfg_.seed);
  if (uses_od()) od_.init_params(params_, cfg_.seed ^ kOdSeedSalt);
}

bool Trainer::uses_od() const { return cfg_.model.use_tvf && cfg_.model.use_od; }

void Trainer::stage_one() {
  if (!uses_od()) return;
  if (!cfg_.od_checkpoint.empty()) {
    const Archive a = load_archive(cfg_.od_checkpoint);
    for (const auto& e : a.params.entries()) {
      if (e.name.rfind("od.", 0) != 0) continue;
      ParamStore::Entry& dst = params_.at(e.name);
      if (dst.value.rows != e.value.rows || dst.value.cols != e.value.cols) {
        throw ShapeError("od checkpoint entry " + e.name + " has the wrong shape");
      }
      dst.value = e.value;
    }
    params_.freeze_prefix("od.");
  } else {
    std::vector<PointCloud> clouds;
    std::vector<std::vector<std::uint8_t>> labels;
    for (const Clip& c : clips_) {
      for (const RadarFrame& f : c.frames) {
        clouds.push_back(f.cloud);
        labels.push_back(f.class_id);
      }
    }
    train_od_proxy(od_, params_, clouds, labels, cfg_.od_steps, cfg_.od_lr);
  }
  pyramids_.clear();
  for (const Clip& c : clips_) {
    std::vector<BEVPyramid> per;
    for (const RadarFrame& f : c.frames) per.push_back(od_.pyramid(params_, f.cloud));
    pyramids_.push_back(std::move(per));
  }
}

const BEVPyramid* Trainer::pyramid_for(std::size_t clip, std::size_t frame) const {
  if (pyramids_.empty()) return nullptr;
  return &pyramids_[clip][frame];
}

StepReport Trainer::step() {
  if (uses_od() && pyramids_.empty()) throw std::logic_error("Trainer: stage_one must run before step");
  const int s = opt_.steps();
  const std::size_t n = clips_.size();
  // clip order: one seeded permutation per pass over the data
  const std::uint64_t epoch = static_cast<std::uint64_t>(s) / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(cfg_.seed * 0x9e3779b97f4a7c15ULL + epoch);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t c = perm[static_cast<std::size_t>(s) % n];

  StepReport r;
  r.lr = opt_.current_lr();
  ad::Graph g;
  ClipLoss cl = clip_loss(g, cfg_, model_, params_, clips_[c], pyramids_.empty() ? nullptr : &pyramids_[c]);
  r.loss = cl.total.scalar();
  r.terms = cl.report;
  if (!std::isfinite(r.loss)) {
    dump_batch(c, "non-finite loss at step " + std::to_string(s));
    throw TrainingError("non-finite loss at step " + std::to_string(s) + " on clip " + clips_[c].name);
  }
  g.backward(cl.total);
  g.accumulate_param_grads(params_);
  try {
    r.grad_norm = opt_.step(params_);
  } catch (const std::runtime_error& e) {
    dump_batch(c, "non-finite gradient at step " + std::to_string(s));
    throw TrainingError(std::string(e.what()) + " on clip " + clips_[c].name);
  }
  r.step = opt_.steps();
  return r;
}

void Trainer::dump_batch(std::size_t clip, const std::string& what) const {
  if (dump_dir_.empty()) return;
  const std::filesystem::path dir = dump_dir_ / "nan_dump";
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < clips_[clip].frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.bin", i);
    write_frame(dir / name, clips_[clip].frames[i]);
  }
  ordered_json info;
  info["reason"] = what;
  info["clip"] = clips_[clip].name;
  info["step"] = opt_.steps();
  info["config"] = to_json(cfg_);
  std::ofstream(dir / "info.json") << info.dump(2) << "\n";
}

void Trainer::run(std::ostream* log, const std::filesystem::path& out_dir) {
  dump_dir_ = out_dir;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  while (opt_.steps() < cfg_.steps) {
    const StepReport r = step();
    if (log != nullptr) {
      ordered_json rec;
      rec["step"] = r.step;
      rec["loss"] = r.loss;
      rec["grad_norm"] = r.grad_norm;
      rec["lr"] = r.lr;
      ordered_json terms = ordered_json::object();
      for (const auto& [name, v] : r.terms.terms) terms[name] = v;
      rec["terms"] = terms;
      *log << rec.dump() << "\n";
    }
    if (!out_dir.empty() && cfg_.checkpoint_every > 0 && r.step % cfg_.checkpoint_every == 0) {
      save_checkpoint(out_dir / step_name(r.step));
    }
  }
  if (!out_dir.empty()) save_checkpoint(out_dir / "model.bin");
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  ParamStore all;
  all.merge(params_);
  opt_.export_state(all);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_archive(path, all, config_fingerprint(cfg_), dtype_of(cfg_));
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const Archive a = load_checkpoint_params(path, cfg_);
  ParamStore opt_state;
  for (const auto& e : a.params.entries()) {
    if (e.name.rfind("opt/", 0) == 0) {
      opt_state.add(e.name, e.value.rows, e.value.cols).value = e.value;
      continue;
    }
    ParamStore::Entry& dst = params_.at(e.name);
    if (dst.value.rows != e.value.rows || dst.value.cols != e.value.cols) {
      throw ShapeError("checkpoint entry " + e.name + " has the wrong shape");
    }
    dst.value = e.value;
    dst.frozen = e.frozen;
  }
  opt_.import_state(opt_state);
  if (uses_od()) {
    pyramids_.clear();
    for (const Clip& c : clips_) {
      std::vector<BEVPyramid> per;
      for (const RadarFrame& f : c.frames) per.push_back(od_.pyramid(params_, f.cloud));
      pyramids_.push_back(std::move(per));
    }
  }
}

Archive load_checkpoint_params(const std::filesystem::path& path, const RunConfig& cfg) {
  Archive a = load_archive(path);
  if (a.fingerprint != config_fingerprint(cfg)) {
    throw ConfigError("checkpoint " + path.string() + " was written for a different model configuration");
  }
  return a;
}

// ---- evaluation -----------------------------------------------------------

std::vector<PairPrediction> predict_clip(const RunConfig& cfg, const ParamStore* params, const Clip& clip) {
  std::vector<PairPrediction> out;
  if (clip.frames.size() < 2) return out;
  const std::size_t pairs = clip.frames.size() - 1;
  if (params == nullptr) {
    for (std::size_t t = 0; t < pairs; ++t) {
      PairPrediction pr;
      pr.pair = prepare_pair(cfg, clip.frames[t], clip.frames[t + 1]);
      pr.flow.vectors.assign(pr.pair.p.size(), Vec3::Zero());
      out.push_back(std::move(pr));
    }
    return out;
  }
  const TarsModel model(cfg.model);
  const bool od = cfg.model.use_tvf && cfg.model.use_od;
  const OdStub stub(cfg.od);
  ad::Graph g;
  TemporalHidden hidden;
  for (std::size_t t = 0; t < pairs; ++t) {
    PairPrediction pr;
    pr.pair = prepare_pair(cfg, clip.frames[t], clip.frames[t + 1]);
    BEVPyramid pyr;
    if (od) pyr = stub.pyramid(*params, pr.pair.q);
    ForwardInputs in;
    in.p = &pr.pair.p.cloud;
    in.q = &pr.pair.q;
    in.hidden = &hidden;
    in.od = od ? &pyr : nullptr;
    ForwardOutput fo = model.forward(g, *params, in);
    pr.flow.vectors = positions_from_tensor(fo.flow.value());
    if (fo.ego) pr.ego = fo.ego->transform();
    hidden = fo.hidden;
    out.push_back(std::move(pr));
  }
  return out;
}

MetricReport evaluate(const RunConfig& cfg, const ParamStore* params, const std::vector<Clip>& clips) {
  MetricAccumulator acc;
  for (const Clip& c : clips) {
    for (const PairPrediction& pr : predict_clip(cfg, params, c)) {
      const RadarFrame& p = pr.pair.p;
      const std::vector<double> ratio(p.size(), cfg.scenario.resolution_ratio);
      acc.add_frame(pr.flow, p.gt_flow, p.moving_mask, p.class_id, ratio);
      if (pr.ego) acc.add_ego(*pr.ego, pr.pair.omega);
    }
  }
  return acc.report();
}

EvalFiles write_reports(const std::filesystem::path& dir, const MetricReport& r) {
  std::filesystem::create_directories(dir);
  EvalFiles f{dir / "metrics.csv", dir / "per_class.csv"};
  std::ofstream(f.metrics_csv, std::ios::binary) << metrics_csv(r);
  std::ofstream(f.per_class_csv, std::ios::binary) << per_class_csv(r);
  return f;
}

// ---- CLI actions ----------------------------------------------------------

DatasetManifest run_generate(const RunConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  DatasetManifest m = generate_dataset(out, cfg.scenario, cfg.num_train, cfg.num_test);
  save_run_config(out / "config.json", cfg);
  return m;
}

void run_training(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out,
                  const std::filesystem::path& resume) {
  Trainer trainer(cfg, load_split(data, "train"));
  std::filesystem::create_directories(out);
  save_run_config(out / "config.json", cfg);
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
  } else {
    trainer.stage_one();
    if (trainer.uses_od()) {
      ParamStore od;
      for (const auto& e : trainer.params().entries()) {
        if (e.name.rfind("od.", 0) == 0) od.add(e.name, e.value.rows, e.value.cols) = e;
      }
      save_archive(out / "od_stub.bin", od, config_fingerprint(cfg), dtype_of(cfg));
    }
  }
  std::ofstream log(out / "train_log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  trainer.run(&log, out);
}

MetricReport run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                      const std::filesystem::path& data, const std::string& split,
                      const std::filesystem::path& report_dir) {
  const Archive a = load_checkpoint_params(checkpoint, cfg);
  const MetricReport r = evaluate(cfg, &a.params, load_split(data, split));
  write_reports(report_dir, r);
  return r;
}

int run_infer(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& data,
              const std::string& split, const std::filesystem::path& out) {
  const Archive a = load_checkpoint_params(checkpoint, cfg);
  int written = 0;
  for (const Clip& c : load_split(data, split)) {
    const auto preds = predict_clip(cfg, &a.params, c);
    std::filesystem::create_directories(out / c.name);
    for (std::size_t t = 0; t < preds.size(); ++t) {
      RadarFrame f = preds[t].pair.p;
      f.gt_flow = preds[t].flow;
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.bin", t);
      write_frame(out / c.name / name, f);
      ++written;
    }
  }
  return written;
}

// ---- plotting -------------------------------------------------------------

std::string render_flow_svg(const std::vector<Vec3>& positions, const FlowField& flow,
                            const std::vector<std::uint8_t>& moving, const SvgOptions& o) {
  if (flow.size() != positions.size()) throw ShapeError("render_flow_svg: flow and positions differ in length");
  if (!moving.empty() && moving.size() != positions.size()) {
    throw ShapeError("render_flow_svg: mask and positions differ in length");
  }
  const double w = (o.y_max - o.y_min) * o.pixels_per_meter;
  const double h = (o.x_max - o.x_min) * o.pixels_per_meter;
  auto px = [&](const Vec3& p) { return (o.y_max - p.y()) * o.pixels_per_meter; };
  auto py = [&](const Vec3& p) { return (o.x_max - p.x()) * o.pixels_per_meter; };
  std::ostringstream s;
  s << std::fixed << std::setprecision(3);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << " " << h << "\">\n";
  s << "<defs><marker id=\"head\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" orient=\"auto\">"
       "<path d=\"M0,0 L6,3 L0,6 z\" fill=\"black\"/></marker></defs>\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Vec3& p = positions[i];
    const Vec3 e = p + o.arrow_scale * flow.vectors[i];
    const bool mv = !moving.empty() && moving[i];
    s << "<circle cx=\"" << px(p) << "\" cy=\"" << py(p) << "\" r=\"2\" fill=\"" << (mv ? "crimson" : "gray")
      << "\"/>\n";
    s << "<line class=\"flow\" x1=\"" << px(p) << "\" y1=\"" << py(p) << "\" x2=\"" << px(e) << "\" y2=\"" << py(e)
      << "\" stroke=\"black\" stroke-width=\"1\" marker-end=\"url(#head)\"/>\n";
  }
  s << "</svg>\n";
  return s.str();
}

int run_plot(const std::filesystem::path& in, const std::filesystem::path& out, double arrow_scale) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_regular_file(in)) {
    files.push_back(in);
  } else {
    for (const auto& e : std::filesystem::recursive_directory_iterator(in)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && name.rfind("frame_", 0) == 0 && e.path().extension() == ".bin") {
        files.push_back(e.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  SvgOptions opt;
  opt.arrow_scale = arrow_scale;
  for (const auto& f : files) {
    const RadarFrame fr = read_frame(f);
    std::filesystem::path rel =
        std::filesystem::is_regular_file(in) ? f.filename() : std::filesystem::relative(f, in);
    rel.replace_extension(".svg");
    const auto dst = out / rel;
    std::filesystem::create_directories(dst.parent_path());
    std::ofstream(dst, std::ios::binary) << render_flow_svg(fr.cloud.positions, fr.gt_flow, fr.moving_mask, opt);
  }
  return static_cast<int>(files.size());
}

}  // namespace tars
