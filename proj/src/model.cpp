#include "tars/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace tars {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kEgo:
      return "ego";
    case Variant::kSuperEgo:
      return "superego";
    case Variant::kNoEgo:
      return "no-ego";
  }
  return "?";
}

std::string to_string(Supervision s) {
  switch (s) {
    case Supervision::kCross:
      return "cross";
    case Supervision::kCrossPlus:
      return "cross_plus";
    case Supervision::kSelf:
      return "self";
    case Supervision::kFull:
      return "full";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "ego") return Variant::kEgo;
  if (s == "superego") return Variant::kSuperEgo;
  if (s == "no-ego" || s == "noego" || s == "no_ego") return Variant::kNoEgo;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

Supervision supervision_from_string(const std::string& s) {
  if (s == "cross") return Supervision::kCross;
  if (s == "cross_plus" || s == "cross+") return Supervision::kCrossPlus;
  if (s == "self") return Supervision::kSelf;
  if (s == "full") return Supervision::kFull;
  throw std::invalid_argument("unknown supervision '" + s + "'");
}

void TarsConfig::validate() const {
  grid.validate();
  if (levels < 2) throw std::invalid_argument("TarsConfig: at least two levels required");
  if (gamma < 1) throw std::invalid_argument("TarsConfig: gamma must be >= 1");
  if (point_channels < 1 || flow_channels < 1 || tvf_channels < 1 || od_channels < 1) {
    throw std::invalid_argument("TarsConfig: channel counts must be positive");
  }
  if (axial_blocks < 0 || k_cross < 1 || k_encoder < 1 || k_interp < 1 || k_gru < 1) {
    throw std::invalid_argument("TarsConfig: neighbour counts must be positive");
  }
  if (k_tvf != 5 && k_tvf != 9 && k_tvf != 13) {
    throw std::invalid_argument("TarsConfig: k_tvf must be 5, 9 or 13");
  }
  if (k_tvf > grid.cells()) throw std::invalid_argument("TarsConfig: k_tvf exceeds the grid cell count");
  if (clip_length < 2) throw std::invalid_argument("TarsConfig: clip length must be >= 2");
  if (!(position_scale > 0.0) || !(rrv_scale > 0.0) || !(rcs_scale > 0.0)) {
    throw std::invalid_argument("TarsConfig: input scales must be positive");
  }
  bool ok = false;
  switch (variant) {
    case Variant::kEgo:
      ok = supervision == Supervision::kCross || supervision == Supervision::kFull;
      break;
    case Variant::kSuperEgo:
    case Variant::kNoEgo:
      ok = supervision != Supervision::kCross;
      break;
  }
  if (!ok) {
    throw std::invalid_argument("TarsConfig: supervision '" + to_string(supervision) +
                                "' is not available for the " + to_string(variant) + " variant");
  }
}

std::vector<int> TarsConfig::level_sizes(int n) const {
  double div = 1.0;
  for (int i = 1; i < levels; ++i) div *= gamma;
  if (n < div) {
    throw SizeError("TarsConfig: " + std::to_string(n) + " points cannot fill " +
                    std::to_string(levels) + " levels at gamma " + std::to_string(gamma));
  }
  std::vector<int> out(static_cast<std::size_t>(levels));
  double d = 1.0;
  for (int l = levels; l >= 1; --l) {
    out[l - 1] = std::max(1, static_cast<int>(std::lround(n / d)));
    d *= gamma;
  }
  return out;
}

SE3Transform EgoEstimate::transform() const {
  const ad::Tensor& r = rotation.value();
  const ad::Tensor& t = translation.value();
  Mat3 m;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) m(a, b) = r(a, b);
  return SE3Transform(m, Vec3(t(0, 0), t(0, 1), t(0, 2)));
}

TarsModel::TarsModel(TarsConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

// ---- layer descriptors --------------------------------------------------

namespace {
std::string lv(int level) { return ".l" + std::to_string(level); }
}  // namespace

blocks::Mlp TarsModel::input_mlp() const {
  return {"in", {5, cfg_.point_channels, cfg_.point_channels}};
}

blocks::Mlp TarsModel::encoder_mlp(int level) const {
  return {"enc" + lv(level), {cfg_.point_channels + 3, cfg_.point_channels, cfg_.point_channels}};
}

blocks::Linear TarsModel::gru_gate(const std::string& which) const {
  return {"gru." + which, 2 * cfg_.point_channels, cfg_.point_channels, true};
}

blocks::Attention TarsModel::cross_attention(int level) const {
  const int c = cfg_.point_channels, d = cfg_.flow_channels;
  return {"cross" + lv(level), {c, c, d, d, true, 3, 1}};
}

blocks::Attention TarsModel::self_attention(int level) const {
  const int d = cfg_.flow_channels;
  return {"self" + lv(level), {d, d, d, d, true, 3, 1}};
}

blocks::Conv2d TarsModel::od_adapter(int level) const {
  return {"tvf" + lv(level) + ".od", cfg_.od_channels, cfg_.tvf_channels, 3, true};
}

blocks::ConvGru TarsModel::scene_update(int level) const {
  return {"tvf" + lv(level) + ".gru", cfg_.tvf_channels, cfg_.tvf_channels, 3};
}

blocks::PointToGridAttention TarsModel::flow_painting(int level) const {
  return {"tvf" + lv(level) + ".paint", cfg_.point_channels + cfg_.flow_channels, cfg_.tvf_channels};
}

blocks::SpatialAttentionFusion TarsModel::fusion(int level) const {
  return {"tvf" + lv(level) + ".fuse", cfg_.tvf_channels, 3};
}

blocks::AxialAttentionBlock TarsModel::axial(int level, int block) const {
  return {"tvf" + lv(level) + ".axial" + std::to_string(block), cfg_.tvf_channels};
}

blocks::Attention TarsModel::decoder_attention(int level) const {
  const int c = cfg_.point_channels, d = cfg_.flow_channels;
  return {"dec" + lv(level), {d + c, cfg_.tvf_channels, d, d, cfg_.decoder_pe, 2, 1}};
}

int TarsModel::head_width(int level) const {
  const int d = cfg_.flow_channels;
  if (level == 1) return d;
  return cfg_.use_tvf ? 3 * d : 2 * d;
}

blocks::Attention TarsModel::head_attention(int level) const {
  const int w = head_width(level), d = cfg_.flow_channels;
  return {"head" + lv(level) + ".attn", {w, w, d, d, true, 3, 1}};
}

blocks::Linear TarsModel::head_reduce(int level) const {
  return {"head" + lv(level) + ".reduce", cfg_.flow_channels, cfg_.point_channels, true};
}

blocks::Linear TarsModel::head_out(int level) const {
  return {"head" + lv(level) + ".out", cfg_.point_channels, 3, true};
}

blocks::Mlp TarsModel::seg_mlp() const {
  const int d = cfg_.flow_channels;
  return {"seg", {d, d, std::max(1, d / 2), 1}};
}

void TarsModel::init_params(ParamStore& params, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  input_mlp().init(params, rng);
  for (const char* w : {"z", "r", "c"}) gru_gate(w).init(params, rng);
  for (int l = 1; l <= cfg_.levels; ++l) {
    encoder_mlp(l).init(params, rng);
    cross_attention(l).init(params, rng);
    self_attention(l).init(params, rng);
    if (l >= 2 && cfg_.use_tvf) {
      if (cfg_.use_od) od_adapter(l).init(params, rng);
      if (l >= 3) scene_update(l).init(params, rng);
      flow_painting(l).init(params, rng);
      fusion(l).init(params, rng);
      for (int b = 0; b < cfg_.axial_blocks; ++b) axial(l, b).init(params, rng);
      decoder_attention(l).init(params, rng);
    }
    head_attention(l).init(params, rng);
    head_reduce(l).init(params, rng);
    head_out(l).init(params, rng);
    // start the residual predictor near zero
    for (double& v : params.value(head_out(l).weight_name()).data) v *= 0.1;
    for (double& v : params.value(head_out(l).bias_name()).data) v = 0.0;
  }
  if (cfg_.variant == Variant::kEgo) seg_mlp().init(params, rng);
}

// ---- inputs and temporal module -----------------------------------------

ad::Tensor TarsModel::raw_features(const PointCloud& cloud) const {
  cloud.validate();
  ad::Tensor t(static_cast<int>(cloud.size()), 5);
  for (int i = 0; i < t.rows; ++i) {
    for (int c = 0; c < 3; ++c) t(i, c) = cloud.positions[i](c) / cfg_.position_scale;
    t(i, 3) = cloud.rrv[i] / cfg_.rrv_scale;
    t(i, 4) = cloud.rcs[i] / cfg_.rcs_scale;
  }
  return t;
}

ad::Var TarsModel::input_features(ad::Graph& g, const ParamStore& params, const PointCloud& cloud) const {
  return input_mlp()(g, params, g.constant(raw_features(cloud)));
}

PointGruResult TarsModel::point_gru_step(ad::Graph& g, const ParamStore& params, ad::Var features,
                                         std::span<const Vec3> positions,
                                         const TemporalHidden& hidden) const {
  if (features.rows() != static_cast<int>(positions.size())) {
    throw ShapeError("point_gru_step: one feature row per position required");
  }
  std::vector<Vec3> pos(positions.begin(), positions.end());
  if (hidden.empty()) return {features, TemporalHidden{pos, features}};
  if (hidden.features.rows() != static_cast<int>(hidden.positions.size())) {
    throw ShapeError("point_gru_step: hidden rows differ from its positions");
  }
  const int k = std::min(cfg_.k_gru, static_cast<int>(hidden.positions.size()));
  const InterpWeights w = idw_weights(hidden.positions, positions, k);
  ad::Var h = ad::weighted_gather(hidden.features, w.index, w.weight, k);
  ad::Var xh = ad::concat_cols({features, h});
  ad::Var z = ad::sigmoid(gru_gate("z")(g, params, xh));
  ad::Var r = ad::sigmoid(gru_gate("r")(g, params, xh));
  ad::Var cand = ad::tanh(gru_gate("c")(g, params, ad::concat_cols({features, ad::mul(r, h)})));
  ad::Var out = ad::add(cand, ad::mul(z, ad::sub(h, cand)));
  return {out, TemporalHidden{pos, out}};
}

// ---- encoder ------------------------------------------------------------

namespace {

// MLP over [feature_j, pos_j - center_i] followed by a max over the neighbourhood
ad::Var set_abstraction(ad::Graph& g, const ParamStore& params, const blocks::Mlp& mlp,
                        std::span<const Vec3> src, ad::Var src_feat, std::span<const Vec3> centers,
                        int k) {
  const Neighbors nb = knn_points(centers, src, k);
  ad::Tensor rel(static_cast<int>(nb.index.size()), 3);
  for (int i = 0; i < static_cast<int>(centers.size()); ++i)
    for (int j = 0; j < k; ++j) {
      const Vec3 d = src[nb.at(i, j)] - centers[i];
      for (int c = 0; c < 3; ++c) rel(i * k + j, c) = d(c);
    }
  ad::Var x = ad::concat_cols({ad::gather_rows(src_feat, nb.index), g.constant(std::move(rel))});
  return ad::group_max(mlp(g, params, x), blocks::uniform_offsets(static_cast<int>(centers.size()), k));
}

std::vector<Vec3> pick(std::span<const Vec3> pts, std::span<const int> idx) {
  std::vector<Vec3> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(pts[i]);
  return out;
}

}  // namespace

std::vector<LevelState> TarsModel::multi_scale_encoder(ad::Graph& g, const ParamStore& params,
                                                       std::span<const Vec3> p, ad::Var p_feat,
                                                       std::span<const Vec3> q, ad::Var q_feat) const {
  const int L = cfg_.levels;
  const std::vector<int> np = cfg_.level_sizes(static_cast<int>(p.size()));
  const std::vector<int> nq = cfg_.level_sizes(static_cast<int>(q.size()));
  std::vector<LevelState> out(static_cast<std::size_t>(L));

  struct Side {
    std::vector<int> index;
    std::vector<Vec3> points;
    ad::Var feat;
  };
  auto build = [&](std::span<const Vec3> pts, ad::Var feat, const std::vector<int>& sizes) {
    std::vector<Side> sides(static_cast<std::size_t>(L));
    Side& top = sides[L - 1];
    top.index.resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) top.index[i] = static_cast<int>(i);
    top.points.assign(pts.begin(), pts.end());
    top.feat = set_abstraction(g, params, encoder_mlp(L), top.points, feat, top.points,
                               std::min(cfg_.k_encoder, static_cast<int>(pts.size())));
    for (int l = L - 1; l >= 1; --l) {
      const Side& fine = sides[l];
      Side& s = sides[l - 1];
      const int m = sizes[l - 1];
      std::vector<int> local;
      if (m == static_cast<int>(fine.points.size())) {
        local.resize(m);
        for (int i = 0; i < m; ++i) local[i] = i;
      } else {
        local = farthest_point_sampling(fine.points, m, 0);
      }
      for (int i : local) s.index.push_back(fine.index[i]);
      s.points = pick(fine.points, local);
      s.feat = set_abstraction(g, params, encoder_mlp(l), fine.points, fine.feat, s.points,
                               std::min(cfg_.k_encoder, static_cast<int>(fine.points.size())));
    }
    return sides;
  };
  auto ps = build(p, p_feat, np);
  auto qs = build(q, q_feat, nq);
  for (int l = 1; l <= L; ++l) {
    LevelState& s = out[l - 1];
    s.level = l;
    s.p_index = std::move(ps[l - 1].index);
    s.p_points = std::move(ps[l - 1].points);
    s.p_feat = ps[l - 1].feat;
    s.q_index = std::move(qs[l - 1].index);
    s.q_points = std::move(qs[l - 1].points);
    s.q_feat = qs[l - 1].feat;
  }
  return out;
}

// ---- point-level embeddings ---------------------------------------------

ad::Var TarsModel::point_level_embeddings(ad::Graph& g, const ParamStore& params, const LevelState& level,
                                          ad::Var coarse_flow) const {
  const int n = static_cast<int>(level.p_points.size());
  const int m = static_cast<int>(level.q_points.size());
  if (coarse_flow.rows() != n || coarse_flow.cols() != 3) {
    throw ShapeError("point_level_embeddings: coarse flow must be N_l x 3");
  }
  if (cfg_.k_cross > m) {
    throw SizeError("point_level_embeddings: k_cross=" + std::to_string(cfg_.k_cross) + " exceeds |Q^l|=" +
                    std::to_string(m));
  }
  ad::Var warped = ad::add(g.constant(positions_tensor(level.p_points)), coarse_flow);
  const std::vector<Vec3> pw = positions_from_tensor(warped.value());
  const int kq = cfg_.k_cross;
  const Neighbors cross = knn_points(pw, level.q_points, kq);
  std::vector<int> rep(cross.index.size());
  for (std::size_t s = 0; s < rep.size(); ++s) rep[s] = static_cast<int>(s / kq);
  ad::Var rel = ad::sub(ad::gather_rows(g.constant(positions_tensor(level.q_points)), cross.index),
                        ad::gather_rows(warped, rep));
  ad::Var e_cross = cross_attention(level.level)
                        .indexed(g, params, level.p_feat, level.q_feat, cross.index,
                                 blocks::uniform_offsets(n, kq), rel);

  const int ks = std::min(cfg_.k_cross, n);
  const Neighbors self = knn_points(level.p_points, level.p_points, ks);
  ad::Tensor rel_self(n * ks, 3);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < ks; ++j) {
      const Vec3 d = level.p_points[self.at(i, j)] - level.p_points[i];
      for (int c = 0; c < 3; ++c) rel_self(i * ks + j, c) = d(c);
    }
  return self_attention(level.level)
      .indexed(g, params, e_cross, e_cross, self.index, blocks::uniform_offsets(n, ks),
               g.constant(std::move(rel_self)));
}

// ---- TVF ----------------------------------------------------------------

TVFState TarsModel::tvf_encode(ad::Graph& g, const ParamStore& params, int level, const LevelState& prev,
                               const BEVLevel* od_map, const TVFState* prev_tvf) const {
  const GridSpec& grid = cfg_.grid;
  const int h = grid.height, w = grid.width;
  if (!prev.flow.valid() || !prev.embedding.valid()) {
    throw std::invalid_argument("tvf_encode: previous level has no flow/embedding yet");
  }
  if (prev_tvf != nullptr && !(prev_tvf->grid == grid)) throw ShapeError("tvf_encode: TVF grid mismatch");

  ad::Var x_od;
  if (cfg_.use_od && od_map != nullptr) {
    const GridSpec& og = od_map->grid;
    if (od_map->map.rows != og.cells() || od_map->map.cols != cfg_.od_channels) {
      throw ShapeError("tvf_encode: detector map does not match its grid/channels");
    }
    ad::Var m = ad::leaky_relu(od_adapter(level)(g, params, g.constant(od_map->map), og.height, og.width),
                               blocks::kLeakySlope);
    x_od = ad::adaptive_avg_pool(m, og.height, og.width, h, w);
  } else {
    x_od = g.constant(ad::Tensor(grid.cells(), cfg_.tvf_channels));
  }
  ad::Var traffic = x_od;
  if (prev_tvf != nullptr) traffic = scene_update(level)(g, params, x_od, prev_tvf->field, h, w);

  std::vector<Vec3> warped = prev.p_points;
  const ad::Tensor& f = prev.flow.value();
  for (std::size_t i = 0; i < warped.size(); ++i) warped[i] += Vec3(f(i, 0), f(i, 1), f(i, 2));
  const std::vector<int> cells = voxelize_2d(warped, grid);
  ad::Var motion = flow_painting(level)(g, params, ad::concat_cols({prev.p_feat, prev.embedding}), cells,
                                        grid.cells());
  ad::Var field = fusion(level)(g, params, traffic, motion, h, w);
  for (int b = 0; b < cfg_.axial_blocks; ++b) field = axial(level, b)(g, params, field, h, w);
  return {field, grid, level};
}

ad::Var TarsModel::tvf_decode(ad::Graph& g, const ParamStore& params, int level, ad::Var p_warp, ad::Var query,
                              const TVFState& tvf) const {
  const GridSpec& grid = tvf.grid;
  if (p_warp.cols() != 3 || query.rows() != p_warp.rows()) {
    throw ShapeError("tvf_decode: one query row per warped point required");
  }
  std::vector<Vec3> centers;
  centers.reserve(grid.cells());
  ad::Tensor center_xy(grid.cells(), 2);
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c) {
      const Vec2 cc = grid.cell_center(r, c);
      centers.emplace_back(cc.x(), cc.y(), 0.0);
      center_xy(r * grid.width + c, 0) = cc.x();
      center_xy(r * grid.width + c, 1) = cc.y();
    }
  const std::vector<Vec3> pw = positions_from_tensor(p_warp.value());
  std::vector<Vec3> flat(pw.size());
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = Vec3(pw[i].x(), pw[i].y(), 0.0);
  const int k = cfg_.k_tvf;
  const Neighbors nb = knn_points(flat, centers, k);
  const int n = static_cast<int>(flat.size());
  std::optional<ad::Var> rel;
  if (cfg_.decoder_pe) {
    // offsets measured in cells
    std::vector<int> rep(nb.index.size());
    for (std::size_t s = 0; s < rep.size(); ++s) rep[s] = static_cast<int>(s / k);
    ad::Var d = ad::sub(ad::gather_rows(g.constant(std::move(center_xy)), nb.index),
                        ad::gather_rows(ad::slice_cols(p_warp, 0, 2), rep));
    rel = ad::scale(d, 1.0 / grid.cell_size);
  }
  return decoder_attention(level).indexed(g, params, query, tvf.field, nb.index,
                                          blocks::uniform_offsets(n, k), rel);
}

// ---- flow head ----------------------------------------------------------

TarsModel::HeadOutput TarsModel::flow_head(ad::Graph& g, const ParamStore& params, int level,
                                           std::span<const Vec3> points, ad::Var e_point,
                                           ad::Var prev_embedding, ad::Var traffic,
                                           ad::Var coarse_flow) const {
  std::vector<ad::Var> parts{e_point};
  if (prev_embedding.valid()) parts.push_back(prev_embedding);
  if (traffic.valid()) parts.push_back(traffic);
  ad::Var x = parts.size() == 1 ? e_point : ad::concat_cols(parts);
  const int n = static_cast<int>(points.size());
  const int ks = std::min(cfg_.k_cross, n);
  const Neighbors nb = knn_points(points, points, ks);
  ad::Tensor rel(n * ks, 3);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < ks; ++j) {
      const Vec3 d = points[nb.at(i, j)] - points[i];
      for (int c = 0; c < 3; ++c) rel(i * ks + j, c) = d(c);
    }
  ad::Var e = head_attention(level).indexed(g, params, x, x, nb.index, blocks::uniform_offsets(n, ks),
                                            g.constant(std::move(rel)));
  ad::Var hidden = ad::leaky_relu(head_reduce(level)(g, params, e), blocks::kLeakySlope);
  ad::Var delta = head_out(level)(g, params, hidden);
  return {ad::add(coarse_flow, delta), e};
}

ad::Var TarsModel::motion_segmentation_head(ad::Graph& g, const ParamStore& params, ad::Var embedding) const {
  return ad::sigmoid(seg_mlp()(g, params, embedding));
}

InterpWeights TarsModel::upsample_weights(const LevelState& coarse, const LevelState& fine) const {
  const int k = std::min(cfg_.k_interp, static_cast<int>(coarse.p_points.size()));
  return idw_weights(coarse.p_points, fine.p_points, k);
}

// ---- ego-motion ---------------------------------------------------------

EgoEstimate ego_motion_head(ad::Graph& g, std::span<const Vec3> p, ad::Var p_warp, ad::Var weights) {
  const int n = static_cast<int>(p.size());
  if (p_warp.rows() != n || p_warp.cols() != 3 || weights.rows() != n || weights.cols() != 1) {
    throw ShapeError("ego_motion_head: expects N x 3 warped points and N x 1 weights");
  }
  int effective = 0;
  for (double w : weights.value().data) {
    if (w < 0.0) throw std::invalid_argument("ego_motion_head: negative weight");
    if (w > 1e-12) ++effective;
  }
  if (effective < 3) throw DegenerateGeometryError("ego_motion_head: fewer than 3 weighted correspondences");
  ad::Var pv = g.constant(positions_tensor(p));
  ad::Var wsum = ad::sum(weights);
  ad::Var p_bar = ad::div(ad::sum_rows(ad::mul(pv, weights)), wsum);
  ad::Var q_bar = ad::div(ad::sum_rows(ad::mul(p_warp, weights)), wsum);
  ad::Var xc = ad::sub(pv, p_bar);
  ad::Var yc = ad::sub(p_warp, q_bar);
  ad::Var cov = ad::matmul(ad::transpose(ad::mul(xc, weights)), yc);  // sum w x y^T
  ad::Var rot = ad::polar_rotation(ad::transpose(cov));
  ad::Var trans = ad::sub(q_bar, ad::matmul(p_bar, ad::transpose(rot)));
  return {rot, trans};
}

std::vector<std::uint8_t> moving_from_probability(const ad::Tensor& s) {
  std::vector<std::uint8_t> out(s.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s.data[i] > 0.5 ? 1 : 0;
  return out;
}

// ---- full forward pass --------------------------------------------------

ForwardOutput TarsModel::forward(ad::Graph& g, const ParamStore& params, const ForwardInputs& in) const {
  if (in.p == nullptr || in.q == nullptr) throw std::invalid_argument("forward: P and Q are required");
  const PointCloud& P = *in.p;
  const PointCloud& Q = *in.q;
  const int L = cfg_.levels;

  ad::Var pf = input_features(g, params, P);
  ad::Var qf = input_features(g, params, Q);
  static const TemporalHidden kEmpty;
  const TemporalHidden& hidden = in.hidden != nullptr ? *in.hidden : kEmpty;
  PointGruResult gp = point_gru_step(g, params, pf, P.positions, hidden);
  PointGruResult gq = point_gru_step(g, params, qf, Q.positions, hidden);

  ForwardOutput out;
  out.hidden = gp.hidden;
  out.levels = multi_scale_encoder(g, params, P.positions, gp.features, Q.positions, gq.features);

  {
    LevelState& l1 = out.levels[0];
    ad::Var zero = g.constant(ad::Tensor(static_cast<int>(l1.p_points.size()), 3));
    ad::Var e_point = point_level_embeddings(g, params, l1, zero);
    HeadOutput h = flow_head(g, params, 1, l1.p_points, e_point, {}, {}, zero);
    l1.flow = h.flow;
    l1.embedding = h.embedding;
  }
  for (int l = 2; l <= L; ++l) {
    const LevelState& prev = out.levels[l - 2];
    LevelState& cur = out.levels[l - 1];
    const InterpWeights w = upsample_weights(prev, cur);
    ad::Var coarse = ad::weighted_gather(prev.flow, w.index, w.weight, w.k);
    ad::Var prev_e = ad::weighted_gather(prev.embedding, w.index, w.weight, w.k);
    ad::Var e_point = point_level_embeddings(g, params, cur, coarse);
    ad::Var traffic;
    if (cfg_.use_tvf) {
      const BEVLevel* od = nullptr;
      if (cfg_.use_od && in.od != nullptr) od = &in.od->at(l);
      const TVFState* prev_tvf = out.tvf.empty() ? nullptr : &out.tvf.back();
      out.tvf.push_back(tvf_encode(g, params, l, prev, od, prev_tvf));
      ad::Var warped = ad::add(g.constant(positions_tensor(cur.p_points)), coarse);
      ad::Var query = ad::concat_cols({prev_e, cur.p_feat});
      traffic = tvf_decode(g, params, l, warped, query, out.tvf.back());
    }
    HeadOutput h = flow_head(g, params, l, cur.p_points, e_point, prev_e, traffic, coarse);
    cur.flow = h.flow;
    cur.embedding = h.embedding;
  }

  out.head_flow = out.levels[L - 1].flow;
  out.flow = out.head_flow;
  if (cfg_.variant == Variant::kEgo) {
    const LevelState& top = out.levels[L - 1];
    out.seg = motion_segmentation_head(g, params, top.embedding);
    ad::Var weights = ad::add_scalar(ad::neg(out.seg), 1.0);
    ad::Var pv = g.constant(positions_tensor(top.p_points));
    ad::Var warped = ad::add(pv, out.head_flow);
    out.ego = ego_motion_head(g, top.p_points, warped, weights);
    if (in.static_override != nullptr) {
      if (in.static_override->size() != top.p_points.size()) {
        throw ShapeError("forward: static override must have one entry per point");
      }
      out.static_mask = *in.static_override;
    } else {
      const auto moving = moving_from_probability(out.seg.value());
      out.static_mask.resize(moving.size());
      for (std::size_t i = 0; i < moving.size(); ++i) out.static_mask[i] = moving[i] ? 0 : 1;
    }
    ad::Tensor m(static_cast<int>(out.static_mask.size()), 1);
    for (int i = 0; i < m.rows; ++i) m(i, 0) = out.static_mask[i];
    ad::Var rigid = ad::sub(ad::add(ad::matmul(pv, ad::transpose(out.ego->rotation)), out.ego->translation), pv);
    out.flow = ad::add(out.head_flow, ad::mul(ad::sub(rigid, out.head_flow), g.constant(std::move(m))));
  }
  return out;
}

}  // namespace tars
