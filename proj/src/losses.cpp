#include "tars/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace tars {

void LossConfig::validate() const {
  if (!(delta > 0.0) || !(eps_chamfer >= 0.0) || !(alpha > 0.0) || !(lambda_bg >= 0.0) ||
      !(lambda_opt >= 0.0) || !(dt > 0.0) || k_smooth < 1 || !(kde_bandwidth > 0.0)) {
    throw std::invalid_argument("LossConfig: weights and scales must be positive");
  }
}

CameraModel CameraModel::front_default() {
  CameraModel c;
  c.intrinsics << 500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0;
  Mat3 r;
  // camera x = -sensor y, camera y = -sensor z, camera z = sensor x
  r << 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0;
  c.extrinsics = SE3Transform(r, Vec3::Zero());
  return c;
}

void CameraModel::validate() const {
  if (!(intrinsics(0, 0) > 0.0) || !(intrinsics(1, 1) > 0.0)) {
    throw std::invalid_argument("CameraModel: focal lengths must be positive");
  }
  if (width < 1 || height < 1) throw std::invalid_argument("CameraModel: empty image");
}

std::optional<Vec2> CameraModel::project(const Vec3& sensor_point) const {
  const Vec3 c = extrinsics.apply(sensor_point);
  if (c.z() <= 1e-6) return std::nullopt;
  const Vec3 h = intrinsics * (c / c.z());
  return Vec2(h.x(), h.y());
}

bool CameraModel::inside(const Vec2& px) const {
  return px.x() >= 0.0 && px.y() >= 0.0 && px.x() < width && px.y() < height;
}

Vec3 CameraModel::ray(const Vec2& pixel) const {
  return (intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0)).normalized();
}

namespace loss {

namespace {

ad::Graph& G(Var v) { return v.graph(); }

void check_flow(Var flow, std::size_t n, const char* who) {
  if (flow.cols() != 3 || flow.rows() != static_cast<int>(n)) {
    throw ShapeError(std::string(who) + ": flow must be N x 3 matching the points");
  }
}

// hinge on squared distance from rows of `a` to rows `b[idx]`, for kept rows
Var hinge_term(Var a, Var b, const std::vector<int>& rows, const std::vector<int>& idx, double eps) {
  Var d = ad::sub(ad::gather_rows(a, rows), ad::gather_rows(b, idx));
  Var sq = ad::sum_cols(ad::square(d));
  return ad::sum(ad::relu(ad::add_scalar(sq, -eps)));
}

}  // namespace

Var soft_chamfer(Var p_warp, std::span<const Vec3> q, const LossConfig& cfg, bool* all_discarded) {
  if (p_warp.rows() == 0 || q.empty()) throw SizeError("soft_chamfer: empty cloud");
  if (p_warp.cols() != 3) throw ShapeError("soft_chamfer: p_warp must be N x 3");
  ad::Graph& g = G(p_warp);
  const std::vector<Vec3> pw = positions_from_tensor(p_warp.value());
  Var qv = g.constant(positions_tensor(q));
  const std::vector<double> nu_p = gaussian_kde(pw, cfg.kde_bandwidth);
  const std::vector<double> nu_q = gaussian_kde(q, cfg.kde_bandwidth);
  const Neighbors p2q = knn_points(pw, q, 1);
  const Neighbors q2p = knn_points(q, pw, 1);
  std::vector<int> rows_p, idx_p, rows_q, idx_q;
  for (std::size_t i = 0; i < pw.size(); ++i) {
    if (nu_p[i] > cfg.delta) {
      rows_p.push_back(static_cast<int>(i));
      idx_p.push_back(p2q.at(static_cast<int>(i), 0));
    }
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (nu_q[i] > cfg.delta) {
      rows_q.push_back(static_cast<int>(i));
      idx_q.push_back(q2p.at(static_cast<int>(i), 0));
    }
  }
  if (all_discarded) *all_discarded = rows_p.empty() && rows_q.empty();
  Var total = g.constant(ad::Tensor(1, 1));
  if (!rows_p.empty()) total = ad::add(total, hinge_term(p_warp, qv, rows_p, idx_p, cfg.eps_chamfer));
  if (!rows_q.empty()) total = ad::add(total, hinge_term(qv, p_warp, rows_q, idx_q, cfg.eps_chamfer));
  return total;
}

Var spatial_smoothness(std::span<const Vec3> p, Var flow, const LossConfig& cfg) {
  check_flow(flow, p.size(), "spatial_smoothness");
  const int n = static_cast<int>(p.size());
  if (cfg.k_smooth > n - 1) throw SizeError("spatial_smoothness: k_smooth exceeds N-1");
  const int k = cfg.k_smooth;
  const Neighbors nb = knn_self_excluded(p, k);
  std::vector<int> self(static_cast<std::size_t>(n) * k);
  ad::Tensor w(n * k, 1);
  for (int i = 0; i < n; ++i) {
    // softmax over the neighbour kernel values
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      const double kv = std::exp(-nb.sq_dist[static_cast<std::size_t>(i) * k + j] / cfg.alpha);
      w(i * k + j, 0) = std::exp(kv);
      z += w(i * k + j, 0);
      self[static_cast<std::size_t>(i) * k + j] = i;
    }
    for (int j = 0; j < k; ++j) w(i * k + j, 0) /= z;
  }
  Var diff = ad::sub(ad::gather_rows(flow, self), ad::gather_rows(flow, nb.index));
  Var sq = ad::sum_cols(ad::square(diff));
  return ad::sum(ad::mul(sq, G(flow).constant(std::move(w))));
}

Var radial_displacement(std::span<const Vec3> p, Var flow, std::span<const double> rrv,
                        const LossConfig& cfg) {
  check_flow(flow, p.size(), "radial_displacement");
  if (rrv.size() != p.size()) throw ShapeError("radial_displacement: one rrv per point required");
  if (!(cfg.dt > 0.0)) throw std::invalid_argument("radial_displacement: dt must be positive");
  std::vector<int> rows;
  ad::Tensor dir(0, 3), target(0, 1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double r = p[i].norm();
    if (r == 0.0) continue;
    rows.push_back(static_cast<int>(i));
    for (int c = 0; c < 3; ++c) dir.data.push_back(p[i](c) / r);
    target.data.push_back(rrv[i] * cfg.dt);
  }
  ad::Graph& g = G(flow);
  if (rows.empty()) return g.constant(ad::Tensor(1, 1));
  dir.rows = target.rows = static_cast<int>(rows.size());
  Var radial = ad::sum_cols(ad::mul(ad::gather_rows(flow, rows), g.constant(std::move(dir))));
  return ad::sum(ad::abs(ad::sub(radial, g.constant(std::move(target)))));
}

Var masked_epe(Var pred, const FlowField& target, std::span<const std::uint8_t> mask) {
  check_flow(pred, target.size(), "masked_epe");
  if (mask.size() != target.size()) throw ShapeError("masked_epe: one mask entry per row required");
  std::vector<int> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(static_cast<int>(i));
  }
  ad::Graph& g = G(pred);
  if (rows.empty()) return g.constant(ad::Tensor(1, 1));
  ad::Tensor t(static_cast<int>(rows.size()), 3);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int c = 0; c < 3; ++c) t(static_cast<int>(r), c) = target.vectors[rows[r]](c);
  Var err = ad::row_norm(ad::sub(ad::gather_rows(pred, rows), g.constant(std::move(t))));
  return ad::mean(err);
}

Var seg_loss(Var s, std::span<const std::uint8_t> pseudo_mask) {
  if (s.cols() != 1 || s.rows() != static_cast<int>(pseudo_mask.size())) {
    throw ShapeError("seg_loss: S must be N x 1 matching the mask");
  }
  ad::Graph& g = G(s);
  ad::Tensor y(s.rows(), 1);
  for (int i = 0; i < s.rows(); ++i) y(i, 0) = pseudo_mask[i] ? 1.0 : 0.0;
  Var yv = g.constant(y);
  Var sc = ad::clamp(s, kSegClamp, 1.0 - kSegClamp);
  Var pos = ad::mul(ad::log(sc), yv);
  Var neg = ad::mul(ad::log(ad::add_scalar(ad::neg(sc), 1.0)), ad::add_scalar(ad::neg(yv), 1.0));
  return ad::scale(ad::sum(ad::add(pos, neg)), -0.5);
}

Var ego_loss(Var rot, Var trans, const SE3Transform& omega_gt, std::span<const Vec3> p) {
  if (rot.rows() != 3 || rot.cols() != 3 || trans.rows() != 1 || trans.cols() != 3) {
    throw ShapeError("ego_loss: expects a 3x3 rotation and a 1x3 translation");
  }
  if (p.empty()) throw SizeError("ego_loss: no points");
  ad::Graph& g = G(rot);
  std::vector<Vec3> moved(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) moved[i] = omega_gt.apply(p[i]);
  Var pv = g.constant(positions_tensor(p));
  Var pred = ad::add(ad::matmul(pv, ad::transpose(rot)), trans);
  return ad::mean(ad::row_norm(ad::sub(g.constant(positions_tensor(moved)), pred)));
}

std::vector<Vec2> pseudo_optical_flow(std::span<const Vec3> p, const FlowField& flow, const CameraModel& cam) {
  if (flow.size() != p.size()) throw ShapeError("pseudo_optical_flow: flow rows differ from point count");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<Vec2> out(p.size(), Vec2(nan, nan));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto a = cam.project(p[i]);
    const auto b = cam.project(p[i] + flow.vectors[i]);
    if (a && b) out[i] = *b - *a;
  }
  return out;
}

Var optical_flow_loss(std::span<const Vec3> p, Var flow, const CameraModel& cam,
                      std::span<const Vec2> pseudo_opt_flow, std::span<const std::uint8_t> moving) {
  check_flow(flow, p.size(), "optical_flow_loss");
  if (pseudo_opt_flow.size() != p.size() || moving.size() != p.size()) {
    throw ShapeError("optical_flow_loss: labels must match the point count");
  }
  std::vector<int> rows;
  ad::Tensor dirs(0, 3), base(0, 3);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!moving[i] || !pseudo_opt_flow[i].allFinite()) continue;
    const auto px = cam.project(p[i]);
    if (!px || !cam.inside(*px)) continue;
    const Vec3 d = cam.ray(*px + pseudo_opt_flow[i]);
    const Vec3 c = cam.extrinsics.apply(p[i]);
    rows.push_back(static_cast<int>(i));
    for (int k = 0; k < 3; ++k) {
      dirs.data.push_back(d(k));
      base.data.push_back(c(k));
    }
  }
  ad::Graph& g = G(flow);
  if (rows.empty()) return g.constant(ad::Tensor(1, 1));
  dirs.rows = base.rows = static_cast<int>(rows.size());
  const Mat3 r = cam.extrinsics.rotation();
  ad::Tensor rt(3, 3);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) rt(a, b) = r(b, a);
  // camera-frame warped point: R (p + f) + t = (R p + t) + R f
  Var x = ad::add(g.constant(std::move(base)), ad::matmul(ad::gather_rows(flow, rows), g.constant(rt)));
  Var dv = g.constant(std::move(dirs));
  Var along = ad::sum_cols(ad::mul(x, dv));
  Var perp = ad::sub(x, ad::mul(dv, along));
  return ad::mean(ad::row_norm(perp));
}

TotalLoss total_loss(const LossInputs& in, const LossConfig& cfg, Supervision mode) {
  cfg.validate();
  if (!in.flow.valid()) throw std::invalid_argument("total_loss: missing flow prediction");
  ad::Graph& g = G(in.flow);
  TotalLoss out;
  Var total = g.constant(ad::Tensor(1, 1));
  auto push = [&](const std::string& name, Var term, double weight) {
    Var w = weight == 1.0 ? term : ad::scale(term, weight);
    out.report.terms.emplace_back(name, w.scalar());
    total = ad::add(total, w);
  };
  const bool self_terms = mode != Supervision::kFull;
  if (self_terms) {
    Var pw = ad::add(g.constant(positions_tensor(in.p)), in.flow);
    push("sc", soft_chamfer(pw, in.q, cfg, &out.report.chamfer_all_discarded), 1.0);
    push("ss", spatial_smoothness(in.p, in.flow, cfg), 1.0);
    push("rd", radial_displacement(in.p, in.flow, in.rrv, cfg), 1.0);
  }
  if (mode != Supervision::kSelf) {
    for (std::size_t l = 0; l < in.levels.size(); ++l) {
      const auto& lv = in.levels[l];
      const std::string tag = std::to_string(l + 1);
      push("fg" + tag, foreground_loss(lv.flow, lv.fg_target, lv.moving), 1.0);
      push("bg" + tag, background_loss(lv.flow, lv.bg_target, lv.stat), cfg.lambda_bg);
    }
  }
  if (mode == Supervision::kCross || mode == Supervision::kFull) {
    if (in.seg.valid()) push("seg", seg_loss(in.seg, in.seg_pseudo), 1.0);
    if (in.rot.valid()) push("ego", ego_loss(in.rot, in.trans, in.ego_gt, in.p), 1.0);
  }
  if (mode == Supervision::kCross && in.camera != nullptr) {
    push("opt", optical_flow_loss(in.p, in.flow, *in.camera, in.pseudo_opt, in.moving), cfg.lambda_opt);
  }
  out.total = total;
  out.report.total = total.scalar();
  return out;
}

}  // namespace loss
}  // namespace tars
