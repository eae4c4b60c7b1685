#include "tars/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

namespace tars {

const std::vector<std::string>& MetricReport::columns() {
  static const std::vector<std::string> cols{"EPE",  "AccS", "AccR", "RNE",    "MRNE", "SRNE", "MEPE",
                                             "MagE", "DirE", "SEPE", "AvgEPE", "RTE",  "RAE"};
  return cols;
}

std::vector<Metric> MetricReport::row() const {
  return {epe, acc_s, acc_r, rne, mrne, srne, mepe, mag_e, dir_e, sepe, avg_epe, rte, rae};
}

bool accurate(const Vec3& pred, const Vec3& gt, double abs_threshold, double rel_threshold) {
  const double e = (pred - gt).norm();
  if (e < abs_threshold) return true;
  const double g = gt.norm();
  return g > 0.0 && e / g < rel_threshold;
}

std::optional<double> direction_error(const Vec3& a, const Vec3& b) {
  // one summation order for all three products, so b = -a gives dot == -aa bit for bit
  auto dot = [](const Vec3& u, const Vec3& v) { return (u.x() * v.x() + u.y() * v.y()) + u.z() * v.z(); };
  const double aa = dot(a, a), bb = dot(b, b);
  if (aa == 0.0 || bb == 0.0) return std::nullopt;
  // sqrt(aa * bb) keeps exact (anti)parallel pairs at exactly +-1
  const double c = std::clamp(dot(a, b) / std::sqrt(aa * bb), -1.0, 1.0);
  return std::acos(c);
}

void MetricAccumulator::add_frame(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> moving,
                                  std::span<const std::uint8_t> class_id, std::span<const double> ratio) {
  const std::size_t n = gt.size();
  if (pred.size() != n || moving.size() != n || ratio.size() != n || (!class_id.empty() && class_id.size() != n)) {
    throw ShapeError("metrics: prediction, ground truth and masks differ in length");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(ratio[i] > 0.0)) throw std::invalid_argument("metrics: resolution ratio must be positive");
    const Vec3& f = pred.vectors[i];
    const Vec3& g = gt.vectors[i];
    const double e = (f - g).norm();
    const double rn = e / ratio[i];
    const bool s = accurate(f, g, kStrictEpe, kStrictRel);
    const bool r = accurate(f, g, kRelaxedEpe, kRelaxedRel);
    ++n_;
    epe_ += e;
    rne_ += rn;
    acc_s_ += s;
    acc_r_ += r;
    if (moving[i]) {
      ++nm_;
      mrne_ += rn;
      mepe_ += e;
      mag_ += std::fabs(f.norm() - g.norm());
      if (auto d = direction_error(f, g)) {
        dir_ += *d;
        ++ndir_;
      }
      acc_sm_ += s;
      acc_rm_ += r;
      const int c = class_id.empty() ? 0 : class_id[i];
      if (c >= 1 && c <= 4) {
        class_sum_[c] += rn;
        ++class_n_[c];
      }
    } else {
      ++ns_;
      srne_ += rn;
      sepe_ += e;
    }
  }
}

EgoMetrics ego_metrics(const SE3Transform& pred, const SE3Transform& gt) {
  const double rte = (pred.translation() - gt.translation()).norm();
  const Mat3 d = gt.rotation().transpose() * pred.rotation();
  const double c = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
  return {rte, std::acos(c) * 180.0 / std::numbers::pi};
}

void MetricAccumulator::add_ego(const SE3Transform& pred, const SE3Transform& gt) {
  const EgoMetrics m = ego_metrics(pred, gt);
  rte_ += m.rte;
  rae_ += m.rae_deg;
  ++n_ego_;
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  auto mean = [](double s, std::size_t n) -> Metric {
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  };
  r.points = n_;
  r.moving = nm_;
  r.stat = ns_;
  r.epe = mean(epe_, n_);
  r.rne = mean(rne_, n_);
  r.acc_s = mean(100.0 * static_cast<double>(acc_s_), n_);
  r.acc_r = mean(100.0 * static_cast<double>(acc_r_), n_);
  r.mrne = mean(mrne_, nm_);
  r.srne = mean(srne_, ns_);
  r.mepe = mean(mepe_, nm_);
  r.mag_e = mean(mag_, nm_);
  r.dir_e = mean(dir_, ndir_);
  r.acc_s_moving = mean(100.0 * static_cast<double>(acc_sm_), nm_);
  r.acc_r_moving = mean(100.0 * static_cast<double>(acc_rm_), nm_);
  r.sepe = mean(sepe_, ns_);
  if (r.mepe && r.sepe) r.avg_epe = 0.5 * (*r.mepe + *r.sepe);
  for (int c = 1; c <= 4; ++c) {
    r.class_mrne[c] = mean(class_sum_[c], class_n_[c]);
    r.class_points[c] = class_n_[c];
  }
  r.rte = mean(rte_, n_ego_);
  r.rae = mean(rae_, n_ego_);
  return r;
}

OverallMetrics overall_metrics(const FlowField& pred, const FlowField& gt, std::span<const double> ratio) {
  if (gt.size() == 0) throw SizeError("overall_metrics: empty flow");
  MetricAccumulator acc;
  std::vector<std::uint8_t> none(gt.size(), 0);
  acc.add_frame(pred, gt, none, {}, ratio);
  const MetricReport r = acc.report();
  return {*r.epe, *r.acc_s, *r.acc_r, *r.rne};
}

MetricReport moving_static_metrics(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> moving,
                                   std::span<const std::uint8_t> class_id, std::span<const double> ratio) {
  MetricAccumulator acc;
  acc.add_frame(pred, gt, moving, class_id, ratio);
  return acc.report();
}

std::string format_metric(const Metric& m) {
  if (!m) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", *m);
  return buf;
}

std::string metrics_csv(const MetricReport& r) {
  std::string out;
  const auto& cols = MetricReport::columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  const auto row = r.row();
  for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + format_metric(row[i]);
  out += "\n";
  return out;
}

std::string per_class_csv(const MetricReport& r) {
  static const char* names[5] = {"static", "car", "pedestrian", "cyclist", "truck"};
  std::string out = "class,points,MRNE\n";
  for (int c = 1; c <= 4; ++c) {
    out += std::string(names[c]) + "," + std::to_string(r.class_points[c]) + "," + format_metric(r.class_mrne[c]) + "\n";
  }
  out += "moving," + std::to_string(r.moving) + ",AccS=" + format_metric(r.acc_s_moving) +
         ";AccR=" + format_metric(r.acc_r_moving) + "\n";
  return out;
}

}  // namespace tars
