// Scene-flow and ego-motion evaluation metrics. Absent values (empty buckets)
// are std::nullopt, never zero.

#ifndef TARS_METRICS_HPP
#define TARS_METRICS_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tars/geometry.hpp"

namespace tars {

inline constexpr double kStrictEpe = 0.05;
inline constexpr double kRelaxedEpe = 0.1;
inline constexpr double kStrictRel = 0.05;
inline constexpr double kRelaxedRel = 0.10;

using Metric = std::optional<double>;

struct MetricReport {
  Metric epe, acc_s, acc_r, rne;          // all points, accuracies in percent
  Metric mrne, srne;
  Metric mepe, mag_e, dir_e, sepe, avg_epe;
  Metric acc_s_moving, acc_r_moving;      // moving points only
  Metric rte, rae;                        // metres, degrees
  std::array<Metric, 5> class_mrne{};     // index = class id; 0 unused
  std::size_t points = 0, moving = 0, stat = 0;
  std::array<std::size_t, 5> class_points{};

  /// Column names of the main table, in order.
  static const std::vector<std::string>& columns();
  std::vector<Metric> row() const;
};

/// Point-count-weighted accumulation over frames.
class MetricAccumulator {
 public:
  void add_frame(const FlowField& pred, const FlowField& gt, std::span<const std::uint8_t> moving,
                 std::span<const std::uint8_t> class_id, std::span<const double> ratio);
  void add_ego(const SE3Transform& pred, const SE3Transform& gt);
  MetricReport report() const;

 private:
  double epe_ = 0, rne_ = 0, mrne_ = 0, srne_ = 0, mepe_ = 0, mag_ = 0, dir_ = 0, sepe_ = 0;
  std::size_t n_ = 0, acc_s_ = 0, acc_r_ = 0, nm_ = 0, ns_ = 0, ndir_ = 0, acc_sm_ = 0, acc_rm_ = 0;
  std::array<double, 5> class_sum_{};
  std::array<std::size_t, 5> class_n_{};
  double rte_ = 0, rae_ = 0;
  std::size_t n_ego_ = 0;
};

/// Per-point accuracy test: EPE below the threshold or relative error below `rel`.
bool accurate(const Vec3& pred, const Vec3& gt, double abs_threshold, double rel_threshold);

/// Angle between two vectors via arccos; empty if either has zero norm.
std::optional<double> direction_error(const Vec3& a, const Vec3& b);

struct OverallMetrics {
  double epe, acc_s, acc_r, rne;
};
OverallMetrics overall_metrics(const FlowField& pred, const FlowField& gt, std::span<const double> ratio);

MetricReport moving_static_metrics(const FlowField& pred, const FlowField& gt,
                                   std::span<const std::uint8_t> moving,
                                   std::span<const std::uint8_t> class_id, std::span<const double> ratio);

struct EgoMetrics {
  double rte, rae_deg;
};
EgoMetrics ego_metrics(const SE3Transform& pred, const SE3Transform& gt);

/// Main table as CSV ("NA" for absent values) with a fixed number format.
std::string metrics_csv(const MetricReport& r);
/// Per-class MRNE plus moving-only accuracies.
std::string per_class_csv(const MetricReport& r);
std::string format_metric(const Metric& m);

}  // namespace tars

#endif  // TARS_METRICS_HPP
