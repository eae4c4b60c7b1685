// Pillar-style BEV feature extractor standing in for an object detector.
// It is trained on a per-cell occupancy + class proxy objective and then
// frozen; the scene-flow network only reads its feature pyramid.

#ifndef TARS_OD_STUB_HPP
#define TARS_OD_STUB_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "tars/autodiff.hpp"
#include "tars/blocks.hpp"
#include "tars/geometry.hpp"
#include "tars/param_store.hpp"

namespace tars {

inline constexpr int kNumActorClasses = 4;  // car, pedestrian, cyclist, truck

struct BEVLevel {
  int level = 2;
  GridSpec grid;
  ad::Tensor map;  // H_l*W_l x D_l, row-major over (row, col)
};

/// Maps for scene-flow levels first_level .. first_level + size - 1.
struct BEVPyramid {
  std::vector<BEVLevel> levels;

  bool empty() const { return levels.empty(); }
  /// Throws std::out_of_range when the level is not present.
  const BEVLevel& at(int level) const;
};

struct OdStubConfig {
  GridSpec base_grid{Vec2(0.0, -16.0), 1.0, 32, 32};
  int pillar_channels = 16;
  int map_channels = 32;
  int levels = 3;  // number of maps, one per scene-flow level 2..L

  void validate() const;
};

class OdStub {
 public:
  explicit OdStub(OdStubConfig cfg);

  const OdStubConfig& config() const { return cfg_; }
  void init_params(ParamStore& params, std::uint64_t seed) const;

  /// Pillar features scattered onto the base grid (before the CNN).
  ad::Var pillar_features(ad::Graph& g, const ParamStore& params, const PointCloud& q) const;
  /// One map per level, finest first.
  std::vector<ad::Var> forward(ad::Graph& g, const ParamStore& params, const PointCloud& q) const;
  std::vector<GridSpec> level_grids() const;

  /// Evaluated pyramid for `first_level` onwards. A frame with no point
  /// inside the base grid yields all-zero maps.
  BEVPyramid pyramid(const ParamStore& params, const PointCloud& q, int first_level = 2) const;

  /// Per-cell occupancy BCE + class cross-entropy on occupied cells.
  ad::Var proxy_loss(ad::Graph& g, const ParamStore& params, const PointCloud& q,
                     std::span<const std::uint8_t> class_id) const;

 private:
  blocks::Mlp pillar_mlp() const;
  blocks::Conv2d stage(int i) const;
  blocks::Conv2d head() const;
  OdStubConfig cfg_;
};

/// Per-cell labels: occupancy and the most frequent actor class (1-based,
/// 0 when unoccupied). Points with class 0 do not occupy a cell.
struct CellLabels {
  std::vector<std::uint8_t> occupied;
  std::vector<std::uint8_t> cls;
};
CellLabels cell_labels(const PointCloud& q, std::span<const std::uint8_t> class_id,
                       const GridSpec& grid);

struct OdTrainResult {
  std::vector<double> losses;
};

/// Trains the stub on the given frames (cycled), then freezes every "od." entry.
OdTrainResult train_od_proxy(const OdStub& stub, ParamStore& params,
                             std::span<const PointCloud> clouds,
                             std::span<const std::vector<std::uint8_t>> class_ids, int steps,
                             double lr);

}  // namespace tars

#endif  // TARS_OD_STUB_HPP
