#include "tars/od_stub.hpp"

#include <algorithm>
#include <array>
#include <random>
#include <stdexcept>
#include <string>

#include "tars/optim.hpp"

namespace tars {

const BEVLevel& BEVPyramid::at(int level) const {
  for (const auto& l : levels) {
    if (l.level == level) return l;
  }
  throw std::out_of_range("BEVPyramid: no map for level " + std::to_string(level));
}

void OdStubConfig::validate() const {
  base_grid.validate();
  if (pillar_channels < 1 || map_channels < 1 || levels < 1) {
    throw std::invalid_argument("OdStubConfig: channel and level counts must be positive");
  }
}

OdStub::OdStub(OdStubConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

blocks::Mlp OdStub::pillar_mlp() const {
  return {"od.pillar", {5, cfg_.pillar_channels, cfg_.pillar_channels}};
}

blocks::Conv2d OdStub::stage(int i) const {
  return {"od.stage" + std::to_string(i), i == 0 ? cfg_.pillar_channels : cfg_.map_channels,
          cfg_.map_channels, 3, true};
}

blocks::Conv2d OdStub::head() const { return {"od.head", cfg_.map_channels, 1 + kNumActorClasses, 1, true}; }

void OdStub::init_params(ParamStore& params, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  pillar_mlp().init(params, rng);
  for (int i = 0; i < cfg_.levels; ++i) stage(i).init(params, rng);
  head().init(params, rng);
}

std::vector<GridSpec> OdStub::level_grids() const {
  std::vector<GridSpec> out;
  GridSpec g = cfg_.base_grid;
  for (int i = 0; i < cfg_.levels; ++i) {
    if (i > 0) {
      g.height = blocks::strided_size(g.height, 2);
      g.width = blocks::strided_size(g.width, 2);
      g.cell_size *= 2.0;
    }
    out.push_back(g);
  }
  return out;
}

ad::Var OdStub::pillar_features(ad::Graph& g, const ParamStore& params, const PointCloud& q) const {
  const GridSpec& grid = cfg_.base_grid;
  const std::vector<int> cell = voxelize_2d(q.positions, grid);
  // group in-grid points by pillar, stable in point order
  std::vector<int> order;
  std::vector<std::vector<int>> members(grid.cells());
  for (std::size_t i = 0; i < cell.size(); ++i) {
    if (cell[i] != kOutOfGrid) members[cell[i]].push_back(static_cast<int>(i));
  }
  std::vector<int> offsets{0};
  std::vector<int> occupied;
  for (int c = 0; c < grid.cells(); ++c) {
    if (members[c].empty()) continue;
    order.insert(order.end(), members[c].begin(), members[c].end());
    offsets.push_back(static_cast<int>(order.size()));
    occupied.push_back(c);
  }
  if (order.empty()) return g.constant(ad::Tensor(grid.cells(), cfg_.pillar_channels));
  ad::Tensor raw(static_cast<int>(order.size()), 5);
  for (int r = 0; r < raw.rows; ++r) {
    const int i = order[r];
    const int c = cell[i];
    const Vec2 center = grid.cell_center(c / grid.width, c % grid.width);
    const Vec3& p = q.positions[i];
    raw(r, 0) = (p.x() - center.x()) / grid.cell_size;
    raw(r, 1) = (p.y() - center.y()) / grid.cell_size;
    raw(r, 2) = p.z();
    raw(r, 3) = q.rrv[i];
    raw(r, 4) = q.rcs[i];
  }
  ad::Var f = pillar_mlp()(g, params, g.constant(std::move(raw)));
  ad::Var pooled = ad::group_max(f, offsets);
  return ad::scatter_rows(pooled, occupied, grid.cells());
}

std::vector<ad::Var> OdStub::forward(ad::Graph& g, const ParamStore& params, const PointCloud& q) const {
  const auto grids = level_grids();
  std::vector<ad::Var> maps;
  ad::Var x = pillar_features(g, params, q);
  int h = cfg_.base_grid.height, w = cfg_.base_grid.width;
  for (int i = 0; i < cfg_.levels; ++i) {
    x = ad::leaky_relu(stage(i)(g, params, x, h, w, i == 0 ? 1 : 2), blocks::kLeakySlope);
    h = grids[i].height;
    w = grids[i].width;
    maps.push_back(x);
  }
  return maps;
}

BEVPyramid OdStub::pyramid(const ParamStore& params, const PointCloud& q, int first_level) const {
  const auto grids = level_grids();
  BEVPyramid out;
  const std::vector<int> cell = voxelize_2d(q.positions, cfg_.base_grid);
  const bool any = std::any_of(cell.begin(), cell.end(), [](int c) { return c != kOutOfGrid; });
  if (!any) {
    for (int i = 0; i < cfg_.levels; ++i) {
      out.levels.push_back({first_level + i, grids[i], ad::Tensor(grids[i].cells(), cfg_.map_channels)});
    }
    return out;
  }
  ad::Graph g;
  const auto maps = forward(g, params, q);
  for (int i = 0; i < cfg_.levels; ++i) out.levels.push_back({first_level + i, grids[i], maps[i].value()});
  return out;
}

CellLabels cell_labels(const PointCloud& q, std::span<const std::uint8_t> class_id, const GridSpec& grid) {
  if (class_id.size() != q.size()) throw ShapeError("cell_labels: one class id per point required");
  const std::vector<int> cell = voxelize_2d(q.positions, grid);
  std::vector<std::array<int, kNumActorClasses + 1>> votes(grid.cells());
  for (auto& v : votes) v.fill(0);
  for (std::size_t i = 0; i < cell.size(); ++i) {
    if (cell[i] == kOutOfGrid || class_id[i] == 0 || class_id[i] > kNumActorClasses) continue;
    ++votes[cell[i]][class_id[i]];
  }
  CellLabels out;
  out.occupied.assign(grid.cells(), 0);
  out.cls.assign(grid.cells(), 0);
  for (int c = 0; c < grid.cells(); ++c) {
    int best = 0;
    for (int k = 1; k <= kNumActorClasses; ++k) {
      if (votes[c][k] > (best == 0 ? 0 : votes[c][best])) best = k;
    }
    if (best != 0) {
      out.occupied[c] = 1;
      out.cls[c] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

ad::Var OdStub::proxy_loss(ad::Graph& g, const ParamStore& params, const PointCloud& q,
                           std::span<const std::uint8_t> class_id) const {
  const CellLabels labels = cell_labels(q, class_id, cfg_.base_grid);
  const auto maps = forward(g, params, q);
  const GridSpec& grid = cfg_.base_grid;
  ad::Var logits = head()(g, params, maps[0], grid.height, grid.width);
  ad::Var occ = ad::slice_cols(logits, 0, 1);
  ad::Tensor y(grid.cells(), 1);
  std::vector<int> occ_rows;
  ad::Tensor onehot;
  for (int c = 0; c < grid.cells(); ++c) {
    y(c, 0) = labels.occupied[c];
    if (labels.occupied[c]) occ_rows.push_back(c);
  }
  // BCE with logits: softplus(x) - y x
  ad::Var loss = ad::mean(ad::sub(ad::softplus(occ), ad::mul(occ, g.constant(y))));
  if (!occ_rows.empty()) {
    onehot = ad::Tensor(static_cast<int>(occ_rows.size()), kNumActorClasses);
    for (std::size_t r = 0; r < occ_rows.size(); ++r) onehot(static_cast<int>(r), labels.cls[occ_rows[r]] - 1) = 1.0;
    ad::Var cls = ad::gather_rows(ad::slice_cols(logits, 1, 1 + kNumActorClasses), occ_rows);
    ad::Var ce = ad::scale(ad::sum(ad::mul(ad::log_softmax_rows(cls), g.constant(onehot))),
                           -1.0 / static_cast<double>(occ_rows.size()));
    loss = ad::add(loss, ce);
  }
  return loss;
}

OdTrainResult train_od_proxy(const OdStub& stub, ParamStore& params, std::span<const PointCloud> clouds,
                             std::span<const std::vector<std::uint8_t>> class_ids, int steps, double lr) {
  if (clouds.size() != class_ids.size()) throw ShapeError("train_od_proxy: clouds and labels differ in count");
  OdTrainResult out;
  if (clouds.empty() || steps <= 0) {
    params.freeze_prefix("od.");
    return out;
  }
  OptimizerConfig oc;
  oc.kind = "adam";
  oc.lr = lr;
  oc.decay = 1.0;
  Optimizer opt(oc);
  for (int s = 0; s < steps; ++s) {
    const std::size_t i = static_cast<std::size_t>(s) % clouds.size();
    ad::Graph g;
    ad::Var loss = stub.proxy_loss(g, params, clouds[i], class_ids[i]);
    g.backward(loss);
    g.accumulate_param_grads(params);
    opt.step(params);
    out.losses.push_back(loss.scalar());
  }
  params.freeze_prefix("od.");
  return out;
}

}  // namespace tars
