// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset, e.g. `acceptance 1 3`.

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "grad_suites.hpp"
#include "metric_oracle.hpp"
#include "tars/blocks.hpp"
#include "tars/pipeline.hpp"
#include "tiny.hpp"

using namespace tars;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tars_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---- 1: gradients -------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  double blocks = 0.0, losses = 0.0;
  std::string worst_block, worst_loss;
  for (const auto& r : testing::block_gradient_suite()) {
    if (r.result.max_rel >= blocks) worst_block = r.name;
    blocks = std::max(blocks, r.result.max_rel);
  }
  for (const auto& r : testing::loss_gradient_suite()) {
    if (r.result.max_rel >= losses) worst_loss = r.name;
    losses = std::max(losses, r.result.max_rel);
  }
  const auto sup = testing::end_to_end_gradient(testing::tiny_run_config(), 1);
  const auto ego = testing::end_to_end_gradient(testing::tiny_run_config(Variant::kEgo, Supervision::kCross), 1);
  const double secs = seconds_since(t0);
  const bool pass = blocks < 1e-4 && losses < 1e-4 && sup.max_rel < 1e-3 && ego.max_rel < 1e-3 && secs < 120.0;
  return {pass, fmt("blocks %.2e (%s), losses %.2e (%s), end-to-end superego %.2e over %d scalars, ego %.2e over %d "
                    "scalars, %.0f s",
                    blocks, worst_block.c_str(), losses, worst_loss.c_str(), sup.max_rel, sup.checked, ego.max_rel,
                    ego.checked, secs)};
}

// ---- 2: Kabsch ------------------------------------------------------------------

Outcome kabsch() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> count(10, 50);
  double worst_rot = 0.0, worst_trans = 0.0;
  // ||A - B||_F = 2 sqrt(2) sin(theta / 2); better conditioned near zero than the trace formula
  auto angle = [](const Mat3& a, const Mat3& b) {
    return 2.0 * std::asin(std::min(1.0, (a - b).norm() / (2.0 * std::sqrt(2.0))));
  };
  for (int trial = 0; trial < 100; ++trial) {
    const int n = count(rng);
    std::vector<Vec3> pts(n);
    for (auto& p : pts) p = Vec3(20.0 * u(rng), 20.0 * u(rng), 3.0 * u(rng));
    const Vec3 axis = Vec3(u(rng), u(rng), u(rng)).normalized();
    const Mat3 r = Eigen::AngleAxisd(std::numbers::pi * u(rng), axis).toRotationMatrix();
    const Vec3 t(5.0 * u(rng), 5.0 * u(rng), u(rng));
    for (bool outlier : {false, true}) {
      std::vector<Vec3> src = pts;
      ad::Tensor warped(n + (outlier ? 1 : 0), 3), w(n + (outlier ? 1 : 0), 1, 1.0);
      for (int i = 0; i < n; ++i) {
        const Vec3 x = r * pts[i] + t;
        for (int k = 0; k < 3; ++k) warped(i, k) = x(k);
      }
      if (outlier) {
        src.push_back(Vec3(4.0, -2.0, 1.0));
        warped(n, 0) = 250.0;
        warped(n, 1) = -80.0;
        warped(n, 2) = 40.0;
        w(n, 0) = 0.0;
      }
      ad::Graph g;
      const SE3Transform est = ego_motion_head(g, src, g.constant(warped), g.constant(w)).transform();
      worst_rot = std::max(worst_rot, angle(est.rotation(), r));
      worst_trans = std::max(worst_trans, (est.translation() - t).norm());
    }
  }
  return {worst_rot < 1e-6 && worst_trans < 1e-6,
          fmt("100 transforms with and without a zero-weight outlier: rotation %.2e rad, translation %.2e m", worst_rot,
              worst_trans)};
}

// ---- 3: metrics -----------------------------------------------------------------

Outcome metric_oracle() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> size(1, 100);
  double worst = 0.0, rne_gap = 0.0;
  bool ordered = true;
  for (int c = 0; c < 1000; ++c) {
    auto cs = testing::random_case(rng, size(rng));
    const MetricReport m =
        moving_static_metrics(testing::as_flow(cs.pred), testing::as_flow(cs.gt), cs.moving, cs.cls, cs.ratio);
    worst = std::max(worst, testing::oracle_mismatch(m, testing::metric_oracle(cs)));
    ordered = ordered && *m.acc_s <= *m.acc_r;
    cs.ratio.assign(cs.ratio.size(), 2.5);
    const OverallMetrics o = overall_metrics(testing::as_flow(cs.pred), testing::as_flow(cs.gt), cs.ratio);
    rne_gap = std::max(rne_gap, std::fabs(o.rne - o.epe / 2.5));
  }
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  bool pi_exact = true;
  for (int i = 0; i < 1000; ++i) {
    const Vec3 v(u(rng), u(rng), u(rng));
    pi_exact = pi_exact && *direction_error(v, -v) == std::numbers::pi;
  }
  // through the report as well; one point so the mean is the value itself
  const std::vector<Vec3> f{Vec3(0.3, -1.7, 0.2)}, neg{-f[0]};
  const std::vector<std::uint8_t> moving{1};
  const std::vector<double> ratio{1.0};
  const MetricReport opp = moving_static_metrics(testing::as_flow(neg), testing::as_flow(f), moving, {}, ratio);
  pi_exact = pi_exact && *opp.dir_e == std::numbers::pi;
  return {worst <= 1e-12 && rne_gap <= 1e-12 && pi_exact && ordered,
          fmt("1000 cases, worst deviation %.2e; |RNE - EPE/2.5| %.2e; DirE(f,-f)==pi %s; AccS<=AccR %s", worst, rne_gap,
              pi_exact ? "yes" : "no", ordered ? "yes" : "no")};
}

// ---- 4: simulator ---------------------------------------------------------------

Outcome simulator() {
  double residual = 0.0;
  double static_after = 0.0;
  int frames = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ScenarioConfig c;
    c.seed = seed;
    c.clip_length = 5;
    c.min_ego_speed = 2.0;
    const Sequence s = simulate_sequence(c);
    for (std::size_t t = 0; t + 1 < s.frames.size(); ++t) {
      const RadarFrame& f = s.frames[t];
      const SE3Transform& next = s.frames[t + 1].ego_pose;
      for (std::size_t i = 0; i < f.size(); ++i) {
        const Vec3 x = f.ego_pose.apply(f.cloud.positions[i]);
        const Vec3 landed = next.apply(f.cloud.positions[i] + f.gt_flow.vectors[i]);
        double best = (landed - x).norm();
        for (const auto& a : s.actors) {
          best = std::min(best, (landed - (a.trajectory[t + 1] * a.trajectory[t].inverse()).apply(x)).norm());
        }
        residual = std::max(residual, best);
      }
      ++frames;
    }
  }
  // every actor parked, ego moving: after compensation all flow must vanish bit for bit
  int compensated = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ScenarioConfig c;
    c.seed = seed;
    c.clip_length = 5;
    c.min_ego_speed = 2.0;
    c.parked_probability = 1.0;
    const Sequence s = simulate_sequence(c);
    for (std::size_t t = 0; t + 1 < s.frames.size(); ++t) {
      const RadarFrame comp =
          ego_compensate(s.frames[t], relative_ego_motion(s.frames[t].ego_pose, s.frames[t + 1].ego_pose));
      for (const auto& v : comp.gt_flow.vectors) static_after = std::max(static_after, v.cwiseAbs().maxCoeff());
      compensated += static_cast<int>(comp.size());
    }
  }
  const double tangential = std::fabs(measure_rrv(Vec3(12.0, 0.0, 0.0), Vec3(0.0, 7.5, 0.0), Vec3::Zero())) +
                            std::fabs(measure_rrv(Vec3(3.0, 4.0, 0.0), Vec3(-4.0, 3.0, 0.0), Vec3::Zero()));
  return {residual < 1e-9 && static_after == 0.0 && tangential == 0.0,
          fmt("%d frame pairs: warp residual %.2e m; %d compensated static points, max flow %.1e; tangential RRV %.1e",
              frames, residual, compensated, static_after, tangential)};
}

// ---- 5: overfit -----------------------------------------------------------------

Outcome overfit() {
  const auto t0 = Clock::now();
  // tiny network, full-size scenes: the 12-point tiny scenes exist only to keep FD checks cheap
  RunConfig cfg = testing::tiny_run_config();
  cfg.scenario = RunConfig{}.scenario;
  cfg.loss.k_smooth = RunConfig{}.loss.k_smooth;
  cfg.steps = 2000;
  const auto clips = simulate_clips(cfg.scenario, 0, 8);
  Trainer tr(cfg, clips);
  tr.stage_one();
  while (tr.steps_done() < cfg.steps) tr.step();
  const MetricReport base = evaluate(cfg, nullptr, clips);
  const MetricReport m = evaluate(cfg, &tr.params(), clips);
  const double secs = seconds_since(t0);
  const double ratio = *m.mepe / *base.mepe;
  return {ratio <= 0.2 && secs < 600.0,
          fmt("MEPE %.4f vs zero-flow %.4f, ratio %.3f (limit 0.2), %.0f s", *m.mepe, *base.mepe, ratio, secs)};
}

// ---- 6: ablation ----------------------------------------------------------------

Outcome ablation() {
  const auto t0 = Clock::now();
  RunConfig base;
  base.steps = 2000;
  base.optim.kind = "adam";
  base.optim.lr = 2e-3;
  base.optim.decay_every = 400;
  const auto train = simulate_clips(base.scenario, 0, 256);
  const auto test = simulate_clips(base.scenario, 1000, 32);
  double full = 0.0, point = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    double r[2];
    for (int arm = 0; arm < 2; ++arm) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.model.use_tvf = arm == 0;
      cfg.model.use_od = arm == 0;
      Trainer tr(cfg, train);
      tr.stage_one();
      while (tr.steps_done() < cfg.steps) tr.step();
      r[arm] = *evaluate(cfg, &tr.params(), test).mepe;
    }
    full += r[0] / 3.0;
    point += r[1] / 3.0;
    per_seed += fmt(" s%d %.4f/%.4f", static_cast<int>(seed), r[0], r[1]);
  }
  return {full < point, fmt("mean held-out MEPE full %.4f vs point-only %.4f (per seed full/point:%s), %.0f s", full,
                            point, per_seed.c_str(), seconds_since(t0))};
}

// ---- 7: variants ----------------------------------------------------------------

std::uint64_t rows_hash(const ad::Tensor& t, const std::vector<std::uint8_t>& pick) {
  std::string bytes;
  for (int i = 0; i < t.rows; ++i) {
    if (!pick[i]) continue;
    for (int k = 0; k < t.cols; ++k) {
      const double v = t(i, k);
      bytes.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
  return fnv1a(bytes);
}

Outcome variants() {
  // superego on static-only scenes with a zero residual head
  RunConfig cfg = testing::tiny_run_config();
  cfg.scenario.parked_probability = 1.0;
  cfg.scenario.min_ego_speed = 3.0;
  ParamStore params;
  const TarsModel model(cfg.model);
  model.init_params(params, 5);
  OdStub(cfg.od).init_params(params, 6);
  int zeroed = 0;
  for (auto& e : params.entries()) {
    if (e.name.rfind("head.", 0) == 0 && e.name.find(".out.") != std::string::npos) {
      e.value.data.assign(e.value.data.size(), 0.0);
      ++zeroed;
    }
  }
  const MetricReport r = evaluate(cfg, &params, simulate_clips(cfg.scenario, 0, 16));
  const double sepe = r.sepe.value_or(INFINITY);

  // ego variant: the ego step may only touch rows it treats as static
  const RunConfig ec = testing::tiny_run_config(Variant::kEgo, Supervision::kCross);
  ParamStore ep;
  const TarsModel em(ec.model);
  em.init_params(ep, 7);
  OdStub eod(ec.od);
  eod.init_params(ep, 8);
  bool moving_kept = true, static_moved = true;
  int checked = 0;
  for (const Clip& clip : simulate_clips(ec.scenario, 0, 8)) {
    const PreparedPair pp = prepare_pair(ec, clip.frames[0], clip.frames[1]);
    const BEVPyramid pyr = eod.pyramid(ep, pp.q);
    std::vector<std::uint8_t> stat = pp.pseudo.seg_moving;
    for (auto& s : stat) s = s ? 0 : 1;
    stat[0] = 0;  // at least one moving and one static row
    stat[1] = 1;
    ForwardInputs in;
    in.p = &pp.p.cloud;
    in.q = &pp.q;
    in.od = &pyr;
    in.static_override = &stat;
    ad::Graph g;
    const ForwardOutput o = em.forward(g, ep, in);
    const ad::Tensor flow = o.flow.value();
    const ad::Tensor head = o.head_flow.value();
    std::vector<std::uint8_t> moving(stat.size());
    for (std::size_t i = 0; i < stat.size(); ++i) moving[i] = stat[i] ? 0 : 1;
    moving_kept = moving_kept && rows_hash(flow, moving) == rows_hash(head, moving);
    static_moved = static_moved && rows_hash(flow, stat) != rows_hash(head, stat);
    ++checked;
  }
  return {sepe < 1e-6 && zeroed > 0 && moving_kept && static_moved,
          fmt("superego static-only SEPE %.2e with %d zeroed head layers; ego step: moving-row hashes unchanged in "
              "%d/%d clips, static rows rewritten %s",
              sepe, zeroed, moving_kept ? checked : 0, checked, static_moved ? "yes" : "no")};
}

// ---- 8: axial -------------------------------------------------------------------

Eigen::MatrixXd to_eigen(const ad::Tensor& t) {
  Eigen::MatrixXd m(t.rows, t.cols);
  for (int i = 0; i < t.rows; ++i)
    for (int j = 0; j < t.cols; ++j) m(i, j) = t(i, j);
  return m;
}

Outcome axial() {
  double worst = 0.0;
  for (int w : {1, 2, 5, 8, 16}) {
    ParamStore p;
    std::mt19937_64 rng(static_cast<unsigned>(w));
    const blocks::AxialAttentionBlock ax{"ax", 6};
    ax.init(p, rng);
    const ad::Tensor f = testing::random_tensor(w, 6, 100 + w, -2.0, 2.0);
    ad::Graph g;
    const Eigen::MatrixXd out = to_eigen(ax(g, p, g.constant(f), 1, w).value());
    auto lin = [&](const std::string& n, const Eigen::MatrixXd& x) {
      Eigen::MatrixXd y = x * to_eigen(p.value(n + ".w"));
      y.rowwise() += to_eigen(p.value(n + ".b")).row(0);
      return y;
    };
    // a height-1 column pass attends to a single cell, so it is the value projection
    const Eigen::MatrixXd col = lin("ax.col.v", to_eigen(f));
    const Eigen::MatrixXd q = lin("ax.row.q", col), k = lin("ax.row.k", col), v = lin("ax.row.v", col);
    Eigen::MatrixXd s = q * k.transpose() / std::sqrt(static_cast<double>(k.cols()));
    for (int i = 0; i < s.rows(); ++i) {
      s.row(i) = (s.row(i).array() - s.row(i).maxCoeff()).exp();
      s.row(i) /= s.row(i).sum();
    }
    worst = std::max(worst, (out - (col + s * v)).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-10, fmt("1xW grids W in {1,2,5,8,16}: max deviation from full row attention %.2e", worst)};
}

// ---- 9: loss arithmetic ---------------------------------------------------------

Outcome loss_arithmetic() {
  double worst = 0.0;
  int runs = 0;
  const std::vector<std::pair<Variant, Supervision>> modes{{Variant::kEgo, Supervision::kCross},
                                                           {Variant::kSuperEgo, Supervision::kCrossPlus},
                                                           {Variant::kSuperEgo, Supervision::kSelf},
                                                           {Variant::kEgo, Supervision::kFull}};
  for (const auto& [variant, sup] : modes) {
    const RunConfig cfg = testing::tiny_run_config(variant, sup);
    const auto clips = simulate_clips(cfg.scenario, 0, 3);
    Trainer tr(cfg, clips);
    tr.stage_one();
    const OdStub od(cfg.od);
    for (const Clip& c : clips) {
      std::vector<BEVPyramid> pyr;
      for (const auto& f : c.frames) pyr.push_back(od.pyramid(tr.params(), f.cloud));
      ad::Graph g;
      const ClipLoss cl = clip_loss(g, cfg, tr.model(), tr.params(), c, &pyr);
      double s = 0.0;
      for (const auto& [name, v] : cl.report.terms) s += v;
      worst = std::max(worst, std::fabs(s - cl.total.scalar()));
      ++runs;
    }
  }
  const RunConfig back = run_config_from_json(nlohmann::json::parse(to_json(RunConfig{}).dump()));
  const RunConfig empty = run_config_from_json(nlohmann::json::object());
  const bool defaults = back.loss.lambda_bg == 0.5 && back.loss.lambda_opt == 0.1 && empty.loss.lambda_bg == 0.5 &&
                        empty.loss.lambda_opt == 0.1;
  return {worst <= 1e-12 && defaults,
          fmt("%d clip losses over 4 supervision modes: |sum(terms) - total| %.2e; lambda_bg %.2f, lambda_opt %.2f "
              "after round trip",
              runs, worst, back.loss.lambda_bg, back.loss.lambda_opt)};
}

// ---- 10: determinism ------------------------------------------------------------

Outcome determinism() {
  RunConfig cfg = testing::tiny_run_config();
  cfg.steps = 60;
  cfg.od_steps = 30;
  cfg.checkpoint_every = 30;
  cfg.num_train = 4;
  cfg.num_test = 4;
  std::string reports[2], weights[2], logs[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path root = scratch("determinism_" + std::to_string(run));
    run_generate(cfg, root / "data");
    run_training(cfg, root / "data", root / "run");
    run_eval(cfg, root / "run" / "model.bin", root / "data", "test", root / "report");
    reports[run] = slurp(root / "report" / "metrics.csv") + slurp(root / "report" / "per_class.csv");
    weights[run] = slurp(root / "run" / "model.bin");
    logs[run] = slurp(root / "run" / "train_log.jsonl");
  }
  const bool same = !reports[0].empty() && reports[0] == reports[1];
  return {same, fmt("metric reports %s (%zu bytes); checkpoints %s; training logs %s",
                    same ? "byte-identical" : "DIFFER", reports[0].size(),
                    weights[0] == weights[1] ? "identical" : "differ", logs[0] == logs[1] ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},          {"Kabsch oracle", kabsch},
      {"metric oracle", metric_oracle},       {"simulator self-consistency", simulator},
      {"overfit", overfit},                   {"ablation direction", ablation},
      {"variant semantics", variants},        {"axial attention", axial},
      {"loss arithmetic", loss_arithmetic},   {"determinism", determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
