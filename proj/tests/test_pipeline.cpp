#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "tars/pipeline.hpp"
#include "tiny.hpp"

using namespace tars;
using tars::testing::tiny_run_config;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tars_pipe_" + name);
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

RunConfig short_run() {
  RunConfig c = tiny_run_config();
  c.steps = 4;
  c.od_steps = 5;
  c.checkpoint_every = 2;
  c.num_train = 2;
  c.num_test = 2;
  c.optim.kind = "adam";
  c.optim.lr = 1e-3;
  return c;
}

}  // namespace

TEST(RunConfig, JsonRoundTripIsStable) {
  RunConfig c = short_run();
  c.loss.lambda_bg = 0.25;
  c.model.variant = Variant::kEgo;
  c.model.supervision = Supervision::kCross;
  const std::string a = to_json(c).dump();
  const RunConfig back = run_config_from_json(nlohmann::json::parse(a));
  EXPECT_EQ(to_json(back).dump(), a);
  EXPECT_EQ(back.loss.lambda_bg, 0.25);
  EXPECT_EQ(back.model.variant, Variant::kEgo);

  const auto dir = scratch_dir("cfg");
  save_run_config(dir / "c.json", c);
  EXPECT_EQ(to_json(load_run_config(dir / "c.json")).dump(), a);
}

TEST(RunConfig, EmptyObjectKeepsLossWeightDefaults) {
  const RunConfig c = run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.loss.lambda_bg, 0.5);
  EXPECT_EQ(c.loss.lambda_opt, 0.1);
  const RunConfig back = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(back.loss.lambda_bg, 0.5);
  EXPECT_EQ(back.loss.lambda_opt, 0.1);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  using nlohmann::json;
  EXPECT_THROW(run_config_from_json(json::parse(R"({"stepz": 3})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"loss": {"lambda_fg": 1}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"model": {"grid": {"cells": 4}}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"model": {"variant": "hyperego"}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"steps": "many"})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"steps": 0})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"checkpoint_dtype": "float16"})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"scenario": {"clip_length": 5}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"loss": {"alpha": -1}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse("[1, 2]")), ConfigError);

  const auto dir = scratch_dir("badcfg");
  EXPECT_THROW(load_run_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "broken.json"), ConfigError);
}

TEST(RunConfig, FingerprintTracksShapesOnly) {
  RunConfig a = short_run();
  RunConfig b = a;
  b.optim.lr = 0.5;
  b.steps = 99;
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.model.point_channels = 12;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
}

TEST(RunConfig, DataRootResolution) {
  EXPECT_EQ(resolve_data_root("/some/where"), fs::path("/some/where"));
  ::setenv("TARS_DATA_ROOT", "/from/env", 1);
  EXPECT_EQ(resolve_data_root(""), fs::path("/from/env"));
  ::unsetenv("TARS_DATA_ROOT");
  EXPECT_THROW(resolve_data_root(""), ConfigError);
}

TEST(PreparePair, SuperegoCompensatesAndEgoKeepsRawFrame) {
  RunConfig c = short_run();
  c.scenario.min_ego_speed = 4.0;
  const auto clips = simulate_clips(c.scenario, 0, 1);
  const RadarFrame& p = clips[0].frames[0];
  const RadarFrame& q = clips[0].frames[1];
  const PreparedPair sup = prepare_pair(c, p, q);
  const SE3Transform omega = relative_ego_motion(p.ego_pose, q.ego_pose);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(sup.p.cloud.positions[i], omega.apply(p.cloud.positions[i]));
    EXPECT_EQ(sup.pseudo.bg_flow.vectors[i], Vec3::Zero());
  }
  EXPECT_TRUE(sup.pseudo_opt.empty());

  RunConfig e = c;
  e.model.variant = Variant::kEgo;
  e.model.supervision = Supervision::kCross;
  const PreparedPair eg = prepare_pair(e, p, q);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(eg.p.cloud.positions[i], p.cloud.positions[i]);
  EXPECT_EQ(eg.pseudo_opt.size(), p.size());
  e.use_camera = false;
  EXPECT_TRUE(prepare_pair(e, p, q).pseudo_opt.empty());
}

TEST(Evaluate, GroundTruthAsPredictionIsPerfect) {
  RunConfig c = short_run();
  MetricAccumulator acc;
  for (const Clip& clip : simulate_clips(c.scenario, 0, 3)) {
    for (std::size_t t = 0; t + 1 < clip.frames.size(); ++t) {
      const PreparedPair pp = prepare_pair(c, clip.frames[t], clip.frames[t + 1]);
      const std::vector<double> ratio(pp.p.size(), c.scenario.resolution_ratio);
      acc.add_frame(pp.p.gt_flow, pp.p.gt_flow, pp.p.moving_mask, pp.p.class_id, ratio);
    }
  }
  const MetricReport r = acc.report();
  EXPECT_EQ(*r.epe, 0.0);
  EXPECT_EQ(*r.rne, 0.0);
  EXPECT_EQ(*r.acc_s, 100.0);
  EXPECT_EQ(*r.acc_r, 100.0);
  EXPECT_EQ(*r.sepe, 0.0);
  if (r.mepe) EXPECT_EQ(*r.mepe, 0.0);
}

TEST(Evaluate, ZeroFlowOnCompensatedStaticSceneHasZeroSepe) {
  RunConfig c = short_run();
  c.scenario.parked_probability = 1.0;
  c.scenario.min_ego_speed = 3.0;
  const MetricReport r = evaluate(c, nullptr, simulate_clips(c.scenario, 0, 4));
  EXPECT_EQ(*r.sepe, 0.0);
  EXPECT_FALSE(r.mepe);
  EXPECT_EQ(r.moving, 0u);
}

TEST(Trainer, StageOneFreezesDetectorAndLeavesItUntouched) {
  RunConfig c = short_run();
  Trainer tr(c, simulate_clips(c.scenario, 0, 2));
  ASSERT_TRUE(tr.uses_od());
  EXPECT_THROW(tr.step(), std::logic_error);
  tr.stage_one();
  const std::uint64_t od = tr.params().hash("od.");
  const std::uint64_t rest = tr.params().hash("gru.");
  for (const auto& e : tr.params().entries()) {
    if (e.name.rfind("od.", 0) == 0) EXPECT_TRUE(e.frozen) << e.name;
  }
  for (int i = 0; i < 3; ++i) tr.step();
  EXPECT_EQ(tr.params().hash("od."), od);
  EXPECT_NE(tr.params().hash("gru."), rest);
}

TEST(Trainer, PointOnlyConfigurationHasNoDetector) {
  RunConfig c = short_run();
  c.model.use_tvf = false;
  Trainer tr(c, simulate_clips(c.scenario, 0, 2));
  EXPECT_FALSE(tr.uses_od());
  tr.stage_one();
  EXPECT_EQ(tr.params().hash("od."), ParamStore().hash("od."));
  EXPECT_TRUE(std::isfinite(tr.step().loss));
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const RunConfig c = short_run();
  const auto clips = simulate_clips(c.scenario, 0, 2);
  const auto dir = scratch_dir("resume");

  Trainer straight(c, clips);
  straight.stage_one();
  for (int i = 0; i < 4; ++i) straight.step();

  Trainer first(c, clips);
  first.stage_one();
  for (int i = 0; i < 2; ++i) first.step();
  first.save_checkpoint(dir / "half.bin");

  Trainer second(c, clips);
  second.load_checkpoint(dir / "half.bin");
  EXPECT_EQ(second.steps_done(), 2);
  for (int i = 0; i < 2; ++i) second.step();
  EXPECT_EQ(second.params().hash(), straight.params().hash());

  RunConfig other = c;
  other.model.point_channels = 6;
  Trainer mismatched(other, clips);
  EXPECT_THROW(mismatched.load_checkpoint(dir / "half.bin"), ConfigError);
}

TEST(Trainer, NonFiniteLossAbortsWithDump) {
  RunConfig c = short_run();
  Trainer tr(c, simulate_clips(c.scenario, 0, 2));
  tr.stage_one();
  auto& w = tr.params().at("gru.c.w");
  w.value.data.assign(w.value.data.size(), std::numeric_limits<double>::quiet_NaN());
  const auto dir = scratch_dir("nan");
  EXPECT_THROW(tr.run(nullptr, dir), TrainingError);
  EXPECT_TRUE(fs::exists(dir / "nan_dump" / "info.json"));
  EXPECT_TRUE(fs::exists(dir / "nan_dump" / "frame_000.bin"));
  EXPECT_NO_THROW(read_frame(dir / "nan_dump" / "frame_000.bin"));
  EXPECT_FALSE(fs::exists(dir / "model.bin"));
}

TEST(Trainer, RejectsBadClips) {
  RunConfig c = short_run();
  EXPECT_THROW(Trainer(c, {}), SizeError);
  auto clips = simulate_clips(c.scenario, 0, 1);
  clips[0].frames.pop_back();
  EXPECT_THROW(Trainer(c, clips), SizeError);
}

TEST(Cli, GenerateTrainEvalInferPlot) {
  const RunConfig c = short_run();
  const auto root = scratch_dir("cli");
  const auto data = root / "data";
  const DatasetManifest m = run_generate(c, data);
  EXPECT_EQ(m.train.size(), 2u);
  EXPECT_TRUE(fs::exists(data / "config.json"));
  EXPECT_THROW(load_split(data, "validation"), ConfigError);

  run_training(c, data, root / "run");
  EXPECT_TRUE(fs::exists(root / "run" / "model.bin"));
  EXPECT_TRUE(fs::exists(root / "run" / "od_stub.bin"));
  EXPECT_TRUE(fs::exists(root / "run" / "checkpoint_step000002.bin"));
  EXPECT_TRUE(fs::exists(root / "run" / "checkpoint_step000004.bin"));
  std::ifstream log(root / "run" / "train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto rec = nlohmann::json::parse(line);
    EXPECT_EQ(rec.at("step").get<int>(), lines + 1);
    EXPECT_TRUE(rec.at("terms").contains("sc"));
  }
  EXPECT_EQ(lines, c.steps);

  const MetricReport a = run_eval(c, root / "run" / "model.bin", data, "test", root / "eval_a");
  run_eval(c, root / "run" / "model.bin", data, "test", root / "eval_b");
  EXPECT_EQ(slurp(root / "eval_a" / "metrics.csv"), slurp(root / "eval_b" / "metrics.csv"));
  EXPECT_EQ(slurp(root / "eval_a" / "per_class.csv"), slurp(root / "eval_b" / "per_class.csv"));
  EXPECT_TRUE(a.epe.has_value());

  const int n = run_infer(c, root / "run" / "model.bin", data, "test", root / "infer");
  EXPECT_EQ(n, 2 * (c.scenario.clip_length - 1));
  const RadarFrame f = read_frame(root / "infer" / m.test[0] / "frame_000.bin");
  EXPECT_EQ(f.size(), static_cast<std::size_t>(c.scenario.points_per_frame));
  EXPECT_FALSE(fs::exists(root / "infer" / m.test[0] / "frame_002.bin"));

  EXPECT_EQ(run_plot(root / "infer", root / "svg"), n);
  EXPECT_TRUE(fs::exists(root / "svg" / m.test[0] / "frame_000.svg"));

  // resumed training appends to the log and continues the step count
  RunConfig longer = c;
  longer.steps = 6;
  run_training(longer, data, root / "run", root / "run" / "checkpoint_step000004.bin");
  std::ifstream log2(root / "run" / "train_log.jsonl");
  lines = 0;
  for (std::string line; std::getline(log2, line);) ++lines;
  EXPECT_EQ(lines, 6);
}

TEST(Plot, ZeroFlowDrawsDegenerateArrows) {
  const std::vector<Vec3> pos{{10.0, 0.0, 0.0}, {20.0, -5.0, 1.0}};
  FlowField zero;
  zero.vectors.assign(2, Vec3::Zero());
  const std::string svg = render_flow_svg(pos, zero, {0, 1});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("x1=\"320.000\" y1=\"440.000\" x2=\"320.000\" y2=\"440.000\""), std::string::npos);
  EXPECT_NE(svg.find("crimson"), std::string::npos);
  FlowField short_flow;
  EXPECT_THROW(render_flow_svg(pos, short_flow, {}), ShapeError);
}
