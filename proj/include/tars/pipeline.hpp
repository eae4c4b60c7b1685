// Run configuration, staged training, evaluation, inference and plotting.
// Everything is a deterministic function of (config, seed, data).

#ifndef TARS_PIPELINE_HPP
#define TARS_PIPELINE_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tars/losses.hpp"
#include "tars/metrics.hpp"
#include "tars/model.hpp"
#include "tars/od_stub.hpp"
#include "tars/optim.hpp"
#include "tars/param_store.hpp"
#include "tars/synthworld.hpp"

namespace tars {

/// Invalid or inconsistent run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or gradient during training; a dump has been written.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  TarsConfig model;
  LossConfig loss;
  ScenarioConfig scenario;
  OdStubConfig od;
  OptimizerConfig optim;

  int steps = 2000;            // scene-flow optimizer steps, one clip each
  int od_steps = 200;          // stage-1 proxy steps
  double od_lr = 1e-3;
  int checkpoint_every = 500;  // 0: final checkpoint only
  int num_train = 8;           // sequences written by `generate`
  int num_test = 4;
  std::uint64_t seed = 1;
  bool use_camera = true;      // optical-flow term for cross supervision
  std::string checkpoint_dtype = "float64";  // "float32" | "float64"
  std::string data_root;       // empty: $TARS_DATA_ROOT
  std::string out_dir = "runs/default";
  std::string od_checkpoint;   // optional frozen stage-1 archive to load

  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Hash of everything that determines parameter shapes.
std::uint64_t config_fingerprint(const RunConfig& cfg);

/// Resolves the data root: explicit value, else $TARS_DATA_ROOT, else throws.
std::filesystem::path resolve_data_root(const std::string& explicit_root);

/// A mini-clip: consecutive frames, T-1 (P, Q) pairs.
struct Clip {
  std::string name;
  std::vector<RadarFrame> frames;
};

std::vector<Clip> load_split(const std::filesystem::path& root, const std::string& split);
/// Same sequences as generate_dataset would write, kept in double precision.
std::vector<Clip> simulate_clips(const ScenarioConfig& cfg, int first_index, int count);

/// One network input pair after variant-specific preprocessing.
struct PreparedPair {
  RadarFrame p;          // compensated for superego
  PointCloud q;
  SE3Transform omega;    // sensor motion from P to Q
  PseudoLabels pseudo;
  std::vector<Vec2> pseudo_opt;
};

PreparedPair prepare_pair(const RunConfig& cfg, const RadarFrame& p, const RadarFrame& q);

struct StepReport {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  loss::LossReport terms;  // summed over the pairs of the clip
};

/// Owns parameters, optimizer state and cached OD pyramids.
class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<Clip> clips);

  /// Stage 1: train (or load) and freeze the OD stub. No-op when the
  /// configuration does not consume detector features.
  void stage_one();
  /// Stage 2: one optimizer step on clip `step % clips`. Throws TrainingError on NaN.
  StepReport step();
  /// Runs until `cfg.steps`, logging JSONL to `log` (may be null) and writing
  /// checkpoints under `out_dir` at the configured cadence.
  void run(std::ostream* log, const std::filesystem::path& out_dir);

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  const Optimizer& optimizer() const { return opt_; }
  const RunConfig& config() const { return cfg_; }
  const TarsModel& model() const { return model_; }
  int steps_done() const { return opt_.steps(); }
  bool uses_od() const;

 private:
  const BEVPyramid* pyramid_for(std::size_t clip, std::size_t frame) const;
  void dump_batch(std::size_t clip, const std::string& what) const;

  RunConfig cfg_;
  std::vector<Clip> clips_;
  TarsModel model_;
  OdStub od_;
  ParamStore params_;
  Optimizer opt_;
  std::vector<std::vector<BEVPyramid>> pyramids_;
  std::filesystem::path dump_dir_;
};

/// Loss of one clip in a fresh graph, hidden state carried across its pairs.
struct ClipLoss {
  ad::Var total;
  loss::LossReport report;
};
ClipLoss clip_loss(ad::Graph& g, const RunConfig& cfg, const TarsModel& model, const ParamStore& params,
                   const Clip& clip, const std::vector<BEVPyramid>* pyramids);

/// Per-pair prediction in the evaluation frame (see prepare_pair).
struct PairPrediction {
  PreparedPair pair;
  FlowField flow;
  std::optional<SE3Transform> ego;
};

/// Runs the network over a clip. `params == nullptr` predicts zero flow.
std::vector<PairPrediction> predict_clip(const RunConfig& cfg, const ParamStore* params, const Clip& clip);

/// Ground truth comparable to the prediction of a prepared pair.
MetricReport evaluate(const RunConfig& cfg, const ParamStore* params, const std::vector<Clip>& clips);

struct EvalFiles {
  std::filesystem::path metrics_csv;
  std::filesystem::path per_class_csv;
};
EvalFiles write_reports(const std::filesystem::path& dir, const MetricReport& r);

/// Top-level CLI actions.
DatasetManifest run_generate(const RunConfig& cfg, const std::filesystem::path& out);
void run_training(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out,
                  const std::filesystem::path& resume = {});
MetricReport run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                      const std::filesystem::path& data, const std::string& split,
                      const std::filesystem::path& report_dir);
/// Writes one frame file per (P, Q) pair with the predicted flow in gt_flow.
/// Returns the number of files written.
int run_infer(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& data,
              const std::string& split, const std::filesystem::path& out);
/// Renders every frame_*.bin under `in` as an SVG arrow field. Returns the file count.
int run_plot(const std::filesystem::path& in, const std::filesystem::path& out, double arrow_scale = 1.0);

struct SvgOptions {
  double x_min = 0.0, x_max = 32.0, y_min = -16.0, y_max = 16.0;
  double pixels_per_meter = 20.0;
  double arrow_scale = 1.0;
};
/// Bird's-eye view: x forward points up, y left points left.
std::string render_flow_svg(const std::vector<Vec3>& positions, const FlowField& flow,
                            const std::vector<std::uint8_t>& moving, const SvgOptions& opt = {});

Archive load_checkpoint_params(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace tars

#endif  // TARS_PIPELINE_HPP
