// Command-line front end: generate, train, eval, infer, plot, config.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "tars/pipeline.hpp"

namespace {

tars::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? tars::RunConfig{} : tars::load_run_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radar scene-flow estimation with a traffic vector field"};
  app.require_subcommand(1);

  std::string config, out, data, checkpoint, report, split = "test", resume, input;
  double arrow_scale = 1.0;

  auto* gen = app.add_subcommand("generate", "Write a synthetic radar dataset");
  gen->add_option("--config", config, "JSON run configuration");
  gen->add_option("--out", out, "Dataset directory")->required();

  auto* train = app.add_subcommand("train", "Stage 1 (OD proxy) then scene-flow training");
  train->add_option("--config", config, "JSON run configuration");
  train->add_option("--data", data, "Dataset root (default: $TARS_DATA_ROOT)");
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write metric tables");
  eval->add_option("--config", config, "JSON run configuration");
  eval->add_option("--checkpoint", checkpoint, "Model archive")->required();
  eval->add_option("--data", data, "Dataset root (default: $TARS_DATA_ROOT)");
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--report", report, "Report directory")->required();

  auto* infer = app.add_subcommand("infer", "Write predicted flow per frame");
  infer->add_option("--config", config, "JSON run configuration");
  infer->add_option("--checkpoint", checkpoint, "Model archive")->required();
  infer->add_option("--data", data, "Dataset root (default: $TARS_DATA_ROOT)");
  infer->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  infer->add_option("--out", out, "Output directory")->required();

  auto* plot = app.add_subcommand("plot", "Render frame files as BEV arrow SVGs");
  plot->add_option("--in", input, "Frame file or directory")->required();
  plot->add_option("--out", out, "SVG directory")->required();
  plot->add_option("--arrow-scale", arrow_scale, "Arrow length multiplier");

  auto* dump = app.add_subcommand("config", "Print the effective configuration");
  dump->add_option("--config", config, "JSON run configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto m = tars::run_generate(config_or_default(config), out);
      std::cout << "wrote " << m.train.size() << " train and " << m.test.size() << " test sequences to " << out
                << "\n";
    } else if (train->parsed()) {
      const auto cfg = config_or_default(config);
      tars::run_training(cfg, tars::resolve_data_root(data.empty() ? cfg.data_root : data), out, resume);
      std::cout << "training finished: " << out << "/model.bin\n";
    } else if (eval->parsed()) {
      const auto cfg = config_or_default(config);
      const auto r =
          tars::run_eval(cfg, checkpoint, tars::resolve_data_root(data.empty() ? cfg.data_root : data), split, report);
      std::cout << tars::metrics_csv(r);
    } else if (infer->parsed()) {
      const auto cfg = config_or_default(config);
      const int n = tars::run_infer(cfg, checkpoint, tars::resolve_data_root(data.empty() ? cfg.data_root : data),
                                    split, out);
      std::cout << "wrote " << n << " flow frames to " << out << "\n";
    } else if (plot->parsed()) {
      const int n = tars::run_plot(input, out, arrow_scale);
      std::cout << "wrote " << n << " figures to " << out << "\n";
    } else if (dump->parsed()) {
      std::cout << tars::to_json(config_or_default(config)).dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
