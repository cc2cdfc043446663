#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pasm/errors.hpp"
#include "pasm/pipeline.hpp"
#include "pasm/suggest.hpp"

namespace {

struct Cli {
  std::string config_path;
  std::string out_dir;
  std::string endpoint;
  std::uint64_t seed = 0;
  bool global_only = false;
  bool no_fallback = false;
  bool ablations = false;
  bool fairness = false;
  bool sweep = false;
  int stability = -1;
  std::string stability_mode;
  int mock_port = 8089;
};

pasm::RunConfig resolve_config(const CLI::App& app, const Cli& cli) {
  if (cli.config_path.empty()) throw pasm::InputError("--config is required");
  pasm::RunConfig cfg = pasm::load_run_config(cli.config_path);
  if (const char* env = std::getenv("PASM_SUGGEST_ENDPOINT")) cfg.endpoint = env;
  if (app.count("--endpoint") > 0) cfg.endpoint = cli.endpoint;
  if (app.count("--out") > 0) cfg.out_dir = cli.out_dir;
  if (app.count("--seed") > 0) {
    cfg.seed = cli.seed;
    cfg.split.seed = cli.seed;
    cfg.cluster.seed = cli.seed;
    cfg.sr.seed = cli.seed;
    cfg.train.seed = cli.seed;
    if (cfg.synthetic.has_value()) cfg.synthetic->seed = cli.seed;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  Cli cli;
  CLI::App app{"PASM: subpopulation-aware symbolic modeling pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", cli.config_path, "Run configuration JSON");
  app.add_option("--seed", cli.seed, "Override every configured seed");
  app.add_option("--out", cli.out_dir, "Override the output directory");
  app.add_option("--endpoint", cli.endpoint, "Suggestion endpoint (host:port or offline)");

  CLI::App* c_cluster = app.add_subcommand("cluster", "Discover subpopulations");
  c_cluster->add_option("--stability", cli.stability, "Stability report over N reruns");
  c_cluster->add_option("--stability-mode", cli.stability_mode, "seed_only or resample");

  CLI::App* c_fit = app.add_subcommand("fit-experts", "Evolve the symbolic expert library");
  c_fit->add_flag("--global-only", cli.global_only, "Fit one global front, skip clusters");
  c_fit->add_flag("--no-fallback", cli.no_fallback,
                  "Fail instead of going offline when the endpoint is unreachable");

  app.add_subcommand("train", "Train the mixture on the calibration split");

  CLI::App* c_eval = app.add_subcommand("evaluate", "Score the model and write reports");
  c_eval->add_flag("--ablations", cli.ablations, "Include the ablation grid");
  c_eval->add_flag("--fairness", cli.fairness, "Include the fairness audit");
  c_eval->add_flag("--sweep", cli.sweep, "Include the calibration-shot sweep");

  app.add_subcommand("synth", "Generate the configured synthetic dataset");

  CLI::App* c_mock = app.add_subcommand("mock-llm", "Serve the deterministic suggestion mock");
  c_mock->add_option("--port", cli.mock_port, "Listen port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_mock->parsed()) {
      std::fprintf(stderr, "mock-llm listening on 127.0.0.1:%d\n", cli.mock_port);
      pasm::run_mock_llm_server(cli.mock_port, cli.seed);
      throw pasm::NetworkError("cannot bind mock-llm to port " + std::to_string(cli.mock_port));
    }

    pasm::RunConfig cfg = resolve_config(app, cli);

    if (c_cluster->parsed()) {
      if (cli.stability >= 0) cfg.stability_runs = cli.stability;
      if (!cli.stability_mode.empty()) {
        if (cli.stability_mode == "seed_only") {
          cfg.stability_mode = pasm::Perturbation::SeedOnly;
        } else if (cli.stability_mode == "resample") {
          cfg.stability_mode = pasm::Perturbation::Resample;
        } else {
          throw pasm::InputError("unknown stability mode " + cli.stability_mode);
        }
      }
      const pasm::ClusterModel model = pasm::run_cluster_stage(cfg);
      std::printf("clusters=%d noise_fraction=%.4f fallback=%d out=%s\n", model.k,
                  model.noise_fraction, model.fallback_single_cluster ? 1 : 0,
                  cfg.out_dir.c_str());
    } else if (c_fit->parsed()) {
      if (cli.global_only) cfg.global_only = true;
      if (cli.no_fallback) cfg.allow_fallback = false;
      const pasm::ExpertLibrary lib = pasm::run_fit_experts_stage(cfg);
      std::printf("experts=%zu active=%zu warnings=%zu out=%s\n", lib.experts.size(),
                  lib.active_indices().size(), lib.warnings.size(), cfg.out_dir.c_str());
    } else if (app.get_subcommand("train")->parsed()) {
      const pasm::TrainResult result = pasm::run_train_stage(cfg);
      std::printf("best_epoch=%d best_val_mcc=%.4f early_stopped=%d epochs_run=%zu out=%s\n",
                  result.best_epoch, result.best_val_mcc, result.early_stopped ? 1 : 0,
                  result.log.size(), cfg.out_dir.c_str());
    } else if (c_eval->parsed()) {
      if (cli.ablations) cfg.run_ablations = true;
      if (cli.fairness) cfg.run_fairness = true;
      if (cli.sweep) cfg.run_sweep = true;
      const nlohmann::json report = pasm::run_evaluate_stage(cfg);
      const auto& full = report.at("metrics").at("full");
      std::printf("mcc=%.4f auc=%.4f accuracy=%.4f n=%d out=%s\n",
                  full.at("mcc").get<double>(), full.at("auc").get<double>(),
                  full.at("accuracy").get<double>(), full.at("n").get<int>(),
                  cfg.out_dir.c_str());
    } else {
      const pasm::Dataset ds = pasm::run_synth_stage(cfg);
      std::printf("rows=%zu features=%d dropped=%d out=%s\n", ds.size(), ds.dim(),
                  ds.dropped_rows, cfg.out_dir.c_str());
    }
  } catch (const pasm::NetworkError& e) {
    std::fprintf(stderr, "network error: %s\n", e.what());
    return 4;
  } catch (const pasm::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const pasm::InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const pasm::ExprError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
