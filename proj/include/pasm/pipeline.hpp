#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pasm/cluster.hpp"
#include "pasm/dataset.hpp"
#include "pasm/eval_harness.hpp"
#include "pasm/moe_train.hpp"
#include "pasm/symreg.hpp"

namespace pasm {

// One run directory with fixed artifact names so stage commands compose by
// convention: cluster.json, assignments.csv, library.json, model.json,
// report.json, splits.json, predictions.csv, train_log.txt.
struct RunConfig {
  std::string data_csv;         // empty when synthetic
  CsvSchema schema;
  std::optional<SyntheticSpec> synthetic;
  SplitSpec split;
  ClusterParams cluster;
  SRConfig sr;
  TrainConfig train;
  std::vector<FairnessAxis> fairness_axes;
  std::vector<int> sweep_shots;
  int stability_runs = 0;       // 0 disables the stability report
  Perturbation stability_mode = Perturbation::SeedOnly;
  bool global_only = false;
  bool run_ablations = false;
  bool run_fairness = false;
  bool run_sweep = false;
  bool allow_fallback = true;        // unreachable endpoint: warn and go offline
  std::string endpoint = "offline";  // "offline" or host:port
  std::string out_dir = "run";
  std::uint64_t seed = 0;

  void validate() const;
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

RunConfig load_run_config(const std::string& path);

// Loads the CSV or generates the synthetic dataset per the config.
Dataset load_input_dataset(const RunConfig& cfg);

// Stage entry points; each persists its artifacts under cfg.out_dir and
// returns the primary artifact. Later stages read earlier artifacts from the
// same directory.
ClusterModel run_cluster_stage(const RunConfig& cfg);
ExpertLibrary run_fit_experts_stage(const RunConfig& cfg);
TrainResult run_train_stage(const RunConfig& cfg);
nlohmann::json run_evaluate_stage(const RunConfig& cfg);
Dataset run_synth_stage(const RunConfig& cfg);  // writes synthetic.csv

// Canonical JSON writer used for every artifact (sorted keys, 2-space
// indent, trailing newline) so byte-identical reruns are achievable.
void write_json_artifact(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_artifact(const std::string& path);

}  // namespace pasm
