#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pasm/dataset.hpp"
#include "pasm/library.hpp"
#include "pasm/metrics.hpp"
#include "pasm/moe.hpp"
#include "pasm/moe_train.hpp"

namespace pasm {

struct MetricSummary {
  ConfusionCounts counts;
  double mcc_value = 0.0;
  double auc_value = 0.0;
  double accuracy_value = 0.0;
  int n = 0;
};

MetricSummary summarize_scores(const std::vector<double>& probabilities,
                               const std::vector<int>& labels, double threshold = 0.5);

std::vector<Prediction> predict_all(const MoEModel& model, const Eigen::MatrixXd& X);

// Mean of sigmoid over the top-k stored global entries (k = entries
// available, top1 uses only the active one).
std::vector<double> aggregate_baseline(const ExpertLibrary& lib, const Eigen::MatrixXd& X,
                                       const std::string& mode);  // "top1" | "top5_avg"

struct FairnessAxis {
  std::string name;
  std::string column;
  double cutoff = 0.5;  // group0: value <= cutoff, group1: value > cutoff
  std::string group0_name = "group0";
  std::string group1_name = "group1";
};

struct FairnessRow {
  std::string axis;
  std::string group0, group1;
  double acc0 = 0.0, acc1 = 0.0;
  double delta = 0.0;
  double p_raw = 1.0;
  double p_bonferroni = 1.0;
  long long n0 = 0, n1 = 0;
  bool skipped = false;
  std::string note;
};

// Per axis: 2x2 table of group x correct/incorrect, group accuracies, their
// difference, and a two-sided exact test. The Bonferroni factor is the number
// of axes that were actually audited (empty-group axes are skipped with a
// note).
std::vector<FairnessRow> fairness_audit(const std::vector<int>& correct, const Dataset& ds,
                                        const std::vector<FairnessAxis>& axes);

struct SweepRow {
  int shots = 0;
  double mcc_value = 0.0;
  bool failed = false;
  std::string error;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  bool monotone_overall = false;  // last successful row >= first successful row
};

// Re-runs calibration at each shot count via the supplied closure; failures
// are recorded per row and the sweep continues.
SweepReport calibration_sweep(const std::function<double(int)>& run_mcc,
                              const std::vector<int>& shots_list);

struct AblationRow {
  std::string name;
  MetricSummary metrics;
};

struct AblationInputs {
  ExpertLibrary library;
  std::vector<int> cluster_labels;  // per source row, for the linear baseline
  Eigen::MatrixXd source_X;
  std::vector<int> source_y;
  Eigen::MatrixXd calibration_X;
  std::vector<int> calibration_y;
  Eigen::MatrixXd test_X;
  std::vector<int> test_y;
  std::vector<std::string> feature_names;
};

// Runs Top-1, Top-5 average, per-cluster linear experts with routing, fixed
// coefficients, learnable static coefficients, and the full model on one
// shared split and seed.
std::vector<AblationRow> ablation_grid(const AblationInputs& in, const TrainConfig& cfg);

// Per-cluster logistic regressions expressed as linear expressions with one
// slot per weight, packaged as a library (provenance mirrors the input).
ExpertLibrary linear_expert_library(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                    const std::vector<int>& cluster_labels,
                                    const std::vector<std::string>& feature_names,
                                    std::uint64_t seed);

nlohmann::json metrics_to_json(const MetricSummary& m);
nlohmann::json fairness_to_json(const std::vector<FairnessRow>& rows);
nlohmann::json sweep_to_json(const SweepReport& r);
nlohmann::json ablations_to_json(const std::vector<AblationRow>& rows);

}  // namespace pasm
