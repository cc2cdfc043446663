#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "pasm/errors.hpp"

namespace pasm {

struct Dataset {
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> rows;  // N x d, NaN marks a missing value
  std::vector<int> labels;                // values in {0,1}
  std::vector<std::string> group_tags;
  std::vector<std::string> demographic_columns;
  std::vector<double> imputation_means;  // filled once imputation has run
  int dropped_rows = 0;                  // rows discarded for a missing label

  std::size_t size() const { return rows.size(); }
  int dim() const { return static_cast<int>(feature_names.size()); }

  // Checks size agreement, unique feature names, and finite values.
  void validate(bool require_finite = true) const;

  Dataset select(const std::vector<int>& indices) const;
  int feature_index(const std::string& name) const;  // -1 when absent
};

Eigen::MatrixXd to_matrix(const Dataset& ds);

struct CsvSchema {
  std::string label_column;
  std::string tag_column;
  std::vector<std::string> feature_columns;  // empty: every remaining column
  // column -> raw token -> numeric code, for categorical features
  std::map<std::string, std::map<std::string, double>> codebook;
  std::vector<std::string> demographic_columns;
};

// UTF-8, header row, comma-delimited. Rows with a missing label are dropped
// and counted; a non-numeric feature cell without a codebook entry is an
// InputError naming the row and column. Missing feature cells become NaN.
Dataset load_csv(const std::string& path, const CsvSchema& schema);

struct SplitSpec {
  std::vector<std::string> source_tags;
  std::string target_tag;
  double expert_train_fraction = 0.85;
  int calibration_shots = 100;
  std::uint64_t seed = 0;

  void validate(const Dataset& ds) const;
};

struct Splits {
  Dataset expert_train;
  Dataset source_val;
  Dataset calibration;
  Dataset target_test;
  // Row indices into the input Dataset, for the split manifest.
  std::vector<int> expert_train_idx, source_val_idx, calibration_idx, target_test_idx;
};

// Partitions source rows by expert_train_fraction (round half up), samples
// calibration_shots target rows uniformly without replacement, and leaves the
// rest of the target as test. Missing features are mean-imputed with means
// taken from expert_train only. Deterministic given spec.seed.
Splits make_splits(const Dataset& ds, const SplitSpec& spec);

struct RegimeSpec {
  std::string formula;          // ground-truth decision surface, > 0 means label 1
  std::vector<double> center;   // per-feature mean
  std::vector<double> spread;   // per-feature standard deviation
};

struct SyntheticSpec {
  std::vector<std::string> feature_names;
  std::vector<int> n_per_regime;
  std::vector<RegimeSpec> regimes;
  double noise_rate = 0.0;  // independent label-flip probability
  // (feature, regime_a, regime_b): the feature's effect sign must flip
  // between the two regimes' formulas; checked at the regime centers.
  std::vector<std::tuple<std::string, int, int>> conflict_pairs;
  std::vector<std::string> demographic_columns;
  std::uint64_t seed = 0;

  void validate() const;
};

// Draws features per regime, labels by the regime formula's sign, then flips
// labels independently at noise_rate. Tags encode the regime ("regime0", ...).
// A regime whose label balance leaves (0.05, 0.95) raises InputError.
Dataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace pasm
