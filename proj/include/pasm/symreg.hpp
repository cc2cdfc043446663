#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pasm/expr.hpp"
#include "pasm/library.hpp"
#include "pasm/suggest.hpp"

namespace pasm {

struct SRConfig {
  int generations = 40;
  int islands = 30;
  int population_per_island = 50;
  int max_nodes = Expression::kMaxNodes;
  double llm_trigger_prob = 0.001;
  int tournament_size = 5;
  int migration_interval = 5;
  int pareto_top_k = 5;
  double parsimony = 0.005;  // per-node fitness penalty
  int constant_restarts = 3;
  int threads = 0;  // 0 picks hardware concurrency
  std::uint64_t seed = 0;

  void validate() const;
};

struct ParetoEntry {
  Expression expr;  // slot defaults hold the fitted constants
  std::vector<double> constants;
  double loss = 0.0;
  int complexity = 0;
};

struct ParetoFront {
  std::vector<ParetoEntry> entries;  // complexity strictly up, loss strictly down

  // Index of the entry minimizing loss + 0.005 * complexity.
  int knee() const;
};

struct SRStats {
  long long suggestions_attempted = 0;
  long long suggestions_accepted = 0;
  long long parse_failures = 0;
  long long client_failures = 0;
};

// Mean soft-margin loss log(1 + exp(-y~ * z)) of the expression's logit.
double soft_margin_loss(const Expression& e, std::span<const double> theta,
                        const Eigen::MatrixXd& X, const std::vector<int>& y,
                        const EvalGuards& g = {});

// Multi-restart coordinate/pattern search over the constant slots; returns
// the best slot values and their loss. Zero-slot expressions come back with
// an empty vector and the unchanged loss.
std::pair<std::vector<double>, double> optimize_constants(const Expression& e,
                                                          const Eigen::MatrixXd& X,
                                                          const std::vector<int>& y, int restarts,
                                                          std::uint64_t seed,
                                                          const EvalGuards& g = {});

// Island-model genetic programming over the guarded expression space.
// Requires at least 10 rows and both classes. Deterministic for a fixed seed
// when the client is offline (or null).
ParetoFront sr_fit(const Eigen::MatrixXd& X, const std::vector<int>& y,
                   const std::vector<std::string>& feature_names, const SRConfig& config,
                   SuggestionClient* client = nullptr, SRStats* stats = nullptr);

// One sr_fit over all rows (GLOBAL) plus one per cluster id; clusters with
// under 10 rows or one class are skipped with a warning. Every front entry is
// retained; the knee entry per provenance group is marked active.
ExpertLibrary build_expert_library(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                   const std::vector<int>& cluster_labels,
                                   const std::vector<std::string>& feature_names,
                                   const SRConfig& config, SuggestionClient* client = nullptr,
                                   SRStats* stats = nullptr);

}  // namespace pasm
