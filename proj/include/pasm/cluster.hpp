#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pasm {

inline constexpr int kNoiseLabel = -1;

struct ClusterParams {
  int embed_dim = 2;
  int min_cluster_size = 15;
  int min_samples = 5;
  std::uint64_t seed = 0;  // consumed by resampled stability runs only
  std::string embedding_csv;  // optional precomputed embedding, row-aligned
};

struct ClusterModel {
  ClusterParams params;
  std::vector<int> kept_features;  // constant features are dropped
  std::vector<double> means, stds;  // per kept feature
  Eigen::MatrixXd basis;            // kept_d x e, orthonormal columns
  Eigen::MatrixXd embedding;        // N x e training exemplars
  std::vector<int> assignments;     // N labels in {0..K-1} or kNoiseLabel
  int k = 0;
  double noise_fraction = 0.0;
  bool fallback_single_cluster = false;
  std::vector<std::string> warnings;
};

// Standardize, project onto the top principal components (or the supplied
// embedding), then density clustering: core distances at k = min_samples,
// mutual-reachability MST, condensed tree at min_cluster_size, and
// excess-of-mass cluster selection with a noise label for unclaimed points.
// If everything lands in noise, min_cluster_size is halved once; failing
// that, a single all-points cluster is emitted.
ClusterModel fit_predict(const Eigen::MatrixXd& X, const ClusterParams& params);

// Nearest non-noise training exemplar in the embedding; ties take the
// smaller label. Never returns the noise label.
int assign(const ClusterModel& model, std::span<const double> x);

enum class Perturbation { SeedOnly, Resample };

struct StabilityReport {
  double ari = 0.0;
  double nmi = 0.0;
  double co_jaccard = 0.0;
  int cluster_count_mode = 0;
  double noise_fraction = 0.0;
  int runs = 0;
};

// Repeated fit_predict under seed changes (and 85% subsampling when
// resampling); pairwise agreement metrics are averaged over run pairs and
// computed on the points shared by each pair.
StabilityReport stability(const Eigen::MatrixXd& X, const ClusterParams& params, int runs,
                          Perturbation mode);

}  // namespace pasm
