#pragma once

#include <vector>

namespace pasm {

struct ConfusionCounts {
  long long tp = 0, tn = 0, fp = 0, fn = 0;
  long long total() const { return tp + tn + fp + fn; }
};

ConfusionCounts confusion(const std::vector<int>& predicted, const std::vector<int>& truth);

// Zero denominator factors yield 0.
double mcc(const ConfusionCounts& c);

double accuracy(const ConfusionCounts& c);

// Rank-sum estimator, ties credited one half. Throws InputError when labels
// are single-class.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Two-sided p by the probability-mass rule: sum over tables (fixed margins)
// whose probability is at most the observed one within 1e-12 slack. Log-space
// hypergeometric weights.
double fisher_exact_2x2(long long a, long long b, long long c, long long d);

// Partition-agreement statistics. Noise labels participate as ordinary
// labels; inputs must have equal length.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);
double normalized_mutual_info(const std::vector<int>& a, const std::vector<int>& b);
double co_clustering_jaccard(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace pasm
