#include "pasm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "pasm/errors.hpp"

namespace pasm {

ConfusionCounts confusion(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw InputError("prediction/label length mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == 1) {
      truth[i] == 1 ? ++c.tp : ++c.fp;
    } else {
      truth[i] == 1 ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

double mcc(const ConfusionCounts& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw InputError("empty confusion counts");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("score/label length mismatch");
  const std::size_t n = scores.size();
  long long n_pos = std::count(labels.begin(), labels.end(), 1);
  long long n_neg = static_cast<long long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InputError("ROC AUC needs both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks across tie groups, then the rank-sum estimator.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

double log_choose(long long n, long long k) {
  return std::lgamma(static_cast<double>(n + 1)) - std::lgamma(static_cast<double>(k + 1)) -
         std::lgamma(static_cast<double>(n - k + 1));
}

}  // namespace

double fisher_exact_2x2(long long a, long long b, long long c, long long d) {
  if (a < 0 || b < 0 || c < 0 || d < 0) throw InputError("negative contingency count");
  const long long r1 = a + b, r2 = c + d, c1 = a + c, n = a + b + c + d;
  if (n == 0) throw InputError("empty contingency table");
  if (r1 == 0 || r2 == 0 || c1 == 0 || c1 == n) return 1.0;

  const double log_total = log_choose(n, c1);
  auto log_prob = [&](long long k) {
    return log_choose(r1, k) + log_choose(r2, c1 - k) - log_total;
  };

  const double log_obs = log_prob(a);
  const long long k_lo = std::max<long long>(0, c1 - r2);
  const long long k_hi = std::min(r1, c1);
  double total = 0.0;
  for (long long k = k_lo; k <= k_hi; ++k) {
    const double lp = log_prob(k);
    if (lp <= log_obs + 1e-12) total += std::exp(lp);
  }
  return std::min(total, 1.0);
}

namespace {

double pairs2(double m) { return m * (m - 1.0) / 2.0; }

struct Contingency {
  std::map<int, double> row_sums, col_sums;
  std::map<std::pair<int, int>, double> cells;
  double n = 0.0;
};

Contingency build_contingency(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw InputError("labeling length mismatch");
  if (a.empty()) throw InputError("empty labelings");
  Contingency t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    t.row_sums[a[i]] += 1.0;
    t.col_sums[b[i]] += 1.0;
    t.cells[{a[i], b[i]}] += 1.0;
    t.n += 1.0;
  }
  return t;
}

}  // namespace

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  const Contingency t = build_contingency(a, b);
  double same_same = 0.0, same_a = 0.0, same_b = 0.0;
  for (const auto& [key, v] : t.cells) same_same += pairs2(v);
  for (const auto& [key, v] : t.row_sums) same_a += pairs2(v);
  for (const auto& [key, v] : t.col_sums) same_b += pairs2(v);
  const double tp = same_same;
  const double fp = same_a - tp;
  const double fn = same_b - tp;
  const double tn = pairs2(t.n) - tp - fp - fn;
  if (fp == 0.0 && fn == 0.0) return 1.0;
  return 2.0 * (tp * tn - fn * fp) / ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn));
}

double normalized_mutual_info(const std::vector<int>& a, const std::vector<int>& b) {
  const Contingency t = build_contingency(a, b);
  if (t.row_sums.size() == 1 && t.col_sums.size() == 1) return 1.0;

  double mi = 0.0;
  for (const auto& [key, nij] : t.cells) {
    const double pa = t.row_sums.at(key.first);
    const double pb = t.col_sums.at(key.second);
    mi += nij / t.n * std::log(t.n * nij / (pa * pb));
  }
  auto entropy = [&](const std::map<int, double>& sums) {
    double h = 0.0;
    for (const auto& [key, v] : sums) h -= v / t.n * std::log(v / t.n);
    return h;
  };
  const double normalizer =
      std::max((entropy(t.row_sums) + entropy(t.col_sums)) / 2.0,
               std::numeric_limits<double>::epsilon());
  return std::clamp(mi / normalizer, 0.0, 1.0);
}

double co_clustering_jaccard(const std::vector<int>& a, const std::vector<int>& b) {
  const Contingency t = build_contingency(a, b);
  double both = 0.0, in_a = 0.0, in_b = 0.0;
  for (const auto& [key, v] : t.cells) both += pairs2(v);
  for (const auto& [key, v] : t.row_sums) in_a += pairs2(v);
  for (const auto& [key, v] : t.col_sums) in_b += pairs2(v);
  const double either = in_a + in_b - both;
  if (either == 0.0) return 1.0;  // no co-clustered pair on either side
  return both / either;
}

}  // namespace pasm
