#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <doctest.h>

#include "pasm/errors.hpp"
#include "pasm/metrics.hpp"
#include "pasm/rng.hpp"

using namespace pasm;

namespace {

double pearson(const std::vector<int>& a, const std::vector<int>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double num = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return num / std::sqrt(va * vb);
}

double auc_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  long long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

// Exact two-sided Fisher by direct hypergeometric enumeration with long
// double factorials; safe for totals up to a few hundred.
double fisher_enumerated(long long a, long long b, long long c, long long d) {
  const long long r1 = a + b, r2 = c + d, c1 = a + c, n = a + b + c + d;
  if (r1 == 0 || r2 == 0 || c1 == 0 || c1 == n) return 1.0;
  std::vector<long double> logfact(static_cast<std::size_t>(n) + 1, 0.0L);
  for (long long i = 2; i <= n; ++i) {
    logfact[static_cast<std::size_t>(i)] =
        logfact[static_cast<std::size_t>(i - 1)] + std::log(static_cast<long double>(i));
  }
  auto table_prob = [&](long long x) {
    const long long y = r1 - x, z = c1 - x, w = r2 - z;
    if (y < 0 || z < 0 || w < 0) return -1.0L;
    const long double lp = logfact[r1] + logfact[r2] + logfact[c1] + logfact[n - c1] -
                           logfact[n] - logfact[x] - logfact[y] - logfact[z] - logfact[w];
    return std::exp(lp);
  };
  const long double observed = table_prob(a);
  long double p = 0.0L;
  for (long long x = std::max(0LL, c1 - r2); x <= std::min(r1, c1); ++x) {
    const long double px = table_prob(x);
    if (px >= 0.0L && px <= observed * (1.0L + 1e-12L)) p += px;
  }
  return static_cast<double>(std::min(p, 1.0L));
}

}  // namespace

TEST_CASE("mcc on the documented tables") {
  CHECK(mcc({50, 50, 0, 0}) == doctest::Approx(1.0));
  CHECK(mcc({25, 25, 25, 25}) == doctest::Approx(0.0));
  CHECK(mcc({90, 80, 20, 10}) == doctest::Approx(0.7035).epsilon(1e-4));
  CHECK(mcc({0, 80, 0, 20}) == doctest::Approx(0.0));
  CHECK(mcc({10, 0, 5, 0}) == doctest::Approx(0.0));
}

TEST_CASE("mcc equals the pearson correlation of the label vectors") {
  auto rng = make_rng(100, 0);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 60);
    std::vector<int> predicted(n), truth(n);
    for (int i = 0; i < n; ++i) {
      predicted[i] = coin(rng);
      truth[i] = coin(rng);
    }
    const ConfusionCounts c = confusion(predicted, truth);
    CHECK(std::abs(mcc(c) - pearson(predicted, truth)) <= 1e-10);
  }
}

TEST_CASE("complementation symmetry") {
  auto rng = make_rng(101, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 6 + static_cast<int>(rng() % 40);
    std::vector<int> predicted(n), truth(n);
    for (int i = 0; i < n; ++i) {
      predicted[i] = static_cast<int>(rng() % 2);
      truth[i] = static_cast<int>(rng() % 2);
    }
    std::vector<int> flipped = predicted;
    for (int& v : flipped) v = 1 - v;
    const ConfusionCounts c = confusion(predicted, truth);
    const ConfusionCounts cf = confusion(flipped, truth);
    CHECK(mcc(cf) == doctest::Approx(-mcc(c)).epsilon(1e-12));
    CHECK(accuracy(cf) == doctest::Approx(1.0 - accuracy(c)).epsilon(1e-12));
  }
}

TEST_CASE("accuracy arithmetic") {
  CHECK(accuracy({50, 50, 0, 0}) == doctest::Approx(1.0));
  CHECK(accuracy({25, 25, 25, 25}) == doctest::Approx(0.5));
  CHECK(accuracy({90, 80, 20, 10}) == doctest::Approx(0.85));
}

TEST_CASE("confusion counts are oriented tp/tn/fp/fn") {
  const ConfusionCounts c = confusion({1, 1, 0, 0, 1}, {1, 0, 0, 1, 1});
  CHECK(c.tp == 2);
  CHECK(c.fp == 1);
  CHECK(c.tn == 1);
  CHECK(c.fn == 1);
  CHECK_THROWS_AS(confusion({1}, {1, 0}), InputError);
}

TEST_CASE("roc auc on the documented cases") {
  CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == doctest::Approx(0.5));
  CHECK(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), InputError);
}

TEST_CASE("rank-sum auc equals brute force with heavy ties") {
  auto rng = make_rng(102, 0);
  std::uniform_int_distribution<int> level(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 199);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool has0 = false, has1 = false;
    for (int i = 0; i < n; ++i) {
      scores[i] = 0.25 * level(rng);
      labels[i] = static_cast<int>(rng() % 2);
      (labels[i] == 1 ? has1 : has0) = true;
    }
    if (!has0 || !has1) {
      labels[0] = 0;
      labels[n > 1 ? 1 : 0] = 1;
    }
    if (n == 1) continue;
    CHECK(roc_auc(scores, labels) == doctest::Approx(auc_bruteforce(scores, labels)).epsilon(1e-13));
  }
}

TEST_CASE("fisher exact on the documented tables") {
  CHECK(fisher_exact_2x2(5, 0, 0, 5) == doctest::Approx(2.0 / 252.0).epsilon(1e-10));
  CHECK(fisher_exact_2x2(3, 7, 3, 7) == doctest::Approx(1.0));
  CHECK(fisher_exact_2x2(0, 0, 4, 6) == doctest::Approx(1.0));
  CHECK(fisher_exact_2x2(4, 0, 6, 0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(fisher_exact_2x2(0, 0, 0, 0), InputError);
}

TEST_CASE("fisher matches full enumeration on random small tables") {
  auto rng = make_rng(103, 0);
  for (int trial = 0; trial < 400; ++trial) {
    const long long a = rng() % 9, b = rng() % 9, c = rng() % 9, d = rng() % 9;
    if (a + b + c + d == 0) continue;
    CHECK(fisher_exact_2x2(a, b, c, d) ==
          doctest::Approx(fisher_enumerated(a, b, c, d)).epsilon(1e-11));
  }
}

TEST_CASE("partition agreement metrics") {
  const std::vector<int> x = {0, 0, 1, 1};
  CHECK(adjusted_rand_index(x, {0, 1, 0, 1}) == doctest::Approx(-0.5));
  CHECK(adjusted_rand_index(x, x) == doctest::Approx(1.0));
  CHECK(adjusted_rand_index(x, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(normalized_mutual_info(x, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(co_clustering_jaccard(x, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(co_clustering_jaccard({0, 0, 0, 1}, {0, 0, 1, 1}) == doctest::Approx(1.0 / 4.0));

  auto rng = make_rng(104, 0);
  std::vector<int> big_a(10000), big_b(10000);
  for (int i = 0; i < 10000; ++i) {
    big_a[i] = static_cast<int>(rng() % 4);
    big_b[i] = static_cast<int>(rng() % 4);
  }
  CHECK(std::abs(normalized_mutual_info(big_a, big_b)) <= 0.05);
  CHECK(std::abs(adjusted_rand_index(big_a, big_b)) <= 0.05);

  std::vector<int> renamed = big_a;
  for (int& v : renamed) v = (v + 2) % 4;
  CHECK(adjusted_rand_index(big_a, renamed) == doctest::Approx(1.0));
  CHECK(normalized_mutual_info(big_a, renamed) == doctest::Approx(1.0));
}
