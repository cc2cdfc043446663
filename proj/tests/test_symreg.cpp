#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>
#include <Eigen/Dense>

#include "pasm/errors.hpp"
#include "pasm/rng.hpp"
#include "pasm/symreg.hpp"

using namespace pasm;

namespace {

const std::vector<std::string> kXY = {"x1", "x2"};

struct Planted {
  Eigen::MatrixXd X;
  std::vector<int> y;
};

Planted planted_difference(int n, std::uint64_t seed) {
  auto rng = make_rng(seed, 0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Planted p;
  p.X.resize(n, 2);
  p.y.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    p.X(i, 0) = gauss(rng);
    p.X(i, 1) = gauss(rng);
    p.y[static_cast<std::size_t>(i)] = p.X(i, 0) - p.X(i, 1) > 0.0 ? 1 : 0;
  }
  return p;
}

SRConfig small_config(std::uint64_t seed) {
  SRConfig cfg;
  cfg.islands = 8;
  cfg.generations = 20;
  cfg.population_per_island = 30;
  cfg.llm_trigger_prob = 0.0;
  cfg.seed = seed;
  return cfg;
}

bool fronts_identical(const ParetoFront& a, const ParetoFront& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    if (a.entries[i].loss != b.entries[i].loss) return false;
    if (a.entries[i].complexity != b.entries[i].complexity) return false;
    if (print_canonical(a.entries[i].expr, kXY) != print_canonical(b.entries[i].expr, kXY)) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("soft margin loss closed forms") {
  Eigen::MatrixXd X(4, 1);
  X << 0.0, 1.0, 2.0, 3.0;
  const std::vector<int> balanced = {1, 1, 0, 0};

  const Expression zero = parse("0.0", {"x1"});
  CHECK(soft_margin_loss(zero, zero.slot_defaults(), X, balanced) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const Expression level = parse("1.3", {"x1"});
  const double expected =
      0.5 * (std::log1p(std::exp(-1.3)) + std::log1p(std::exp(1.3)));
  CHECK(soft_margin_loss(level, level.slot_defaults(), X, balanced) ==
        doctest::Approx(expected).epsilon(1e-12));

  CHECK_THROWS_AS(soft_margin_loss(zero, {}, X, {1, 0}), InputError);
}

TEST_CASE("constant-only fit settles at ln 2 on balanced labels") {
  Eigen::MatrixXd X(40, 1);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) {
    X(i, 0) = 0.1 * i;
    y[static_cast<std::size_t>(i)] = i % 2;
  }
  const Expression c0 = parse("0.7", {"x1"});
  const auto [theta, loss] = optimize_constants(c0, X, y, 3, 5);
  REQUIRE(theta.size() == 1);
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(std::abs(theta[0]) <= 1e-3);
}

TEST_CASE("planted threshold constant is recovered") {
  const int n = 200;
  Eigen::MatrixXd X(n, 1);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 4.0 * i / (n - 1.0);
    y[static_cast<std::size_t>(i)] = X(i, 0) > 2.0 ? 1 : 0;
  }
  const Expression shifted = parse("x1 - 0.5", {"x1"});
  const auto [theta, loss] = optimize_constants(shifted, X, y, 3, 7);
  REQUIRE(theta.size() == 1);
  CHECK(std::abs(theta[0] - 2.0) <= 0.05);
}

TEST_CASE("zero-slot expressions come back untouched") {
  const Planted p = planted_difference(60, 13);
  const Expression bare = parse("x1", kXY);
  const auto [theta, loss] = optimize_constants(bare, p.X, p.y, 3, 9);
  CHECK(theta.empty());
  CHECK(loss == doctest::Approx(soft_margin_loss(bare, {}, p.X, p.y)).epsilon(1e-15));
}

TEST_CASE("planted difference formula is recovered on the front") {
  const Planted p = planted_difference(300, 7);
  const SRConfig cfg = small_config(11);
  const ParetoFront front = sr_fit(p.X, p.y, kXY, cfg);
  REQUIRE_FALSE(front.entries.empty());
  CHECK(static_cast<int>(front.entries.size()) <= cfg.pareto_top_k);

  bool tight = false, plain = false;
  for (const auto& e : front.entries) {
    if (e.loss <= 0.01) tight = true;
    if (print_canonical(e.expr, kXY) == "x1 - x2") plain = true;
  }
  CHECK(tight);
  CHECK(plain);

  for (std::size_t i = 1; i < front.entries.size(); ++i) {
    CHECK(front.entries[i].complexity > front.entries[i - 1].complexity);
    CHECK(front.entries[i].loss < front.entries[i - 1].loss);
  }
  for (const auto& e : front.entries) {
    CHECK(e.complexity <= cfg.max_nodes);
    CHECK(e.complexity == e.expr.node_count());
    CHECK(e.constants.size() == e.expr.slot_defaults().size());
  }

  const int knee = front.knee();
  for (std::size_t i = 0; i < front.entries.size(); ++i) {
    const double knee_score = front.entries[static_cast<std::size_t>(knee)].loss +
                              0.005 * front.entries[static_cast<std::size_t>(knee)].complexity;
    CHECK(knee_score <= front.entries[i].loss + 0.005 * front.entries[i].complexity + 1e-12);
  }
}

TEST_CASE("offline runs are deterministic across thread counts") {
  const Planted p = planted_difference(300, 7);
  SRConfig two = small_config(11);
  two.threads = 2;
  SRConfig four = small_config(11);
  four.threads = 4;
  const ParetoFront a = sr_fit(p.X, p.y, kXY, two);
  const ParetoFront b = sr_fit(p.X, p.y, kXY, four);
  CHECK(fronts_identical(a, b));
}

TEST_CASE("fit preconditions") {
  const Planted p = planted_difference(60, 15);
  std::vector<int> ones(p.y.size(), 1);
  CHECK_THROWS_AS(sr_fit(p.X, ones, kXY, small_config(1)), InputError);

  Eigen::MatrixXd tiny = p.X.topRows(8);
  std::vector<int> tiny_y(p.y.begin(), p.y.begin() + 8);
  CHECK_THROWS_AS(sr_fit(tiny, tiny_y, kXY, small_config(1)), InputError);

  CHECK_THROWS_AS(sr_fit(p.X, p.y, {"x1"}, small_config(1)), InputError);

  SRConfig bad = small_config(1);
  bad.llm_trigger_prob = 1.5;
  CHECK_THROWS_AS(sr_fit(p.X, p.y, kXY, bad), InputError);
  bad = small_config(1);
  bad.max_nodes = 0;
  CHECK_THROWS_AS(sr_fit(p.X, p.y, kXY, bad), InputError);
}

TEST_CASE("expert library keeps one active entry per provenance group") {
  auto rng = make_rng(9, 0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int per = 60;
  Eigen::MatrixXd X(3 * per, 2);
  std::vector<int> y(static_cast<std::size_t>(3 * per));
  std::vector<int> labels(static_cast<std::size_t>(3 * per));
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < per; ++i) {
      const int r = c * per + i;
      X(r, 0) = gauss(rng) + 3.0 * c;
      X(r, 1) = gauss(rng);
      const double z = c == 0   ? X(r, 0) - X(r, 1)
                       : c == 1 ? X(r, 1) - X(r, 0) + 3.0
                                : X(r, 0) * 0.5 - 3.0;
      y[static_cast<std::size_t>(r)] = z > 0.0 ? 1 : 0;
      labels[static_cast<std::size_t>(r)] = c;
    }
  }
  SRConfig cfg;
  cfg.islands = 4;
  cfg.generations = 10;
  cfg.population_per_island = 24;
  cfg.llm_trigger_prob = 0.0;
  cfg.seed = 21;

  const ExpertLibrary lib = build_expert_library(X, y, labels, kXY, cfg);
  CHECK(lib.active_indices().size() == 4);
  CHECK(lib.warnings.empty());
  const int gi = lib.active_indices().front();
  CHECK(lib.experts[static_cast<std::size_t>(gi)].provenance == "GLOBAL");
  bool some_group_full = false;
  for (const std::string& group : {std::string("GLOBAL"), std::string("cluster:0"),
                                   std::string("cluster:1"), std::string("cluster:2")}) {
    const std::vector<int> members = lib.entries_for(group);
    CHECK_FALSE(members.empty());
    CHECK(static_cast<int>(members.size()) <= cfg.pareto_top_k);
    if (static_cast<int>(members.size()) == cfg.pareto_top_k) some_group_full = true;
    int active = 0;
    for (int m : members) active += lib.experts[static_cast<std::size_t>(m)].active ? 1 : 0;
    CHECK(active == 1);
  }
  CHECK(some_group_full);

  // A single-class cluster is skipped with a warning; the rest survive.
  std::vector<int> y_skip = y;
  for (int i = 0; i < per; ++i) y_skip[static_cast<std::size_t>(2 * per + i)] = 1;
  const ExpertLibrary skipped = build_expert_library(X, y_skip, labels, kXY, cfg);
  CHECK(skipped.active_indices().size() == 3);
  REQUIRE(skipped.warnings.size() == 1);
  CHECK(skipped.warnings.front().find("cluster 2") != std::string::npos);
  CHECK(skipped.entries_for("cluster:2").empty());

  CHECK_THROWS_AS(build_expert_library(X, y, {0, 1}, kXY, cfg), InputError);
}

TEST_CASE("mock suggestion client replies are pure functions of the request") {
  MockSuggestionClient client(42);
  SuggestRequest req;
  req.features = kXY;
  req.best = {{"x1 - x2", 0.25}};
  const auto a = client.suggest(req);
  const auto b = client.suggest(req);
  REQUIRE(a.has_value());
  CHECK(*a == *b);

  MockSuggestionClient other(43);
  int differ = 0;
  for (int i = 0; i < 8; ++i) {
    req.best = {{"x1 - x2", 0.25 + i}};
    if (client.suggest(req) != other.suggest(req)) ++differ;
  }
  CHECK(differ > 0);
  CHECK(client.offline());
  CHECK_FALSE(client.suggest({}).has_value());
}

TEST_CASE("expression line extraction") {
  CHECK(extract_expr_line("thoughts\nEXPR: x1 + x2\n") == "x1 + x2");
  CHECK(extract_expr_line("  EXPR:   log(x1)  \r\n") == "log(x1)");
  CHECK(extract_expr_line("no expression here") == "");
  CHECK(extract_expr_line("EXPR: a\nEXPR: b\n") == "");
  CHECK(extract_expr_line("") == "");
}

TEST_CASE("endpoint parsing") {
  CHECK_FALSE(parse_endpoint("offline").has_value());
  CHECK_FALSE(parse_endpoint("").has_value());
  auto hp = parse_endpoint("127.0.0.1:8089");
  REQUIRE(hp.has_value());
  CHECK(hp->first == "127.0.0.1");
  CHECK(hp->second == 8089);
  hp = parse_endpoint("http://mock.local:9001");
  REQUIRE(hp.has_value());
  CHECK(hp->first == "mock.local");
  CHECK(hp->second == 9001);
  hp = parse_endpoint("bare-host");
  REQUIRE(hp.has_value());
  CHECK(hp->second == 80);
  CHECK_FALSE(parse_endpoint(":7000").has_value());
}

TEST_CASE("suggestions flow through the stats counters") {
  const Planted p = planted_difference(80, 17);
  SRConfig cfg;
  cfg.islands = 2;
  cfg.generations = 6;
  cfg.population_per_island = 20;
  cfg.llm_trigger_prob = 0.5;
  cfg.seed = 23;
  MockSuggestionClient client(99);
  SRStats stats;
  const ParetoFront front = sr_fit(p.X, p.y, kXY, cfg, &client, &stats);
  CHECK_FALSE(front.entries.empty());
  CHECK(stats.suggestions_attempted > 0);
  CHECK(stats.suggestions_accepted > 0);
  CHECK(stats.client_failures == 0);
  CHECK(stats.suggestions_accepted + stats.parse_failures + stats.client_failures ==
        stats.suggestions_attempted);
}
