#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>
#include <Eigen/Dense>

#include "pasm/errors.hpp"
#include "pasm/eval_harness.hpp"
#include "pasm/rng.hpp"

using namespace pasm;

namespace {

ExpertEntry entry_for(const std::string& text, const std::vector<std::string>& names,
                      const std::string& provenance, bool active) {
  ExpertEntry e;
  e.expr = parse(text, names);
  e.slot_defaults = e.expr.slot_defaults();
  e.provenance = provenance;
  e.complexity = e.expr.node_count();
  e.active = active;
  return e;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("summarize_scores reproduces hand counts") {
  const std::vector<double> probs = {0.9, 0.2, 0.7, 0.4};
  const std::vector<int> labels = {1, 0, 1, 1};
  const MetricSummary s = summarize_scores(probs, labels, 0.5);
  CHECK(s.counts.tp == 2);
  CHECK(s.counts.tn == 1);
  CHECK(s.counts.fn == 1);
  CHECK(s.counts.fp == 0);
  CHECK(s.accuracy_value == doctest::Approx(0.75));
  CHECK(s.mcc_value == doctest::Approx(0.5773502691896258).epsilon(1e-12));
  CHECK(s.auc_value == doctest::Approx(1.0));
  CHECK(s.n == 4);

  // The threshold is strict: a probability equal to it predicts negative.
  const MetricSummary at = summarize_scores({0.5, 0.5}, {1, 0}, 0.5);
  CHECK(at.counts.fn == 1);
  CHECK(at.counts.tn == 1);
  CHECK(at.auc_value == doctest::Approx(0.5));

  CHECK_THROWS_AS(summarize_scores({0.5}, {1, 0}, 0.5), InputError);
  CHECK_THROWS_AS(summarize_scores({}, {}, 0.5), InputError);
}

TEST_CASE("aggregate_baseline modes") {
  ExpertLibrary lib;
  lib.feature_names = {"x1"};
  lib.experts.push_back(entry_for("0.0 - x1", {"x1"}, "GLOBAL", false));
  lib.experts.push_back(entry_for("x1", {"x1"}, "GLOBAL", true));

  Eigen::MatrixXd X(3, 1);
  X << 0.0, 2.0, -1.5;

  SUBCASE("top1 follows the active global entry") {
    const std::vector<double> probs = aggregate_baseline(lib, X, "top1");
    REQUIRE(probs.size() == 3);
    CHECK(probs[0] == doctest::Approx(0.5));
    CHECK(probs[1] == doctest::Approx(sigmoid(2.0)).epsilon(1e-15));
    CHECK(probs[2] == doctest::Approx(sigmoid(-1.5)).epsilon(1e-15));
  }

  SUBCASE("top5_avg needs five stored globals") {
    try {
      aggregate_baseline(lib, X, "top5_avg");
      FAIL("expected InputError");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find("top5_avg requires five") != std::string::npos);
    }
    for (int k = 0; k < 3; ++k) lib.experts.push_back(entry_for("x1", {"x1"}, "GLOBAL", false));
    REQUIRE(lib.entries_for("GLOBAL").size() == 5);
    const std::vector<double> avg = aggregate_baseline(lib, X, "top5_avg");
    // Four of the five stored entries are copies of x1, one is its negation.
    for (std::size_t i = 0; i < 3; ++i) {
      const double x = X(static_cast<Eigen::Index>(i), 0);
      const double expect = (4.0 * sigmoid(x) + sigmoid(-x)) / 5.0;
      CHECK(avg[i] == doctest::Approx(expect).epsilon(1e-14));
      CHECK(avg[i] >= 0.0);
      CHECK(avg[i] <= 1.0);
    }
  }

  SUBCASE("bad modes and missing globals") {
    CHECK_THROWS_AS(aggregate_baseline(lib, X, "median"), InputError);
    ExpertLibrary none;
    none.feature_names = {"x1"};
    none.experts.push_back(entry_for("x1", {"x1"}, "cluster:0", true));
    CHECK_THROWS_AS(aggregate_baseline(none, X, "top1"), InputError);
  }
}

TEST_CASE("predict_all matches row-wise predict") {
  ExpertLibrary lib;
  lib.feature_names = {"x1", "x2"};
  lib.experts.push_back(entry_for("x1 - x2", {"x1", "x2"}, "GLOBAL", true));
  const MoEModel model = init_moe(lib, 3);
  Eigen::MatrixXd X(4, 2);
  X << 1.0, 0.2, -0.4, 0.9, 2.0, 2.0, 0.0, -3.0;
  const std::vector<Prediction> all = predict_all(model, X);
  REQUIRE(all.size() == 4);
  for (int i = 0; i < 4; ++i) {
    const std::vector<double> x = {X(i, 0), X(i, 1)};
    CHECK(all[static_cast<std::size_t>(i)].p == predict(model, x).p);
  }
}

TEST_CASE("fairness audit on a hand table") {
  Dataset ds;
  ds.feature_names = {"pct_minority", "income"};
  for (int i = 0; i < 10; ++i) ds.rows.push_back({0.2, 1.0});
  for (int i = 0; i < 10; ++i) ds.rows.push_back({0.9, 1.0});
  ds.labels.assign(20, 1);

  // group0 (low): 8 correct of 10; group1 (high): 3 correct of 10.
  std::vector<int> correct(20, 0);
  for (int i = 0; i < 8; ++i) correct[static_cast<std::size_t>(i)] = 1;
  for (int i = 10; i < 13; ++i) correct[static_cast<std::size_t>(i)] = 1;

  FairnessAxis axis;
  axis.name = "minority_share";
  axis.column = "pct_minority";
  axis.cutoff = 0.5;
  axis.group0_name = "low";
  axis.group1_name = "high";

  SUBCASE("single audited axis keeps the raw p") {
    const std::vector<FairnessRow> rows = fairness_audit(correct, ds, {axis});
    REQUIRE(rows.size() == 1);
    const FairnessRow& r = rows[0];
    CHECK_FALSE(r.skipped);
    CHECK(r.n0 == 10);
    CHECK(r.n1 == 10);
    CHECK(r.acc0 == doctest::Approx(0.8));
    CHECK(r.acc1 == doctest::Approx(0.3));
    CHECK(r.delta == doctest::Approx(0.5));
    CHECK(r.p_raw == doctest::Approx(0.069779).epsilon(1e-3));
    CHECK(r.p_bonferroni == doctest::Approx(r.p_raw));
  }

  SUBCASE("bonferroni counts only audited axes") {
    FairnessAxis missing = axis;
    missing.name = "absent";
    missing.column = "zipcode";
    FairnessAxis empty_group = axis;
    empty_group.name = "degenerate";
    empty_group.cutoff = 2.0;
    FairnessAxis second = axis;
    second.name = "income_axis";
    second.column = "income";
    second.cutoff = 0.5;  // every row has income 1.0 > 0.5: one group empty
    FairnessAxis third = axis;
    third.name = "minority_again";

    const std::vector<FairnessRow> rows =
        fairness_audit(correct, ds, {axis, missing, empty_group, second, third});
    REQUIRE(rows.size() == 5);
    CHECK_FALSE(rows[0].skipped);
    CHECK(rows[1].skipped);
    CHECK(rows[1].note.find("not present") != std::string::npos);
    CHECK(rows[2].skipped);
    CHECK(rows[2].note.find("empty") != std::string::npos);
    CHECK(rows[3].skipped);
    CHECK_FALSE(rows[4].skipped);
    // Two axes survived, so both raw p values double.
    CHECK(rows[0].p_bonferroni == doctest::Approx(std::min(1.0, 2.0 * rows[0].p_raw)));
    CHECK(rows[4].p_bonferroni == doctest::Approx(std::min(1.0, 2.0 * rows[4].p_raw)));
  }

  SUBCASE("alignment is enforced") {
    const std::vector<int> short_vec(5, 1);
    CHECK_THROWS_AS(fairness_audit(short_vec, ds, {axis}), InputError);
  }
}

TEST_CASE("calibration sweep records failures and the overall trend") {
  auto runner = [](int shots) -> double {
    if (shots == 50) throw NumericError("synthetic blow-up at 50 shots");
    if (shots == 10) return 0.2;
    return 0.6;
  };
  const SweepReport report = calibration_sweep(runner, {10, 50, 200});
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].mcc_value == doctest::Approx(0.2));
  CHECK(report.rows[1].failed);
  CHECK(report.rows[1].error.find("blow-up") != std::string::npos);
  CHECK_FALSE(report.rows[2].failed);
  CHECK(report.monotone_overall);

  const SweepReport down = calibration_sweep(
      [](int shots) { return shots == 10 ? 0.8 : 0.3; }, {10, 200});
  CHECK_FALSE(down.monotone_overall);

  const SweepReport all_fail = calibration_sweep(
      [](int) -> double { throw NumericError("always"); }, {10, 200});
  CHECK(all_fail.rows[0].failed);
  CHECK(all_fail.rows[1].failed);
  CHECK_FALSE(all_fail.monotone_overall);

  CHECK_THROWS_AS(calibration_sweep(runner, {}), InputError);

  const nlohmann::json j = sweep_to_json(report);
  CHECK(j["rows"].size() == 3);
  CHECK(j["monotone_overall"].get<bool>());
}

TEST_CASE("linear expert library recovers a sign flip across clusters") {
  auto rng = make_rng(60, 0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int per = 80;
  Eigen::MatrixXd X(2 * per + 5, 1);
  std::vector<int> y, labels;
  for (int i = 0; i < per; ++i) {
    const double x = gauss(rng);
    X(i, 0) = x;
    y.push_back(x + 0.3 * gauss(rng) > 0.0 ? 1 : 0);
    labels.push_back(0);
  }
  for (int i = 0; i < per; ++i) {
    const double x = gauss(rng);
    X(per + i, 0) = x;
    y.push_back(x + 0.3 * gauss(rng) < 0.0 ? 1 : 0);
    labels.push_back(1);
  }
  // A tiny third cluster and a few noise rows must be skipped quietly.
  for (int i = 0; i < 5; ++i) {
    X(2 * per + i, 0) = gauss(rng);
    y.push_back(i % 2);
    labels.push_back(i < 3 ? 2 : -1);
  }

  const ExpertLibrary lib = linear_expert_library(X, y, labels, {"x1"}, 5);
  REQUIRE(lib.entries_for("GLOBAL").size() == 1);
  REQUIRE(lib.entries_for("cluster:0").size() == 1);
  REQUIRE(lib.entries_for("cluster:1").size() == 1);
  CHECK(lib.entries_for("cluster:2").empty());
  CHECK(lib.entries_for("cluster:-1").empty());
  REQUIRE_FALSE(lib.warnings.empty());
  bool noted = false;
  for (const std::string& w : lib.warnings) noted = noted || w.find("cluster:2") != std::string::npos;
  CHECK(noted);

  EvalGuards guards;
  auto logit_at = [&](const std::string& prov, double x) {
    const ExpertEntry& e = lib.experts[static_cast<std::size_t>(lib.entries_for(prov)[0])];
    const std::vector<double> row = {x};
    return eval_safe(e.expr, row, e.slot_defaults, guards);
  };
  CHECK(logit_at("cluster:0", 1.0) > 0.5);
  CHECK(logit_at("cluster:1", 1.0) < -0.5);
  CHECK(logit_at("cluster:0", -1.0) < -0.5);
  CHECK(logit_at("cluster:1", -1.0) > 0.5);

  // Each cluster expert classifies its own rows well.
  for (int c = 0; c < 2; ++c) {
    int hit = 0, total = 0;
    for (int i = 0; i < 2 * per; ++i) {
      if (labels[static_cast<std::size_t>(i)] != c) continue;
      const int pred = logit_at("cluster:" + std::to_string(c), X(i, 0)) > 0.0 ? 1 : 0;
      hit += pred == y[static_cast<std::size_t>(i)] ? 1 : 0;
      ++total;
    }
    CHECK(static_cast<double>(hit) / total >= 0.9);
  }

  std::vector<int> short_labels(10, 0);
  CHECK_THROWS_AS(linear_expert_library(X, y, short_labels, {"x1"}, 5), InputError);
}

TEST_CASE("ablation grid emits the fixed variant order and routed models win") {
  auto rng = make_rng(70, 0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  auto draw = [&](int n, Eigen::MatrixXd& X, std::vector<int>& y, std::vector<int>* labels) {
    X.resize(n, 3);
    y.clear();
    for (int i = 0; i < n; ++i) {
      const int c = i % 2;
      double x = 0.0;
      do {
        x = gauss(rng);
      } while (std::abs(x) < 0.25);
      X(i, 0) = x;
      X(i, 1) = gauss(rng);
      X(i, 2) = c == 0 ? -5.0 : 5.0;
      y.push_back(c == 0 ? (x > 0.0 ? 1 : 0) : (x < 0.0 ? 1 : 0));
      if (labels != nullptr) labels->push_back(c);
    }
  };

  AblationInputs in;
  in.feature_names = {"x1", "x2", "regime"};
  draw(200, in.source_X, in.source_y, &in.cluster_labels);
  draw(160, in.calibration_X, in.calibration_y, nullptr);
  draw(200, in.test_X, in.test_y, nullptr);

  ExpertLibrary lib;
  lib.feature_names = in.feature_names;
  lib.experts.push_back(entry_for("x1", in.feature_names, "GLOBAL", true));
  lib.experts.push_back(entry_for("x1", in.feature_names, "cluster:0", true));
  lib.experts.push_back(entry_for("0.0 - x1", in.feature_names, "cluster:1", true));
  in.library = lib;

  TrainConfig cfg;
  cfg.seed = 17;
  cfg.epochs = 60;

  const std::vector<AblationRow> rows = ablation_grid(in, cfg);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].name == "Top-1");
  CHECK(rows[1].name == "Top-5 Average");
  CHECK(rows[2].name == "LR + Router");
  CHECK(rows[3].name == "Fixed Coefficients");
  CHECK(rows[4].name == "Learnable (Static)");
  CHECK(rows[5].name == "Full");

  for (const AblationRow& r : rows) {
    CHECK(r.metrics.n == 200);
    CHECK(std::isfinite(r.metrics.mcc_value));
    CHECK(r.metrics.mcc_value >= -1.0);
    CHECK(r.metrics.mcc_value <= 1.0);
  }

  // The single global expert cannot serve the flipped regime.
  const double top1 = rows[0].metrics.mcc_value;
  CHECK(top1 < 0.5);
  // With one stored global, the Top-5 fallback averages what exists.
  CHECK(rows[1].metrics.mcc_value == doctest::Approx(top1));
  CHECK(rows[2].metrics.mcc_value > top1 + 0.15);
  CHECK(rows[5].metrics.mcc_value > top1 + 0.15);
  CHECK(rows[5].metrics.mcc_value > 0.8);

  const nlohmann::json j = ablations_to_json(rows);
  REQUIRE(j.size() == 6);
  CHECK(j[0]["name"] == "Top-1");
  CHECK(j[5]["metrics"].contains("mcc"));
}

TEST_CASE("metric and fairness json shapes") {
  const MetricSummary s = summarize_scores({0.9, 0.1}, {1, 0}, 0.5);
  const nlohmann::json j = metrics_to_json(s);
  for (const char* key : {"tp", "tn", "fp", "fn", "mcc", "auc", "accuracy", "n"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["n"] == 2);

  Dataset ds;
  ds.feature_names = {"a"};
  for (int i = 0; i < 12; ++i) ds.rows.push_back({i < 6 ? 0.0 : 1.0});
  ds.labels.assign(12, 1);
  std::vector<int> correct(12, 1);
  correct[0] = 0;
  FairnessAxis axis;
  axis.name = "a_axis";
  axis.column = "a";
  const nlohmann::json rows = fairness_to_json(fairness_audit(correct, ds, {axis}));
  REQUIRE(rows.size() == 1);
  CHECK(rows[0]["axis"] == "a_axis");
  CHECK(rows[0].contains("p_bonferroni"));
  CHECK(rows[0].contains("skipped"));
}
