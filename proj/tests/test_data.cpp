#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <doctest.h>

#include "pasm/dataset.hpp"
#include "pasm/expr.hpp"

using namespace pasm;

namespace {

std::string write_temp_csv(const std::string& name, const std::string& body) {
  const std::string path =
      (std::filesystem::temp_directory_path() / ("pasm_test_" + name)).string();
  std::ofstream out(path, std::ios::binary);
  out << body;
  out.close();
  return path;
}

CsvSchema survey_schema() {
  CsvSchema s;
  s.label_column = "Evac";
  s.tag_column = "State";
  return s;
}

Dataset two_state_dataset(int n_source, int n_target) {
  Dataset ds;
  ds.feature_names = {"x0", "x1"};
  for (int i = 0; i < n_source + n_target; ++i) {
    ds.rows.push_back({static_cast<double>(i), static_cast<double>(i % 7)});
    ds.labels.push_back(i % 2);
    ds.group_tags.push_back(i < n_source ? "TX" : "FL");
  }
  return ds;
}

SyntheticSpec mirrored_spec() {
  SyntheticSpec spec;
  spec.feature_names = {"x1", "x2"};
  spec.n_per_regime = {500, 500};
  spec.regimes.push_back({"x1 - x2", {0.0, 0.0}, {1.0, 1.0}});
  spec.regimes.push_back({"x2 - x1", {0.0, 0.0}, {1.0, 1.0}});
  spec.seed = 5;
  return spec;
}

}  // namespace

TEST_CASE("load_csv echoes a small survey table") {
  const std::string path = write_temp_csv("basic.csv",
                                          "Age,EvacPctZip,Evac,State\n"
                                          "34,0.25,1,TX\n"
                                          "51,0.75,0,TX\n"
                                          "29,0.10,1,FL\n");
  const Dataset ds = load_csv(path, survey_schema());
  CHECK(ds.dim() == 2);
  CHECK(ds.size() == 3);
  CHECK(ds.feature_names[0] == "Age");
  CHECK(ds.feature_names[1] == "EvacPctZip");
  CHECK(ds.rows[0][0] == doctest::Approx(34.0));
  CHECK(ds.rows[2][1] == doctest::Approx(0.10));
  CHECK(ds.labels == std::vector<int>{1, 0, 1});
  CHECK(ds.group_tags[2] == "FL");
  CHECK(ds.dropped_rows == 0);
}

TEST_CASE("rows with a missing label are dropped and counted") {
  const std::string path = write_temp_csv("missing_label.csv",
                                          "Age,EvacPctZip,Evac,State\n"
                                          "34,0.25,1,TX\n"
                                          "51,0.75,,TX\n"
                                          "29,0.10,0,FL\n");
  const Dataset ds = load_csv(path, survey_schema());
  CHECK(ds.size() == 2);
  CHECK(ds.dropped_rows == 1);
}

TEST_CASE("non-numeric cell without a codebook names the column") {
  const std::string path = write_temp_csv("categorical.csv",
                                          "Age,EvacPctZip,Evac,State\n"
                                          "old,0.25,1,TX\n");
  try {
    load_csv(path, survey_schema());
    FAIL("expected a parse error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("Age") != std::string::npos);
  }

  CsvSchema coded = survey_schema();
  coded.codebook["Age"] = {{"old", 70.0}, {"young", 25.0}};
  const Dataset ds = load_csv(path, coded);
  CHECK(ds.rows[0][0] == doctest::Approx(70.0));
}

TEST_CASE("missing schema columns and files are input errors") {
  const std::string path = write_temp_csv("no_label.csv", "Age,State\n34,TX\n");
  CHECK_THROWS_AS(load_csv(path, survey_schema()), InputError);
  CHECK_THROWS_AS(load_csv("/nonexistent/پpath.csv", survey_schema()), InputError);
}

TEST_CASE("missing feature cells become NaN before imputation") {
  const std::string path = write_temp_csv("missing_feature.csv",
                                          "Age,EvacPctZip,Evac,State\n"
                                          ",0.25,1,TX\n"
                                          "60,0.75,0,TX\n");
  const Dataset ds = load_csv(path, survey_schema());
  CHECK(std::isnan(ds.rows[0][0]));
  CHECK_THROWS_AS(ds.validate(true), InputError);
  CHECK_NOTHROW(ds.validate(false));
}

TEST_CASE("make_splits honors the 85/15 partition") {
  const Dataset ds = two_state_dataset(200, 120);
  SplitSpec spec;
  spec.source_tags = {"TX"};
  spec.target_tag = "FL";
  spec.expert_train_fraction = 0.85;
  spec.calibration_shots = 30;
  spec.seed = 9;
  const Splits sp = make_splits(ds, spec);
  CHECK(sp.expert_train.size() == 170);
  CHECK(sp.source_val.size() == 30);
  CHECK(sp.calibration.size() == 30);
  CHECK(sp.target_test.size() == 90);
}

TEST_CASE("zero calibration shots leave the whole target as test") {
  const Dataset ds = two_state_dataset(40, 25);
  SplitSpec spec;
  spec.source_tags = {"TX"};
  spec.target_tag = "FL";
  spec.calibration_shots = 0;
  spec.seed = 3;
  const Splits sp = make_splits(ds, spec);
  CHECK(sp.calibration.size() == 0);
  CHECK(sp.target_test.size() == 25);
}

TEST_CASE("splits partition the rows and are seed-deterministic") {
  const Dataset ds = two_state_dataset(97, 41);
  SplitSpec spec;
  spec.source_tags = {"TX"};
  spec.target_tag = "FL";
  spec.calibration_shots = 11;
  spec.seed = 77;
  const Splits a = make_splits(ds, spec);
  const Splits b = make_splits(ds, spec);
  CHECK(a.expert_train_idx == b.expert_train_idx);
  CHECK(a.source_val_idx == b.source_val_idx);
  CHECK(a.calibration_idx == b.calibration_idx);
  CHECK(a.target_test_idx == b.target_test_idx);

  std::set<int> seen;
  std::size_t total = 0;
  for (const auto* idx :
       {&a.expert_train_idx, &a.source_val_idx, &a.calibration_idx, &a.target_test_idx}) {
    seen.insert(idx->begin(), idx->end());
    total += idx->size();
  }
  CHECK(total == ds.size());
  CHECK(seen.size() == ds.size());

  spec.seed = 78;
  const Splits c = make_splits(ds, spec);
  CHECK(c.calibration_idx != a.calibration_idx);
}

TEST_CASE("split validation rejects bad specs") {
  const Dataset ds = two_state_dataset(30, 20);
  SplitSpec spec;
  spec.source_tags = {"TX"};
  spec.target_tag = "TX";
  CHECK_THROWS_AS(spec.validate(ds), InputError);

  spec.target_tag = "FL";
  spec.calibration_shots = 21;
  CHECK_THROWS_AS(spec.validate(ds), InputError);

  spec.source_tags = {"ZZ"};
  spec.calibration_shots = 5;
  CHECK_THROWS_AS(make_splits(ds, spec), InputError);
}

TEST_CASE("imputation means come from the expert-train split only") {
  Dataset ds = two_state_dataset(40, 20);
  ds.rows[3][1] = std::nan("");
  ds.rows[45][1] = std::nan("");
  SplitSpec spec;
  spec.source_tags = {"TX"};
  spec.target_tag = "FL";
  spec.calibration_shots = 5;
  spec.seed = 2;
  const Splits sp = make_splits(ds, spec);
  REQUIRE(sp.expert_train.imputation_means.size() == 2);
  const double mean = sp.expert_train.imputation_means[1];
  for (const Dataset* part :
       {&sp.expert_train, &sp.source_val, &sp.calibration, &sp.target_test}) {
    CHECK_NOTHROW(part->validate(true));
  }
  double manual = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < sp.expert_train.size(); ++i) {
    const int orig = sp.expert_train_idx[i];
    if (orig == 3) continue;
    manual += static_cast<double>(orig % 7);
    ++n;
  }
  CHECK(mean == doctest::Approx(manual / n));
}

TEST_CASE("synthetic labels obey the planted formulas when noiseless") {
  const SyntheticSpec spec = mirrored_spec();
  const Dataset ds = generate_synthetic(spec);
  CHECK(ds.size() == 1000);
  CHECK(std::count(ds.group_tags.begin(), ds.group_tags.end(), "regime0") == 500);
  CHECK(std::count(ds.group_tags.begin(), ds.group_tags.end(), "regime1") == 500);

  EvalGuards g;
  const Expression f0 = parse("x1 - x2", spec.feature_names);
  const Expression f1 = parse("x2 - x1", spec.feature_names);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Expression& f = ds.group_tags[i] == "regime0" ? f0 : f1;
    const int want = eval_safe(f, ds.rows[i], {}, g) > 0.0 ? 1 : 0;
    CHECK(ds.labels[i] == want);
  }

  const Dataset again = generate_synthetic(spec);
  CHECK(again.rows == ds.rows);
  CHECK(again.labels == ds.labels);
}

TEST_CASE("noise flips the documented fraction of labels") {
  SyntheticSpec spec = mirrored_spec();
  spec.n_per_regime = {5000, 5000};
  spec.noise_rate = 0.1;
  spec.seed = 11;
  const Dataset ds = generate_synthetic(spec);
  EvalGuards g;
  const Expression f0 = parse("x1 - x2", spec.feature_names);
  const Expression f1 = parse("x2 - x1", spec.feature_names);
  int flips = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Expression& f = ds.group_tags[i] == "regime0" ? f0 : f1;
    const int clean = eval_safe(f, ds.rows[i], {}, g) > 0.0 ? 1 : 0;
    flips += ds.labels[i] != clean ? 1 : 0;
  }
  const double fraction = static_cast<double>(flips) / static_cast<double>(ds.size());
  CHECK(fraction == doctest::Approx(0.1).epsilon(0.1));
  CHECK(std::abs(fraction - 0.1) <= 0.01);
}

TEST_CASE("degenerate regimes and bad conflict pairs are rejected") {
  SyntheticSpec spec = mirrored_spec();
  spec.regimes[0].formula = "x1 + 100.0";
  CHECK_THROWS_AS(generate_synthetic(spec), InputError);

  spec = mirrored_spec();
  spec.conflict_pairs.push_back({"x1", 0, 1});
  CHECK_NOTHROW(spec.validate());
  CHECK_NOTHROW(generate_synthetic(spec));

  spec.conflict_pairs.push_back({"x2", 0, 0});
  CHECK_THROWS_AS(spec.validate(), InputError);

  spec = mirrored_spec();
  spec.regimes[1].formula = "x1 - x2 + 0.1";
  spec.conflict_pairs = {{"x1", 0, 1}};
  CHECK_THROWS_AS(generate_synthetic(spec), InputError);
}

TEST_CASE("to_matrix mirrors rows and select keeps alignment") {
  const Dataset ds = two_state_dataset(6, 3);
  const Eigen::MatrixXd X = to_matrix(ds);
  CHECK(X.rows() == 9);
  CHECK(X.cols() == 2);
  CHECK(X(4, 0) == doctest::Approx(4.0));
  const Dataset sel = ds.select({2, 5, 7});
  CHECK(sel.size() == 3);
  CHECK(sel.rows[1][0] == doctest::Approx(5.0));
  CHECK(sel.labels[2] == 1);
  CHECK(sel.group_tags[2] == "FL");
  CHECK(ds.feature_index("x1") == 1);
  CHECK(ds.feature_index("zz") == -1);
}
