#include "pasm/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <set>
#include <utility>

#include "pasm/errors.hpp"
#include "pasm/rng.hpp"

namespace pasm {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> row_vector(const Eigen::MatrixXd& X, int i) {
  std::vector<double> out(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) out[static_cast<std::size_t>(j)] = X(i, j);
  return out;
}

}  // namespace

MetricSummary summarize_scores(const std::vector<double>& probabilities,
                               const std::vector<int>& labels, double threshold) {
  if (probabilities.size() != labels.size() || labels.empty()) {
    throw InputError("scores and labels must align and be non-empty");
  }
  MetricSummary s;
  std::vector<int> predicted(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    predicted[i] = probabilities[i] > threshold ? 1 : 0;
  }
  s.counts = confusion(predicted, labels);
  s.mcc_value = mcc(s.counts);
  s.auc_value = roc_auc(probabilities, labels);
  s.accuracy_value = accuracy(s.counts);
  s.n = static_cast<int>(labels.size());
  return s;
}

std::vector<Prediction> predict_all(const MoEModel& model, const Eigen::MatrixXd& X) {
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const std::vector<double> x = row_vector(X, static_cast<int>(i));
    out.push_back(predict(model, x));
  }
  return out;
}

std::vector<double> aggregate_baseline(const ExpertLibrary& lib, const Eigen::MatrixXd& X,
                                       const std::string& mode) {
  const std::vector<int> global = lib.entries_for("GLOBAL");
  if (global.empty()) throw InputError("library has no GLOBAL entries");
  EvalGuards guards;

  std::vector<int> used;
  if (mode == "top1") {
    int pick = global.front();
    for (int idx : global) {
      if (lib.experts[static_cast<std::size_t>(idx)].active) pick = idx;
    }
    used.push_back(pick);
  } else if (mode == "top5_avg") {
    if (global.size() < 5) {
      throw InputError("top5_avg requires five stored global entries, found " +
                       std::to_string(global.size()));
    }
    used.assign(global.begin(), global.begin() + 5);
  } else {
    throw InputError("unknown aggregation mode: " + mode);
  }

  std::vector<double> probs(static_cast<std::size_t>(X.rows()), 0.0);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const std::vector<double> x = row_vector(X, static_cast<int>(i));
    double acc = 0.0;
    for (int idx : used) {
      const ExpertEntry& e = lib.experts[static_cast<std::size_t>(idx)];
      acc += sigmoid(eval_safe(e.expr, x, e.slot_defaults, guards));
    }
    probs[static_cast<std::size_t>(i)] = acc / static_cast<double>(used.size());
  }
  return probs;
}

std::vector<FairnessRow> fairness_audit(const std::vector<int>& correct, const Dataset& ds,
                                        const std::vector<FairnessAxis>& axes) {
  if (correct.size() != ds.size()) {
    throw InputError("correctness vector does not align with the dataset rows");
  }
  std::vector<FairnessRow> rows;
  int audited = 0;
  for (const FairnessAxis& axis : axes) {
    FairnessRow row;
    row.axis = axis.name;
    row.group0 = axis.group0_name;
    row.group1 = axis.group1_name;
    const int col = ds.feature_index(axis.column);
    if (col < 0) {
      row.skipped = true;
      row.note = "column " + axis.column + " not present";
      rows.push_back(std::move(row));
      continue;
    }
    long long c0 = 0, i0 = 0, c1 = 0, i1 = 0;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      const bool g1 = ds.rows[r][static_cast<std::size_t>(col)] > axis.cutoff;
      const bool ok = correct[r] != 0;
      if (g1) {
        (ok ? c1 : i1) += 1;
      } else {
        (ok ? c0 : i0) += 1;
      }
    }
    row.n0 = c0 + i0;
    row.n1 = c1 + i1;
    if (row.n0 == 0 || row.n1 == 0) {
      row.skipped = true;
      row.note = "a group is empty at cutoff " + std::to_string(axis.cutoff);
      rows.push_back(std::move(row));
      continue;
    }
    row.acc0 = static_cast<double>(c0) / static_cast<double>(row.n0);
    row.acc1 = static_cast<double>(c1) / static_cast<double>(row.n1);
    row.delta = row.acc0 - row.acc1;
    row.p_raw = fisher_exact_2x2(c0, i0, c1, i1);
    ++audited;
    rows.push_back(std::move(row));
  }
  for (FairnessRow& row : rows) {
    if (row.skipped) continue;
    row.p_bonferroni = std::min(1.0, row.p_raw * static_cast<double>(audited));
  }
  return rows;
}

SweepReport calibration_sweep(const std::function<double(int)>& run_mcc,
                              const std::vector<int>& shots_list) {
  if (shots_list.empty()) throw InputError("shots list is empty");
  SweepReport report;
  for (int shots : shots_list) {
    SweepRow row;
    row.shots = shots;
    try {
      row.mcc_value = run_mcc(shots);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  const SweepRow* first = nullptr;
  const SweepRow* last = nullptr;
  for (const SweepRow& row : report.rows) {
    if (row.failed) continue;
    if (first == nullptr) first = &row;
    last = &row;
  }
  report.monotone_overall = first != nullptr && last->mcc_value >= first->mcc_value;
  return report;
}

ExpertLibrary linear_expert_library(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                    const std::vector<int>& cluster_labels,
                                    const std::vector<std::string>& feature_names,
                                    std::uint64_t seed) {
  if (X.rows() == 0 || static_cast<Eigen::Index>(y.size()) != X.rows() ||
      cluster_labels.size() != y.size()) {
    throw InputError("rows, labels and cluster labels must align");
  }
  (void)seed;
  const int d = static_cast<int>(X.cols());

  // Ridge-damped Newton logistic fit over the given rows; returns weights
  // then intercept.
  auto fit_logistic = [&](const std::vector<int>& rows) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
    for (int it = 0; it < 60; ++it) {
      Eigen::VectorXd grad = 1e-6 * w;
      Eigen::MatrixXd hess = 1e-6 * Eigen::MatrixXd::Identity(d + 1, d + 1);
      for (int r : rows) {
        Eigen::VectorXd x(d + 1);
        x.head(d) = X.row(r).transpose();
        x(d) = 1.0;
        const double p = sigmoid(w.dot(x));
        grad += (p - y[static_cast<std::size_t>(r)]) * x / static_cast<double>(rows.size());
        hess += std::max(p * (1.0 - p), 1e-6) * x * x.transpose() / static_cast<double>(rows.size());
      }
      const Eigen::VectorXd step = hess.ldlt().solve(grad);
      w -= step;
      if (step.cwiseAbs().maxCoeff() < 1e-10) break;
    }
    return w;
  };

  // w.x + b as an expression; the node cap bounds how many terms fit, so
  // keep the largest-magnitude weights when d is wide.
  auto linear_expression = [&](const Eigen::VectorXd& w) {
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return std::abs(w(a)) > std::abs(w(b));
    });
    const int max_terms = std::min(d, (Expression::kMaxNodes - 2) / 4);
    order.resize(static_cast<std::size_t>(max_terms));
    std::sort(order.begin(), order.end());

    std::vector<ExprNode> nodes;
    for (int k = 0; k < static_cast<int>(order.size()); ++k) {
      nodes.push_back({Op::Add, -1, 0.0});
    }
    for (std::size_t k = 0; k < order.size(); ++k) {
      nodes.push_back({Op::Mul, -1, 0.0});
      nodes.push_back({Op::Var, order[k], 0.0});
      nodes.push_back({Op::Const, 0, w(order[k])});
    }
    nodes.push_back({Op::Const, 0, w(d)});
    return Expression(std::move(nodes));
  };

  std::set<int> ids(cluster_labels.begin(), cluster_labels.end());
  ExpertLibrary lib;
  lib.feature_names = feature_names;

  std::vector<int> all(static_cast<std::size_t>(X.rows()));
  std::iota(all.begin(), all.end(), 0);
  auto add_entry = [&](const std::vector<int>& rows, const std::string& provenance) {
    int ones = 0;
    for (int r : rows) ones += y[static_cast<std::size_t>(r)] == 1 ? 1 : 0;
    if (rows.size() < 10 || ones == 0 || ones == static_cast<int>(rows.size())) {
      lib.warnings.push_back("skipped " + provenance + ": too few rows or one class");
      return;
    }
    const Eigen::VectorXd w = fit_logistic(rows);
    ExpertEntry entry;
    entry.expr = linear_expression(w);
    entry.slot_defaults = entry.expr.slot_defaults();
    entry.provenance = provenance;
    entry.complexity = entry.expr.node_count();
    entry.active = true;
    double loss = 0.0;
    EvalGuards guards;
    for (int r : rows) {
      const std::vector<double> x = row_vector(X, r);
      const double z = eval_safe(entry.expr, x, entry.slot_defaults, guards);
      const double t = (y[static_cast<std::size_t>(r)] == 1 ? -1.0 : 1.0) * z;
      loss += t > 30.0 ? t : std::log1p(std::exp(std::min(t, 30.0)));
    }
    entry.train_loss = loss / static_cast<double>(rows.size());
    lib.experts.push_back(std::move(entry));
  };

  add_entry(all, "GLOBAL");
  for (int id : ids) {
    if (id < 0) continue;
    std::vector<int> rows;
    for (std::size_t r = 0; r < cluster_labels.size(); ++r) {
      if (cluster_labels[r] == id) rows.push_back(static_cast<int>(r));
    }
    add_entry(rows, "cluster:" + std::to_string(id));
  }
  if (lib.experts.empty()) throw InputError("no linear expert could be fitted");
  return lib;
}

std::vector<AblationRow> ablation_grid(const AblationInputs& in, const TrainConfig& cfg) {
  std::vector<AblationRow> rows;
  const auto test_labels = in.test_y;

  auto eval_probs = [&](const std::vector<double>& probs, const std::string& name) {
    rows.push_back({name, summarize_scores(probs, test_labels, cfg.decision_threshold)});
  };
  auto eval_model = [&](const MoEModel& model, const std::string& name) {
    std::vector<double> probs;
    probs.reserve(static_cast<std::size_t>(in.test_X.rows()));
    for (const Prediction& p : predict_all(model, in.test_X)) probs.push_back(p.p);
    eval_probs(probs, name);
  };
  auto train_variant = [&](MoEModel model) {
    return train_moe(std::move(model), in.calibration_X, in.calibration_y, cfg).model;
  };

  eval_probs(aggregate_baseline(in.library, in.test_X, "top1"), "Top-1");
  {
    // The stored front can fall short of five entries; average what exists
    // rather than dropping the row.
    std::vector<double> probs;
    try {
      probs = aggregate_baseline(in.library, in.test_X, "top5_avg");
    } catch (const InputError&) {
      const std::vector<int> global = in.library.entries_for("GLOBAL");
      probs.assign(static_cast<std::size_t>(in.test_X.rows()), 0.0);
      EvalGuards guards;
      for (Eigen::Index i = 0; i < in.test_X.rows(); ++i) {
        const std::vector<double> x = row_vector(in.test_X, static_cast<int>(i));
        double acc = 0.0;
        for (int idx : global) {
          const ExpertEntry& e = in.library.experts[static_cast<std::size_t>(idx)];
          acc += sigmoid(eval_safe(e.expr, x, e.slot_defaults, guards));
        }
        probs[static_cast<std::size_t>(i)] = acc / static_cast<double>(global.size());
      }
    }
    eval_probs(probs, "Top-5 Average");
  }
  {
    ExpertLibrary linear = linear_expert_library(in.source_X, in.source_y, in.cluster_labels,
                                                 in.feature_names, cfg.seed);
    MoEModel model = init_moe(linear, cfg.seed);
    model.coeff_mode = CoeffMode::Fixed;
    eval_model(train_variant(std::move(model)), "LR + Router");
  }
  {
    MoEModel model = init_moe(in.library, cfg.seed);
    model.coeff_mode = CoeffMode::Fixed;
    eval_model(train_variant(std::move(model)), "Fixed Coefficients");
  }
  {
    MoEModel model = init_moe(in.library, cfg.seed);
    model.coeff_mode = CoeffMode::Static;
    eval_model(train_variant(std::move(model)), "Learnable (Static)");
  }
  {
    MoEModel model = init_moe(in.library, cfg.seed);
    model.coeff_mode = CoeffMode::Adaptive;
    eval_model(train_variant(std::move(model)), "Full");
  }
  return rows;
}

nlohmann::json metrics_to_json(const MetricSummary& m) {
  return {
      {"tp", m.counts.tp},     {"tn", m.counts.tn},
      {"fp", m.counts.fp},     {"fn", m.counts.fn},
      {"mcc", m.mcc_value},    {"auc", m.auc_value},
      {"accuracy", m.accuracy_value}, {"n", m.n},
  };
}

nlohmann::json fairness_to_json(const std::vector<FairnessRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const FairnessRow& r : rows) {
    out.push_back({
        {"axis", r.axis},
        {"group0", r.group0},
        {"group1", r.group1},
        {"acc0", r.acc0},
        {"acc1", r.acc1},
        {"delta", r.delta},
        {"p_raw", r.p_raw},
        {"p_bonferroni", r.p_bonferroni},
        {"n0", r.n0},
        {"n1", r.n1},
        {"skipped", r.skipped},
        {"note", r.note},
    });
  }
  return out;
}

nlohmann::json sweep_to_json(const SweepReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const SweepRow& row : r.rows) {
    rows.push_back({{"shots", row.shots},
                    {"mcc", row.mcc_value},
                    {"failed", row.failed},
                    {"error", row.error}});
  }
  return {{"rows", rows}, {"monotone_overall", r.monotone_overall}};
}

nlohmann::json ablations_to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    out.push_back({{"name", r.name}, {"metrics", metrics_to_json(r.metrics)}});
  }
  return out;
}

}  // namespace pasm
