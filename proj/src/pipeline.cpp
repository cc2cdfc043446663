#include "pasm/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <utility>

#include "pasm/errors.hpp"
#include "pasm/library.hpp"
#include "pasm/moe.hpp"
#include "pasm/rng.hpp"
#include "pasm/suggest.hpp"

namespace pasm {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

void ensure_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw InputError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw InputError("failed writing " + path);
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw InputError(what + " must be an array of rows");
  const Eigen::Index n = static_cast<Eigen::Index>(j.size());
  if (n == 0) return Eigen::MatrixXd(0, 0);
  if (!j[0].is_array()) throw InputError(what + " rows must be arrays");
  const Eigen::Index d = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != d) {
      throw InputError(what + " rows are ragged");
    }
    for (Eigen::Index c = 0; c < d; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

nlohmann::json cluster_params_to_json(const ClusterParams& p) {
  return {{"embed_dim", p.embed_dim},
          {"min_cluster_size", p.min_cluster_size},
          {"min_samples", p.min_samples},
          {"seed", p.seed},
          {"embedding_csv", p.embedding_csv}};
}

ClusterParams cluster_params_from_json(const nlohmann::json& j, std::uint64_t default_seed) {
  ClusterParams p;
  p.embed_dim = j.value("embed_dim", p.embed_dim);
  p.min_cluster_size = j.value("min_cluster_size", p.min_cluster_size);
  p.min_samples = j.value("min_samples", p.min_samples);
  p.seed = j.value("seed", default_seed);
  p.embedding_csv = j.value("embedding_csv", p.embedding_csv);
  return p;
}

nlohmann::json cluster_model_to_json(const ClusterModel& m) {
  return {{"params", cluster_params_to_json(m.params)},
          {"kept_features", m.kept_features},
          {"means", m.means},
          {"stds", m.stds},
          {"basis", matrix_to_json(m.basis)},
          {"embedding", matrix_to_json(m.embedding)},
          {"assignments", m.assignments},
          {"k", m.k},
          {"noise_fraction", m.noise_fraction},
          {"fallback_single_cluster", m.fallback_single_cluster},
          {"warnings", m.warnings}};
}

ClusterModel cluster_model_from_json(const nlohmann::json& j) {
  ClusterModel m;
  m.params = cluster_params_from_json(j.at("params"), 0);
  m.kept_features = j.at("kept_features").get<std::vector<int>>();
  m.means = j.at("means").get<std::vector<double>>();
  m.stds = j.at("stds").get<std::vector<double>>();
  m.basis = matrix_from_json(j.at("basis"), "basis");
  m.embedding = matrix_from_json(j.at("embedding"), "embedding");
  m.assignments = j.at("assignments").get<std::vector<int>>();
  m.k = j.at("k").get<int>();
  m.noise_fraction = j.at("noise_fraction").get<double>();
  m.fallback_single_cluster = j.at("fallback_single_cluster").get<bool>();
  m.warnings = j.value("warnings", std::vector<std::string>{});
  if (m.means.size() != m.stds.size() ||
      static_cast<Eigen::Index>(m.means.size()) != m.basis.rows()) {
    throw InputError("cluster model fields disagree on the kept feature count");
  }
  if (m.embedding.rows() != static_cast<Eigen::Index>(m.assignments.size())) {
    throw InputError("cluster model embedding and assignments disagree");
  }
  return m;
}

nlohmann::json stability_to_json(const StabilityReport& r) {
  return {{"ari", r.ari},
          {"nmi", r.nmi},
          {"co_jaccard", r.co_jaccard},
          {"cluster_count_mode", r.cluster_count_mode},
          {"noise_fraction", r.noise_fraction},
          {"runs", r.runs}};
}

struct Prepared {
  Dataset ds;
  Splits splits;
};

Prepared prepare(const RunConfig& cfg) {
  Prepared p;
  p.ds = load_input_dataset(cfg);
  cfg.split.validate(p.ds);
  p.splits = make_splits(p.ds, cfg.split);
  return p;
}

void write_splits_artifact(const RunConfig& cfg, const Splits& sp) {
  nlohmann::json j = {
      {"config", cfg.to_json()},
      {"expert_train", sp.expert_train_idx},
      {"source_val", sp.source_val_idx},
      {"calibration", sp.calibration_idx},
      {"target_test", sp.target_test_idx},
      {"counts",
       {{"expert_train", sp.expert_train_idx.size()},
        {"source_val", sp.source_val_idx.size()},
        {"calibration", sp.calibration_idx.size()},
        {"target_test", sp.target_test_idx.size()}}},
  };
  write_json_artifact(join_path(cfg.out_dir, "splits.json"), j);
}

std::vector<int> load_cluster_assignments(const RunConfig& cfg, std::size_t expect_rows,
                                          bool required) {
  const std::string path = join_path(cfg.out_dir, "cluster.json");
  if (!std::filesystem::exists(path)) {
    if (required) throw InputError("missing cluster artifact " + path + "; run cluster first");
    return std::vector<int>(expect_rows, kNoiseLabel);
  }
  const ClusterModel model = cluster_model_from_json(read_json_artifact(path).at("model"));
  if (model.assignments.size() != expect_rows) {
    throw InputError("cluster assignments cover " + std::to_string(model.assignments.size()) +
                     " rows but the expert-train split has " + std::to_string(expect_rows));
  }
  return model.assignments;
}

ExpertLibrary load_library_artifact(const RunConfig& cfg) {
  const std::string path = join_path(cfg.out_dir, "library.json");
  if (!std::filesystem::exists(path)) {
    throw InputError("missing library artifact " + path + "; run fit-experts first");
  }
  return ExpertLibrary::from_json(read_json_artifact(path).at("library"));
}

MoEModel load_model_artifact(const RunConfig& cfg) {
  const std::string path = join_path(cfg.out_dir, "model.json");
  if (!std::filesystem::exists(path)) {
    throw InputError("missing model artifact " + path + "; run train first");
  }
  return MoEModel::from_json(read_json_artifact(path).at("model"));
}

nlohmann::json fairness_axes_to_json(const std::vector<FairnessAxis>& axes) {
  nlohmann::json out = nlohmann::json::array();
  for (const FairnessAxis& a : axes) {
    out.push_back({{"name", a.name},
                   {"column", a.column},
                   {"cutoff", a.cutoff},
                   {"group0", a.group0_name},
                   {"group1", a.group1_name}});
  }
  return out;
}

std::vector<FairnessAxis> fairness_axes_from_json(const nlohmann::json& j) {
  std::vector<FairnessAxis> axes;
  for (const auto& e : j) {
    FairnessAxis a;
    a.name = e.value("name", std::string{});
    a.column = e.at("column").get<std::string>();
    a.cutoff = e.value("cutoff", 0.5);
    a.group0_name = e.value("group0", a.group0_name);
    a.group1_name = e.value("group1", a.group1_name);
    if (a.name.empty()) a.name = a.column;
    axes.push_back(std::move(a));
  }
  return axes;
}

}  // namespace

void RunConfig::validate() const {
  if (synthetic.has_value() && !data_csv.empty()) {
    throw InputError("config sets both data_csv and synthetic; choose one input");
  }
  if (!synthetic.has_value() && data_csv.empty()) {
    throw InputError("config needs data_csv or a synthetic block");
  }
  if (synthetic.has_value()) synthetic->validate();
  if (split.expert_train_fraction <= 0.0 || split.expert_train_fraction >= 1.0) {
    throw InputError("expert_train_fraction must lie in (0, 1)");
  }
  if (split.calibration_shots < 1) throw InputError("calibration_shots must be at least 1");
  if (cluster.embed_dim < 1) throw InputError("embed_dim must be at least 1");
  if (cluster.min_cluster_size < 2) throw InputError("min_cluster_size must be at least 2");
  if (cluster.min_samples < 1) throw InputError("min_samples must be at least 1");
  sr.validate();
  train.validate();
  for (int s : sweep_shots) {
    if (s < 1) throw InputError("sweep shot counts must be positive");
  }
  if (run_sweep && sweep_shots.empty()) {
    throw InputError("run_sweep is set but sweep_shots is empty");
  }
  if (stability_runs < 0) throw InputError("stability_runs must be non-negative");
  if (out_dir.empty()) throw InputError("out_dir must not be empty");
  if (endpoint.empty()) throw InputError("endpoint must be \"offline\" or host:port");
  for (const FairnessAxis& a : fairness_axes) {
    if (a.column.empty()) throw InputError("fairness axis is missing its column");
  }
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.data_csv = j.value("data_csv", cfg.data_csv);

  if (j.contains("schema")) {
    const auto& s = j.at("schema");
    cfg.schema.label_column = s.value("label_column", cfg.schema.label_column);
    cfg.schema.tag_column = s.value("tag_column", cfg.schema.tag_column);
    cfg.schema.feature_columns = s.value("feature_columns", cfg.schema.feature_columns);
    if (s.contains("codebook")) {
      cfg.schema.codebook =
          s.at("codebook").get<std::map<std::string, std::map<std::string, double>>>();
    }
    cfg.schema.demographic_columns =
        s.value("demographic_columns", cfg.schema.demographic_columns);
  }

  if (j.contains("synthetic") && !j.at("synthetic").is_null()) {
    const auto& s = j.at("synthetic");
    SyntheticSpec spec;
    spec.feature_names = s.at("feature_names").get<std::vector<std::string>>();
    spec.n_per_regime = s.at("n_per_regime").get<std::vector<int>>();
    for (const auto& r : s.at("regimes")) {
      RegimeSpec regime;
      regime.formula = r.at("formula").get<std::string>();
      regime.center = r.at("center").get<std::vector<double>>();
      regime.spread = r.at("spread").get<std::vector<double>>();
      spec.regimes.push_back(std::move(regime));
    }
    spec.noise_rate = s.value("noise_rate", spec.noise_rate);
    if (s.contains("conflict_pairs")) {
      spec.conflict_pairs =
          s.at("conflict_pairs").get<std::vector<std::tuple<std::string, int, int>>>();
    }
    spec.demographic_columns = s.value("demographic_columns", spec.demographic_columns);
    spec.seed = s.value("seed", cfg.seed);
    cfg.synthetic = std::move(spec);
  }

  if (j.contains("split")) {
    const auto& s = j.at("split");
    cfg.split.source_tags = s.value("source_tags", cfg.split.source_tags);
    cfg.split.target_tag = s.value("target_tag", cfg.split.target_tag);
    cfg.split.expert_train_fraction =
        s.value("expert_train_fraction", cfg.split.expert_train_fraction);
    cfg.split.calibration_shots = s.value("calibration_shots", cfg.split.calibration_shots);
    cfg.split.seed = s.value("seed", cfg.seed);
  } else {
    cfg.split.seed = cfg.seed;
  }

  cfg.cluster = cluster_params_from_json(j.value("cluster", nlohmann::json::object()), cfg.seed);

  if (j.contains("sr")) {
    const auto& s = j.at("sr");
    cfg.sr.generations = s.value("generations", cfg.sr.generations);
    cfg.sr.islands = s.value("islands", cfg.sr.islands);
    cfg.sr.population_per_island =
        s.value("population_per_island", cfg.sr.population_per_island);
    cfg.sr.max_nodes = s.value("max_nodes", cfg.sr.max_nodes);
    cfg.sr.llm_trigger_prob = s.value("llm_trigger_prob", cfg.sr.llm_trigger_prob);
    cfg.sr.tournament_size = s.value("tournament_size", cfg.sr.tournament_size);
    cfg.sr.migration_interval = s.value("migration_interval", cfg.sr.migration_interval);
    cfg.sr.pareto_top_k = s.value("pareto_top_k", cfg.sr.pareto_top_k);
    cfg.sr.parsimony = s.value("parsimony", cfg.sr.parsimony);
    cfg.sr.constant_restarts = s.value("constant_restarts", cfg.sr.constant_restarts);
    cfg.sr.threads = s.value("threads", cfg.sr.threads);
    cfg.sr.seed = s.value("seed", cfg.seed);
  } else {
    cfg.sr.seed = cfg.seed;
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train.lr = t.value("lr", cfg.train.lr);
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.patience = t.value("patience", cfg.train.patience);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.grad_clip = t.value("grad_clip", cfg.train.grad_clip);
    cfg.train.lambda_kl = t.value("lambda_kl", cfg.train.lambda_kl);
    cfg.train.lambda_ent = t.value("lambda_ent", cfg.train.lambda_ent);
    cfg.train.lambda_z = t.value("lambda_z", cfg.train.lambda_z);
    cfg.train.lambda_div = t.value("lambda_div", cfg.train.lambda_div);
    cfg.train.tau_init = t.value("tau_init", cfg.train.tau_init);
    cfg.train.tau_final = t.value("tau_final", cfg.train.tau_final);
    cfg.train.anneal_epochs = t.value("anneal_epochs", cfg.train.anneal_epochs);
    cfg.train.warmup_epochs = t.value("warmup_epochs", cfg.train.warmup_epochs);
    cfg.train.router_lr_mult = t.value("router_lr_mult", cfg.train.router_lr_mult);
    cfg.train.expert_lr_mult = t.value("expert_lr_mult", cfg.train.expert_lr_mult);
    cfg.train.holdout_fraction = t.value("holdout_fraction", cfg.train.holdout_fraction);
    cfg.train.decision_threshold = t.value("decision_threshold", cfg.train.decision_threshold);
    cfg.train.seed = t.value("seed", cfg.seed);
  } else {
    cfg.train.seed = cfg.seed;
  }

  if (j.contains("fairness_axes")) {
    cfg.fairness_axes = fairness_axes_from_json(j.at("fairness_axes"));
  }
  cfg.sweep_shots = j.value("sweep_shots", cfg.sweep_shots);
  cfg.stability_runs = j.value("stability_runs", cfg.stability_runs);
  const std::string mode = j.value("stability_mode", std::string{"seed_only"});
  if (mode == "seed_only") {
    cfg.stability_mode = Perturbation::SeedOnly;
  } else if (mode == "resample") {
    cfg.stability_mode = Perturbation::Resample;
  } else {
    throw InputError("stability_mode must be seed_only or resample, got " + mode);
  }
  cfg.global_only = j.value("global_only", cfg.global_only);
  cfg.run_ablations = j.value("run_ablations", cfg.run_ablations);
  cfg.run_fairness = j.value("run_fairness", cfg.run_fairness);
  cfg.run_sweep = j.value("run_sweep", cfg.run_sweep);
  cfg.allow_fallback = j.value("allow_fallback", cfg.allow_fallback);
  cfg.endpoint = j.value("endpoint", cfg.endpoint);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  return cfg;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["data_csv"] = data_csv;
  j["schema"] = {{"label_column", schema.label_column},
                 {"tag_column", schema.tag_column},
                 {"feature_columns", schema.feature_columns},
                 {"codebook", schema.codebook},
                 {"demographic_columns", schema.demographic_columns}};
  if (synthetic.has_value()) {
    nlohmann::json regimes = nlohmann::json::array();
    for (const RegimeSpec& r : synthetic->regimes) {
      regimes.push_back(
          {{"formula", r.formula}, {"center", r.center}, {"spread", r.spread}});
    }
    j["synthetic"] = {{"feature_names", synthetic->feature_names},
                      {"n_per_regime", synthetic->n_per_regime},
                      {"regimes", std::move(regimes)},
                      {"noise_rate", synthetic->noise_rate},
                      {"conflict_pairs", synthetic->conflict_pairs},
                      {"demographic_columns", synthetic->demographic_columns},
                      {"seed", synthetic->seed}};
  } else {
    j["synthetic"] = nullptr;
  }
  j["split"] = {{"source_tags", split.source_tags},
                {"target_tag", split.target_tag},
                {"expert_train_fraction", split.expert_train_fraction},
                {"calibration_shots", split.calibration_shots},
                {"seed", split.seed}};
  j["cluster"] = cluster_params_to_json(cluster);
  j["sr"] = {{"generations", sr.generations},
             {"islands", sr.islands},
             {"population_per_island", sr.population_per_island},
             {"max_nodes", sr.max_nodes},
             {"llm_trigger_prob", sr.llm_trigger_prob},
             {"tournament_size", sr.tournament_size},
             {"migration_interval", sr.migration_interval},
             {"pareto_top_k", sr.pareto_top_k},
             {"parsimony", sr.parsimony},
             {"constant_restarts", sr.constant_restarts},
             {"threads", sr.threads},
             {"seed", sr.seed}};
  j["train"] = {{"lr", train.lr},
                {"epochs", train.epochs},
                {"patience", train.patience},
                {"batch_size", train.batch_size},
                {"grad_clip", train.grad_clip},
                {"lambda_kl", train.lambda_kl},
                {"lambda_ent", train.lambda_ent},
                {"lambda_z", train.lambda_z},
                {"lambda_div", train.lambda_div},
                {"tau_init", train.tau_init},
                {"tau_final", train.tau_final},
                {"anneal_epochs", train.anneal_epochs},
                {"warmup_epochs", train.warmup_epochs},
                {"router_lr_mult", train.router_lr_mult},
                {"expert_lr_mult", train.expert_lr_mult},
                {"holdout_fraction", train.holdout_fraction},
                {"decision_threshold", train.decision_threshold},
                {"seed", train.seed}};
  j["fairness_axes"] = fairness_axes_to_json(fairness_axes);
  j["sweep_shots"] = sweep_shots;
  j["stability_runs"] = stability_runs;
  j["stability_mode"] = stability_mode == Perturbation::SeedOnly ? "seed_only" : "resample";
  j["global_only"] = global_only;
  j["run_ablations"] = run_ablations;
  j["run_fairness"] = run_fairness;
  j["run_sweep"] = run_sweep;
  j["allow_fallback"] = allow_fallback;
  j["endpoint"] = endpoint;
  j["out_dir"] = out_dir;
  j["seed"] = seed;
  return j;
}

RunConfig load_run_config(const std::string& path) {
  RunConfig cfg = RunConfig::from_json(read_json_artifact(path));
  cfg.validate();
  return cfg;
}

Dataset load_input_dataset(const RunConfig& cfg) {
  if (cfg.synthetic.has_value()) return generate_synthetic(*cfg.synthetic);
  return load_csv(cfg.data_csv, cfg.schema);
}

ClusterModel run_cluster_stage(const RunConfig& cfg) {
  cfg.validate();
  Prepared p = prepare(cfg);
  ensure_out_dir(cfg);
  write_splits_artifact(cfg, p.splits);

  const Eigen::MatrixXd X = to_matrix(p.splits.expert_train);
  ClusterModel model = fit_predict(X, cfg.cluster);

  nlohmann::json artifact = {{"config", cfg.to_json()}, {"model", cluster_model_to_json(model)}};
  if (cfg.stability_runs > 0) {
    artifact["stability"] =
        stability_to_json(stability(X, cfg.cluster, cfg.stability_runs, cfg.stability_mode));
  }
  write_json_artifact(join_path(cfg.out_dir, "cluster.json"), artifact);

  std::ostringstream csv;
  csv << "row,cluster\n";
  for (std::size_t i = 0; i < model.assignments.size(); ++i) {
    csv << p.splits.expert_train_idx[i] << ',' << model.assignments[i] << '\n';
  }
  write_text_file(join_path(cfg.out_dir, "assignments.csv"), csv.str());
  return model;
}

ExpertLibrary run_fit_experts_stage(const RunConfig& cfg) {
  cfg.validate();
  Prepared p = prepare(cfg);
  ensure_out_dir(cfg);
  write_splits_artifact(cfg, p.splits);

  const Eigen::MatrixXd X = to_matrix(p.splits.expert_train);
  const std::vector<int>& y = p.splits.expert_train.labels;
  const std::vector<int> labels =
      cfg.global_only ? std::vector<int>(p.splits.expert_train.size(), kNoiseLabel)
                      : load_cluster_assignments(cfg, p.splits.expert_train.size(), true);

  std::vector<std::string> log;
  std::unique_ptr<SuggestionClient> owned;
  SuggestionClient* client = nullptr;
  if (cfg.endpoint != "offline") {
    const auto ep = parse_endpoint(cfg.endpoint);
    if (!ep.has_value()) throw InputError("cannot parse endpoint " + cfg.endpoint);
    owned = std::make_unique<HttpSuggestionClient>(ep->first, ep->second);
    SuggestRequest probe;
    probe.features = p.ds.feature_names;
    probe.ask = 1;
    if (owned->suggest(probe).has_value()) {
      client = owned.get();
      log.push_back("suggestion endpoint " + cfg.endpoint + " reachable");
    } else if (cfg.allow_fallback) {
      log.push_back("suggestion endpoint " + cfg.endpoint +
                    " unreachable, falling back to offline evolution");
    } else {
      throw NetworkError("suggestion endpoint " + cfg.endpoint +
                         " unreachable and fallback is disabled");
    }
  } else {
    log.push_back("offline evolution, no suggestion client");
  }

  SRStats stats;
  ExpertLibrary lib =
      build_expert_library(X, y, labels, p.ds.feature_names, cfg.sr, client, &stats);

  nlohmann::json artifact = {
      {"config", cfg.to_json()},
      {"library", lib.to_json()},
      {"stats",
       {{"suggestions_attempted", stats.suggestions_attempted},
        {"suggestions_accepted", stats.suggestions_accepted},
        {"parse_failures", stats.parse_failures},
        {"client_failures", stats.client_failures}}},
      {"log", log},
  };
  write_json_artifact(join_path(cfg.out_dir, "library.json"), artifact);
  return lib;
}

TrainResult run_train_stage(const RunConfig& cfg) {
  cfg.validate();
  Prepared p = prepare(cfg);
  ensure_out_dir(cfg);
  write_splits_artifact(cfg, p.splits);

  const ExpertLibrary lib = load_library_artifact(cfg);
  MoEModel model = init_moe(lib, cfg.train.seed);
  const Eigen::MatrixXd Xc = to_matrix(p.splits.calibration);
  TrainResult result = train_moe(std::move(model), Xc, p.splits.calibration.labels, cfg.train);

  nlohmann::json artifact = {{"config", cfg.to_json()},
                             {"model", result.model.to_json()},
                             {"best_epoch", result.best_epoch},
                             {"best_val_mcc", result.best_val_mcc},
                             {"early_stopped", result.early_stopped},
                             {"notes", result.notes}};
  write_json_artifact(join_path(cfg.out_dir, "model.json"), artifact);

  std::ostringstream log;
  for (const EpochLog& e : result.log) {
    log << "epoch=" << e.epoch << " tau=" << fmt_double(e.tau)
        << " total=" << fmt_double(e.train_loss.total)
        << " task=" << fmt_double(e.train_loss.task) << " kl=" << fmt_double(e.train_loss.kl)
        << " ent=" << fmt_double(e.train_loss.ent) << " z=" << fmt_double(e.train_loss.z)
        << " div=" << fmt_double(e.train_loss.div) << " mean_pi=";
    for (Eigen::Index m = 0; m < e.train_loss.mean_pi.size(); ++m) {
      if (m > 0) log << '|';
      log << fmt_double(e.train_loss.mean_pi(m));
    }
    log << " val_mcc=" << fmt_double(e.val_mcc) << " improved=" << (e.improved ? 1 : 0)
        << " routing_entropy=" << fmt_double(e.routing_entropy) << '\n';
  }
  for (const std::string& note : result.notes) log << "note: " << note << '\n';
  write_text_file(join_path(cfg.out_dir, "train_log.txt"), log.str());
  return result;
}

nlohmann::json run_evaluate_stage(const RunConfig& cfg) {
  cfg.validate();
  Prepared p = prepare(cfg);
  ensure_out_dir(cfg);
  write_splits_artifact(cfg, p.splits);

  const ExpertLibrary lib = load_library_artifact(cfg);
  const MoEModel model = load_model_artifact(cfg);

  const Eigen::MatrixXd Xt = to_matrix(p.splits.target_test);
  const std::vector<int>& yt = p.splits.target_test.labels;
  const std::vector<Prediction> preds = predict_all(model, Xt);
  std::vector<double> probs;
  probs.reserve(preds.size());
  for (const Prediction& pr : preds) probs.push_back(pr.p);

  nlohmann::json report;
  report["config"] = cfg.to_json();
  report["metrics"]["full"] =
      metrics_to_json(summarize_scores(probs, yt, cfg.train.decision_threshold));
  report["metrics"]["top1"] = metrics_to_json(summarize_scores(
      aggregate_baseline(lib, Xt, "top1"), yt, cfg.train.decision_threshold));
  try {
    report["metrics"]["top5_avg"] = metrics_to_json(summarize_scores(
        aggregate_baseline(lib, Xt, "top5_avg"), yt, cfg.train.decision_threshold));
  } catch (const InputError& e) {
    report["metrics"]["top5_note"] = e.what();
  }

  std::ostringstream csv;
  csv << "row,label,p,z,pred,expert\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int pred = preds[i].p > cfg.train.decision_threshold ? 1 : 0;
    csv << p.splits.target_test_idx[i] << ',' << yt[i] << ',' << fmt_double(preds[i].p) << ','
        << fmt_double(preds[i].z) << ',' << pred << ',' << preds[i].argmax_expert << '\n';
  }
  write_text_file(join_path(cfg.out_dir, "predictions.csv"), csv.str());

  if (cfg.run_ablations) {
    AblationInputs in;
    in.library = lib;
    in.cluster_labels =
        cfg.global_only
            ? std::vector<int>(p.splits.expert_train.size(), kNoiseLabel)
            : load_cluster_assignments(cfg, p.splits.expert_train.size(), false);
    in.source_X = to_matrix(p.splits.expert_train);
    in.source_y = p.splits.expert_train.labels;
    in.calibration_X = to_matrix(p.splits.calibration);
    in.calibration_y = p.splits.calibration.labels;
    in.test_X = Xt;
    in.test_y = yt;
    in.feature_names = p.ds.feature_names;
    report["ablations"] = ablations_to_json(ablation_grid(in, cfg.train));
  }

  if (cfg.run_fairness) {
    std::vector<int> correct(preds.size(), 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const int pred = preds[i].p > cfg.train.decision_threshold ? 1 : 0;
      correct[i] = pred == yt[i] ? 1 : 0;
    }
    report["fairness"] =
        fairness_to_json(fairness_audit(correct, p.splits.target_test, cfg.fairness_axes));
  }

  if (cfg.run_sweep) {
    // Fixed test set across shot counts: shuffle the target rows once, reserve
    // everything beyond the largest shot count as test, and nest the
    // calibration samples within the prefix.
    std::vector<int> target_rows;
    for (std::size_t i = 0; i < p.ds.size(); ++i) {
      if (p.ds.group_tags[i] == cfg.split.target_tag) target_rows.push_back(static_cast<int>(i));
    }
    const int max_shots = *std::max_element(cfg.sweep_shots.begin(), cfg.sweep_shots.end());
    if (max_shots >= static_cast<int>(target_rows.size())) {
      throw InputError("sweep needs more target rows than the largest shot count");
    }
    auto rng = make_rng(cfg.split.seed, 0x51EE70);
    std::shuffle(target_rows.begin(), target_rows.end(), rng);
    const Dataset sweep_test = p.ds.select(
        std::vector<int>(target_rows.begin() + max_shots, target_rows.end()));
    const Eigen::MatrixXd Xs = to_matrix(sweep_test);

    auto run_mcc = [&](int shots) {
      if (shots > max_shots) throw InputError("shot count exceeds the reserved pool");
      const Dataset cal =
          p.ds.select(std::vector<int>(target_rows.begin(), target_rows.begin() + shots));
      MoEModel fresh = init_moe(lib, cfg.train.seed);
      const TrainResult r = train_moe(std::move(fresh), to_matrix(cal), cal.labels, cfg.train);
      const std::vector<Prediction> tp = predict_all(r.model, Xs);
      std::vector<double> tprobs;
      tprobs.reserve(tp.size());
      for (const Prediction& pr : tp) tprobs.push_back(pr.p);
      return summarize_scores(tprobs, sweep_test.labels, cfg.train.decision_threshold).mcc_value;
    };
    report["sweep"] = sweep_to_json(calibration_sweep(run_mcc, cfg.sweep_shots));
  }

  write_json_artifact(join_path(cfg.out_dir, "report.json"), report);
  return report;
}

Dataset run_synth_stage(const RunConfig& cfg) {
  cfg.validate();
  if (!cfg.synthetic.has_value()) {
    throw InputError("synth stage requires a synthetic block in the config");
  }
  Dataset ds = generate_synthetic(*cfg.synthetic);
  ensure_out_dir(cfg);

  std::ostringstream csv;
  for (const std::string& name : ds.feature_names) csv << name << ',';
  csv << "label,tag\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.rows[i]) csv << fmt_double(v) << ',';
    csv << ds.labels[i] << ',' << ds.group_tags[i] << '\n';
  }
  write_text_file(join_path(cfg.out_dir, "synthetic.csv"), csv.str());
  return ds;
}

void write_json_artifact(const std::string& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json read_json_artifact(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("cannot parse " + path + ": " + e.what());
  }
}

}  // namespace pasm
