#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <sys/wait.h>

#include <doctest.h>
#include <json.hpp>

#include "pasm/suggest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string bin() { return PASM_BIN; }

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pasm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cmd(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n' ? 1 : 0;
  return n;
}

json base_config(const fs::path& out_dir) {
  return json{
      {"seed", 11},
      {"synthetic",
       {{"feature_names", {"x1", "x2", "x3"}},
        {"n_per_regime", {150, 150}},
        {"regimes",
         json::array({{{"formula", "x1 - 0.2"},
                       {"center", {0.0, 0.0, -5.0}},
                       {"spread", {1.0, 1.0, 0.01}}},
                      {{"formula", "0.2 - x1"},
                       {"center", {0.0, 0.0, 5.0}},
                       {"spread", {1.0, 1.0, 0.01}}}})},
        {"noise_rate", 0.0},
        {"seed", 11}}},
      {"split",
       {{"source_tags", {"regime0"}},
        {"target_tag", "regime1"},
        {"expert_train_fraction", 0.8},
        {"calibration_shots", 60},
        {"seed", 11}}},
      {"cluster", {{"embed_dim", 2}, {"min_cluster_size", 12}, {"min_samples", 4}, {"seed", 11}}},
      {"sr",
       {{"generations", 4},
        {"islands", 2},
        {"population_per_island", 16},
        {"max_nodes", 12},
        {"llm_trigger_prob", 0.0},
        {"pareto_top_k", 5},
        {"threads", 2},
        {"constant_restarts", 1},
        {"seed", 11}}},
      {"train", {{"epochs", 8}, {"patience", 8}, {"batch_size", 16}, {"seed", 11}}},
      {"fairness_axes", json::array({{{"name", "x2_split"}, {"column", "x2"}, {"cutoff", 0.0}}})},
      {"sweep_shots", {10, 40}},
      {"endpoint", "offline"},
      {"out_dir", out_dir.string()},
  };
}

fs::path write_config(const fs::path& dir, const json& cfg) {
  const fs::path path = dir / "config.json";
  std::ofstream out(path);
  out << cfg.dump(2) << "\n";
  return path;
}

std::string stage(const fs::path& dir, const fs::path& cfg, const std::string& args) {
  return bin() + " " + args + " --config " + cfg.string() + " > " + (dir / "out.txt").string() +
         " 2> " + (dir / "err.txt").string();
}

// Pulls the mean_pi field out of one train-log line and checks exact
// uniformity across however many experts the model ended up with.
bool mean_pi_uniform(const std::string& line) {
  const std::string key = "mean_pi=";
  const std::size_t at = line.find(key);
  if (at == std::string::npos) return false;
  std::size_t end = line.find(' ', at);
  if (end == std::string::npos) end = line.size();
  const std::string field = line.substr(at + key.size(), end - at - key.size());
  std::vector<double> parts;
  std::stringstream ss(field);
  std::string tok;
  while (std::getline(ss, tok, '|')) parts.push_back(std::stod(tok));
  if (parts.empty()) return false;
  const double want = 1.0 / static_cast<double>(parts.size());
  for (double p : parts) {
    if (p != want) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("synth writes the dataset and reports its shape") {
  const fs::path dir = fresh_dir("synth");
  const fs::path out = dir / "run";
  const fs::path cfg = write_config(dir, base_config(out));

  CHECK(run_cmd(stage(dir, cfg, "synth")) == 0);
  const std::string stdout_text = slurp(dir / "out.txt");
  CHECK(stdout_text.find("rows=300") != std::string::npos);
  CHECK(stdout_text.find("features=3") != std::string::npos);

  const std::string csv = slurp(out / "synthetic.csv");
  CHECK(count_lines(csv) == 301);
  CHECK(csv.rfind("x1,x2,x3,label,tag\n", 0) == 0);
}

TEST_CASE("stage pipeline composes through shared artifacts") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path out = dir / "run";
  const fs::path cfg = write_config(dir, base_config(out));

  CHECK(run_cmd(stage(dir, cfg, "cluster --stability 3")) == 0);
  CHECK(slurp(dir / "out.txt").find("clusters=") != std::string::npos);
  const json cluster_art = json::parse(slurp(out / "cluster.json"));
  CHECK(cluster_art.contains("config"));
  CHECK(cluster_art.contains("model"));
  REQUIRE(cluster_art.contains("stability"));
  CHECK(cluster_art["stability"]["runs"] == 3);
  CHECK(cluster_art["model"]["assignments"].size() == 120);
  CHECK(count_lines(slurp(out / "assignments.csv")) == 121);
  CHECK(json::parse(slurp(out / "splits.json"))["counts"]["expert_train"] == 120);

  CHECK(run_cmd(stage(dir, cfg, "fit-experts")) == 0);
  const json lib_art = json::parse(slurp(out / "library.json"));
  REQUIRE(lib_art.contains("library"));
  CHECK(lib_art["library"]["experts"].size() >= 2);
  CHECK(lib_art["stats"]["suggestions_attempted"] == 0);
  bool offline_note = false;
  for (const auto& line : lib_art["log"]) {
    offline_note = offline_note ||
                   line.get<std::string>().find("offline evolution") != std::string::npos;
  }
  CHECK(offline_note);

  CHECK(run_cmd(stage(dir, cfg, "train")) == 0);
  CHECK(slurp(dir / "out.txt").find("best_epoch=") != std::string::npos);
  const json model_art = json::parse(slurp(out / "model.json"));
  CHECK(model_art.contains("model"));
  CHECK(model_art.contains("best_val_mcc"));

  const std::string log_text = slurp(out / "train_log.txt");
  std::stringstream lines(log_text);
  std::string line;
  int warm_checked = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("epoch=", 0) != 0) continue;
    const int epoch = std::stoi(line.substr(6, line.find(' ') - 6));
    if (epoch < 5) {
      CHECK(mean_pi_uniform(line));
      ++warm_checked;
    }
    CHECK(line.find("val_mcc=") != std::string::npos);
  }
  CHECK(warm_checked == 5);

  CHECK(run_cmd(stage(dir, cfg, "evaluate --fairness --sweep")) == 0);
  CHECK(slurp(dir / "out.txt").find("mcc=") != std::string::npos);
  const json report = json::parse(slurp(out / "report.json"));
  REQUIRE(report.contains("metrics"));
  CHECK(report["metrics"].contains("full"));
  CHECK(report["metrics"]["full"].contains("mcc"));
  CHECK(report["metrics"].contains("top1"));
  CHECK((report["metrics"].contains("top5_avg") || report["metrics"].contains("top5_note")));
  REQUIRE(report.contains("fairness"));
  CHECK(!report["fairness"].empty());
  REQUIRE(report.contains("sweep"));
  CHECK(report["sweep"]["rows"].size() == 2);

  // 150 target rows minus 60 calibration shots leaves the test split.
  CHECK(count_lines(slurp(out / "predictions.csv")) == 91);
  CHECK(json::parse(slurp(out / "splits.json"))["counts"]["target_test"] == 90);
}

TEST_CASE("global-only expert fits rerun byte-identically") {
  const fs::path dir = fresh_dir("rerun");
  const fs::path out = dir / "run";
  const fs::path cfg = write_config(dir, base_config(out));

  CHECK(run_cmd(stage(dir, cfg, "fit-experts --global-only")) == 0);
  const std::string first = slurp(out / "library.json");
  REQUIRE_FALSE(first.empty());
  CHECK(run_cmd(stage(dir, cfg, "fit-experts --global-only")) == 0);
  CHECK(slurp(out / "library.json") == first);

  const json lib_art = json::parse(first);
  for (const auto& e : lib_art["library"]["experts"]) {
    CHECK(e["provenance"] == "GLOBAL");
  }
}

TEST_CASE("input failures exit with code 2 and name the problem") {
  const fs::path dir = fresh_dir("failures");
  const fs::path out = dir / "run";

  json cfg = base_config(out);
  cfg["synthetic"] = nullptr;
  cfg["data_csv"] = (dir / "absent.csv").string();
  const fs::path bad_csv = write_config(dir, cfg);
  CHECK(run_cmd(stage(dir, bad_csv, "cluster")) == 2);
  CHECK(slurp(dir / "err.txt").find("absent.csv") != std::string::npos);

  const fs::path good = write_config(dir, base_config(out));
  CHECK(run_cmd(stage(dir, good, "evaluate")) == 2);
  CHECK(slurp(dir / "err.txt").find("fit-experts") != std::string::npos);

  CHECK(run_cmd(bin() + " > /dev/null 2>&1") == 2);
  CHECK(run_cmd(bin() + " train > /dev/null 2>&1") == 2);
  CHECK(run_cmd(stage(dir, good, "cluster --stability 2 --stability-mode bogus")) == 2);
  CHECK(slurp(dir / "err.txt").find("stability mode") != std::string::npos);

  json bad_split = base_config(out);
  bad_split["split"]["expert_train_fraction"] = 1.5;
  const fs::path bad_frac = write_config(dir, bad_split);
  CHECK(run_cmd(stage(dir, bad_frac, "synth")) == 2);
}

TEST_CASE("suggestion endpoint integration and fallback policy") {
  const fs::path dir = fresh_dir("endpoint");
  const fs::path out = dir / "run";
  json cfg = base_config(out);
  cfg["sr"]["llm_trigger_prob"] = 0.8;
  const fs::path cfg_path = write_config(dir, cfg);

  const int port = 18431;
  const std::string endpoint = "127.0.0.1:" + std::to_string(port);
  run_cmd(bin() + " mock-llm --port " + std::to_string(port) + " --seed 5 > /dev/null 2>&1 & echo $! > " +
          (dir / "pid").string());

  bool up = false;
  {
    pasm::HttpSuggestionClient probe("127.0.0.1", port, 0.5);
    pasm::SuggestRequest req;
    req.features = {"x1"};
    for (int tries = 0; tries < 50 && !up; ++tries) {
      up = probe.suggest(req).has_value();
      if (!up) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
  REQUIRE(up);

  CHECK(run_cmd(stage(dir, cfg_path, "fit-experts --global-only --endpoint " + endpoint)) == 0);
  const json lib_art = json::parse(slurp(out / "library.json"));
  CHECK(lib_art["stats"]["suggestions_attempted"].get<int>() > 0);
  CHECK(lib_art["stats"]["suggestions_accepted"].get<int>() > 0);
  const int attempted = lib_art["stats"]["suggestions_attempted"].get<int>();
  const int accounted = lib_art["stats"]["suggestions_accepted"].get<int>() +
                        lib_art["stats"]["parse_failures"].get<int>() +
                        lib_art["stats"]["client_failures"].get<int>();
  CHECK(accounted == attempted);
  bool reachable_note = false;
  for (const auto& line : lib_art["log"]) {
    reachable_note = reachable_note ||
                     line.get<std::string>().find("reachable") != std::string::npos;
  }
  CHECK(reachable_note);

  run_cmd("kill $(cat " + (dir / "pid").string() + ") 2> /dev/null");
  std::this_thread::sleep_for(std::chrono::milliseconds(300));

  CHECK(run_cmd(stage(dir, cfg_path,
                      "fit-experts --global-only --no-fallback --endpoint " + endpoint)) == 4);
  CHECK(slurp(dir / "err.txt").find("network error") != std::string::npos);

  CHECK(run_cmd(stage(dir, cfg_path, "fit-experts --global-only --endpoint " + endpoint)) == 0);
  const json fallback_art = json::parse(slurp(out / "library.json"));
  bool fallback_note = false;
  for (const auto& line : fallback_art["log"]) {
    fallback_note = fallback_note ||
                    line.get<std::string>().find("falling back") != std::string::npos;
  }
  CHECK(fallback_note);
}
