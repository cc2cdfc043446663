#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pasm/expr.hpp"

namespace pasm {

struct ExpertEntry {
  Expression expr;
  std::vector<double> slot_defaults;
  double gamma = 1.0;
  double beta = 0.0;
  std::string provenance;  // "GLOBAL" or "cluster:<id>"
  double train_loss = 0.0;
  int complexity = 0;
  bool active = true;  // the entry its provenance group contributes to the mixture
};

struct ExpertLibrary {
  std::vector<std::string> feature_names;
  std::vector<ExpertEntry> experts;  // the first active entry is GLOBAL
  std::vector<std::string> warnings;

  int total_entries() const { return static_cast<int>(experts.size()); }
  std::vector<int> active_indices() const;
  std::vector<int> entries_for(const std::string& provenance) const;

  nlohmann::json to_json() const;
  static ExpertLibrary from_json(const nlohmann::json& j);
};

}  // namespace pasm
