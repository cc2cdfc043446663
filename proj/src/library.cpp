#include "pasm/library.hpp"

#include "pasm/errors.hpp"

namespace pasm {

std::vector<int> ExpertLibrary::active_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (experts[i].active) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> ExpertLibrary::entries_for(const std::string& provenance) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (experts[i].provenance == provenance) out.push_back(static_cast<int>(i));
  }
  return out;
}

nlohmann::json ExpertLibrary::to_json() const {
  nlohmann::json experts_json = nlohmann::json::array();
  for (const auto& e : experts) {
    experts_json.push_back({
        {"expr", print_canonical(e.expr, feature_names)},
        {"slot_defaults", e.slot_defaults},
        {"gamma", e.gamma},
        {"beta", e.beta},
        {"provenance", e.provenance},
        {"train_loss", e.train_loss},
        {"complexity", e.complexity},
        {"active", e.active},
    });
  }
  return {
      {"feature_names", feature_names},
      {"experts", experts_json},
      {"warnings", warnings},
  };
}

ExpertLibrary ExpertLibrary::from_json(const nlohmann::json& j) {
  ExpertLibrary lib;
  lib.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  if (j.contains("warnings")) lib.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto& ej : j.at("experts")) {
    Expression expr = parse(ej.at("expr").get<std::string>(), lib.feature_names);
    std::vector<double> defaults = ej.at("slot_defaults").get<std::vector<double>>();
    if (static_cast<int>(defaults.size()) != expr.constant_slots()) {
      throw InputError("library entry slot_defaults width mismatch");
    }
    ExpertEntry entry{expr.with_slot_defaults(defaults), std::move(defaults),
                      ej.at("gamma").get<double>(), ej.at("beta").get<double>(),
                      ej.at("provenance").get<std::string>(), ej.at("train_loss").get<double>(),
                      ej.at("complexity").get<int>(), ej.at("active").get<bool>()};
    lib.experts.push_back(std::move(entry));
  }
  if (lib.experts.empty()) throw InputError("library holds no experts");
  return lib;
}

}  // namespace pasm
