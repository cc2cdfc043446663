#include <cmath>
#include <random>
#include <set>

#include "pasm/dataset.hpp"
#include "pasm/expr.hpp"
#include "pasm/rng.hpp"

namespace pasm {

void SyntheticSpec::validate() const {
  if (feature_names.empty()) throw InputError("synthetic spec declares no features");
  std::set<std::string> seen(feature_names.begin(), feature_names.end());
  if (seen.size() != feature_names.size()) throw InputError("duplicate feature names");
  if (regimes.empty()) throw InputError("synthetic spec declares no regimes");
  if (n_per_regime.size() != regimes.size()) {
    throw InputError("n_per_regime and regimes disagree in length");
  }
  for (int n : n_per_regime) {
    if (n <= 0) throw InputError("n_per_regime entries must be positive");
  }
  for (std::size_t r = 0; r < regimes.size(); ++r) {
    if (regimes[r].center.size() != feature_names.size() ||
        regimes[r].spread.size() != feature_names.size()) {
      throw InputError("regime " + std::to_string(r) + " center/spread width mismatch");
    }
    for (double s : regimes[r].spread) {
      if (!(s >= 0.0)) throw InputError("regime spreads must be non-negative");
    }
  }
  if (!(noise_rate >= 0.0 && noise_rate < 0.5)) {
    throw InputError("noise_rate must lie in [0, 0.5)");
  }
  for (const auto& [feature, ra, rb] : conflict_pairs) {
    if (std::find(feature_names.begin(), feature_names.end(), feature) == feature_names.end()) {
      throw InputError("conflict pair names unknown feature '" + feature + "'");
    }
    if (ra < 0 || rb < 0 || ra >= static_cast<int>(regimes.size()) ||
        rb >= static_cast<int>(regimes.size()) || ra == rb) {
      throw InputError("conflict pair regime indices invalid");
    }
  }
}

namespace {

// Sign of d(formula)/d(feature) at a regime's center, by central difference.
double effect_sign(const Expression& e, const std::vector<double>& center, int feature,
                   const EvalGuards& g) {
  std::vector<double> lo = center, hi = center;
  const double h = 1e-4 * std::max(1.0, std::abs(center[static_cast<std::size_t>(feature)]));
  lo[static_cast<std::size_t>(feature)] -= h;
  hi[static_cast<std::size_t>(feature)] += h;
  const auto theta = e.slot_defaults();
  return eval_safe(e, hi, theta, g) - eval_safe(e, lo, theta, g);
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const EvalGuards guards;

  std::vector<Expression> formulas;
  formulas.reserve(spec.regimes.size());
  for (std::size_t r = 0; r < spec.regimes.size(); ++r) {
    try {
      formulas.push_back(parse(spec.regimes[r].formula, spec.feature_names));
    } catch (const ExprError& e) {
      throw InputError("regime " + std::to_string(r) + " formula: " + e.what());
    }
  }

  for (const auto& [feature, ra, rb] : spec.conflict_pairs) {
    int f = static_cast<int>(std::find(spec.feature_names.begin(), spec.feature_names.end(),
                                       feature) -
                             spec.feature_names.begin());
    const double sa = effect_sign(formulas[static_cast<std::size_t>(ra)],
                                  spec.regimes[static_cast<std::size_t>(ra)].center, f, guards);
    const double sb = effect_sign(formulas[static_cast<std::size_t>(rb)],
                                  spec.regimes[static_cast<std::size_t>(rb)].center, f, guards);
    if (!(sa * sb < 0.0)) {
      throw InputError("conflict pair on '" + feature + "' is not realized: effect signs " +
                       std::to_string(sa) + " and " + std::to_string(sb));
    }
  }

  Dataset ds;
  ds.feature_names = spec.feature_names;
  ds.demographic_columns = spec.demographic_columns;
  const int d = ds.dim();

  for (std::size_t r = 0; r < spec.regimes.size(); ++r) {
    const RegimeSpec& regime = spec.regimes[r];
    const auto theta = formulas[r].slot_defaults();
    const int n = spec.n_per_regime[r];

    // Features and noise flips use separate streams so noise_rate does not
    // perturb the feature draw.
    auto rng_x = make_rng(spec.seed, 10 + 2 * static_cast<std::uint64_t>(r));
    auto rng_flip = make_rng(spec.seed, 11 + 2 * static_cast<std::uint64_t>(r));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    long positives = 0;
    for (int i = 0; i < n; ++i) {
      std::vector<double> x(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j) {
        x[static_cast<std::size_t>(j)] = regime.center[static_cast<std::size_t>(j)] +
                                         regime.spread[static_cast<std::size_t>(j)] * gauss(rng_x);
      }
      int label = eval_safe(formulas[r], x, theta, guards) > 0.0 ? 1 : 0;
      if (spec.noise_rate > 0.0 && unit(rng_flip) < spec.noise_rate) label = 1 - label;
      positives += label;
      ds.rows.push_back(std::move(x));
      ds.labels.push_back(label);
      ds.group_tags.push_back("regime" + std::to_string(r));
    }

    const double balance = static_cast<double>(positives) / static_cast<double>(n);
    if (!(balance > 0.05 && balance < 0.95)) {
      throw InputError("regime " + std::to_string(r) + " label balance " +
                       std::to_string(balance) +
                       " outside (0.05, 0.95); adjust centers, spreads, or the formula");
    }
  }

  ds.validate(/*require_finite=*/true);
  return ds;
}

}  // namespace pasm
