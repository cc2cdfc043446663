#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pasm/expr.hpp"
#include "pasm/library.hpp"

namespace pasm {

struct LinearLayer {
  Eigen::MatrixXd W;  // out x in
  Eigen::VectorXd b;
};

struct LayerNormAffine {
  Eigen::VectorXd gain;
  Eigen::VectorXd bias;
};

// LayerNorm -> Linear(d, hidden) -> ReLU -> Dropout -> Linear(hidden, M).
struct RouterNet {
  LayerNormAffine ln;
  LinearLayer fc1;
  LinearLayer fc2;
  double dropout = 0.1;
};

// Shared LayerNorm -> Linear -> ReLU -> Dropout backbone with one linear
// head per expert that has constant slots; head outputs are residuals added
// to the expert's slot defaults.
struct CoeffNet {
  LayerNormAffine ln;
  LinearLayer fc1;
  std::vector<LinearLayer> heads;  // heads[m] is empty (0 rows) when C_m = 0
  double dropout = 0.1;
};

enum class CoeffMode {
  Adaptive,  // heads produce input-dependent residuals
  Fixed,     // slot defaults used verbatim
  Static,    // one free trainable vector per expert, no input dependence
};

struct MoEModel {
  std::vector<std::string> feature_names;
  std::vector<ExpertEntry> experts;  // the mixture's M members
  RouterNet router;
  CoeffNet coeff;
  EvalGuards guards;
  CoeffMode coeff_mode = CoeffMode::Adaptive;
  bool routing_uniform = false;  // ablation: router frozen at uniform
  std::vector<std::vector<double>> static_theta;  // per expert, CoeffMode::Static
  double tau_eval = 0.5;  // temperature restored from the best checkpoint
  int hidden = 128;

  int d() const { return static_cast<int>(feature_names.size()); }
  int expert_count() const { return static_cast<int>(experts.size()); }

  nlohmann::json to_json() const;
  static MoEModel from_json(const nlohmann::json& j);
};

// Fresh model over the library's active experts. Router output layer and
// coefficient heads start at zero so routing opens uniform and expert logits
// open at their library operating point.
MoEModel init_moe(const ExpertLibrary& lib, std::uint64_t seed, int hidden = 128);

inline const double kRouterLogitClip = 30.0;

// softmax(a/tau) with raw logits clipped to +-kRouterLogitClip beforehand.
// Training mode applies dropout with the provided mask; eval is
// deterministic. Returns the simplex vector.
Eigen::VectorXd route(const MoEModel& model, std::span<const double> x, double tau);

// gamma_m * eval_safe(expr_m, x, theta) + beta_m with theta resolved per the
// model's coefficient mode.
double expert_logit(const MoEModel& model, int m, std::span<const double> x);

struct Prediction {
  double p = 0.0;
  double z = 0.0;
  Eigen::VectorXd pi;
  int argmax_expert = 0;
};

// Eval-mode forward pass at tau_eval: z = sum_m pi_m g_m, p = sigmoid(z).
Prediction predict(const MoEModel& model, std::span<const double> x);

// Flat parameter vector in a fixed layout (router, coeff backbone, heads,
// gamma, beta, static thetas). Used by the optimizer and by gradient checks.
Eigen::VectorXd flatten_params(const MoEModel& model);
void unflatten_params(MoEModel& model, const Eigen::VectorXd& flat);
// Parallel mask, true where a parameter belongs to the router group.
std::vector<bool> router_param_mask(const MoEModel& model);

}  // namespace pasm
