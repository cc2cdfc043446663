#include "pasm/moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "pasm/errors.hpp"
#include "pasm/rng.hpp"

namespace pasm {

namespace {

constexpr double kLnEps = 1e-5;

Eigen::VectorXd to_vec(std::span<const double> x) {
  return Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
}

Eigen::VectorXd layer_norm(const LayerNormAffine& ln, const Eigen::VectorXd& x) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  return (ln.gain.array() * ((x.array() - mean) * inv) + ln.bias.array()).matrix();
}

// Inference-mode backbone; dropout is identity outside training.
Eigen::VectorXd hidden_features(const LayerNormAffine& ln, const LinearLayer& fc1,
                                std::span<const double> x) {
  Eigen::VectorXd h = fc1.W * layer_norm(ln, to_vec(x)) + fc1.b;
  return h.cwiseMax(0.0);
}

LinearLayer glorot(int out, int in, std::mt19937_64& rng) {
  LinearLayer layer;
  layer.W.resize(out, in);
  layer.b = Eigen::VectorXd::Zero(out);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (Eigen::Index r = 0; r < layer.W.rows(); ++r) {
    for (Eigen::Index c = 0; c < layer.W.cols(); ++c) layer.W(r, c) = u(rng);
  }
  return layer;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> resolved_theta(const MoEModel& model, int m, const Eigen::VectorXd* backbone) {
  const ExpertEntry& e = model.experts[static_cast<std::size_t>(m)];
  if (model.coeff_mode == CoeffMode::Static) return model.static_theta[static_cast<std::size_t>(m)];
  std::vector<double> theta = e.slot_defaults;
  if (model.coeff_mode == CoeffMode::Adaptive && !theta.empty() && backbone != nullptr) {
    const LinearLayer& head = model.coeff.heads[static_cast<std::size_t>(m)];
    Eigen::VectorXd residual = head.W * *backbone + head.b;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] += residual(static_cast<Eigen::Index>(i));
    }
  }
  return theta;
}

// Every trainable scalar in a fixed order: router block first so the group
// mask can be derived from the same walk that defines the flat layout.
template <typename Model, typename Fn>
void visit_params(Model& model, Fn&& fn) {
  auto vec = [&](auto& v, bool router) {
    for (Eigen::Index i = 0; i < v.size(); ++i) fn(v(i), router);
  };
  auto mat = [&](auto& w, bool router) {
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) fn(w(r, c), router);
    }
  };
  vec(model.router.ln.gain, true);
  vec(model.router.ln.bias, true);
  mat(model.router.fc1.W, true);
  vec(model.router.fc1.b, true);
  mat(model.router.fc2.W, true);
  vec(model.router.fc2.b, true);
  vec(model.coeff.ln.gain, false);
  vec(model.coeff.ln.bias, false);
  mat(model.coeff.fc1.W, false);
  vec(model.coeff.fc1.b, false);
  for (auto& head : model.coeff.heads) {
    mat(head.W, false);
    vec(head.b, false);
  }
  for (auto& expert : model.experts) {
    fn(expert.gamma, false);
    fn(expert.beta, false);
  }
  for (auto& theta : model.static_theta) {
    for (auto& t : theta) fn(t, false);
  }
}

nlohmann::json layer_to_json(const LinearLayer& layer) {
  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(layer.W.size()));
  for (Eigen::Index r = 0; r < layer.W.rows(); ++r) {
    for (Eigen::Index c = 0; c < layer.W.cols(); ++c) w.push_back(layer.W(r, c));
  }
  return {
      {"shape", {layer.W.rows(), layer.W.cols()}},
      {"w", w},
      {"b", std::vector<double>(layer.b.data(), layer.b.data() + layer.b.size())},
  };
}

LinearLayer layer_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto w = j.at("w").get<std::vector<double>>();
  const auto b = j.at("b").get<std::vector<double>>();
  if (shape.size() != 2 || static_cast<Eigen::Index>(w.size()) != shape[0] * shape[1] ||
      static_cast<Eigen::Index>(b.size()) != shape[0]) {
    throw InputError("linear layer shape header disagrees with its data");
  }
  LinearLayer layer;
  layer.W.resize(shape[0], shape[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < shape[0]; ++r) {
    for (Eigen::Index c = 0; c < shape[1]; ++c) layer.W(r, c) = w[k++];
  }
  layer.b = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  return layer;
}

nlohmann::json ln_to_json(const LayerNormAffine& ln) {
  return {
      {"gain", std::vector<double>(ln.gain.data(), ln.gain.data() + ln.gain.size())},
      {"bias", std::vector<double>(ln.bias.data(), ln.bias.data() + ln.bias.size())},
  };
}

LayerNormAffine ln_from_json(const nlohmann::json& j) {
  const auto gain = j.at("gain").get<std::vector<double>>();
  const auto bias = j.at("bias").get<std::vector<double>>();
  if (gain.size() != bias.size()) throw InputError("layer norm gain/bias width mismatch");
  LayerNormAffine ln;
  ln.gain = Eigen::Map<const Eigen::VectorXd>(gain.data(), static_cast<Eigen::Index>(gain.size()));
  ln.bias = Eigen::Map<const Eigen::VectorXd>(bias.data(), static_cast<Eigen::Index>(bias.size()));
  return ln;
}

const char* coeff_mode_name(CoeffMode mode) {
  switch (mode) {
    case CoeffMode::Adaptive: return "adaptive";
    case CoeffMode::Fixed: return "fixed";
    case CoeffMode::Static: return "static";
  }
  return "adaptive";
}

CoeffMode coeff_mode_from(const std::string& name) {
  if (name == "adaptive") return CoeffMode::Adaptive;
  if (name == "fixed") return CoeffMode::Fixed;
  if (name == "static") return CoeffMode::Static;
  throw InputError("unknown coefficient mode: " + name);
}

}  // namespace

MoEModel init_moe(const ExpertLibrary& lib, std::uint64_t seed, int hidden) {
  if (hidden < 1) throw InputError("hidden width must be positive");
  MoEModel model;
  model.feature_names = lib.feature_names;
  for (int idx : lib.active_indices()) {
    model.experts.push_back(lib.experts[static_cast<std::size_t>(idx)]);
  }
  if (model.experts.empty()) throw InputError("library has no active experts");
  model.hidden = hidden;

  const int d = model.d();
  const int M = model.expert_count();
  auto rng = make_rng(seed, 0x30E);

  model.router.ln.gain = Eigen::VectorXd::Ones(d);
  model.router.ln.bias = Eigen::VectorXd::Zero(d);
  model.router.fc1 = glorot(hidden, d, rng);
  model.router.fc2.W = Eigen::MatrixXd::Zero(M, hidden);
  model.router.fc2.b = Eigen::VectorXd::Zero(M);

  model.coeff.ln.gain = Eigen::VectorXd::Ones(d);
  model.coeff.ln.bias = Eigen::VectorXd::Zero(d);
  model.coeff.fc1 = glorot(hidden, d, rng);
  model.coeff.heads.resize(static_cast<std::size_t>(M));
  model.static_theta.resize(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    const int slots = model.experts[static_cast<std::size_t>(m)].expr.constant_slots();
    LinearLayer& head = model.coeff.heads[static_cast<std::size_t>(m)];
    head.W = Eigen::MatrixXd::Zero(slots, hidden);
    head.b = Eigen::VectorXd::Zero(slots);
    model.static_theta[static_cast<std::size_t>(m)] =
        model.experts[static_cast<std::size_t>(m)].slot_defaults;
  }
  return model;
}

Eigen::VectorXd route(const MoEModel& model, std::span<const double> x, double tau) {
  if (!(tau > 0.0)) throw InputError("routing temperature must be positive");
  const int M = model.expert_count();
  if (model.routing_uniform) {
    return Eigen::VectorXd::Constant(M, 1.0 / static_cast<double>(M));
  }
  if (static_cast<int>(x.size()) != model.d()) {
    throw InputError("feature vector width does not match the model");
  }
  Eigen::VectorXd h = hidden_features(model.router.ln, model.router.fc1, x);
  Eigen::VectorXd a = model.router.fc2.W * h + model.router.fc2.b;
  a = a.cwiseMax(-kRouterLogitClip).cwiseMin(kRouterLogitClip);
  Eigen::VectorXd scaled = a / tau;
  Eigen::VectorXd shifted = (scaled.array() - scaled.maxCoeff()).exp();
  return shifted / shifted.sum();
}

double expert_logit(const MoEModel& model, int m, std::span<const double> x) {
  if (m < 0 || m >= model.expert_count()) throw InputError("expert index out of range");
  const ExpertEntry& e = model.experts[static_cast<std::size_t>(m)];
  std::vector<double> theta;
  if (model.coeff_mode == CoeffMode::Adaptive && e.expr.constant_slots() > 0) {
    Eigen::VectorXd backbone = hidden_features(model.coeff.ln, model.coeff.fc1, x);
    theta = resolved_theta(model, m, &backbone);
  } else {
    theta = resolved_theta(model, m, nullptr);
  }
  return e.gamma * eval_safe(e.expr, x, theta, model.guards) + e.beta;
}

Prediction predict(const MoEModel& model, std::span<const double> x) {
  Prediction out;
  out.pi = route(model, x, model.tau_eval);
  Eigen::VectorXd backbone;
  bool have_backbone = false;
  double z = 0.0;
  for (int m = 0; m < model.expert_count(); ++m) {
    const ExpertEntry& e = model.experts[static_cast<std::size_t>(m)];
    const Eigen::VectorXd* bb = nullptr;
    if (model.coeff_mode == CoeffMode::Adaptive && e.expr.constant_slots() > 0) {
      if (!have_backbone) {
        backbone = hidden_features(model.coeff.ln, model.coeff.fc1, x);
        have_backbone = true;
      }
      bb = &backbone;
    }
    const std::vector<double> theta = resolved_theta(model, m, bb);
    const double g = e.gamma * eval_safe(e.expr, x, theta, model.guards) + e.beta;
    z += out.pi(m) * g;
  }
  out.z = z;
  out.p = sigmoid(z);
  out.pi.maxCoeff(&out.argmax_expert);
  return out;
}

Eigen::VectorXd flatten_params(const MoEModel& model) {
  std::size_t count = 0;
  visit_params(model, [&](const double&, bool) { ++count; });
  Eigen::VectorXd flat(static_cast<Eigen::Index>(count));
  Eigen::Index i = 0;
  visit_params(model, [&](const double& v, bool) { flat(i++) = v; });
  return flat;
}

void unflatten_params(MoEModel& model, const Eigen::VectorXd& flat) {
  std::size_t count = 0;
  visit_params(model, [&](const double&, bool) { ++count; });
  if (flat.size() != static_cast<Eigen::Index>(count)) {
    throw InputError("flat parameter vector length does not match the model");
  }
  Eigen::Index i = 0;
  visit_params(model, [&](double& v, bool) { v = flat(i++); });
}

std::vector<bool> router_param_mask(const MoEModel& model) {
  std::vector<bool> mask;
  visit_params(model, [&](const double&, bool router) { mask.push_back(router); });
  return mask;
}

nlohmann::json MoEModel::to_json() const {
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
  nlohmann::json heads_json = nlohmann::json::array();
  for (const auto& head : coeff.heads) heads_json.push_back(layer_to_json(head));
  return {
      {"feature_names", feature_names},
      {"experts", experts_json},
      {"router",
       {{"ln", ln_to_json(router.ln)},
        {"fc1", layer_to_json(router.fc1)},
        {"fc2", layer_to_json(router.fc2)},
        {"dropout", router.dropout}}},
      {"coeff",
       {{"ln", ln_to_json(coeff.ln)},
        {"fc1", layer_to_json(coeff.fc1)},
        {"heads", heads_json},
        {"dropout", coeff.dropout}}},
      {"guards",
       {{"eps_shift", guards.eps_shift},
        {"pow_exp_clamp", guards.pow_exp_clamp},
        {"magnitude_clip", guards.magnitude_clip},
        {"denom_floor", guards.denom_floor}}},
      {"coeff_mode", coeff_mode_name(coeff_mode)},
      {"routing_uniform", routing_uniform},
      {"static_theta", static_theta},
      {"tau_eval", tau_eval},
      {"hidden", hidden},
  };
}

MoEModel MoEModel::from_json(const nlohmann::json& j) {
  MoEModel model;
  model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  for (const auto& ej : j.at("experts")) {
    Expression expr = parse(ej.at("expr").get<std::string>(), model.feature_names);
    std::vector<double> defaults = ej.at("slot_defaults").get<std::vector<double>>();
    if (static_cast<int>(defaults.size()) != expr.constant_slots()) {
      throw InputError("model expert slot_defaults width mismatch");
    }
    ExpertEntry entry{expr.with_slot_defaults(defaults), std::move(defaults),
                      ej.at("gamma").get<double>(), ej.at("beta").get<double>(),
                      ej.at("provenance").get<std::string>(), ej.at("train_loss").get<double>(),
                      ej.at("complexity").get<int>(), ej.at("active").get<bool>()};
    model.experts.push_back(std::move(entry));
  }
  if (model.experts.empty()) throw InputError("model holds no experts");

  const auto& rj = j.at("router");
  model.router.ln = ln_from_json(rj.at("ln"));
  model.router.fc1 = layer_from_json(rj.at("fc1"));
  model.router.fc2 = layer_from_json(rj.at("fc2"));
  model.router.dropout = rj.at("dropout").get<double>();
  const auto& cj = j.at("coeff");
  model.coeff.ln = ln_from_json(cj.at("ln"));
  model.coeff.fc1 = layer_from_json(cj.at("fc1"));
  for (const auto& hj : cj.at("heads")) model.coeff.heads.push_back(layer_from_json(hj));
  model.coeff.dropout = cj.at("dropout").get<double>();
  const auto& gj = j.at("guards");
  model.guards.eps_shift = gj.at("eps_shift").get<double>();
  model.guards.pow_exp_clamp = gj.at("pow_exp_clamp").get<double>();
  model.guards.magnitude_clip = gj.at("magnitude_clip").get<double>();
  model.guards.denom_floor = gj.at("denom_floor").get<double>();
  model.guards.validate();
  model.coeff_mode = coeff_mode_from(j.at("coeff_mode").get<std::string>());
  model.routing_uniform = j.at("routing_uniform").get<bool>();
  model.static_theta = j.at("static_theta").get<std::vector<std::vector<double>>>();
  model.tau_eval = j.at("tau_eval").get<double>();
  model.hidden = j.at("hidden").get<int>();

  const int d = model.d();
  const int M = model.expert_count();
  if (model.router.ln.gain.size() != d || model.router.fc1.W.cols() != d ||
      model.router.fc1.W.rows() != model.hidden || model.router.fc2.W.rows() != M ||
      model.router.fc2.W.cols() != model.hidden) {
    throw InputError("router weight shapes disagree with the model header");
  }
  if (model.coeff.ln.gain.size() != d || model.coeff.fc1.W.cols() != d ||
      model.coeff.fc1.W.rows() != model.hidden ||
      model.coeff.heads.size() != static_cast<std::size_t>(M) ||
      model.static_theta.size() != static_cast<std::size_t>(M)) {
    throw InputError("coefficient network shapes disagree with the model header");
  }
  for (int m = 0; m < M; ++m) {
    const int slots = model.experts[static_cast<std::size_t>(m)].expr.constant_slots();
    if (model.coeff.heads[static_cast<std::size_t>(m)].W.rows() != slots ||
        static_cast<int>(model.static_theta[static_cast<std::size_t>(m)].size()) != slots) {
      throw InputError("coefficient head width disagrees with expert slots");
    }
    if (slots > 0 && model.coeff.heads[static_cast<std::size_t>(m)].W.cols() != model.hidden) {
      throw InputError("coefficient head input width disagrees with the backbone");
    }
  }
  return model;
}

}  // namespace pasm
