#include "pasm/moe_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pasm/errors.hpp"
#include "pasm/metrics.hpp"
#include "pasm/rng.hpp"

namespace pasm {

namespace {

constexpr double kLnEps = 1e-5;

double softplus(double t) {
  if (t > 30.0) return t;
  if (t < -30.0) return std::exp(t);
  return std::log1p(std::exp(t));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logsumexp(const Eigen::VectorXd& a) {
  const double mx = a.maxCoeff();
  return mx + std::log((a.array() - mx).exp().sum());
}

Eigen::VectorXd softmax(const Eigen::VectorXd& a) {
  Eigen::VectorXd e = (a.array() - a.maxCoeff()).exp();
  return e / e.sum();
}

struct LnCache {
  Eigen::VectorXd xhat;
  Eigen::VectorXd out;
};

LnCache layer_norm_fwd(const LayerNormAffine& ln, const Eigen::VectorXd& x) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  LnCache c;
  c.xhat = ((x.array() - mean) * inv).matrix();
  c.out = (ln.gain.array() * c.xhat.array() + ln.bias.array()).matrix();
  return c;
}

struct SampleCache {
  Eigen::VectorXd x;
  // Router path.
  Eigen::VectorXd xhat_r, u_r, h1, m1, d1, a;
  double lse = 0.0;
  Eigen::VectorXd pi;
  // Coefficient backbone.
  Eigen::VectorXd xhat_c, u_c, h2, m2, d2;
  // Experts.
  std::vector<double> f;
  std::vector<Eigen::VectorXd> df_dtheta;
  Eigen::VectorXd g;
  double zhat = 0.0, ytilde = 1.0, w = 1.0;
};

// Dropout multipliers: 0 for a dropped unit, 1/(1-p) otherwise (inverted
// scaling keeps inference mask-free).
Eigen::VectorXd dropout_mask(int n, double p, bool train_mode, std::mt19937_64& rng) {
  if (!train_mode || p <= 0.0) return Eigen::VectorXd::Ones(n);
  Eigen::VectorXd m(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  for (int i = 0; i < n; ++i) m(i) = u(rng) < p ? 0.0 : keep_scale;
  return m;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw InputError("learning rate must be positive");
  if (epochs < 1 || epochs > 100) throw InputError("epochs must lie in [1, 100]");
  if (patience < 1 || patience > epochs) throw InputError("patience must lie in [1, epochs]");
  if (batch_size < 1) throw InputError("batch size must be positive");
  if (!(grad_clip > 0.0)) throw InputError("gradient clip must be positive");
  if (lambda_kl < 0.0 || lambda_ent < 0.0 || lambda_z < 0.0 || lambda_div < 0.0) {
    throw InputError("loss weights must be non-negative");
  }
  if (!(tau_final > 0.0) || !(tau_init > 0.0) || tau_final > tau_init) {
    throw InputError("temperatures must be positive with tau_final <= tau_init");
  }
  if (anneal_epochs < 0 || warmup_epochs < 0) {
    throw InputError("anneal and warmup epoch counts must be non-negative");
  }
  if (router_lr_mult < 0.0 || expert_lr_mult < 0.0) {
    throw InputError("learning-rate multipliers must be non-negative");
  }
  if (!(holdout_fraction > 0.0) || !(holdout_fraction < 1.0)) {
    throw InputError("holdout fraction must lie in (0, 1)");
  }
  if (!(decision_threshold > 0.0) || !(decision_threshold < 1.0)) {
    throw InputError("decision threshold must lie in (0, 1)");
  }
}

double TrainConfig::tau_at(int epoch) const {
  if (anneal_epochs <= 0) return tau_final;
  const double t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(anneal_epochs));
  return tau_init + (tau_final - tau_init) * t;
}

LossComponents moe_loss(const MoEModel& model, const TrainConfig& cfg, const LossContext& ctx,
                        Eigen::VectorXd* grad_out) {
  if (ctx.X == nullptr || ctx.y == nullptr || ctx.X->rows() == 0) {
    throw InputError("loss requires a non-empty batch");
  }
  const Eigen::MatrixXd& X = *ctx.X;
  const std::vector<int>& y = *ctx.y;
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) {
    throw InputError("batch labels do not align with the rows");
  }
  if (X.cols() != model.d()) throw InputError("batch width does not match the model");
  if (!(ctx.tau > 0.0)) throw InputError("routing temperature must be positive");

  const int B = static_cast<int>(X.rows());
  const int M = model.expert_count();
  const double tau = ctx.tau;
  const bool forced_uniform = model.routing_uniform || ctx.epoch < cfg.warmup_epochs;
  const bool router_active = !model.routing_uniform;
  const bool adaptive = model.coeff_mode == CoeffMode::Adaptive;
  bool need_backbone = false;
  if (adaptive) {
    for (const auto& e : model.experts) {
      if (e.expr.constant_slots() > 0) need_backbone = true;
    }
  }

  auto drop_rng = make_rng(ctx.seed, 0xD809000000000000ULL ^
                                         (static_cast<std::uint64_t>(ctx.epoch) << 24) ^
                                         static_cast<std::uint64_t>(ctx.step));

  std::vector<SampleCache> cache(static_cast<std::size_t>(B));
  double sum_w = 0.0, task_sum = 0.0, ent_sum = 0.0, lse_sq_sum = 0.0;
  Eigen::VectorXd pibar = Eigen::VectorXd::Zero(M);

  for (int i = 0; i < B; ++i) {
    SampleCache& c = cache[static_cast<std::size_t>(i)];
    c.x = X.row(i).transpose();
    const std::span<const double> xs(c.x.data(), static_cast<std::size_t>(c.x.size()));

    if (router_active) {
      LnCache ln = layer_norm_fwd(model.router.ln, c.x);
      c.xhat_r = std::move(ln.xhat);
      c.u_r = std::move(ln.out);
      c.h1 = model.router.fc1.W * c.u_r + model.router.fc1.b;
      c.m1 = dropout_mask(model.hidden, model.router.dropout, ctx.train_mode, drop_rng);
      c.d1 = c.h1.cwiseMax(0.0).cwiseProduct(c.m1);
      c.a = model.router.fc2.W * c.d1 + model.router.fc2.b;
    } else {
      c.a = Eigen::VectorXd::Zero(M);
    }
    c.lse = logsumexp(c.a);
    if (forced_uniform) {
      c.pi = Eigen::VectorXd::Constant(M, 1.0 / static_cast<double>(M));
    } else {
      Eigen::VectorXd clipped =
          c.a.cwiseMax(-kRouterLogitClip).cwiseMin(kRouterLogitClip);
      c.pi = softmax(clipped / tau);
    }

    if (need_backbone) {
      LnCache ln = layer_norm_fwd(model.coeff.ln, c.x);
      c.xhat_c = std::move(ln.xhat);
      c.u_c = std::move(ln.out);
      c.h2 = model.coeff.fc1.W * c.u_c + model.coeff.fc1.b;
      c.m2 = dropout_mask(model.hidden, model.coeff.dropout, ctx.train_mode, drop_rng);
      c.d2 = c.h2.cwiseMax(0.0).cwiseProduct(c.m2);
    }

    c.f.resize(static_cast<std::size_t>(M));
    c.df_dtheta.resize(static_cast<std::size_t>(M));
    c.g.resize(M);
    for (int m = 0; m < M; ++m) {
      const ExpertEntry& e = model.experts[static_cast<std::size_t>(m)];
      const int slots = e.expr.constant_slots();
      std::vector<double> theta;
      if (model.coeff_mode == CoeffMode::Static) {
        theta = model.static_theta[static_cast<std::size_t>(m)];
      } else {
        theta = e.slot_defaults;
        if (adaptive && slots > 0) {
          const LinearLayer& head = model.coeff.heads[static_cast<std::size_t>(m)];
          Eigen::VectorXd residual = head.W * c.d2 + head.b;
          for (int s = 0; s < slots; ++s) theta[static_cast<std::size_t>(s)] += residual(s);
        }
      }
      Eigen::VectorXd df(slots);
      std::span<double> ds(df.data(), static_cast<std::size_t>(slots));
      c.f[static_cast<std::size_t>(m)] = eval_safe_grad(e.expr, xs, theta, model.guards, ds);
      c.df_dtheta[static_cast<std::size_t>(m)] = std::move(df);
      c.g(m) = e.gamma * c.f[static_cast<std::size_t>(m)] + e.beta;
    }

    c.zhat = c.pi.dot(c.g);
    c.ytilde = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
    c.w = y[static_cast<std::size_t>(i)] == 1 ? ctx.weight_pos : ctx.weight_neg;
    sum_w += c.w;
    task_sum += c.w * softplus(-c.ytilde * c.zhat);
    double h = 0.0;
    for (int m = 0; m < M; ++m) {
      if (c.pi(m) > 0.0) h -= c.pi(m) * std::log(c.pi(m));
    }
    ent_sum += h;
    lse_sq_sum += c.lse * c.lse;
    pibar += c.pi;
  }
  pibar /= static_cast<double>(B);
  // The forced-uniform mean is uniform by definition; bypass summation
  // rounding so the recorded routing is exact.
  if (forced_uniform) pibar = Eigen::VectorXd::Constant(M, 1.0 / static_cast<double>(M));

  LossComponents out;
  out.task = task_sum / sum_w;
  const bool kl_active = ctx.epoch >= cfg.warmup_epochs;
  if (kl_active) {
    double kl = 0.0;
    for (int m = 0; m < M; ++m) {
      if (pibar(m) > 0.0) kl += pibar(m) * std::log(static_cast<double>(M) * pibar(m));
    }
    out.kl = cfg.lambda_kl * kl;
  }
  out.ent = -cfg.lambda_ent * ent_sum / static_cast<double>(B);
  out.z = cfg.lambda_z * lse_sq_sum / static_cast<double>(B);

  // Batch output vectors per expert and the squared-cosine diversity term,
  // diagonal included.
  Eigen::MatrixXd G(B, M);
  for (int i = 0; i < B; ++i) G.row(i) = cache[static_cast<std::size_t>(i)].g.transpose();
  Eigen::VectorXd norms(M);
  for (int m = 0; m < M; ++m) norms(m) = G.col(m).norm();
  Eigen::MatrixXd cosine = Eigen::MatrixXd::Zero(M, M);
  double div_sum = 0.0;
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < M; ++n) {
      if (norms(m) > 0.0 && norms(n) > 0.0) {
        cosine(m, n) = G.col(m).dot(G.col(n)) / (norms(m) * norms(n));
      }
      div_sum += cosine(m, n) * cosine(m, n);
    }
  }
  out.div = cfg.lambda_div * div_sum / static_cast<double>(M * M);
  out.total = out.task + out.kl + out.ent + out.z + out.div;
  out.mean_pi = pibar;

  if (grad_out == nullptr) return out;

  MoEModel grads = model;
  {
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(flatten_params(model).size());
    unflatten_params(grads, zero);
  }

  // d(L_div)/dG, diagonal pairs contributing zero.
  Eigen::MatrixXd dG = Eigen::MatrixXd::Zero(B, M);
  const double div_scale = 4.0 * cfg.lambda_div / static_cast<double>(M * M);
  for (int m = 0; m < M; ++m) {
    if (!(norms(m) > 0.0)) continue;
    for (int n = 0; n < M; ++n) {
      if (n == m || !(norms(n) > 0.0)) continue;
      const double cmn = cosine(m, n);
      dG.col(m) += div_scale * cmn *
                   (G.col(n) / (norms(m) * norms(n)) - cmn * G.col(m) / (norms(m) * norms(m)));
    }
  }

  for (int i = 0; i < B; ++i) {
    SampleCache& c = cache[static_cast<std::size_t>(i)];
    const double dz = (c.w / sum_w) * (-c.ytilde) * sigmoid(-c.ytilde * c.zhat);

    Eigen::VectorXd dg = dz * c.pi + dG.row(i).transpose();
    Eigen::VectorXd dpi = dz * c.g;
    for (int m = 0; m < M; ++m) {
      if (c.pi(m) > 0.0) {
        dpi(m) += cfg.lambda_ent / static_cast<double>(B) * (std::log(c.pi(m)) + 1.0);
        if (kl_active && pibar(m) > 0.0) {
          dpi(m) += cfg.lambda_kl / static_cast<double>(B) *
                    (std::log(static_cast<double>(M) * pibar(m)) + 1.0);
        }
      }
    }

    Eigen::VectorXd dd2;
    if (need_backbone) dd2 = Eigen::VectorXd::Zero(model.hidden);
    for (int m = 0; m < M; ++m) {
      ExpertEntry& ge = grads.experts[static_cast<std::size_t>(m)];
      ge.gamma += dg(m) * c.f[static_cast<std::size_t>(m)];
      ge.beta += dg(m);
      const double df = dg(m) * model.experts[static_cast<std::size_t>(m)].gamma;
      const Eigen::VectorXd& dtheta_f = c.df_dtheta[static_cast<std::size_t>(m)];
      if (dtheta_f.size() == 0) continue;
      if (model.coeff_mode == CoeffMode::Static) {
        auto& gtheta = grads.static_theta[static_cast<std::size_t>(m)];
        for (Eigen::Index s = 0; s < dtheta_f.size(); ++s) {
          gtheta[static_cast<std::size_t>(s)] += df * dtheta_f(s);
        }
      } else if (adaptive) {
        const Eigen::VectorXd dtheta = df * dtheta_f;
        LinearLayer& ghead = grads.coeff.heads[static_cast<std::size_t>(m)];
        ghead.W += dtheta * c.d2.transpose();
        ghead.b += dtheta;
        dd2 += model.coeff.heads[static_cast<std::size_t>(m)].W.transpose() * dtheta;
      }
    }
    if (need_backbone) {
      Eigen::VectorXd dh2 = dd2.cwiseProduct(c.m2);
      for (int k = 0; k < model.hidden; ++k) {
        if (c.h2(k) <= 0.0) dh2(k) = 0.0;
      }
      grads.coeff.fc1.W += dh2 * c.u_c.transpose();
      grads.coeff.fc1.b += dh2;
      Eigen::VectorXd du = model.coeff.fc1.W.transpose() * dh2;
      grads.coeff.ln.gain += du.cwiseProduct(c.xhat_c);
      grads.coeff.ln.bias += du;
    }

    if (!router_active) continue;
    Eigen::VectorXd da = Eigen::VectorXd::Zero(M);
    if (cfg.lambda_z > 0.0) {
      da = (2.0 * cfg.lambda_z * c.lse / static_cast<double>(B)) * softmax(c.a);
    }
    if (!forced_uniform) {
      const double inner = c.pi.dot(dpi);
      Eigen::VectorXd ds = c.pi.cwiseProduct((dpi.array() - inner).matrix()) / tau;
      for (int m = 0; m < M; ++m) {
        if (std::abs(c.a(m)) < kRouterLogitClip) da(m) += ds(m);
      }
    }
    grads.router.fc2.W += da * c.d1.transpose();
    grads.router.fc2.b += da;
    Eigen::VectorXd dd1 = model.router.fc2.W.transpose() * da;
    Eigen::VectorXd dh1 = dd1.cwiseProduct(c.m1);
    for (int k = 0; k < model.hidden; ++k) {
      if (c.h1(k) <= 0.0) dh1(k) = 0.0;
    }
    grads.router.fc1.W += dh1 * c.u_r.transpose();
    grads.router.fc1.b += dh1;
    Eigen::VectorXd du = model.router.fc1.W.transpose() * dh1;
    grads.router.ln.gain += du.cwiseProduct(c.xhat_r);
    grads.router.ln.bias += du;
  }

  *grad_out = flatten_params(grads);
  return out;
}

namespace {

const char* worst_component(const LossComponents& l) {
  if (!std::isfinite(l.task)) return "task";
  if (!std::isfinite(l.kl)) return "kl";
  if (!std::isfinite(l.ent)) return "entropy";
  if (!std::isfinite(l.z)) return "z-regularizer";
  if (!std::isfinite(l.div)) return "diversity";
  return "total";
}

double holdout_mcc(MoEModel& model, double tau, const Eigen::MatrixXd& X,
                   const std::vector<int>& y, const std::vector<int>& rows, double threshold) {
  model.tau_eval = tau;
  std::vector<int> pred, truth;
  pred.reserve(rows.size());
  truth.reserve(rows.size());
  for (int r : rows) {
    Eigen::VectorXd x = X.row(r).transpose();
    const Prediction p = predict(model, {x.data(), static_cast<std::size_t>(x.size())});
    pred.push_back(p.p > threshold ? 1 : 0);
    truth.push_back(y[static_cast<std::size_t>(r)]);
  }
  return mcc(confusion(pred, truth));
}

}  // namespace

TrainResult train_moe(MoEModel model, const Eigen::MatrixXd& X, const std::vector<int>& y,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (X.rows() == 0 || static_cast<Eigen::Index>(y.size()) != X.rows()) {
    throw InputError("calibration rows and labels do not align");
  }
  if (X.cols() != model.d()) throw InputError("calibration width does not match the model");
  const int n = static_cast<int>(X.rows());
  int n_pos = 0;
  for (int v : y) n_pos += v == 1 ? 1 : 0;
  if (n_pos == 0 || n_pos == n) throw InputError("calibration data must contain both classes");

  // Stratified holdout for early stopping.
  std::vector<int> pos, neg;
  for (int i = 0; i < n; ++i) (y[static_cast<std::size_t>(i)] == 1 ? pos : neg).push_back(i);
  auto split_rng = make_rng(cfg.seed, 0x5B717);
  std::shuffle(pos.begin(), pos.end(), split_rng);
  std::shuffle(neg.begin(), neg.end(), split_rng);
  std::vector<int> train_rows, val_rows;
  auto take = [&](std::vector<int>& cls) {
    int k = static_cast<int>(std::lround(cfg.holdout_fraction * static_cast<double>(cls.size())));
    k = std::clamp(k, cls.size() > 1 ? 1 : 0, static_cast<int>(cls.size()) - 1);
    for (std::size_t i = 0; i < cls.size(); ++i) {
      (static_cast<int>(i) < k ? val_rows : train_rows).push_back(cls[i]);
    }
  };
  take(pos);
  take(neg);
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(val_rows.begin(), val_rows.end());
  if (train_rows.empty() || val_rows.empty()) {
    throw InputError("calibration set is too small to hold out a validation split");
  }

  int train_pos = 0;
  for (int r : train_rows) train_pos += y[static_cast<std::size_t>(r)] == 1 ? 1 : 0;
  const int train_n = static_cast<int>(train_rows.size());
  const double weight_pos =
      train_pos > 0 ? static_cast<double>(train_n) / (2.0 * train_pos) : 1.0;
  const double weight_neg = train_n - train_pos > 0
                                ? static_cast<double>(train_n) / (2.0 * (train_n - train_pos))
                                : 1.0;

  TrainResult result;
  result.notes.push_back("holdout " + std::to_string(val_rows.size()) + " of " +
                         std::to_string(n) + " calibration rows");

  Eigen::VectorXd params = flatten_params(model);
  const std::vector<bool> router_mask = router_param_mask(model);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(params.size());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(params.size());
  long long adam_t = 0;

  Eigen::VectorXd best_params = params;
  double best_tau = cfg.tau_at(0);
  int since_improved = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double tau = cfg.tau_at(epoch);
    const bool warmup = epoch < cfg.warmup_epochs;

    std::vector<int> order = train_rows;
    auto epoch_rng = make_rng(cfg.seed, 0xE70C000000000000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), epoch_rng);

    LossComponents epoch_loss;
    epoch_loss.mean_pi = Eigen::VectorXd::Zero(model.expert_count());
    int seen = 0;
    for (int start = 0, step = 0; start < static_cast<int>(order.size());
         start += cfg.batch_size, ++step) {
      const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(order.size()) - start);
      Eigen::MatrixXd bx(bsz, X.cols());
      std::vector<int> by(static_cast<std::size_t>(bsz));
      for (int i = 0; i < bsz; ++i) {
        bx.row(i) = X.row(order[static_cast<std::size_t>(start + i)]);
        by[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])];
      }
      LossContext ctx;
      ctx.X = &bx;
      ctx.y = &by;
      ctx.weight_pos = weight_pos;
      ctx.weight_neg = weight_neg;
      ctx.epoch = epoch;
      ctx.step = step;
      ctx.tau = tau;
      ctx.train_mode = true;
      ctx.seed = cfg.seed;

      Eigen::VectorXd grad;
      const LossComponents loss = moe_loss(model, cfg, ctx, &grad);
      if (!std::isfinite(loss.total)) {
        throw NumericError(std::string("non-finite training loss in the ") +
                           worst_component(loss) + " component at epoch " +
                           std::to_string(epoch));
      }

      if (warmup) {
        for (Eigen::Index p = 0; p < grad.size(); ++p) {
          if (router_mask[static_cast<std::size_t>(p)]) grad(p) = 0.0;
        }
      }
      const double gnorm = grad.norm();
      if (gnorm > cfg.grad_clip) grad *= cfg.grad_clip / gnorm;

      ++adam_t;
      const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(adam_t));
      const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(adam_t));
      for (Eigen::Index p = 0; p < params.size(); ++p) {
        m1(p) = 0.9 * m1(p) + 0.1 * grad(p);
        m2(p) = 0.999 * m2(p) + 0.001 * grad(p) * grad(p);
        const double lr =
            cfg.lr * (router_mask[static_cast<std::size_t>(p)] ? cfg.router_lr_mult
                                                               : cfg.expert_lr_mult);
        params(p) -= lr * (m1(p) / bc1) / (std::sqrt(m2(p) / bc2) + 1e-8);
      }
      unflatten_params(model, params);

      epoch_loss.total += loss.total * bsz;
      epoch_loss.task += loss.task * bsz;
      epoch_loss.kl += loss.kl * bsz;
      epoch_loss.ent += loss.ent * bsz;
      epoch_loss.z += loss.z * bsz;
      epoch_loss.div += loss.div * bsz;
      epoch_loss.mean_pi += loss.mean_pi * bsz;
      seen += bsz;
    }
    epoch_loss.total /= seen;
    epoch_loss.task /= seen;
    epoch_loss.kl /= seen;
    epoch_loss.ent /= seen;
    epoch_loss.z /= seen;
    epoch_loss.div /= seen;
    epoch_loss.mean_pi /= seen;
    if (warmup) {
      epoch_loss.mean_pi =
          Eigen::VectorXd::Constant(model.expert_count(), 1.0 / model.expert_count());
    }

    const double val = holdout_mcc(model, tau, X, y, val_rows, cfg.decision_threshold);

    double entropy_sum = 0.0;
    for (int r : train_rows) {
      Eigen::VectorXd x = X.row(r).transpose();
      const Eigen::VectorXd pi =
          route(model, {x.data(), static_cast<std::size_t>(x.size())}, tau);
      for (Eigen::Index mI = 0; mI < pi.size(); ++mI) {
        if (pi(mI) > 0.0) entropy_sum -= pi(mI) * std::log(pi(mI));
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.tau = tau;
    log.train_loss = epoch_loss;
    log.val_mcc = val;
    log.routing_entropy = entropy_sum / static_cast<double>(train_rows.size());
    log.improved = result.best_epoch < 0 || val > result.best_val_mcc;
    result.log.push_back(log);

    if (log.improved) {
      result.best_epoch = epoch;
      result.best_val_mcc = val;
      best_params = params;
      best_tau = tau;
      since_improved = 0;
    } else if (++since_improved >= cfg.patience) {
      result.early_stopped = true;
      result.notes.push_back("early stop at epoch " + std::to_string(epoch) +
                             ", patience " + std::to_string(cfg.patience) + " exhausted");
      break;
    }
  }

  unflatten_params(model, best_params);
  model.tau_eval = best_tau;
  result.notes.push_back("restored best checkpoint from epoch " +
                         std::to_string(result.best_epoch) + " (val mcc " +
                         std::to_string(result.best_val_mcc) + ", tau " +
                         std::to_string(best_tau) + ")");
  result.model = std::move(model);
  return result;
}

}  // namespace pasm
