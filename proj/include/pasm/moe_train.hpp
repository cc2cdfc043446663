#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pasm/moe.hpp"

namespace pasm {

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 100;
  int patience = 10;
  int batch_size = 32;
  double grad_clip = 1.0;  // global gradient-norm ceiling
  double lambda_kl = 0.01;
  double lambda_ent = 0.001;
  double lambda_z = 0.001;
  double lambda_div = 0.01;
  double tau_init = 2.0;
  double tau_final = 0.5;
  int anneal_epochs = 30;
  int warmup_epochs = 5;  // routing pinned uniform, router gradients off
  double router_lr_mult = 1.0;
  double expert_lr_mult = 1.0;
  double holdout_fraction = 0.2;  // early-stopping split of the calibration set
  double decision_threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  double tau_at(int epoch) const;
};

struct LossComponents {
  double total = 0.0;
  double task = 0.0;
  double kl = 0.0;
  double ent = 0.0;
  double z = 0.0;
  double div = 0.0;
  Eigen::VectorXd mean_pi;  // batch-mean routing, for the uniformity logs
};

struct LossContext {
  const Eigen::MatrixXd* X = nullptr;  // batch rows
  const std::vector<int>* y = nullptr;
  double weight_pos = 1.0;  // inverse-frequency class weights
  double weight_neg = 1.0;
  int epoch = 0;
  int step = 0;
  double tau = 1.0;
  bool train_mode = true;  // dropout active; mask keyed by (seed, epoch, step)
  std::uint64_t seed = 0;
};

// Composite objective: weighted soft-margin task loss, KL(batch-mean routing
// || uniform) after warmup, negative routing entropy, squared logsumexp of
// the raw router logits, and the squared cosine similarity of expert output
// vectors (diagonal included). Deterministic per identical call.
LossComponents moe_loss(const MoEModel& model, const TrainConfig& cfg, const LossContext& ctx,
                        Eigen::VectorXd* grad_out = nullptr);

struct EpochLog {
  int epoch = 0;
  double tau = 0.0;
  LossComponents train_loss;  // mean_pi holds the epoch's training-mean routing
  double val_mcc = 0.0;
  bool improved = false;
  double routing_entropy = 0.0;  // eval-mode mean entropy over the epoch's data
};

struct TrainResult {
  MoEModel model;
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_val_mcc = 0.0;
  bool early_stopped = false;
  std::vector<std::string> notes;
};

// Joint training of router, coefficient network, and per-expert calibration
// under Adam with gradient-norm clipping and linear temperature annealing.
// Early stopping tracks MCC on a seeded holdout of the calibration rows and
// restores the best checkpoint (including its temperature). Throws
// NumericError on a non-finite loss, naming the offending component.
TrainResult train_moe(MoEModel model, const Eigen::MatrixXd& X, const std::vector<int>& y,
                      const TrainConfig& cfg);

}  // namespace pasm
