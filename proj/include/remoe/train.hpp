#pragma once

// Toy router fine-tuning: piecewise-stationary hidden states, a gate trained
// with the locality objective, and per-step logs.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "remoe/objective.hpp"

namespace remoe {

enum class Optimizer { kAdam, kGradientDescent };

struct TrainConfig {
  int steps = 500;
  double lr = 1e-2;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 0;  // order in which sequences are visited
  double clip_norm = 1.0;  // <= 0 disables clipping
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Segments of `switch_every` steps share a mean vector; each hidden state is
/// that mean plus isotropic Gaussian noise.
struct ToyBenchmark {
  int hidden_dim = 8;
  int n_experts = 16;
  int top_k = 2;
  int n_sequences = 8;
  int seq_len = 64;
  int switch_every = 16;
  double noise = 1.0;
  double init_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ToyData {
  std::vector<Eigen::MatrixXd> sequences;  // each seq_len x hidden_dim
  Eigen::MatrixXd theta_init;              // hidden_dim x n_experts
  int top_k = 0;
};

ToyData make_toy_benchmark(const ToyBenchmark& cfg);

/// Mean over sequences of the EOR of topk(P_t) under theta.
double routing_eor(const Eigen::MatrixXd& theta, const std::vector<Eigen::MatrixXd>& sequences, int k);

/// Mean over sequences of the trust term.
double mean_trust_kl(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                     const std::vector<Eigen::MatrixXd>& sequences);

struct TrainLogRow {
  long step = 0;
  LossBreakdown loss;  // on the sequence used for this step
  double eor = 0.0;    // over all sequences, before the update
  double grad_norm = 0.0;  // before clipping
};

struct TrainResult {
  Eigen::MatrixXd theta;
  std::vector<TrainLogRow> log;
  double initial_eor = 0.0;
  double final_eor = 0.0;
  double final_trust_kl = 0.0;
  LossBreakdown final_loss;  // mean over sequences at the last step
};

class TrainDivergence : public std::runtime_error {
 public:
  TrainDivergence(long step, const std::string& what) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// theta0 is a copy of theta_init. One optimizer step per training step on a
/// single sequence, visiting sequences round-robin in a seeded order.
TrainResult train(const Eigen::MatrixXd& theta_init, const std::vector<Eigen::MatrixXd>& sequences, int k,
                  const TrainConfig& cfg, const LossWeights& w);

/// Columns: step, total, trust_kl, reuse_rho, reuse, smooth, lag, ws,
/// alpha_reuse, alpha_loc, eor, grad_norm.
std::string train_log_csv(const std::vector<TrainLogRow>& log);

}  // namespace remoe
