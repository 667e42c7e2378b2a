#include "remoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "remoe/metrics.hpp"
#include "remoe/report.hpp"

namespace remoe {

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("TrainConfig: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw std::invalid_argument("TrainConfig: adam_eps must be > 0");
}

void ToyBenchmark::validate() const {
  if (hidden_dim < 1 || n_experts < 2) throw std::invalid_argument("ToyBenchmark: bad shape");
  if (top_k < 1 || top_k >= n_experts) throw std::invalid_argument("ToyBenchmark: requires 1 <= top_k < n_experts");
  if (n_sequences < 1) throw std::invalid_argument("ToyBenchmark: needs at least one sequence");
  if (seq_len < 2) throw std::invalid_argument("ToyBenchmark: seq_len must be >= 2");
  if (switch_every < 1) throw std::invalid_argument("ToyBenchmark: switch_every must be >= 1");
  if (!(noise >= 0.0) || !(init_scale > 0.0)) throw std::invalid_argument("ToyBenchmark: bad noise or init scale");
}

ToyData make_toy_benchmark(const ToyBenchmark& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ToyData out;
  out.top_k = cfg.top_k;
  out.theta_init.resize(cfg.hidden_dim, cfg.n_experts);
  for (Eigen::Index i = 0; i < out.theta_init.size(); ++i) {
    out.theta_init(i) = cfg.init_scale * normal(rng) / std::sqrt(static_cast<double>(cfg.hidden_dim));
  }
  for (int s = 0; s < cfg.n_sequences; ++s) {
    Eigen::MatrixXd h(cfg.seq_len, cfg.hidden_dim);
    Eigen::RowVectorXd mean(cfg.hidden_dim);
    for (int t = 0; t < cfg.seq_len; ++t) {
      if (t % cfg.switch_every == 0) {
        for (int j = 0; j < cfg.hidden_dim; ++j) mean(j) = normal(rng);
      }
      for (int j = 0; j < cfg.hidden_dim; ++j) h(t, j) = mean(j) + cfg.noise * normal(rng);
    }
    out.sequences.push_back(std::move(h));
  }
  return out;
}

double routing_eor(const Eigen::MatrixXd& theta, const std::vector<Eigen::MatrixXd>& sequences, int k) {
  if (sequences.empty()) throw std::invalid_argument("routing_eor: no sequences");
  double sum = 0.0;
  for (const auto& seq : sequences) {
    if (seq.rows() < 2) throw std::invalid_argument("routing_eor: sequence needs T >= 2");
    const Eigen::MatrixXd p = gate_forward_seq(seq, theta);
    ExpertList prev = topk(p.row(0), k);
    double ir = 0.0;
    for (Eigen::Index t = 1; t < p.rows(); ++t) {
      ExpertList cur = topk(p.row(t), k);
      ir += instantaneous_reuse(prev, cur, k);
      prev = std::move(cur);
    }
    sum += ir / static_cast<double>(p.rows() - 1);
  }
  return sum / static_cast<double>(sequences.size());
}

double mean_trust_kl(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                     const std::vector<Eigen::MatrixXd>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("mean_trust_kl: no sequences");
  double sum = 0.0;
  for (const auto& seq : sequences) {
    sum += trust_loss(gate_forward_seq(seq, theta), gate_forward_seq(seq, theta0));
  }
  return sum / static_cast<double>(sequences.size());
}

namespace {

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.total) && std::isfinite(b.trust_kl) && std::isfinite(b.reuse_loss) &&
         std::isfinite(b.smooth) && std::isfinite(b.lag) && std::isfinite(b.ws);
}

}  // namespace

TrainResult train(const Eigen::MatrixXd& theta_init, const std::vector<Eigen::MatrixXd>& sequences, int k,
                  const TrainConfig& cfg, const LossWeights& w) {
  cfg.validate();
  w.validate();
  if (sequences.empty()) throw std::invalid_argument("train: needs at least one sequence");

  GateParams gate(theta_init);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);

  Eigen::MatrixXd m1 = Eigen::MatrixXd::Zero(theta_init.rows(), theta_init.cols());
  Eigen::MatrixXd m2 = m1;
  double beta1_pow = 1.0;
  double beta2_pow = 1.0;

  TrainResult out;
  out.log.reserve(static_cast<std::size_t>(cfg.steps));
  out.initial_eor = routing_eor(gate.theta(), sequences, k);
  for (long step = 1; step <= cfg.steps; ++step) {
    const Eigen::MatrixXd& seq = sequences[order[static_cast<std::size_t>(step - 1) % order.size()]];
    TrainLogRow row;
    row.step = step;
    try {
      row.loss = total_objective(gate.theta(), gate.reference(), seq, k, w, step);
    } catch (const std::domain_error& e) {
      throw TrainDivergence(step, fmt::format("train: {} at step {}", e.what(), step));
    }
    if (!finite(row.loss)) throw TrainDivergence(step, fmt::format("train: non-finite loss at step {}", step));
    row.eor = step == 1 ? out.initial_eor : routing_eor(gate.theta(), sequences, k);

    Eigen::MatrixXd g = grad_total(gate.theta(), gate.reference(), seq, k, w, step);
    row.grad_norm = g.norm();
    if (!std::isfinite(row.grad_norm)) {
      throw TrainDivergence(step, fmt::format("train: non-finite gradient at step {}", step));
    }
    if (cfg.clip_norm > 0.0 && row.grad_norm > cfg.clip_norm) g *= cfg.clip_norm / row.grad_norm;

    if (cfg.optimizer == Optimizer::kAdam) {
      m1 = cfg.adam_beta1 * m1 + (1.0 - cfg.adam_beta1) * g;
      m2 = cfg.adam_beta2 * m2 + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
      beta1_pow *= cfg.adam_beta1;
      beta2_pow *= cfg.adam_beta2;
      const Eigen::ArrayXXd m_hat = m1.array() / (1.0 - beta1_pow);
      const Eigen::ArrayXXd v_hat = m2.array() / (1.0 - beta2_pow);
      gate.theta().array() -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    } else {
      gate.theta() -= cfg.lr * g;
    }
    if (!gate.theta().allFinite()) {
      throw TrainDivergence(step, fmt::format("train: non-finite gate weights after step {}", step));
    }
    out.log.push_back(row);
  }

  out.theta = gate.theta();
  out.final_eor = routing_eor(out.theta, sequences, k);
  out.final_trust_kl = mean_trust_kl(out.theta, gate.reference(), sequences);
  LossBreakdown& f = out.final_loss;
  for (const auto& seq : sequences) {
    const LossBreakdown b = total_objective(out.theta, gate.reference(), seq, k, w, cfg.steps);
    f.trust_kl += b.trust_kl;
    f.reuse_rho += b.reuse_rho;
    f.reuse_loss += b.reuse_loss;
    f.smooth += b.smooth;
    f.lag += b.lag;
    f.ws += b.ws;
    f.total += b.total;
    f.alpha_reuse = b.alpha_reuse;
    f.alpha_loc = b.alpha_loc;
  }
  const double n = static_cast<double>(sequences.size());
  for (double* v : {&f.trust_kl, &f.reuse_rho, &f.reuse_loss, &f.smooth, &f.lag, &f.ws, &f.total}) *v /= n;
  if (!std::isfinite(out.final_eor) || !finite(f)) {
    throw TrainDivergence(cfg.steps, "train: non-finite final evaluation");
  }
  return out;
}

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  CsvTable table({"step", "total", "trust_kl", "reuse_rho", "reuse", "smooth", "lag", "ws", "alpha_reuse",
                  "alpha_loc", "eor", "grad_norm"});
  for (const auto& r : log) {
    table.add_row({std::to_string(r.step), format_double(r.loss.total), format_double(r.loss.trust_kl),
                   format_double(r.loss.reuse_rho), format_double(r.loss.reuse_loss), format_double(r.loss.smooth),
                   format_double(r.loss.lag), format_double(r.loss.ws), format_double(r.loss.alpha_reuse),
                   format_double(r.loss.alpha_loc), format_double(r.eor), format_double(r.grad_norm)});
  }
  return table.str();
}

}  // namespace remoe
