#pragma once

// Locality objective for router-only fine-tuning: trust KL to a frozen gate,
// reuse mass, adjacent and lagged symmetric KL, and windowed entropy, with
// hand-derived gradients with respect to the gate weights.
//
// Conventions for one sequence of T steps (0-based t):
//   P_t   = softmax(h_t^T theta),  R_t = softmax(h_t^T theta0)
//   E_t   = topk(P_t, K), treated as a constant
//   m_t   = (1/K) sum_{i in E_{t-1}} P_t,i            t = 1..T-1
//   rho   = mean m_t,  reuse = -log(rho + eps)
//   trust = (1/T) sum_t KL(P_t || R_t)
//   smooth= mean_{t>=1} SymKL(P_t, P_{t-1})
//   lag   = (1/(T-1)) sum_{t>=1} (1/|D|) sum_{d in D, t-d>=0} SymKL(P_t, P_{t-d})
//   ws    = (1/n) sum_b H(mean of window b), n = floor(T/W)
// KL clamps its second argument below by 1e-12.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "remoe/router.hpp"
#include "remoe/topk.hpp"

namespace remoe {

inline constexpr double kKlClamp = 1e-12;

struct LossWeights {
  double lambda_kl = 0.45;
  double lambda_reuse = 0.2;
  double lambda_smooth = 0.05;
  double lambda_lag = 0.05;
  double lambda_ws = 0.01;
  std::vector<int> lags{1, 2, 4, 8, 16};
  int window = 16;
  int warm_reuse_steps = 400;
  int warm_loc_steps = 800;
  double eps = 1e-8;
  bool lag_normalize_by_valid = false;  // divide by the number of lags that fit
  bool ws_include_partial = false;      // trailing window weighted by its fill ratio

  /// Throws std::invalid_argument on a broken invariant.
  void validate() const;
  double alpha_reuse(long step) const;
  double alpha_loc(long step) const;
};

template <typename Scalar>
struct LossBreakdownT {
  Scalar trust_kl = 0;
  Scalar reuse_rho = 0;
  Scalar reuse_loss = 0;
  Scalar smooth = 0;
  Scalar lag = 0;
  Scalar ws = 0;
  Scalar total = 0;
  double alpha_reuse = 0.0;
  double alpha_loc = 0.0;
};
using LossBreakdown = LossBreakdownT<double>;

/// The pieces of the objective that can be evaluated or differentiated alone.
enum class LossTerm { kTrust, kReuse, kSmooth, kLag, kWs, kTotal };
const char* to_string(LossTerm term);
inline constexpr LossTerm kAllLossTerms[] = {LossTerm::kTrust, LossTerm::kReuse, LossTerm::kSmooth,
                                             LossTerm::kLag,   LossTerm::kWs,    LossTerm::kTotal};

// Distribution-level building blocks. Rows of a sequence matrix are steps.

double reuse_mass(std::span<const double> p, std::span<const ExpertId> prev_set, int k);

struct ReuseValue {
  double rho = 0.0;
  double loss = 0.0;
};
ReuseValue reuse_loss(const Eigen::MatrixXd& probs, const std::vector<ExpertList>& routed, int k,
                      double eps = 1e-8);

double kl_div(std::span<const double> p, std::span<const double> q);
double sym_kl(std::span<const double> p, std::span<const double> q);
double trust_loss(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& ref);
double smooth_loss(const Eigen::MatrixXd& probs);
double lag_loss(const Eigen::MatrixXd& probs, std::span<const int> lags, bool normalize_by_valid = false);
double ws_loss(const Eigen::MatrixXd& probs, int window, bool include_partial = false);

/// Forward pass and every term for one hidden sequence (T x d). `step` is the
/// training step that drives the warmup coefficients.
template <typename Scalar>
LossBreakdownT<Scalar> evaluate_objective(const MatrixX<Scalar>& theta, const MatrixX<Scalar>& theta0,
                                          const MatrixX<Scalar>& hidden, int k, const LossWeights& w,
                                          long step);

LossBreakdown total_objective(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                              const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step);

/// Unweighted value of one term (the weighted total for kTotal).
template <typename Scalar>
Scalar term_value(LossTerm term, const MatrixX<Scalar>& theta, const MatrixX<Scalar>& theta0,
                  const MatrixX<Scalar>& hidden, int k, const LossWeights& w, long step);

/// Analytic d(term)/d(theta), d x N_r.
Eigen::MatrixXd term_gradient(LossTerm term, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                              const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step);

Eigen::MatrixXd grad_total(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                           const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step);

/// Central differences of term_value evaluated in Scalar precision.
template <typename Scalar>
Eigen::MatrixXd fd_gradient(LossTerm term, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                            const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step,
                            double h);

/// max |a - f| / (|f| + 1e-8) over all coordinates.
double max_relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& fd);

/// Smallest q_(K) - q_(K+1) over the steps of P(theta); the routed sets are
/// locally constant when this is well above the FD step.
double min_topk_margin(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& hidden, int k);

struct GradcheckInstance {
  Eigen::MatrixXd theta;
  Eigen::MatrixXd theta0;
  Eigen::MatrixXd hidden;
  int k = 1;
  long step = 0;
};

/// Random instance with d <= 8, N_r <= 16, T <= 32, theta != theta0 and a
/// Top-K margin of at least `min_margin` at every step.
GradcheckInstance random_gradcheck_instance(std::mt19937_64& rng, double min_margin = 1e-4);

struct GradcheckResult {
  int instances = 0;
  double h = 0.0;
  double max_rel_error[6] = {0, 0, 0, 0, 0, 0};  // indexed like kAllLossTerms
  double worst() const;
};

GradcheckResult run_gradcheck(int instances, std::uint64_t seed, const LossWeights& w, double h = 1e-5,
                              bool extended_precision = true);

struct McReuseResult {
  double estimate = 0.0;  // mean number of the K draws that land in prev_set
  double expected = 0.0;  // K^2 m
  double abs_error = 0.0;
  double stderr_ = 0.0;
  double z = 0.0;  // abs_error / stderr_, 0 when both vanish
};

/// Monte Carlo estimate of the expected number of reused draws when K experts
/// are sampled i.i.d. from P.
McReuseResult mc_reuse_expectation(std::span<const double> p, std::span<const ExpertId> prev_set, int k,
                                   std::size_t n_samples, std::uint64_t seed);

}  // namespace remoe
