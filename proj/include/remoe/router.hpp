#pragma once

// Softmax gate, deterministic Top-K and the distribution-level stability
// checks (probability margin and Pinsker).

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "remoe/topk.hpp"

namespace remoe {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Max-subtracted softmax of every row.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (!logits.allFinite()) throw std::domain_error("softmax_rows: non-finite logits");
  MatrixX<Scalar> out = logits.colwise() - logits.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

/// Row-wise log-softmax, exact for probabilities far below 1e-300.
template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (!logits.allFinite()) throw std::domain_error("log_softmax_rows: non-finite logits");
  MatrixX<Scalar> shifted = logits.colwise() - logits.rowwise().maxCoeff();
  const VectorX<Scalar> lse = shifted.array().exp().rowwise().sum().log().matrix();
  shifted.colwise() -= lse;
  return shifted;
}

/// P = softmax(h^T theta) for one hidden state.
template <typename DerivedH, typename DerivedTheta>
VectorX<typename DerivedTheta::Scalar> gate_forward(const Eigen::MatrixBase<DerivedH>& h,
                                                    const Eigen::MatrixBase<DerivedTheta>& theta) {
  if (h.size() != theta.rows()) throw std::invalid_argument("gate_forward: shape mismatch");
  const auto logits = (h.transpose() * theta).eval();
  return softmax_rows(logits).transpose();
}

/// Row t of the result is P_t for hidden state row t of `hidden` (T x d).
template <typename DerivedH, typename DerivedTheta>
MatrixX<typename DerivedTheta::Scalar> gate_forward_seq(const Eigen::MatrixBase<DerivedH>& hidden,
                                                        const Eigen::MatrixBase<DerivedTheta>& theta) {
  if (hidden.cols() != theta.rows()) throw std::invalid_argument("gate_forward_seq: shape mismatch");
  return softmax_rows((hidden * theta).eval());
}

template <typename Derived>
ExpertList topk(const Eigen::MatrixBase<Derived>& p, int k) {
  std::vector<typename Derived::Scalar> values(static_cast<std::size_t>(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) values[static_cast<std::size_t>(i)] = p(i);
  if (k > static_cast<int>(values.size())) throw std::invalid_argument("topk: k exceeds N_r");
  return topk(std::span<const typename Derived::Scalar>(values), k);
}

/// Trainable gate weights (d x N_r) with a frozen copy of their initial value.
class GateParams {
 public:
  explicit GateParams(Eigen::MatrixXd initial) : theta_(initial), theta0_(std::move(initial)) {}

  const Eigen::MatrixXd& theta() const { return theta_; }
  Eigen::MatrixXd& theta() { return theta_; }
  const Eigen::MatrixXd& reference() const { return theta0_; }

  Eigen::Index hidden_dim() const { return theta_.rows(); }
  Eigen::Index n_experts() const { return theta_.cols(); }

 private:
  Eigen::MatrixXd theta_;
  const Eigen::MatrixXd theta0_;
};

/// gamma = q_(K) - q_(K+1) of the descending-sorted entries. Requires k < n.
double probability_margin(std::span<const double> q, int k);

struct StabilityVerdict {
  double margin = 0.0;        // gamma of the reference distribution
  double sup_distance = 0.0;  // ||P - Q||_inf
  bool condition_met = false; // sup_distance < gamma / 2
  bool sets_equal = false;
  /// False only when the margin condition holds but the sets differ.
  bool holds() const { return !condition_met || sets_equal; }
};

StabilityVerdict stability_check(std::span<const double> q, std::span<const double> p, int k);

struct PinskerVerdict {
  double l1 = 0.0;
  double bound = 0.0;  // sqrt(2 KL(P || Q))
  bool holds = false;
};

/// KL(P || Q) with Q clamped below by 1e-12 and 0 log 0 = 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

PinskerVerdict pinsker_check(std::span<const double> p, std::span<const double> q);

/// Draws P within sup-distance < radius of Q that still lies on the simplex
/// (uniform box perturbation, mean-corrected, rejection-sampled).
std::vector<double> perturb_within(std::span<const double> q, double radius, std::mt19937_64& rng);

/// Flat Dirichlet-style draw on the simplex.
std::vector<double> random_distribution(int n, double concentration, std::mt19937_64& rng);

struct StabilityCampaign {
  std::size_t trials = 0;
  std::size_t condition_met = 0;
  std::size_t top_k_changes = 0;  // must stay 0
};

StabilityCampaign run_stability_campaign(std::size_t trials, std::uint64_t seed);

struct PinskerCampaign {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;  // max l1 / bound
};

PinskerCampaign run_pinsker_campaign(std::size_t trials, std::uint64_t seed);

/// Gate file: 8-byte magic "RMGATE01", uint32 endianness tag 0x01020304,
/// uint32 reserved, uint64 rows, uint64 cols, then rows*cols float64 in
/// row-major order. A JSON sidecar `<path>.json` repeats the shape.
void save_gate(const std::string& path, const Eigen::MatrixXd& theta);
Eigen::MatrixXd load_gate(const std::string& path);

}  // namespace remoe
