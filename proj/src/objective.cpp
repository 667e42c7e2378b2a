#include "remoe/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace remoe {

void LossWeights::validate() const {
  for (double v : {lambda_kl, lambda_reuse, lambda_smooth, lambda_lag, lambda_ws}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
  }
  if (lags.empty()) throw std::invalid_argument("LossWeights: lag set is empty");
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (lags[i] < 1) throw std::invalid_argument("LossWeights: lags must be positive");
    if (i > 0 && lags[i] <= lags[i - 1]) throw std::invalid_argument("LossWeights: lags must be strictly ascending");
  }
  if (window < 1) throw std::invalid_argument("LossWeights: window must be >= 1");
  if (!(eps > 0.0)) throw std::invalid_argument("LossWeights: eps must be > 0");
  if (warm_reuse_steps < 0 || warm_loc_steps < 0) throw std::invalid_argument("LossWeights: negative warmup");
}

namespace {

double warmup(long step, int warm) {
  if (warm <= 0) return 1.0;
  return std::clamp(static_cast<double>(step) / warm, 0.0, 1.0);
}

}  // namespace

double LossWeights::alpha_reuse(long step) const { return warmup(step, warm_reuse_steps); }
double LossWeights::alpha_loc(long step) const { return warmup(step, warm_loc_steps); }

const char* to_string(LossTerm term) {
  switch (term) {
    case LossTerm::kTrust: return "trust";
    case LossTerm::kReuse: return "reuse";
    case LossTerm::kSmooth: return "smooth";
    case LossTerm::kLag: return "lag";
    case LossTerm::kWs: return "ws";
    case LossTerm::kTotal: return "total";
  }
  return "?";
}

namespace {

// Probabilities and their logs, one row per step.
template <typename S>
struct Dists {
  MatrixX<S> p;
  MatrixX<S> logp;

  Eigen::Index steps() const { return p.rows(); }
  Eigen::Index width() const { return p.cols(); }
};

template <typename S>
Dists<S> from_logits(const MatrixX<S>& logits) {
  Dists<S> d;
  d.logp = log_softmax_rows(logits);
  d.p = d.logp.array().exp().matrix();
  return d;
}

Dists<double> from_probs(const Eigen::MatrixXd& probs) {
  if (probs.rows() == 0 || probs.cols() == 0) throw std::invalid_argument("empty distribution sequence");
  if ((probs.array() < 0.0).any() || !probs.allFinite()) {
    throw std::invalid_argument("distribution sequence has negative or non-finite entries");
  }
  return {probs, probs.array().log().matrix()};
}

template <typename S>
S clamped_log(S p, S logp) {
  using std::log;
  return p >= S(kKlClamp) ? logp : log(S(kKlClamp));
}

// KL(row a of x || row b of y).
template <typename S>
S kl_rows(const Dists<S>& x, Eigen::Index a, const Dists<S>& y, Eigen::Index b) {
  S kl = 0;
  for (Eigen::Index i = 0; i < x.width(); ++i) {
    const S p = x.p(a, i);
    if (p > S(0)) kl += p * (x.logp(a, i) - clamped_log(y.p(b, i), y.logp(b, i)));
  }
  return kl;
}

template <typename S>
S sym_rows(const Dists<S>& x, Eigen::Index a, Eigen::Index b) {
  return S(0.5) * (kl_rows(x, a, x, b) + kl_rows(x, b, x, a));
}

template <typename S>
S trust_value(const Dists<S>& p, const Dists<S>& r) {
  S sum = 0;
  for (Eigen::Index t = 0; t < p.steps(); ++t) sum += kl_rows(p, t, r, t);
  return sum / S(p.steps());
}

template <typename S>
S rho_value(const Dists<S>& p, const std::vector<ExpertList>& routed, int k) {
  S sum = 0;
  for (Eigen::Index t = 1; t < p.steps(); ++t) {
    S m = 0;
    for (ExpertId e : routed[static_cast<std::size_t>(t - 1)]) m += p.p(t, e);
    sum += m / S(k);
  }
  return sum / S(p.steps() - 1);
}

template <typename S>
S smooth_value(const Dists<S>& p) {
  S sum = 0;
  for (Eigen::Index t = 1; t < p.steps(); ++t) sum += sym_rows(p, t, t - 1);
  return sum / S(p.steps() - 1);
}

int valid_lags(std::span<const int> lags, Eigen::Index t) {
  return static_cast<int>(std::count_if(lags.begin(), lags.end(), [t](int d) { return t - d >= 0; }));
}

template <typename S>
S lag_value(const Dists<S>& p, std::span<const int> lags, bool by_valid) {
  S sum = 0;
  for (Eigen::Index t = 1; t < p.steps(); ++t) {
    const int norm = by_valid ? valid_lags(lags, t) : static_cast<int>(lags.size());
    if (norm == 0) continue;
    S inner = 0;
    for (int d : lags) {
      if (t - d >= 0) inner += sym_rows(p, t, t - d);
    }
    sum += inner / S(norm);
  }
  return sum / S(p.steps() - 1);
}

struct Window {
  Eigen::Index begin = 0;
  Eigen::Index len = 0;
  double weight = 1.0;  // already divided by the sum of weights
};

std::vector<Window> windows(Eigen::Index steps, int w, bool include_partial) {
  std::vector<Window> out;
  const Eigen::Index full = steps / w;
  for (Eigen::Index b = 0; b < full; ++b) out.push_back({b * w, w, 1.0});
  const Eigen::Index rest = steps - full * w;
  if (include_partial && rest > 0) out.push_back({full * w, rest, static_cast<double>(rest) / w});
  double total = 0.0;
  for (const auto& win : out) total += win.weight;
  for (auto& win : out) win.weight /= total;
  return out;
}

template <typename S>
S ws_value(const Dists<S>& p, int w, bool include_partial) {
  using std::log;
  S sum = 0;
  for (const Window& win : windows(p.steps(), w, include_partial)) {
    const Eigen::Matrix<S, 1, Eigen::Dynamic> mean = p.p.middleRows(win.begin, win.len).colwise().mean();
    S h = 0;
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
      if (mean(i) > S(0)) h -= mean(i) * log(mean(i));
    }
    sum += S(win.weight) * h;
  }
  return sum;
}

void check_shapes(Eigen::Index theta_rows, Eigen::Index theta_cols, Eigen::Index theta0_rows,
                  Eigen::Index theta0_cols, Eigen::Index hidden_rows, Eigen::Index hidden_cols, int k) {
  if (theta_rows != theta0_rows || theta_cols != theta0_cols) {
    throw std::invalid_argument("objective: theta and theta0 shapes differ");
  }
  if (hidden_cols != theta_rows) throw std::invalid_argument("objective: hidden width != gate rows");
  if (hidden_rows < 2) throw std::invalid_argument("objective: sequence needs T >= 2");
  if (k < 1 || k > theta_cols) throw std::invalid_argument("objective: requires 1 <= K <= N_r");
}

template <typename S>
std::vector<ExpertList> routed_sets(const Dists<S>& p, int k) {
  std::vector<ExpertList> out;
  out.reserve(static_cast<std::size_t>(p.steps()));
  for (Eigen::Index t = 0; t < p.steps(); ++t) out.push_back(topk(p.p.row(t), k));
  return out;
}

template <typename S>
struct Forward {
  Dists<S> p;
  Dists<S> ref;
  std::vector<ExpertList> routed;
};

template <typename S>
Forward<S> forward(const MatrixX<S>& theta, const MatrixX<S>& theta0, const MatrixX<S>& hidden, int k) {
  check_shapes(theta.rows(), theta.cols(), theta0.rows(), theta0.cols(), hidden.rows(), hidden.cols(), k);
  Forward<S> f;
  f.p = from_logits<S>(hidden * theta);
  f.ref = from_logits<S>(hidden * theta0);
  f.routed = routed_sets(f.p, k);
  return f;
}

}  // namespace

double kl_div(std::span<const double> p, std::span<const double> q) { return kl_divergence(p, q); }

double sym_kl(std::span<const double> p, std::span<const double> q) {
  return 0.5 * (kl_divergence(p, q) + kl_divergence(q, p));
}

double reuse_mass(std::span<const double> p, std::span<const ExpertId> prev_set, int k) {
  if (static_cast<int>(prev_set.size()) != k) throw std::invalid_argument("reuse_mass: prev_set size != K");
  double m = 0.0;
  for (ExpertId e : prev_set) {
    if (e < 0 || static_cast<std::size_t>(e) >= p.size()) throw std::invalid_argument("reuse_mass: expert out of range");
    m += p[static_cast<std::size_t>(e)];
  }
  return m / k;
}

ReuseValue reuse_loss(const Eigen::MatrixXd& probs, const std::vector<ExpertList>& routed, int k, double eps) {
  if (probs.rows() < 2) throw std::invalid_argument("reuse_loss: requires T >= 2");
  if (static_cast<Eigen::Index>(routed.size()) < probs.rows() - 1) {
    throw std::invalid_argument("reuse_loss: missing routed sets");
  }
  for (std::size_t t = 0; t + 1 < static_cast<std::size_t>(probs.rows()); ++t) {
    if (static_cast<int>(routed[t].size()) != k) throw std::invalid_argument("reuse_loss: routed set size != K");
    for (ExpertId e : routed[t]) {
      if (e < 0 || e >= probs.cols()) throw std::invalid_argument("reuse_loss: expert out of range");
    }
  }
  ReuseValue out;
  out.rho = rho_value(from_probs(probs), routed, k);
  out.loss = -std::log(out.rho + eps);
  return out;
}

double trust_loss(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& ref) {
  if (probs.rows() != ref.rows() || probs.cols() != ref.cols()) throw std::invalid_argument("trust_loss: shape mismatch");
  return trust_value(from_probs(probs), from_probs(ref));
}

double smooth_loss(const Eigen::MatrixXd& probs) {
  if (probs.rows() < 2) throw std::invalid_argument("smooth_loss: requires T >= 2");
  return smooth_value(from_probs(probs));
}

double lag_loss(const Eigen::MatrixXd& probs, std::span<const int> lags, bool normalize_by_valid) {
  if (lags.empty()) throw std::invalid_argument("lag_loss: empty lag set");
  if (probs.rows() < 2) throw std::invalid_argument("lag_loss: requires T >= 2");
  return lag_value(from_probs(probs), lags, normalize_by_valid);
}

double ws_loss(const Eigen::MatrixXd& probs, int window, bool include_partial) {
  if (window < 1) throw std::invalid_argument("ws_loss: window must be >= 1");
  return ws_value(from_probs(probs), window, include_partial);
}

template <typename Scalar>
LossBreakdownT<Scalar> evaluate_objective(const MatrixX<Scalar>& theta, const MatrixX<Scalar>& theta0,
                                          const MatrixX<Scalar>& hidden, int k, const LossWeights& w,
                                          long step) {
  using std::log;
  w.validate();
  const Forward<Scalar> f = forward(theta, theta0, hidden, k);
  LossBreakdownT<Scalar> out;
  out.trust_kl = trust_value(f.p, f.ref);
  out.reuse_rho = rho_value(f.p, f.routed, k);
  out.reuse_loss = -log(out.reuse_rho + Scalar(w.eps));
  out.smooth = smooth_value(f.p);
  out.lag = lag_value(f.p, std::span<const int>(w.lags), w.lag_normalize_by_valid);
  out.ws = ws_value(f.p, w.window, w.ws_include_partial);
  out.alpha_reuse = w.alpha_reuse(step);
  out.alpha_loc = w.alpha_loc(step);
  out.total = Scalar(w.lambda_kl) * out.trust_kl +
              Scalar(out.alpha_reuse) * Scalar(w.lambda_reuse) * out.reuse_loss +
              Scalar(out.alpha_loc) * (Scalar(w.lambda_smooth) * out.smooth + Scalar(w.lambda_lag) * out.lag +
                                       Scalar(w.lambda_ws) * out.ws);
  return out;
}

template LossBreakdownT<double> evaluate_objective(const MatrixX<double>&, const MatrixX<double>&,
                                                   const MatrixX<double>&, int, const LossWeights&, long);
template LossBreakdownT<long double> evaluate_objective(const MatrixX<long double>&, const MatrixX<long double>&,
                                                        const MatrixX<long double>&, int, const LossWeights&,
                                                        long);

LossBreakdown total_objective(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                              const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step) {
  return evaluate_objective<double>(theta, theta0, hidden, k, w, step);
}

template <typename Scalar>
Scalar term_value(LossTerm term, const MatrixX<Scalar>& theta, const MatrixX<Scalar>& theta0,
                  const MatrixX<Scalar>& hidden, int k, const LossWeights& w, long step) {
  const auto b = evaluate_objective<Scalar>(theta, theta0, hidden, k, w, step);
  switch (term) {
    case LossTerm::kTrust: return b.trust_kl;
    case LossTerm::kReuse: return b.reuse_loss;
    case LossTerm::kSmooth: return b.smooth;
    case LossTerm::kLag: return b.lag;
    case LossTerm::kWs: return b.ws;
    case LossTerm::kTotal: return b.total;
  }
  return b.total;
}

template double term_value(LossTerm, const MatrixX<double>&, const MatrixX<double>&, const MatrixX<double>&, int,
                           const LossWeights&, long);
template long double term_value(LossTerm, const MatrixX<long double>&, const MatrixX<long double>&,
                                const MatrixX<long double>&, int, const LossWeights&, long);

namespace {

// Accumulates A_t = P_t ⊙ dL/dP_t; the logit gradient is A_t - P_t sum(A_t).
// Multiples of P_t drop out of that projection and are left out below.

void add_trust(Eigen::MatrixXd& a, const Forward<double>& f, double c) {
  const Eigen::Index T = f.p.steps();
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index i = 0; i < f.p.width(); ++i) {
      const double p = f.p.p(t, i);
      if (p > 0.0) a(t, i) += c / T * p * (f.p.logp(t, i) - clamped_log(f.ref.p(t, i), f.ref.logp(t, i)));
    }
  }
}

void add_reuse(Eigen::MatrixXd& a, const Forward<double>& f, int k, double eps, double c) {
  const Eigen::Index T = f.p.steps();
  const double rho = rho_value(f.p, f.routed, k);
  const double coef = -c / (rho + eps) / (static_cast<double>(T - 1) * k);
  for (Eigen::Index t = 1; t < T; ++t) {
    for (ExpertId e : f.routed[static_cast<std::size_t>(t - 1)]) a(t, e) += coef * f.p.p(t, e);
  }
}

// Gradient contribution of c * SymKL(P_x, P_y).
void add_sym(Eigen::MatrixXd& a, const Dists<double>& d, Eigen::Index x, Eigen::Index y, double c) {
  for (Eigen::Index i = 0; i < d.width(); ++i) {
    const double px = d.p(x, i);
    const double py = d.p(y, i);
    double gx = 0.0;
    double gy = 0.0;
    if (px > 0.0) gx += px * (d.logp(x, i) - clamped_log(py, d.logp(y, i)));
    if (py > 0.0) gy += py * (d.logp(y, i) - clamped_log(px, d.logp(x, i)));
    if (px >= kKlClamp) gx -= py;
    if (py >= kKlClamp) gy -= px;
    a(x, i) += 0.5 * c * gx;
    a(y, i) += 0.5 * c * gy;
  }
}

void add_smooth(Eigen::MatrixXd& a, const Forward<double>& f, double c) {
  const Eigen::Index T = f.p.steps();
  for (Eigen::Index t = 1; t < T; ++t) add_sym(a, f.p, t, t - 1, c / (T - 1));
}

void add_lag(Eigen::MatrixXd& a, const Forward<double>& f, std::span<const int> lags, bool by_valid, double c) {
  const Eigen::Index T = f.p.steps();
  for (Eigen::Index t = 1; t < T; ++t) {
    const int norm = by_valid ? valid_lags(lags, t) : static_cast<int>(lags.size());
    if (norm == 0) continue;
    for (int d : lags) {
      if (t - d >= 0) add_sym(a, f.p, t, t - d, c / (static_cast<double>(T - 1) * norm));
    }
  }
}

void add_ws(Eigen::MatrixXd& a, const Forward<double>& f, int w, bool include_partial, double c) {
  for (const Window& win : windows(f.p.steps(), w, include_partial)) {
    const Eigen::RowVectorXd mean = f.p.p.middleRows(win.begin, win.len).colwise().mean();
    for (Eigen::Index t = win.begin; t < win.begin + win.len; ++t) {
      for (Eigen::Index i = 0; i < mean.size(); ++i) {
        if (mean(i) > 0.0) a(t, i) -= c * win.weight / win.len * f.p.p(t, i) * std::log(mean(i));
      }
    }
  }
}

}  // namespace

Eigen::MatrixXd term_gradient(LossTerm term, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                              const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step) {
  w.validate();
  const Forward<double> f = forward(theta, theta0, hidden, k);
  const std::span<const int> lags(w.lags);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(f.p.steps(), f.p.width());
  switch (term) {
    case LossTerm::kTrust: add_trust(a, f, 1.0); break;
    case LossTerm::kReuse: add_reuse(a, f, k, w.eps, 1.0); break;
    case LossTerm::kSmooth: add_smooth(a, f, 1.0); break;
    case LossTerm::kLag: add_lag(a, f, lags, w.lag_normalize_by_valid, 1.0); break;
    case LossTerm::kWs: add_ws(a, f, w.window, w.ws_include_partial, 1.0); break;
    case LossTerm::kTotal: {
      const double ar = w.alpha_reuse(step);
      const double al = w.alpha_loc(step);
      if (w.lambda_kl != 0.0) add_trust(a, f, w.lambda_kl);
      if (ar * w.lambda_reuse != 0.0) add_reuse(a, f, k, w.eps, ar * w.lambda_reuse);
      if (al * w.lambda_smooth != 0.0) add_smooth(a, f, al * w.lambda_smooth);
      if (al * w.lambda_lag != 0.0) add_lag(a, f, lags, w.lag_normalize_by_valid, al * w.lambda_lag);
      if (al * w.lambda_ws != 0.0) add_ws(a, f, w.window, w.ws_include_partial, al * w.lambda_ws);
      break;
    }
  }
  const Eigen::VectorXd row_sums = a.rowwise().sum();
  const Eigen::MatrixXd dz = a - (f.p.p.array().colwise() * row_sums.array()).matrix();
  return hidden.transpose() * dz;
}

Eigen::MatrixXd grad_total(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                           const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step) {
  return term_gradient(LossTerm::kTotal, theta, theta0, hidden, k, w, step);
}

template <typename Scalar>
Eigen::MatrixXd fd_gradient(LossTerm term, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& theta0,
                            const Eigen::MatrixXd& hidden, int k, const LossWeights& w, long step, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: step must be > 0");
  const MatrixX<Scalar> th0 = theta0.cast<Scalar>();
  const MatrixX<Scalar> hid = hidden.cast<Scalar>();
  MatrixX<Scalar> th = theta.cast<Scalar>();
  Eigen::MatrixXd grad(theta.rows(), theta.cols());
  const Scalar hs(h);
  for (Eigen::Index r = 0; r < theta.rows(); ++r) {
    for (Eigen::Index c = 0; c < theta.cols(); ++c) {
      const Scalar orig = th(r, c);
      th(r, c) = orig + hs;
      const Scalar up = term_value<Scalar>(term, th, th0, hid, k, w, step);
      th(r, c) = orig - hs;
      const Scalar down = term_value<Scalar>(term, th, th0, hid, k, w, step);
      th(r, c) = orig;
      grad(r, c) = static_cast<double>((up - down) / (Scalar(2) * hs));
    }
  }
  return grad;
}

template Eigen::MatrixXd fd_gradient<double>(LossTerm, const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                                             const Eigen::MatrixXd&, int, const LossWeights&, long, double);
template Eigen::MatrixXd fd_gradient<long double>(LossTerm, const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                                                  const Eigen::MatrixXd&, int, const LossWeights&, long, double);

double max_relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& fd) {
  if (analytic.rows() != fd.rows() || analytic.cols() != fd.cols()) {
    throw std::invalid_argument("max_relative_error: shape mismatch");
  }
  return ((analytic - fd).array().abs() / (fd.array().abs() + 1e-8)).maxCoeff();
}

double min_topk_margin(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& hidden, int k) {
  const Eigen::MatrixXd p = gate_forward_seq(hidden, theta);
  double margin = 1.0;
  std::vector<double> row(static_cast<std::size_t>(p.cols()));
  for (Eigen::Index t = 0; t < p.rows(); ++t) {
    for (Eigen::Index i = 0; i < p.cols(); ++i) row[static_cast<std::size_t>(i)] = p(t, i);
    margin = std::min(margin, probability_margin(row, k));
  }
  return margin;
}

GradcheckInstance random_gradcheck_instance(std::mt19937_64& rng, double min_margin) {
  auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Eigen::Index r, Eigen::Index c, double scale) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * normal(rng);
    }
    return m;
  };
  GradcheckInstance inst;
  const int d = uniform_int(2, 8);
  const int n = uniform_int(3, 16);
  inst.k = uniform_int(1, std::min(4, n - 1));
  inst.step = uniform_int(1, 1000);
  for (;;) {
    const int steps = uniform_int(2, 32);
    inst.theta0 = gaussian(d, n, 0.8);
    inst.theta = inst.theta0 + gaussian(d, n, 0.3);
    inst.hidden = gaussian(steps, d, 1.0);
    if (min_topk_margin(inst.theta, inst.hidden, inst.k) >= min_margin) return inst;
  }
}

double GradcheckResult::worst() const { return *std::max_element(std::begin(max_rel_error), std::end(max_rel_error)); }

GradcheckResult run_gradcheck(int instances, std::uint64_t seed, const LossWeights& w, double h,
                              bool extended_precision) {
  std::mt19937_64 rng(seed);
  GradcheckResult out;
  out.h = h;
  for (int n = 0; n < instances; ++n) {
    const GradcheckInstance inst = random_gradcheck_instance(rng);
    // A window that fits the sequence keeps the entropy term non-trivial.
    LossWeights wi = w;
    wi.window = std::uniform_int_distribution<int>(1, static_cast<int>(std::max<Eigen::Index>(1, inst.hidden.rows() / 2)))(rng);
    for (std::size_t i = 0; i < std::size(kAllLossTerms); ++i) {
      const LossTerm term = kAllLossTerms[i];
      const Eigen::MatrixXd a = term_gradient(term, inst.theta, inst.theta0, inst.hidden, inst.k, wi, inst.step);
      const Eigen::MatrixXd fd =
          extended_precision
              ? fd_gradient<long double>(term, inst.theta, inst.theta0, inst.hidden, inst.k, wi, inst.step, h)
              : fd_gradient<double>(term, inst.theta, inst.theta0, inst.hidden, inst.k, wi, inst.step, h);
      out.max_rel_error[i] = std::max(out.max_rel_error[i], max_relative_error(a, fd));
    }
    ++out.instances;
  }
  return out;
}

McReuseResult mc_reuse_expectation(std::span<const double> p, std::span<const ExpertId> prev_set, int k,
                                   std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("mc_reuse_expectation: needs at least one sample");
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument("mc_reuse_expectation: invalid distribution");
    sum += x;
  }
  if (p.empty() || std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("mc_reuse_expectation: probabilities must sum to 1");
  (void)reuse_mass(p, prev_set, k);  // validates prev_set
  std::vector<char> member(p.size(), 0);
  for (ExpertId e : prev_set) member[static_cast<std::size_t>(e)] = 1;
  // discrete_distribution normalizes its weights; use the same normalization
  // so a prev_set covering all mass gives q == 1 exactly.
  double in = 0.0;
  double rest = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) (member[i] ? in : rest) += p[i];
  const double q = in / (in + rest);

  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> draw(p.begin(), p.end());
  std::uint64_t hits = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (int j = 0; j < k; ++j) hits += static_cast<std::uint64_t>(member[draw(rng)]);
  }
  McReuseResult out;
  out.estimate = static_cast<double>(hits) / static_cast<double>(n_samples);
  // K^2 m = K * (mass on prev_set)
  out.expected = k * q;
  out.abs_error = std::abs(out.estimate - out.expected);
  const double qc = std::clamp(q, 0.0, 1.0);
  out.stderr_ = std::sqrt(k * qc * (1.0 - qc) / static_cast<double>(n_samples));
  if (out.stderr_ > 0.0) {
    out.z = out.abs_error / out.stderr_;
  } else {
    out.z = out.abs_error == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace remoe
