#include "remoe/router.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>

#include <fmt/format.h>

#include "json.hpp"
#include "remoe/report.hpp"

namespace remoe {

double probability_margin(std::span<const double> q, int k) {
  if (k < 1 || static_cast<std::size_t>(k) >= q.size()) {
    throw std::invalid_argument("probability_margin: requires 1 <= k < N_r");
  }
  std::vector<double> sorted(q.begin(), q.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  return sorted[static_cast<std::size_t>(k - 1)] - sorted[static_cast<std::size_t>(k)];
}

StabilityVerdict stability_check(std::span<const double> q, std::span<const double> p, int k) {
  if (q.size() != p.size()) throw std::invalid_argument("stability_check: size mismatch");
  StabilityVerdict v;
  v.margin = probability_margin(q, k);
  for (std::size_t i = 0; i < q.size(); ++i) v.sup_distance = std::max(v.sup_distance, std::abs(p[i] - q[i]));
  v.condition_met = v.sup_distance < v.margin / 2.0;
  v.sets_equal = same_expert_set(topk(q, k), topk(p, k));
  return v;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-12)));
  }
  return kl;
}

PinskerVerdict pinsker_check(std::span<const double> p, std::span<const double> q) {
  PinskerVerdict v;
  for (std::size_t i = 0; i < p.size(); ++i) v.l1 += std::abs(p[i] - q[i]);
  v.bound = std::sqrt(2.0 * std::max(kl_divergence(p, q), 0.0));
  v.holds = v.l1 <= v.bound + 1e-9;
  return v;
}

std::vector<double> random_distribution(int n, double concentration, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<double> p(static_cast<std::size_t>(n));
  double sum = 0.0;
  do {
    sum = 0.0;
    for (auto& x : p) {
      x = gamma(rng);
      sum += x;
    }
  } while (!(sum > 0.0));
  for (auto& x : p) x /= sum;
  return p;
}

std::vector<double> perturb_within(std::span<const double> q, double radius, std::mt19937_64& rng) {
  if (!(radius > 0.0)) return {q.begin(), q.end()};
  const std::size_t n = q.size();
  std::vector<double> p(n);
  std::vector<double> delta(n);
  double r = radius;
  for (int attempt = 1;; ++attempt) {
    std::uniform_real_distribution<double> box(-r, r);
    double mean = 0.0;
    for (auto& d : delta) {
      d = box(rng);
      mean += d;
    }
    mean /= static_cast<double>(n);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      const double d = delta[i] - mean;
      p[i] = q[i] + d;
      ok = p[i] >= 0.0 && std::abs(p[i] - q[i]) < radius;
    }
    if (ok) return p;
    // Tiny entries of q reject most draws; narrowing the box keeps the
    // result inside the original radius.
    if (attempt % 64 == 0) r *= 0.5;
  }
}

StabilityCampaign run_stability_campaign(std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  StabilityCampaign out;
  const double concentrations[] = {0.3, 1.0, 3.0};
  while (out.trials < trials) {
    const int n = std::uniform_int_distribution<int>(3, 16)(rng);
    const int k = std::uniform_int_distribution<int>(1, n - 1)(rng);
    const double alpha = concentrations[std::uniform_int_distribution<int>(0, 2)(rng)];
    const auto q = random_distribution(n, alpha, rng);
    const double gamma = probability_margin(q, k);
    if (!(gamma > 0.0)) continue;
    const double radius = 0.5 * gamma * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (!(radius > 0.0)) continue;
    const auto p = perturb_within(q, radius, rng);
    const StabilityVerdict v = stability_check(q, p, k);
    ++out.trials;
    if (v.condition_met) ++out.condition_met;
    if (!v.holds()) ++out.top_k_changes;
  }
  return out;
}

PinskerCampaign run_pinsker_campaign(std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PinskerCampaign out;
  for (std::size_t i = 0; i < trials; ++i) {
    const int n = std::uniform_int_distribution<int>(2, 32)(rng);
    const double alpha = std::uniform_real_distribution<double>(0.1, 5.0)(rng);
    const auto p = random_distribution(n, alpha, rng);
    const auto q = random_distribution(n, alpha, rng);
    const PinskerVerdict v = pinsker_check(p, q);
    ++out.trials;
    if (!v.holds) ++out.violations;
    if (v.bound > 0.0) out.max_ratio = std::max(out.max_ratio, v.l1 / v.bound);
  }
  return out;
}

namespace {

constexpr char kGateMagic[8] = {'R', 'M', 'G', 'A', 'T', 'E', '0', '1'};
constexpr std::uint32_t kEndianTag = 0x01020304u;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, bool swap) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw std::runtime_error("load_gate: truncated file");
  if (swap) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace

void save_gate(const std::string& path, const Eigen::MatrixXd& theta) {
  std::string out(kGateMagic, sizeof(kGateMagic));
  put<std::uint32_t>(out, kEndianTag);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(theta.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(theta.cols()));
  for (Eigen::Index r = 0; r < theta.rows(); ++r) {
    for (Eigen::Index c = 0; c < theta.cols(); ++c) put<double>(out, theta(r, c));
  }
  write_file_atomic(path, out);

  nlohmann::ordered_json sidecar;
  sidecar["format"] = "RMGATE01";
  sidecar["d"] = theta.rows();
  sidecar["n_routed_experts"] = theta.cols();
  sidecar["dtype"] = "float64";
  sidecar["layout"] = "row-major";
  sidecar["endianness"] = std::endian::native == std::endian::little ? "little" : "big";
  write_file_atomic(path + ".json", sidecar.dump(2) + "\n");
}

Eigen::MatrixXd load_gate(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("load_gate: cannot open '{}'", path));
  char magic[sizeof(kGateMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kGateMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_gate: bad magic");
  }
  const std::uint32_t tag = get<std::uint32_t>(in, false);
  bool swap = false;
  if (tag == 0x04030201u) {
    swap = true;
  } else if (tag != kEndianTag) {
    throw std::runtime_error("load_gate: unknown endianness tag");
  }
  (void)get<std::uint32_t>(in, swap);
  const auto rows = get<std::uint64_t>(in, swap);
  const auto cols = get<std::uint64_t>(in, swap);
  if (rows == 0 || cols == 0 || rows * cols > (1ull << 32)) {
    throw std::runtime_error("load_gate: implausible shape");
  }
  Eigen::MatrixXd theta(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < theta.rows(); ++r) {
    for (Eigen::Index c = 0; c < theta.cols(); ++c) theta(r, c) = get<double>(in, swap);
  }
  return theta;
}

}  // namespace remoe
