#include "remoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace remoe {

double instantaneous_reuse(std::span<const ExpertId> prev, std::span<const ExpertId> cur, int k) {
  if (k < 1 || prev.size() != static_cast<std::size_t>(k) ||
      cur.size() != static_cast<std::size_t>(k)) {
    throw std::invalid_argument("instantaneous_reuse: both sets must have exactly k entries");
  }
  int shared = 0;
  for (ExpertId e : cur) {
    if (std::find(prev.begin(), prev.end(), e) != prev.end()) ++shared;
  }
  return static_cast<double>(shared) / k;
}

EorResult eor(const RoutingTrace& trace, EorAveraging mode) {
  const auto& h = trace.header;
  const auto offsets = trace.segment_offsets();
  EorResult result;
  result.per_layer.assign(static_cast<std::size_t>(h.n_moe_layers), 0.0);

  std::vector<double> layer_sum(static_cast<std::size_t>(h.n_moe_layers), 0.0);
  std::vector<std::size_t> layer_count(static_cast<std::size_t>(h.n_moe_layers), 0);
  double grand_sum = 0.0;

  for (int s = 0; s < trace.n_segments(); ++s) {
    const int T = trace.segment_lengths[static_cast<std::size_t>(s)];
    if (T < 2) continue;
    for (int l = 0; l < h.n_moe_layers; ++l) {
      for (int b = 0; b < h.batch_size; ++b) {
        double ir_sum = 0.0;
        for (int t = 1; t < T; ++t) {
          ir_sum += instantaneous_reuse(trace.at(offsets, s, t - 1, l, b).topk,
                                        trace.at(offsets, s, t, l, b).topk, h.top_k);
        }
        const auto li = static_cast<std::size_t>(l);
        if (mode == EorAveraging::kPerSequence) {
          const double seq = ir_sum / (T - 1);
          layer_sum[li] += seq;
          layer_count[li] += 1;
          grand_sum += seq;
        } else {
          layer_sum[li] += ir_sum;
          layer_count[li] += static_cast<std::size_t>(T - 1);
          grand_sum += ir_sum;
        }
        result.sequences += 1;
        result.pairs += static_cast<std::size_t>(T - 1);
      }
    }
  }
  if (result.sequences == 0) {
    throw std::invalid_argument("eor: every segment has fewer than two steps");
  }
  for (std::size_t l = 0; l < layer_sum.size(); ++l) {
    result.per_layer[l] = layer_sum[l] / static_cast<double>(layer_count[l]);
  }
  const std::size_t denom =
      mode == EorAveraging::kPerSequence ? result.sequences : result.pairs;
  result.grand = grand_sum / static_cast<double>(denom);
  return result;
}

double normalized_entropy(std::span<const double> p) {
  if (p.empty()) throw std::invalid_argument("normalized_entropy: empty distribution");
  double sum = 0.0;
  double h = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw std::invalid_argument("normalized_entropy: negative entry");
    sum += x;
    if (x > 0.0) h -= x * std::log(x);
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("normalized_entropy: entries do not sum to 1");
  }
  if (p.size() == 1) return 0.0;
  return h / std::log(static_cast<double>(p.size()));
}

std::optional<double> mean_normalized_entropy(const RoutingTrace& trace) {
  if (!trace.header.has_probs || trace.records.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& r : trace.records) sum += normalized_entropy(r.probs);
  return sum / static_cast<double>(trace.records.size());
}

double load_balance_cv(std::span<const double> counts) {
  if (counts.empty()) throw std::invalid_argument("load_balance_cv: empty counts");
  double total = 0.0;
  for (double c : counts) {
    if (c < 0.0) throw std::invalid_argument("load_balance_cv: negative count");
    total += c;
  }
  if (!(total > 0.0)) throw std::invalid_argument("load_balance_cv: all counts are zero");
  const double mean = total / static_cast<double>(counts.size());
  double var = 0.0;
  for (double c : counts) var += (c - mean) * (c - mean);
  var /= static_cast<double>(counts.size());
  return std::sqrt(var) / mean;
}

std::vector<std::vector<double>> expert_selection_counts(const RoutingTrace& trace) {
  const auto& h = trace.header;
  std::vector<std::vector<double>> counts(
      static_cast<std::size_t>(h.n_moe_layers),
      std::vector<double>(static_cast<std::size_t>(h.n_routed_experts), 0.0));
  for (const auto& r : trace.records) {
    for (ExpertId e : r.topk) counts[static_cast<std::size_t>(r.layer)][static_cast<std::size_t>(e)] += 1.0;
  }
  return counts;
}

double unique_experts_per_sequence(const RoutingTrace& trace) {
  const auto& h = trace.header;
  const auto offsets = trace.segment_offsets();
  double sum = 0.0;
  std::size_t sequences = 0;
  std::vector<bool> seen(static_cast<std::size_t>(h.n_routed_experts));
  for (int s = 0; s < trace.n_segments(); ++s) {
    const int T = trace.segment_lengths[static_cast<std::size_t>(s)];
    if (T < 1) continue;
    for (int l = 0; l < h.n_moe_layers; ++l) {
      for (int b = 0; b < h.batch_size; ++b) {
        std::fill(seen.begin(), seen.end(), false);
        int distinct = 0;
        for (int t = 0; t < T; ++t) {
          for (ExpertId e : trace.at(offsets, s, t, l, b).topk) {
            if (!seen[static_cast<std::size_t>(e)]) {
              seen[static_cast<std::size_t>(e)] = true;
              ++distinct;
            }
          }
        }
        sum += distinct;
        ++sequences;
      }
    }
  }
  return sequences ? sum / static_cast<double>(sequences) : 0.0;
}

MetricsReport compute_metrics(const RoutingTrace& trace, EorAveraging mode) {
  MetricsReport report;
  const EorResult e = eor(trace, mode);
  report.eor = e.grand;
  report.mean_ir_per_layer = e.per_layer;
  report.entropy_norm = mean_normalized_entropy(trace);
  const auto counts = expert_selection_counts(trace);
  double cv_sum = 0.0;
  for (const auto& layer_counts : counts) {
    const double cv = load_balance_cv(layer_counts);
    report.load_cv_per_layer.push_back(cv);
    cv_sum += cv;
  }
  report.load_cv = cv_sum / static_cast<double>(counts.size());
  report.unique_experts_per_sequence = unique_experts_per_sequence(trace);
  return report;
}

}  // namespace remoe
