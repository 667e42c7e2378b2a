#include <algorithm>
#include <random>
#include <stdexcept>

#include "remoe/trace.hpp"

namespace remoe {
namespace {

ExpertList sample_without_replacement(std::vector<ExpertId> pool, int count, std::mt19937_64& rng) {
  ExpertList out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), pool.size() - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[pick(rng)]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

ExpertList next_set(const ExpertList& prev, int n_experts, int k, double stickiness,
                    std::mt19937_64& rng) {
  std::bernoulli_distribution keep(stickiness);
  ExpertList set;
  set.reserve(static_cast<std::size_t>(k));
  std::vector<bool> used(static_cast<std::size_t>(n_experts), false);
  for (ExpertId e : prev) {
    if (keep(rng)) {
      set.push_back(e);
      used[static_cast<std::size_t>(e)] = true;
    }
  }
  std::vector<ExpertId> pool;
  for (ExpertId e = 0; e < n_experts; ++e) {
    if (!used[static_cast<std::size_t>(e)]) pool.push_back(e);
  }
  const auto fill = sample_without_replacement(std::move(pool), k - static_cast<int>(set.size()), rng);
  set.insert(set.end(), fill.begin(), fill.end());
  return set;
}

// Dirichlet-style draw whose K largest entries sit exactly on `set`.
std::vector<double> probs_for_set(const ExpertList& set, int n_experts, double concentration,
                                  std::mt19937_64& rng) {
  const int k = static_cast<int>(set.size());
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<double> probs(static_cast<std::size_t>(n_experts));
  for (;;) {
    std::vector<double> w(static_cast<std::size_t>(n_experts));
    for (auto& x : w) x = gamma(rng);
    std::sort(w.begin(), w.end(), std::greater<>());
    if (k < n_experts && !(w[static_cast<std::size_t>(k - 1)] > w[static_cast<std::size_t>(k)])) {
      continue;
    }
    double sum = 0.0;
    for (double x : w) sum += x;
    if (!(sum > 0.0)) continue;

    std::vector<bool> in_set(static_cast<std::size_t>(n_experts), false);
    for (ExpertId e : set) in_set[static_cast<std::size_t>(e)] = true;
    std::vector<ExpertId> others;
    for (ExpertId e = 0; e < n_experts; ++e) {
      if (!in_set[static_cast<std::size_t>(e)]) others.push_back(e);
    }
    std::shuffle(others.begin(), others.end(), rng);

    for (int i = 0; i < k; ++i) {
      probs[static_cast<std::size_t>(set[static_cast<std::size_t>(i)])] =
          w[static_cast<std::size_t>(i)] / sum;
    }
    for (std::size_t i = 0; i < others.size(); ++i) {
      probs[static_cast<std::size_t>(others[i])] = w[static_cast<std::size_t>(k) + i] / sum;
    }
    // Normalization can merge neighbours that were one ulp apart.
    if (same_expert_set(topk(probs, k), set)) return probs;
  }
}

}  // namespace

RoutingTrace synth_trace(const SynthConfig& cfg) {
  const TraceHeader& h = cfg.header;
  if (h.n_moe_layers < 1 || h.n_routed_experts < 1 || h.top_k < 1 || h.batch_size < 1 ||
      h.top_k > h.n_routed_experts) {
    throw std::invalid_argument("synth_trace: invalid header dimensions");
  }
  if (cfg.n_segments < 1 || cfg.steps_per_segment < 1) {
    throw std::invalid_argument("synth_trace: need at least one segment and one step");
  }
  if (!(cfg.stickiness >= 0.0 && cfg.stickiness <= 1.0)) {
    throw std::invalid_argument("synth_trace: stickiness must be in [0, 1]");
  }
  if (cfg.emit_probs && !(cfg.concentration > 0.0)) {
    throw std::invalid_argument("synth_trace: concentration must be positive");
  }

  std::mt19937_64 rng(cfg.seed);
  RoutingTrace trace;
  trace.header = h;
  trace.header.has_probs = cfg.emit_probs;
  trace.segment_lengths.assign(static_cast<std::size_t>(cfg.n_segments), cfg.steps_per_segment);

  const int streams = cfg.independent_batches ? h.batch_size : 1;
  const int T = cfg.steps_per_segment;
  for (int s = 0; s < cfg.n_segments; ++s) {
    // sets[(l * streams + stream) * T + t]
    std::vector<ExpertList> sets(static_cast<std::size_t>(h.n_moe_layers * streams * T));
    for (int l = 0; l < h.n_moe_layers; ++l) {
      for (int stream = 0; stream < streams; ++stream) {
        const std::size_t base = static_cast<std::size_t>((l * streams + stream) * T);
        std::vector<ExpertId> all(static_cast<std::size_t>(h.n_routed_experts));
        for (ExpertId e = 0; e < h.n_routed_experts; ++e) all[static_cast<std::size_t>(e)] = e;
        sets[base] = sample_without_replacement(std::move(all), h.top_k, rng);
        for (int t = 1; t < T; ++t) {
          sets[base + t] = next_set(sets[base + t - 1], h.n_routed_experts, h.top_k,
                                    cfg.stickiness, rng);
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      for (int l = 0; l < h.n_moe_layers; ++l) {
        for (int b = 0; b < h.batch_size; ++b) {
          const int stream = cfg.independent_batches ? b : 0;
          StepRecord r;
          r.segment = s;
          r.step = t;
          r.layer = l;
          r.batch = b;
          r.topk = sets[static_cast<std::size_t>((l * streams + stream) * T + t)];
          if (cfg.emit_probs) {
            r.probs = probs_for_set(r.topk, h.n_routed_experts, cfg.concentration, rng);
            r.topk = topk(r.probs, h.top_k);
          }
          trace.records.push_back(std::move(r));
        }
      }
    }
  }
  return trace;
}

}  // namespace remoe
