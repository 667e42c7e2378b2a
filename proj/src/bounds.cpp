#include "remoe/bounds.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "remoe/metrics.hpp"
#include "remoe/parallel.hpp"

namespace remoe {
namespace {

int overlap(std::span<const ExpertId> a, std::span<const ExpertId> b) {
  int n = 0;
  for (ExpertId e : a) {
    if (std::find(b.begin(), b.end(), e) != b.end()) ++n;
  }
  return n;
}

void require_clean_setup(const RoutingTrace& trace, const CacheConfig& cfg) {
  if (cfg.capacity < trace.header.top_k) {
    throw std::invalid_argument("bound check: requires capacity >= top_k");
  }
  if (!cfg.reset_each_segment) throw std::invalid_argument("bound check: requires per-segment resets");
  if (cfg.scenario) throw std::invalid_argument("bound check: fault scenarios are not allowed");
  if (cfg.reroute_beta && *cfg.reroute_beta != 0.0) {
    throw std::invalid_argument("bound check: rerouting is not allowed");
  }
}

void evaluate_single_batch(const RoutingTrace& sub, int batch, const CacheConfig& cfg,
                           BoundReport& report) {
  const int K = sub.header.top_k;
  const int L = sub.header.n_moe_layers;
  struct Observed {
    int n_fetch = 0;
    ExpertList resident_before;
    ExpertList injected;
  };
  std::vector<std::vector<Observed>> events(static_cast<std::size_t>(L));
  SimOptions opts;
  opts.observer = [&events](const StepEvent& ev) {
    events[static_cast<std::size_t>(ev.layer)].push_back(
        {ev.stats.unique_misses, ev.resident_before, ev.injected ? *ev.injected : ExpertList{}});
  };
  const SimReport sim = simulate(sub, cfg, opts);

  if (report.layer_fetches.empty()) report.layer_fetches.assign(static_cast<std::size_t>(L), 0);
  for (int l = 0; l < L; ++l) {
    report.layer_fetches[static_cast<std::size_t>(l)] += sim.per_layer[static_cast<std::size_t>(l)].unique_misses;
    report.total_fetches += sim.per_layer[static_cast<std::size_t>(l)].unique_misses;
  }

  const auto offsets = sub.segment_offsets();
  for (int l = 0; l < L; ++l) {
    const auto& layer_events = events[static_cast<std::size_t>(l)];
    std::size_t global = 0;
    for (int s = 0; s < sub.n_segments(); ++s) {
      const int T = sub.segment_lengths[static_cast<std::size_t>(s)];
      long fetch_sum = 0;
      long bound_sum = 0;
      double ir_sum = 0.0;
      for (int t = 0; t < T; ++t, ++global) {
        if (t == 0) continue;
        const ExpertList& cur = sub.at(offsets, s, t, l, 0).topk;
        const ExpertList& prev = sub.at(offsets, s, t - 1, l, 0).topk;
        const Observed& ev = layer_events[global];

        BoundStep st;
        st.layer = l;
        st.batch = batch;
        st.segment = s;
        st.step = t;
        st.n_fetch = ev.n_fetch;
        st.step_bound = K - overlap(cur, prev);
        st.requested = cur;
        st.injected = ev.injected;

        // Longest horizon whose union of requested sets fits in the cache.
        ExpertList window;
        ExpertList best_window;
        for (int j = 1; j <= t; ++j) {
          ExpertList grown = window;
          for (ExpertId e : sub.at(offsets, s, t - j, l, 0).topk) {
            if (std::find(grown.begin(), grown.end(), e) == grown.end()) grown.push_back(e);
          }
          if (static_cast<int>(grown.size()) > cfg.capacity) break;
          window = std::move(grown);
          best_window = window;
          st.ws_horizon = j;
        }
        st.ws_bound = K - overlap(cur, best_window);

        st.violated = st.n_fetch > st.step_bound;
        st.ws_violated = st.n_fetch > st.ws_bound;
        if (st.violated || st.ws_violated) st.cache_before = ev.resident_before;
        if (st.violated) ++report.violations;
        if (st.ws_violated) ++report.ws_violations;
        if (st.ws_bound < st.step_bound) ++report.ws_strictly_tighter;

        fetch_sum += st.n_fetch;
        bound_sum += st.step_bound;
        ir_sum += instantaneous_reuse(prev, cur, K);
        report.steps.push_back(std::move(st));
      }
      if (T >= 2) {
        SequenceBound seq;
        seq.layer = l;
        seq.batch = batch;
        seq.segment = s;
        seq.mean_fetch = static_cast<double>(fetch_sum) / (T - 1);
        seq.eor = ir_sum / (T - 1);
        seq.mean_bound = static_cast<double>(bound_sum) / (T - 1);
        // Integer comparison of the sums avoids rounding in the averages.
        seq.holds = fetch_sum <= bound_sum;
        if (!seq.holds) ++report.average_violations;
        report.sequences.push_back(seq);
      }
    }
  }
}

RoutingTrace constant_set_trace(int n_experts, int k, int steps) {
  SynthConfig cfg;
  cfg.header = {1, n_experts, k, 1, false};
  cfg.steps_per_segment = steps;
  cfg.stickiness = 1.0;
  cfg.seed = 7;
  return synth_trace(cfg);
}

Counterexample summarize(std::string name, FaultKind kind, std::string assumption,
                         const BoundReport& report) {
  Counterexample out;
  out.name = std::move(name);
  out.kind = kind;
  out.broken_assumption = std::move(assumption);
  out.top_k = report.top_k;
  out.capacity = report.capacity;
  out.violations = report.violations;
  for (const auto& st : report.steps) {
    if (st.violated) {
      out.first_violation = st;
      break;
    }
  }
  return out;
}

}  // namespace

BoundReport evaluate_bounds(const RoutingTrace& trace, const CacheConfig& cfg) {
  BoundReport report;
  report.top_k = trace.header.top_k;
  report.capacity = cfg.capacity;
  for (int b = 0; b < trace.header.batch_size; ++b) {
    const RoutingTrace sub = trace.header.batch_size == 1 ? trace : select_batch(trace, b);
    evaluate_single_batch(sub, b, cfg, report);
  }
  return report;
}

BoundReport check_step_bound(const RoutingTrace& trace, const CacheConfig& cfg) {
  require_clean_setup(trace, cfg);
  return evaluate_bounds(trace, cfg);
}

BoundReport check_working_set_bound(const RoutingTrace& trace, int capacity) {
  CacheConfig cfg;
  cfg.capacity = capacity;
  cfg.policy = Policy::kLru;
  cfg.reset_each_segment = true;
  require_clean_setup(trace, cfg);
  return evaluate_bounds(trace, cfg);
}

std::vector<Counterexample> run_counterexamples() {
  std::vector<Counterexample> out;
  {
    // K = 6 experts per step but only 4 slots: two misses every step.
    const RoutingTrace trace = constant_set_trace(16, 6, 8);
    CacheConfig cfg;
    cfg.capacity = 4;
    cfg.reset_each_segment = true;
    cfg.scenario = FaultScenario{FaultKind::kUnderCapacity, 0, 0};
    out.push_back(summarize("under_capacity", FaultKind::kUnderCapacity, "capacity (C >= K)",
                            evaluate_bounds(trace, cfg)));
  }
  {
    const RoutingTrace trace = constant_set_trace(16, 4, 8);
    CacheConfig cfg;
    cfg.capacity = 4;
    cfg.reset_each_segment = true;
    cfg.scenario = FaultScenario{FaultKind::kInterference, 1, 11};
    out.push_back(summarize("interference", FaultKind::kInterference,
                            "cache isolation (no eviction between steps)",
                            evaluate_bounds(trace, cfg)));
  }
  {
    const RoutingTrace trace = constant_set_trace(16, 4, 8);
    CacheConfig cfg;
    cfg.capacity = 4;
    cfg.reset_each_segment = true;
    cfg.scenario = FaultScenario{FaultKind::kPrefetch, 1, 13};
    out.push_back(summarize("prefetch", FaultKind::kPrefetch,
                            "cache isolation (no insertion between steps)",
                            evaluate_bounds(trace, cfg)));
  }
  return out;
}

CampaignResult run_bound_campaign(const CampaignConfig& cfg) {
  struct PerTrace {
    std::size_t runs = 0, steps = 0, step_v = 0, avg_v = 0, ws_v = 0, ws_v_2k = 0, tighter = 0;
  };
  std::vector<PerTrace> results(static_cast<std::size_t>(std::max(cfg.traces, 0)));
  parallel_for(results.size(), cfg.threads, [&](std::size_t i) {
    std::mt19937_64 rng(cfg.seed * 1000003ull + i);
    auto uniform_int = [&rng](int lo, int hi) {
      return std::uniform_int_distribution<int>(lo, hi)(rng);
    };
    SynthConfig sc;
    const int k = uniform_int(1, 6);
    sc.header = {uniform_int(1, 2), uniform_int(k + 1, 4 * k + 8), k, 1, false};
    sc.n_segments = uniform_int(1, 3);
    sc.steps_per_segment = uniform_int(2, 40);
    sc.stickiness = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    sc.seed = rng();
    const RoutingTrace trace = synth_trace(sc);

    PerTrace& r = results[i];
    for (int capacity : {k, k + 2, 2 * k}) {
      const BoundReport rep = check_working_set_bound(trace, capacity);
      r.runs += 1;
      r.steps += rep.steps.size();
      r.step_v += rep.violations;
      r.avg_v += rep.average_violations;
      r.ws_v += rep.ws_violations;
      if (capacity == 2 * k) r.ws_v_2k += rep.ws_violations;
      r.tighter += rep.ws_strictly_tighter;
    }
  });

  CampaignResult out;
  out.traces = cfg.traces;
  for (const auto& r : results) {
    out.runs += r.runs;
    out.steps_checked += r.steps;
    out.step_violations += r.step_v;
    out.average_violations += r.avg_v;
    out.ws_violations += r.ws_v;
    out.ws_violations_at_2k += r.ws_v_2k;
    out.ws_strictly_tighter += r.tighter;
  }
  return out;
}

}  // namespace remoe
