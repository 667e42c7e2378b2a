#include "remoe/cache_sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "remoe/metrics.hpp"
#include "remoe/parallel.hpp"

namespace remoe {

std::string_view to_string(Policy policy) {
  switch (policy) {
    case Policy::kLru: return "lru";
    case Policy::kLfu: return "lfu";
    case Policy::kFifo: return "fifo";
    case Policy::kBelady: return "belady";
  }
  return "unknown";
}

std::optional<Policy> parse_policy(std::string_view name) {
  if (name == "lru") return Policy::kLru;
  if (name == "lfu") return Policy::kLfu;
  if (name == "fifo") return Policy::kFifo;
  if (name == "belady") return Policy::kBelady;
  return std::nullopt;
}

std::string_view to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::kUnderCapacity: return "under_capacity";
    case FaultKind::kInterference: return "interference";
    case FaultKind::kPrefetch: return "prefetch";
  }
  return "unknown";
}

ExpertList unique_in_order(std::span<const ExpertId> routed) {
  ExpertList out;
  out.reserve(routed.size());
  for (ExpertId e : routed) {
    if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
  }
  return out;
}

namespace {

// Deduped request of every (global step) for one layer.
std::vector<ExpertList> layer_requests(const RoutingTrace& trace, int layer) {
  const auto& h = trace.header;
  const auto offsets = trace.segment_offsets();
  std::vector<ExpertList> out;
  out.reserve(trace.total_steps());
  ExpertList routed;
  for (int s = 0; s < trace.n_segments(); ++s) {
    for (int t = 0; t < trace.segment_lengths[static_cast<std::size_t>(s)]; ++t) {
      routed.clear();
      for (int b = 0; b < h.batch_size; ++b) {
        const auto& r = trace.at(offsets, s, t, layer, b);
        routed.insert(routed.end(), r.topk.begin(), r.topk.end());
      }
      out.push_back(unique_in_order(routed));
    }
  }
  return out;
}

}  // namespace

NextUseTable belady_next_use(const RoutingTrace& trace, int layer, bool horizon_per_segment) {
  const int n = trace.header.n_routed_experts;
  const auto requests = layer_requests(trace, layer);
  NextUseTable table(requests.size(), n);

  std::vector<bool> segment_end(requests.size(), false);
  std::size_t pos = 0;
  for (int len : trace.segment_lengths) {
    pos += static_cast<std::size_t>(len);
    if (len > 0) segment_end[pos - 1] = true;
  }

  // Pass 1 collected the requests; pass 2 walks backwards carrying the
  // nearest future request of every expert.
  std::vector<std::int64_t> upcoming(static_cast<std::size_t>(n), kNeverUsed);
  for (std::size_t i = requests.size(); i-- > 0;) {
    if (horizon_per_segment && segment_end[i]) {
      std::fill(upcoming.begin(), upcoming.end(), kNeverUsed);
    }
    for (ExpertId e = 0; e < n; ++e) table.mutable_at(i, e) = upcoming[static_cast<std::size_t>(e)];
    for (ExpertId e : requests[i]) upcoming[static_cast<std::size_t>(e)] = static_cast<std::int64_t>(i);
  }
  return table;
}

ExpertCache::ExpertCache(int n_experts, int capacity, Policy policy)
    : n_experts_(n_experts),
      capacity_(capacity),
      policy_(policy),
      resident_(static_cast<std::size_t>(n_experts), false),
      last_use_(static_cast<std::size_t>(n_experts), 0),
      inserted_at_(static_cast<std::size_t>(n_experts), 0),
      frequency_(static_cast<std::size_t>(n_experts), 0) {
  if (n_experts < 1) throw std::invalid_argument("ExpertCache: need at least one expert");
  if (capacity < 1) throw std::invalid_argument("ExpertCache: capacity must be >= 1");
}

void ExpertCache::reset() {
  std::fill(resident_.begin(), resident_.end(), false);
  std::fill(last_use_.begin(), last_use_.end(), 0);
  std::fill(inserted_at_.begin(), inserted_at_.end(), 0);
  std::fill(frequency_.begin(), frequency_.end(), 0);
  size_ = 0;
  clock_ = 0;
}

ExpertList ExpertCache::resident() const {
  ExpertList out;
  for (ExpertId e = 0; e < n_experts_; ++e) {
    if (resident_[static_cast<std::size_t>(e)]) out.push_back(e);
  }
  return out;
}

void ExpertCache::insert(ExpertId e) {
  const auto i = static_cast<std::size_t>(e);
  resident_[i] = true;
  inserted_at_[i] = clock_;
  last_use_[i] = clock_;
  ++size_;
}

void ExpertCache::erase(ExpertId e) {
  resident_[static_cast<std::size_t>(e)] = false;
  --size_;
}

std::optional<ExpertId> ExpertCache::pick_victim(const std::vector<bool>& protect,
                                                 std::span<const std::int64_t> next_use) const {
  std::optional<ExpertId> best;
  auto worse = [&](ExpertId a, ExpertId b) {  // true if a is a better victim than b
    const auto ia = static_cast<std::size_t>(a);
    const auto ib = static_cast<std::size_t>(b);
    switch (policy_) {
      case Policy::kLru:
        return last_use_[ia] < last_use_[ib];
      case Policy::kFifo:
        return inserted_at_[ia] < inserted_at_[ib];
      case Policy::kLfu:
        if (frequency_[ia] != frequency_[ib]) return frequency_[ia] < frequency_[ib];
        if (last_use_[ia] != last_use_[ib]) return last_use_[ia] < last_use_[ib];
        return a < b;
      case Policy::kBelady:
        if (next_use[ia] != next_use[ib]) return next_use[ia] > next_use[ib];
        return a < b;
    }
    return false;
  };
  for (ExpertId e = 0; e < n_experts_; ++e) {
    const auto i = static_cast<std::size_t>(e);
    if (!resident_[i] || (!protect.empty() && protect[i])) continue;
    if (!best || worse(e, *best)) best = e;
  }
  return best;
}

ServeOutcome ExpertCache::serve(std::span<const ExpertId> unique_request,
                                std::span<const std::int64_t> next_use) {
  if (policy_ == Policy::kBelady && next_use.size() != static_cast<std::size_t>(n_experts_)) {
    throw std::invalid_argument("ExpertCache: BELADY needs the next-use row of the step");
  }
  ServeOutcome out;
  std::vector<bool> requested(static_cast<std::size_t>(n_experts_), false);
  for (ExpertId e : unique_request) requested[static_cast<std::size_t>(e)] = true;

  for (ExpertId e : unique_request) {
    const auto i = static_cast<std::size_t>(e);
    ++clock_;
    ++frequency_[i];
    if (resident_[i]) {
      ++out.hits;
      last_use_[i] = clock_;
      continue;
    }
    ++out.misses;
    if (size_ < capacity_) {
      insert(e);
      continue;
    }
    if (auto victim = pick_victim(requested, next_use)) {
      erase(*victim);
      out.evicted.push_back(*victim);
      insert(e);
    } else {
      out.dropped.push_back(e);
    }
  }
  return out;
}

ExpertList ExpertCache::evict_random(int n, std::mt19937_64& rng) {
  ExpertList pool = resident();
  ExpertList out;
  for (int i = 0; i < n && !pool.empty(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const std::size_t j = pick(rng);
    out.push_back(pool[j]);
    erase(pool[j]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

ExpertList ExpertCache::prefetch_random(int n, std::mt19937_64& rng,
                                        std::span<const std::int64_t> next_use) {
  ExpertList pool;
  for (ExpertId e = 0; e < n_experts_; ++e) {
    if (!resident_[static_cast<std::size_t>(e)]) pool.push_back(e);
  }
  ExpertList out;
  for (int i = 0; i < n && !pool.empty(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const std::size_t j = pick(rng);
    const ExpertId e = pool[j];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    ++clock_;
    if (size_ >= capacity_) {
      auto victim = pick_victim({}, next_use);
      if (!victim) break;
      erase(*victim);
    }
    insert(e);
    out.push_back(e);
  }
  return out;
}

void CacheTotals::add(const StepCacheStats& s) {
  unique_hits += static_cast<std::uint64_t>(s.unique_hits);
  unique_total += static_cast<std::uint64_t>(s.unique_total);
  unique_misses += static_cast<std::uint64_t>(s.unique_misses);
  token_hits += static_cast<std::uint64_t>(s.token_hits);
  token_total += static_cast<std::uint64_t>(s.token_total);
  token_misses += static_cast<std::uint64_t>(s.token_misses);
  evictions += static_cast<std::uint64_t>(s.evictions);
}

void CacheTotals::add(const CacheTotals& t) {
  unique_hits += t.unique_hits;
  unique_total += t.unique_total;
  unique_misses += t.unique_misses;
  token_hits += t.token_hits;
  token_total += t.token_total;
  token_misses += t.token_misses;
  evictions += t.evictions;
}

double CacheTotals::uhr() const {
  return unique_total ? static_cast<double>(unique_hits) / static_cast<double>(unique_total) : 0.0;
}

double CacheTotals::thr() const {
  return token_total ? static_cast<double>(token_hits) / static_cast<double>(token_total) : 0.0;
}

double percentile(std::span<const double> series, double rank) {
  if (series.empty()) throw std::invalid_argument("percentile: empty series");
  std::vector<double> sorted(series.begin(), series.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  // The 1e-9 guard keeps ranks like 0.95 * 100 from rounding up a slot.
  auto idx = static_cast<std::ptrdiff_t>(std::ceil(rank * n - 1e-9)) - 1;
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(sorted.size()) - 1);
  return sorted[static_cast<std::size_t>(idx)];
}

Percentiles percentiles(std::span<const double> series) {
  return {percentile(series, 0.50), percentile(series, 0.95), percentile(series, 0.99)};
}

ExpertList reroute_topk(std::span<const double> probs, std::span<const ExpertId> resident,
                        double beta, int k) {
  if (beta < 0.0) throw std::invalid_argument("reroute_topk: beta must be >= 0");
  if (beta == 0.0) return topk(probs, k);
  std::vector<double> scores(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) scores[i] = std::log(probs[i] + 1e-12);
  for (ExpertId e : resident) scores[static_cast<std::size_t>(e)] += beta;
  return topk(scores, k);
}

ExpertList reroute_topk(std::span<const double> probs, const ExpertCache& cache, double beta, int k) {
  const ExpertList resident = cache.resident();
  return reroute_topk(probs, resident, beta, k);
}

namespace {

struct LayerRun {
  CacheTotals totals;
  std::vector<StepCacheStats> steps;
  ExpertList final_resident;
  std::vector<ExpertList> rerouted;  // per global step * batch
};

LayerRun run_layer(const RoutingTrace& trace, const CacheConfig& cfg, int layer,
                   const StepObserver& observer) {
  const auto& h = trace.header;
  const auto offsets = trace.segment_offsets();
  const bool rerouting = cfg.reroute_beta.has_value() && *cfg.reroute_beta != 0.0;
  const bool injecting = cfg.scenario && cfg.scenario->kind != FaultKind::kUnderCapacity;

  ExpertCache cache(h.n_routed_experts, cfg.capacity, cfg.policy);
  NextUseTable next_use;
  if (cfg.policy == Policy::kBelady) next_use = belady_next_use(trace, layer, cfg.reset_each_segment);

  std::mt19937_64 fault_rng;
  if (injecting) fault_rng.seed(cfg.scenario->seed ^ (0x9e3779b97f4a7c15ull * (layer + 1)));

  LayerRun run;
  run.steps.reserve(trace.total_steps());
  if (rerouting) run.rerouted.reserve(trace.total_steps() * static_cast<std::size_t>(h.batch_size));

  std::size_t global = 0;
  bool served_since_reset = false;
  ExpertList routed;
  ExpertList injected;
  for (int s = 0; s < trace.n_segments(); ++s) {
    if (cfg.reset_each_segment) {
      cache.reset();
      served_since_reset = false;
    }
    for (int t = 0; t < trace.segment_lengths[static_cast<std::size_t>(s)]; ++t, ++global) {
      std::span<const std::int64_t> row;
      if (cfg.policy == Policy::kBelady) row = next_use.row(global);

      injected.clear();
      if (injecting && served_since_reset) {
        // Fires between the previous step and this one; BELADY victims use
        // next uses seen from the previous step.
        std::span<const std::int64_t> prev_row;
        if (cfg.policy == Policy::kBelady) prev_row = next_use.row(global - 1);
        injected = cfg.scenario->kind == FaultKind::kInterference
                       ? cache.evict_random(cfg.scenario->n, fault_rng)
                       : cache.prefetch_random(cfg.scenario->n, fault_rng, prev_row);
      }

      routed.clear();
      for (int b = 0; b < h.batch_size; ++b) {
        const auto& r = trace.at(offsets, s, t, layer, b);
        if (rerouting) {
          ExpertList set = reroute_topk(r.probs, cache, *cfg.reroute_beta, h.top_k);
          routed.insert(routed.end(), set.begin(), set.end());
          run.rerouted.push_back(std::move(set));
        } else {
          routed.insert(routed.end(), r.topk.begin(), r.topk.end());
        }
      }
      const ExpertList unique = unique_in_order(routed);

      StepCacheStats st;
      st.token_total = static_cast<int>(routed.size());
      for (ExpertId e : routed) st.token_hits += cache.contains(e) ? 1 : 0;
      st.token_misses = st.token_total - st.token_hits;

      ExpertList before;
      if (observer) before = cache.resident();
      const ServeOutcome outcome = cache.serve(unique, row);
      st.unique_total = static_cast<int>(unique.size());
      st.unique_hits = outcome.hits;
      st.unique_misses = outcome.misses;
      st.evictions = static_cast<int>(outcome.evicted.size());
      served_since_reset = true;

      // Served experts stay resident whenever they fit (admission property).
      if (!injecting && cfg.capacity >= st.unique_total) {
        for (ExpertId e : unique) {
          if (!cache.contains(e)) {
            throw std::logic_error(fmt::format(
                "admission violated: expert {} not resident after layer {} step ({}, {})", e, layer,
                s, t));
          }
        }
      }

      run.totals.add(st);
      run.steps.push_back(st);
      if (observer) {
        StepEvent ev;
        ev.layer = layer;
        ev.segment = s;
        ev.step = t;
        ev.global_step = global;
        ev.unique_request = unique;
        ev.injected = &injected;
        ev.resident_before = std::move(before);
        ev.resident_after = cache.resident();
        ev.stats = st;
        observer(ev);
      }
    }
  }
  run.final_resident = cache.resident();
  return run;
}

}  // namespace

SimReport simulate(const RoutingTrace& trace, const CacheConfig& cfg, const SimOptions& opts) {
  const auto& h = trace.header;
  if (cfg.capacity < 1) throw std::invalid_argument("simulate: capacity must be >= 1");
  if (cfg.reroute_beta) {
    if (!(*cfg.reroute_beta >= 0.0)) throw std::invalid_argument("simulate: beta must be >= 0");
    if (!h.has_probs) throw std::invalid_argument("simulate: rerouting needs a trace with probs");
    if (cfg.policy == Policy::kBelady && *cfg.reroute_beta != 0.0) {
      throw std::invalid_argument(
          "simulate: BELADY needs the request stream up front, which rerouting changes online");
    }
  }
  if (cfg.scenario && cfg.scenario->kind != FaultKind::kUnderCapacity && cfg.scenario->n < 1) {
    throw std::invalid_argument("simulate: fault injection needs n >= 1");
  }

  std::vector<LayerRun> runs(static_cast<std::size_t>(h.n_moe_layers));
  parallel_for(runs.size(), opts.threads, [&](std::size_t l) {
    runs[l] = run_layer(trace, cfg, static_cast<int>(l), opts.observer);
  });

  SimReport report;
  report.header = h;
  const std::size_t steps = trace.total_steps();
  report.step_unique_misses.assign(steps, 0.0);
  report.step_token_hits.assign(steps, 0.0);
  for (int s = 0; s < trace.n_segments(); ++s) {
    for (int t = 0; t < trace.segment_lengths[static_cast<std::size_t>(s)]; ++t) {
      report.step_keys.emplace_back(s, t);
    }
  }
  for (auto& run : runs) {
    report.per_layer.push_back(run.totals);
    report.all.add(run.totals);
    for (std::size_t i = 0; i < steps; ++i) {
      report.step_unique_misses[i] += run.steps[i].unique_misses;
      report.step_token_hits[i] += run.steps[i].token_hits;
    }
    report.final_resident.push_back(run.final_resident);
    report.layer_steps.push_back(std::move(run.steps));
  }
  if (steps > 0) report.unique_miss_percentiles = percentiles(report.step_unique_misses);

  if (cfg.reroute_beta) {
    RoutingTrace rerouted = trace;
    rerouted.header.has_probs = false;
    const auto offsets = trace.segment_offsets();
    std::size_t global = 0;
    for (int s = 0; s < trace.n_segments(); ++s) {
      for (int t = 0; t < trace.segment_lengths[static_cast<std::size_t>(s)]; ++t, ++global) {
        for (int l = 0; l < h.n_moe_layers; ++l) {
          for (int b = 0; b < h.batch_size; ++b) {
            const std::size_t idx = offsets[static_cast<std::size_t>(s)] +
                                    (static_cast<std::size_t>(t) * h.n_moe_layers + l) * h.batch_size + b;
            auto& rec = rerouted.records[idx];
            rec.probs.clear();
            const auto& sets = runs[static_cast<std::size_t>(l)].rerouted;
            if (!sets.empty()) rec.topk = sets[global * h.batch_size + b];
          }
        }
      }
    }
    bool has_pairs = false;
    for (int len : rerouted.segment_lengths) has_pairs = has_pairs || len >= 2;
    if (has_pairs) report.rerouted_eor = eor(rerouted).grand;
    report.rerouted_trace = std::move(rerouted);
  }
  return report;
}

TpotReport estimate_tpot(const SimReport& report, const IoModel& io, int batch) {
  if (!(io.bandwidth_gbps > 0.0)) throw std::invalid_argument("estimate_tpot: bandwidth must be positive");
  if (!(io.expert_bytes > 0.0)) throw std::invalid_argument("estimate_tpot: expert_bytes must be positive");
  if (!(io.compute_ms > 0.0)) throw std::invalid_argument("estimate_tpot: compute_ms must be positive");
  if (batch < 1) throw std::invalid_argument("estimate_tpot: batch must be >= 1");
  TpotReport out;
  const double bytes_per_second = io.bandwidth_gbps * 1e9;
  for (double misses : report.step_unique_misses) {
    const double io_ms = misses * io.expert_bytes / bytes_per_second * 1000.0;
    out.io_ms.push_back(io_ms);
    out.tpot_ms.push_back(io.compute_ms + io_ms / batch);
  }
  if (!out.tpot_ms.empty()) out.tpot_percentiles = percentiles(out.tpot_ms);
  return out;
}

}  // namespace remoe
