#pragma once

// Trace-driven per-layer expert cache simulation.
//
// Each step of a layer flattens the B*K routed slots, dedupes them in request
// order, counts hits against the resident set as it was before the step,
// fetches the misses and admits the whole requested set. Eviction victims are
// chosen only among residents that the current step did not request, so an
// expert used by a step is never evicted before the step completes.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "remoe/trace.hpp"

namespace remoe {

enum class Policy { kLru, kLfu, kFifo, kBelady };

std::string_view to_string(Policy policy);
std::optional<Policy> parse_policy(std::string_view name);

enum class FaultKind {
  kUnderCapacity,  // C < K; configured through the capacity itself
  kInterference,   // evict n random residents between steps
  kPrefetch,       // insert n non-resident experts between steps
};

std::string_view to_string(FaultKind kind);

struct FaultScenario {
  FaultKind kind = FaultKind::kInterference;
  int n = 1;
  std::uint64_t seed = 0;
};

struct CacheConfig {
  int capacity = 1;
  Policy policy = Policy::kLru;
  bool reset_each_segment = false;
  std::optional<double> reroute_beta;
  std::optional<FaultScenario> scenario;
};

inline constexpr std::int64_t kNeverUsed = std::numeric_limits<std::int64_t>::max();

/// Next request step of every expert, per step of one layer.
class NextUseTable {
 public:
  NextUseTable() = default;
  NextUseTable(std::size_t steps, int n_experts)
      : n_experts_(n_experts), data_(steps * static_cast<std::size_t>(n_experts), kNeverUsed) {}

  /// Step index (global, across segments) of the first request of `expert`
  /// strictly after `step`, or kNeverUsed.
  std::int64_t at(std::size_t step, ExpertId expert) const {
    return data_[step * static_cast<std::size_t>(n_experts_) + static_cast<std::size_t>(expert)];
  }
  std::span<const std::int64_t> row(std::size_t step) const {
    return {data_.data() + step * static_cast<std::size_t>(n_experts_),
            static_cast<std::size_t>(n_experts_)};
  }
  std::int64_t& mutable_at(std::size_t step, ExpertId expert) {
    return data_[step * static_cast<std::size_t>(n_experts_) + static_cast<std::size_t>(expert)];
  }
  std::size_t steps() const { return n_experts_ ? data_.size() / n_experts_ : 0; }
  int n_experts() const { return n_experts_; }

 private:
  int n_experts_ = 0;
  std::vector<std::int64_t> data_;
};

/// Backward scan over the deduped per-step requests of `layer`. With
/// `horizon_per_segment` set, horizons stop at segment boundaries.
NextUseTable belady_next_use(const RoutingTrace& trace, int layer, bool horizon_per_segment);

/// Order-preserving dedupe.
ExpertList unique_in_order(std::span<const ExpertId> routed);

struct ServeOutcome {
  int hits = 0;
  int misses = 0;
  ExpertList evicted;
  ExpertList dropped;  // used but not retained (only when capacity < |U|)
};

/// Resident set plus policy metadata for one layer.
class ExpertCache {
 public:
  ExpertCache(int n_experts, int capacity, Policy policy);

  void reset();

  /// Serves one step. `unique_request` must be deduped. `next_use` is needed
  /// for BELADY and holds, per expert, the next request after this step.
  ServeOutcome serve(std::span<const ExpertId> unique_request,
                     std::span<const std::int64_t> next_use = {});

  /// Between-step interference: evicts up to n random residents.
  ExpertList evict_random(int n, std::mt19937_64& rng);

  /// Between-step prefetch: inserts up to n random non-resident experts,
  /// evicting by policy (any resident is a candidate) when full.
  ExpertList prefetch_random(int n, std::mt19937_64& rng, std::span<const std::int64_t> next_use = {});

  bool contains(ExpertId e) const { return resident_[static_cast<std::size_t>(e)]; }
  int size() const { return size_; }
  int capacity() const { return capacity_; }
  Policy policy() const { return policy_; }
  /// Resident experts in ascending id order.
  ExpertList resident() const;

 private:
  std::optional<ExpertId> pick_victim(const std::vector<bool>& protect,
                                      std::span<const std::int64_t> next_use) const;
  void insert(ExpertId e);
  void erase(ExpertId e);

  int n_experts_;
  int capacity_;
  Policy policy_;
  int size_ = 0;
  std::uint64_t clock_ = 0;
  std::vector<bool> resident_;
  std::vector<std::uint64_t> last_use_;
  std::vector<std::uint64_t> inserted_at_;
  std::vector<std::uint64_t> frequency_;
};

/// Counts for one (segment, step, layer).
struct StepCacheStats {
  int unique_hits = 0;
  int unique_total = 0;
  int unique_misses = 0;
  int token_hits = 0;
  int token_total = 0;
  int token_misses = 0;
  int evictions = 0;

  bool operator==(const StepCacheStats&) const = default;
};

struct CacheTotals {
  std::uint64_t unique_hits = 0;
  std::uint64_t unique_total = 0;
  std::uint64_t unique_misses = 0;
  std::uint64_t token_hits = 0;
  std::uint64_t token_total = 0;
  std::uint64_t token_misses = 0;
  std::uint64_t evictions = 0;

  void add(const StepCacheStats& s);
  void add(const CacheTotals& t);
  double uhr() const;
  double thr() const;
  bool operator==(const CacheTotals&) const = default;
};

struct Percentiles {
  double p50 = 0.0;
  double p95 = 0.0;
  double p99 = 0.0;
  bool operator==(const Percentiles&) const = default;
};

/// Nearest-rank percentile: sorted[ceil(rank * n) - 1]. Throws on empty input.
double percentile(std::span<const double> series, double rank);
Percentiles percentiles(std::span<const double> series);

struct SimReport {
  TraceHeader header;
  std::vector<CacheTotals> per_layer;
  CacheTotals all;
  std::vector<std::vector<StepCacheStats>> layer_steps;  // [layer][global step]
  std::vector<std::pair<int, int>> step_keys;             // (segment, step) per global step
  std::vector<double> step_unique_misses;                 // summed over layers
  std::vector<double> step_token_hits;                    // summed over layers
  Percentiles unique_miss_percentiles;
  std::vector<ExpertList> final_resident;  // per layer, ascending ids

  /// Present when rerouting was requested.
  std::optional<RoutingTrace> rerouted_trace;
  std::optional<double> rerouted_eor;
};

/// Observed after every served step; may be called concurrently for
/// different layers when threads > 1.
struct StepEvent {
  int layer = 0;
  int segment = 0;
  int step = 0;
  std::size_t global_step = 0;
  std::span<const ExpertId> unique_request;
  const ExpertList* injected = nullptr;  // experts evicted or inserted by a fault before this step
  ExpertList resident_before;
  ExpertList resident_after;
  StepCacheStats stats;
};
using StepObserver = std::function<void(const StepEvent&)>;

struct SimOptions {
  int threads = 1;
  StepObserver observer;
};

/// Cache-aware rerouting: Top-K of log(p + 1e-12) + beta * [resident].
/// beta == 0 returns topk(probs).
ExpertList reroute_topk(std::span<const double> probs, const ExpertCache& cache, double beta, int k);
ExpertList reroute_topk(std::span<const double> probs, std::span<const ExpertId> resident,
                        double beta, int k);

SimReport simulate(const RoutingTrace& trace, const CacheConfig& cfg, const SimOptions& opts = {});

struct IoModel {
  double expert_bytes = 0.0;
  double bandwidth_gbps = 0.0;  // 1 GB/s = 1e9 bytes/s
  double compute_ms = 0.0;
};

struct TpotReport {
  std::vector<double> io_ms;
  std::vector<double> tpot_ms;
  Percentiles tpot_percentiles;
};

/// IO_ms = misses * expert_bytes / bandwidth * 1000; TPOT = compute_ms + IO_ms / B.
TpotReport estimate_tpot(const SimReport& report, const IoModel& io, int batch);

}  // namespace remoe
