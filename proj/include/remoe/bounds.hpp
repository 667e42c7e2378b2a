#pragma once

// Executable checks of the overlap-based fetch bounds.
//
// Step bound:        N_fetch(t) <= K - |E_t ∩ E_{t-1}|          (t >= 2)
// Average bound:     mean N_fetch <= K (1 - EOR)
// Working-set bound: N_fetch(t) <= K - |E_t ∩ U_{t,L_t}|, where U_{t,l} is the
//                    union of the last l requested sets and L_t the longest
//                    horizon whose union still fits in the cache.
//
// Both hold for a serve-and-admit cache with C >= K, resets between requests
// and no traffic between steps. The counterexample scenarios break one of
// those assumptions each and must produce violations.

#include <cstdint>
#include <string>
#include <vector>

#include "remoe/cache_sim.hpp"
#include "remoe/trace.hpp"

namespace remoe {

struct BoundStep {
  int layer = 0;
  int batch = 0;
  int segment = 0;
  int step = 0;
  int n_fetch = 0;
  int step_bound = 0;  // K - |E_t ∩ E_{t-1}|
  int ws_horizon = 0;  // L_t; 0 when even one step does not fit (C < K)
  int ws_bound = 0;    // K - |E_t ∩ U_{t,L_t}|
  bool violated = false;
  bool ws_violated = false;
  ExpertList requested;
  ExpertList cache_before;  // filled for violating steps only
  ExpertList injected;      // fault traffic right before this step
};

struct SequenceBound {
  int layer = 0;
  int batch = 0;
  int segment = 0;
  double mean_fetch = 0.0;
  double mean_bound = 0.0;  // K (1 - EOR) of the sequence
  double eor = 0.0;
  bool holds = true;
};

struct BoundReport {
  int top_k = 0;
  int capacity = 0;
  std::vector<BoundStep> steps;  // every t >= 2 of every (layer, batch, segment)
  std::vector<SequenceBound> sequences;
  std::size_t violations = 0;
  std::size_t ws_violations = 0;
  std::size_t average_violations = 0;
  std::size_t ws_strictly_tighter = 0;  // steps where ws_bound < step_bound
  std::vector<std::uint64_t> layer_fetches;  // all steps, per layer
  std::uint64_t total_fetches = 0;
};

/// Runs the simulator per batch index with any configuration (including
/// C < K and fault injection) and records both bounds at every step.
BoundReport evaluate_bounds(const RoutingTrace& trace, const CacheConfig& cfg);

/// Requires C >= K, resets on, no rerouting and no fault scenario.
BoundReport check_step_bound(const RoutingTrace& trace, const CacheConfig& cfg);

/// LRU-only form of the working-set check; same preconditions.
BoundReport check_working_set_bound(const RoutingTrace& trace, int capacity);

struct Counterexample {
  std::string name;
  FaultKind kind = FaultKind::kUnderCapacity;
  std::string broken_assumption;
  int top_k = 0;
  int capacity = 0;
  std::size_t violations = 0;
  BoundStep first_violation;
};

std::vector<Counterexample> run_counterexamples();

struct CampaignConfig {
  int traces = 1000;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct CampaignResult {
  int traces = 0;
  std::size_t runs = 0;  // (trace, capacity) pairs
  std::size_t steps_checked = 0;
  std::size_t step_violations = 0;
  std::size_t average_violations = 0;
  std::size_t ws_violations = 0;
  std::size_t ws_violations_at_2k = 0;
  std::size_t ws_strictly_tighter = 0;
};

/// Random single-batch synthetic traces checked with LRU at C in {K, K+2, 2K}.
CampaignResult run_bound_campaign(const CampaignConfig& cfg);

}  // namespace remoe
