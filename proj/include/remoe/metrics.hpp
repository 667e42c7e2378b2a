#pragma once

// Routing-locality and concentration metrics over routing traces.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "remoe/trace.hpp"

namespace remoe {

/// |cur ∩ prev| / k. Both sets must have exactly k entries.
double instantaneous_reuse(std::span<const ExpertId> prev, std::span<const ExpertId> cur, int k);

struct EorResult {
  double grand = 0.0;
  std::vector<double> per_layer;
  std::size_t sequences = 0;  // (segment, layer, batch) sequences with T_s >= 2
  std::size_t pairs = 0;      // adjacent step pairs contributing
};

enum class EorAveraging {
  kPerSequence,  // mean of per-sequence means (default)
  kPooled,       // mean over every adjacent pair in the trace
};

/// Mean IR over t = 2..T_s of each (segment, layer, batch) sequence.
/// Throws std::invalid_argument when no segment has two or more steps.
EorResult eor(const RoutingTrace& trace, EorAveraging mode = EorAveraging::kPerSequence);

/// H(p) / ln(n) with 0 log 0 = 0. Throws on negative entries or a sum more
/// than 1e-9 away from 1.
double normalized_entropy(std::span<const double> p);

/// Mean normalized entropy over all records; nullopt for index-only traces.
std::optional<double> mean_normalized_entropy(const RoutingTrace& trace);

/// Population standard deviation over mean. Throws on an all-zero input.
double load_balance_cv(std::span<const double> counts);

/// Per-layer routed-slot counts over the whole trace (length N_r each).
std::vector<std::vector<double>> expert_selection_counts(const RoutingTrace& trace);

/// Mean number of distinct experts per (segment, layer, batch) sequence.
double unique_experts_per_sequence(const RoutingTrace& trace);

struct MetricsReport {
  double eor = 0.0;
  std::vector<double> mean_ir_per_layer;
  std::optional<double> entropy_norm;
  double load_cv = 0.0;
  std::vector<double> load_cv_per_layer;
  double unique_experts_per_sequence = 0.0;
};

MetricsReport compute_metrics(const RoutingTrace& trace,
                              EorAveraging mode = EorAveraging::kPerSequence);

}  // namespace remoe
