#pragma once

// Routing-trace data model, JSONL serialization, validation and a synthetic
// generator with controllable step-to-step locality.
//
// Trace file layout (one JSON object per line, UTF-8):
//   {"type":"header","n_moe_layers":L,"n_routed_experts":N,"top_k":K,"batch_size":B,"has_probs":bool}
//   {"s":0,"t":0,"l":0,"b":0,"topk":[...],"probs":[...]}
// Expert ids are 0-based (0 .. N-1).

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "remoe/topk.hpp"

namespace remoe {

/// Raised for unreadable or invalid trace input. `line()` is the 1-based
/// input line when the problem is tied to one, 0 otherwise.
class TraceError : public std::runtime_error {
 public:
  TraceError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct TraceHeader {
  int n_moe_layers = 1;
  int n_routed_experts = 1;
  int top_k = 1;
  int batch_size = 1;
  bool has_probs = false;

  bool operator==(const TraceHeader&) const = default;
};

struct StepRecord {
  int segment = 0;
  int step = 0;
  int layer = 0;
  int batch = 0;
  ExpertList topk;
  std::vector<double> probs;  // empty when the trace carries no distributions

  bool operator==(const StepRecord&) const = default;
};

/// Records sorted by (segment, step, layer, batch) with no holes: every
/// (segment, step) present carries one record per (layer, batch) pair.
struct RoutingTrace {
  TraceHeader header;
  std::vector<StepRecord> records;
  std::vector<int> segment_lengths;

  bool operator==(const RoutingTrace&) const = default;

  int n_segments() const { return static_cast<int>(segment_lengths.size()); }
  std::size_t records_per_step() const {
    return static_cast<std::size_t>(header.n_moe_layers) *
           static_cast<std::size_t>(header.batch_size);
  }
  std::size_t total_steps() const;

  /// First record index of each segment; only meaningful for valid traces.
  std::vector<std::size_t> segment_offsets() const;

  /// Record lookup for a valid (sorted, hole-free) trace.
  const StepRecord& at(const std::vector<std::size_t>& offsets, int segment, int step, int layer,
                       int batch) const;
};

struct Violation {
  std::string rule;  // e.g. "range", "distinctness", "coverage"
  int segment = -1;
  int step = -1;
  int layer = -1;
  int batch = -1;
  std::string detail;

  std::string to_string() const;
};

/// Reads a trace without semantic checks. Lines that are not valid JSON or
/// miss required fields raise TraceError with the line number.
RoutingTrace read_trace_unchecked(std::istream& in);

/// Reads, normalizes ordering and validates. Throws TraceError on the first
/// violation.
RoutingTrace parse_trace(std::istream& in);
RoutingTrace load_trace(const std::string& path);

void write_trace(std::ostream& out, const RoutingTrace& trace);
void save_trace(const std::string& path, const RoutingTrace& trace);

/// Sorts records by (segment, step, layer, batch) and recomputes segment_lengths.
void normalize_trace(RoutingTrace& trace);

/// Empty iff every trace invariant holds.
std::vector<Violation> validate_trace(const RoutingTrace& trace);

struct SynthConfig {
  TraceHeader header;
  int n_segments = 1;
  int steps_per_segment = 32;
  double stickiness = 0.5;
  std::uint64_t seed = 0;
  bool emit_probs = false;
  double concentration = 1.0;
  bool independent_batches = false;
};

/// Deterministic for a fixed seed. Each step keeps every expert of the
/// previous step's set with probability `stickiness` and fills the remaining
/// slots uniformly from the unused experts.
RoutingTrace synth_trace(const SynthConfig& cfg);

/// Segment-length-preserving copy containing only batch index `batch`.
RoutingTrace select_batch(const RoutingTrace& trace, int batch);

}  // namespace remoe
