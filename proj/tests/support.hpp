#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "remoe/trace.hpp"

namespace remoe::testing {

/// Single-layer, single-batch trace; segments[s][t] is the routed set.
inline RoutingTrace trace_from_sets(int n_experts, int k, const std::vector<std::vector<ExpertList>>& segments) {
  RoutingTrace trace;
  trace.header = {1, n_experts, k, 1, false};
  for (std::size_t s = 0; s < segments.size(); ++s) {
    for (std::size_t t = 0; t < segments[s].size(); ++t) {
      StepRecord r;
      r.segment = static_cast<int>(s);
      r.step = static_cast<int>(t);
      r.topk = segments[s][t];
      trace.records.push_back(r);
    }
  }
  normalize_trace(trace);
  return trace;
}

inline std::string to_text(const RoutingTrace& trace) {
  std::ostringstream out;
  write_trace(out, trace);
  return out.str();
}

inline RoutingTrace from_text(const std::string& text) {
  std::istringstream in(text);
  return parse_trace(in);
}

}  // namespace remoe::testing
