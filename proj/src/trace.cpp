#include "remoe/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

#include "json.hpp"
#include "remoe/report.hpp"

namespace remoe {
namespace {

using nlohmann::json;

constexpr double kProbSumTolerance = 1e-9;

auto coords(const StepRecord& r) { return std::tie(r.segment, r.step, r.layer, r.batch); }

int required_int(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_number_integer()) {
    throw TraceError(fmt::format("line {}: missing or non-integer field \"{}\"", line, key), line);
  }
  return it->get<int>();
}

TraceHeader parse_header(const json& obj, std::size_t line) {
  if (!obj.is_object() || obj.value("type", "") != "header") {
    throw TraceError(fmt::format("line {}: first record must be the header", line), line);
  }
  TraceHeader h;
  h.n_moe_layers = required_int(obj, "n_moe_layers", line);
  h.n_routed_experts = required_int(obj, "n_routed_experts", line);
  h.top_k = required_int(obj, "top_k", line);
  h.batch_size = required_int(obj, "batch_size", line);
  auto it = obj.find("has_probs");
  if (it == obj.end() || !it->is_boolean()) {
    throw TraceError(fmt::format("line {}: missing or non-boolean field \"has_probs\"", line), line);
  }
  h.has_probs = it->get<bool>();
  return h;
}

StepRecord parse_record(const json& obj, std::size_t line) {
  if (!obj.is_object()) {
    throw TraceError(fmt::format("line {}: record is not a JSON object", line), line);
  }
  StepRecord r;
  r.segment = required_int(obj, "s", line);
  r.step = required_int(obj, "t", line);
  r.layer = required_int(obj, "l", line);
  r.batch = required_int(obj, "b", line);
  auto topk_it = obj.find("topk");
  if (topk_it == obj.end() || !topk_it->is_array()) {
    throw TraceError(fmt::format("line {}: missing array field \"topk\"", line), line);
  }
  for (const auto& v : *topk_it) {
    if (!v.is_number_integer()) {
      throw TraceError(fmt::format("line {}: non-integer expert id", line), line);
    }
    r.topk.push_back(v.get<ExpertId>());
  }
  if (auto probs_it = obj.find("probs"); probs_it != obj.end() && !probs_it->is_null()) {
    if (!probs_it->is_array()) {
      throw TraceError(fmt::format("line {}: \"probs\" must be an array", line), line);
    }
    for (const auto& v : *probs_it) {
      if (!v.is_number()) {
        throw TraceError(fmt::format("line {}: non-numeric probability", line), line);
      }
      r.probs.push_back(v.get<double>());
    }
  }
  return r;
}

Violation make_violation(std::string rule, const StepRecord& r, std::string detail) {
  return Violation{std::move(rule), r.segment, r.step, r.layer, r.batch, std::move(detail)};
}

void check_record(const TraceHeader& h, bool header_ok, const StepRecord& r,
                  std::vector<Violation>& out) {
  if (r.segment < 0 || r.step < 0 || r.layer < 0 || r.layer >= h.n_moe_layers || r.batch < 0 ||
      r.batch >= h.batch_size) {
    out.push_back(make_violation("coordinates", r, "coordinate outside header dimensions"));
  }
  if (static_cast<int>(r.topk.size()) != h.top_k) {
    out.push_back(make_violation(
        "arity", r, fmt::format("expected {} expert ids, got {}", h.top_k, r.topk.size())));
  }
  bool ids_ok = true;
  for (ExpertId e : r.topk) {
    if (e < 0 || e >= h.n_routed_experts) {
      out.push_back(make_violation(
          "range", r, fmt::format("expert id {} outside [0, {})", e, h.n_routed_experts)));
      ids_ok = false;
    }
  }
  ExpertList sorted = r.topk;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    out.push_back(make_violation("distinctness", r, "duplicate expert id in topk"));
    ids_ok = false;
  }

  if (!h.has_probs) {
    if (!r.probs.empty()) {
      out.push_back(make_violation("probs-unexpected", r, "probs present but has_probs is false"));
    }
    return;
  }
  if (static_cast<int>(r.probs.size()) != h.n_routed_experts) {
    out.push_back(make_violation(
        "probs-length", r,
        fmt::format("expected {} probabilities, got {}", h.n_routed_experts, r.probs.size())));
    return;
  }
  double sum = 0.0;
  for (double p : r.probs) {
    if (!std::isfinite(p) || p < 0.0) {
      out.push_back(make_violation("probs-negative", r, "negative or non-finite probability"));
      return;
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > kProbSumTolerance) {
    out.push_back(make_violation("probs-sum", r, fmt::format("probabilities sum to {:.17g}", sum)));
  }
  if (header_ok && ids_ok && static_cast<int>(r.topk.size()) == h.top_k) {
    const ExpertList expected = topk(r.probs, h.top_k);
    if (!same_expert_set(expected, r.topk)) {
      out.push_back(make_violation("probs-topk", r, "topk is not the Top-K of probs"));
    }
  }
}

}  // namespace

std::string Violation::to_string() const {
  return fmt::format("{} violation at (s={}, t={}, l={}, b={}): {}", rule, segment, step, layer,
                     batch, detail);
}

std::size_t RoutingTrace::total_steps() const {
  std::size_t n = 0;
  for (int len : segment_lengths) n += static_cast<std::size_t>(len);
  return n;
}

std::vector<std::size_t> RoutingTrace::segment_offsets() const {
  std::vector<std::size_t> offsets(segment_lengths.size() + 1, 0);
  for (std::size_t s = 0; s < segment_lengths.size(); ++s) {
    offsets[s + 1] = offsets[s] + static_cast<std::size_t>(segment_lengths[s]) * records_per_step();
  }
  return offsets;
}

const StepRecord& RoutingTrace::at(const std::vector<std::size_t>& offsets, int segment, int step,
                                   int layer, int batch) const {
  const std::size_t idx = offsets[static_cast<std::size_t>(segment)] +
                          (static_cast<std::size_t>(step) * header.n_moe_layers + layer) *
                              static_cast<std::size_t>(header.batch_size) +
                          static_cast<std::size_t>(batch);
  return records[idx];
}

RoutingTrace read_trace_unchecked(std::istream& in) {
  RoutingTrace trace;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw TraceError(fmt::format("line {}: malformed JSON ({})", line, e.what()), line);
    }
    if (!have_header) {
      trace.header = parse_header(obj, line);
      have_header = true;
      continue;
    }
    trace.records.push_back(parse_record(obj, line));
  }
  if (!have_header) throw TraceError("trace has no header line");

  int max_segment = -1;
  for (const auto& r : trace.records) max_segment = std::max(max_segment, r.segment);
  trace.segment_lengths.assign(static_cast<std::size_t>(max_segment + 1), 0);
  for (const auto& r : trace.records) {
    if (r.segment < 0) continue;
    auto& len = trace.segment_lengths[static_cast<std::size_t>(r.segment)];
    len = std::max(len, r.step + 1);
  }
  return trace;
}

void normalize_trace(RoutingTrace& trace) {
  std::stable_sort(trace.records.begin(), trace.records.end(),
                   [](const StepRecord& a, const StepRecord& b) { return coords(a) < coords(b); });
  int max_segment = -1;
  for (const auto& r : trace.records) max_segment = std::max(max_segment, r.segment);
  trace.segment_lengths.assign(static_cast<std::size_t>(std::max(max_segment + 1, 0)), 0);
  for (const auto& r : trace.records) {
    if (r.segment < 0) continue;
    auto& len = trace.segment_lengths[static_cast<std::size_t>(r.segment)];
    len = std::max(len, r.step + 1);
  }
}

std::vector<Violation> validate_trace(const RoutingTrace& trace) {
  std::vector<Violation> out;
  const TraceHeader& h = trace.header;
  const bool header_ok = h.n_moe_layers >= 1 && h.n_routed_experts >= 1 && h.top_k >= 1 &&
                         h.batch_size >= 1 && h.top_k <= h.n_routed_experts;
  if (!header_ok) {
    out.push_back(Violation{"header", -1, -1, -1, -1,
                            "counts must be >= 1 and top_k <= n_routed_experts"});
    return out;
  }

  for (const auto& r : trace.records) check_record(h, header_ok, r, out);

  for (std::size_t i = 1; i < trace.records.size(); ++i) {
    const auto& prev = trace.records[i - 1];
    const auto& cur = trace.records[i];
    if (coords(prev) == coords(cur)) {
      out.push_back(make_violation("duplicate", cur, "record coordinates repeated"));
    } else if (coords(cur) < coords(prev)) {
      out.push_back(make_violation("ordering", cur, "records not sorted by (s, t, l, b)"));
    }
  }

  // Coverage: each (s, t) present must carry every (l, b) pair.
  const std::size_t pairs = trace.records_per_step();
  std::map<std::pair<int, int>, std::vector<bool>> seen;
  for (const auto& r : trace.records) {
    if (r.layer < 0 || r.layer >= h.n_moe_layers || r.batch < 0 || r.batch >= h.batch_size) {
      continue;
    }
    auto& mask = seen[{r.segment, r.step}];
    if (mask.empty()) mask.assign(pairs, false);
    mask[static_cast<std::size_t>(r.layer) * h.batch_size + r.batch] = true;
  }
  for (const auto& [key, mask] : seen) {
    for (std::size_t i = 0; i < pairs; ++i) {
      if (mask[i]) continue;
      const int layer = static_cast<int>(i / h.batch_size);
      const int batch = static_cast<int>(i % h.batch_size);
      out.push_back(Violation{"coverage", key.first, key.second, layer, batch,
                              "missing record for this (layer, batch)"});
    }
  }

  // Contiguity: segments 0..S-1 each with steps 0..T_s-1.
  std::map<int, std::vector<int>> steps_by_segment;
  for (const auto& [key, mask] : seen) steps_by_segment[key.first].push_back(key.second);
  int expected_segment = 0;
  for (const auto& [segment, steps] : steps_by_segment) {
    if (segment != expected_segment) {
      out.push_back(Violation{"contiguity", expected_segment, -1, -1, -1,
                              fmt::format("segment ids jump from {} to {}", expected_segment - 1,
                                          segment)});
    }
    expected_segment = segment + 1;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (steps[i] != static_cast<int>(i)) {
        out.push_back(Violation{"contiguity", segment, static_cast<int>(i), -1, -1,
                                "step indices are not contiguous from 0"});
        break;
      }
    }
  }

  std::vector<int> expected_lengths;
  for (const auto& [segment, steps] : steps_by_segment) {
    if (segment < 0) continue;
    if (expected_lengths.size() <= static_cast<std::size_t>(segment)) {
      expected_lengths.resize(static_cast<std::size_t>(segment) + 1, 0);
    }
    expected_lengths[static_cast<std::size_t>(segment)] = steps.back() + 1;
  }
  if (expected_lengths != trace.segment_lengths) {
    out.push_back(Violation{"segment-lengths", -1, -1, -1, -1,
                            "segment_lengths disagree with the records"});
  }
  return out;
}

RoutingTrace parse_trace(std::istream& in) {
  RoutingTrace trace = read_trace_unchecked(in);
  normalize_trace(trace);
  const auto violations = validate_trace(trace);
  if (!violations.empty()) throw TraceError(violations.front().to_string());
  return trace;
}

RoutingTrace load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TraceError(fmt::format("cannot open trace file '{}'", path));
  return parse_trace(in);
}

void write_trace(std::ostream& out, const RoutingTrace& trace) {
  nlohmann::ordered_json header;
  header["type"] = "header";
  header["n_moe_layers"] = trace.header.n_moe_layers;
  header["n_routed_experts"] = trace.header.n_routed_experts;
  header["top_k"] = trace.header.top_k;
  header["batch_size"] = trace.header.batch_size;
  header["has_probs"] = trace.header.has_probs;
  out << header.dump() << '\n';
  for (const auto& r : trace.records) {
    nlohmann::ordered_json rec;
    rec["s"] = r.segment;
    rec["t"] = r.step;
    rec["l"] = r.layer;
    rec["b"] = r.batch;
    rec["topk"] = r.topk;
    if (!r.probs.empty()) rec["probs"] = r.probs;
    out << rec.dump() << '\n';
  }
}

void save_trace(const std::string& path, const RoutingTrace& trace) {
  std::ostringstream buf;
  write_trace(buf, trace);
  write_file_atomic(path, buf.str());
}

RoutingTrace select_batch(const RoutingTrace& trace, int batch) {
  RoutingTrace out;
  out.header = trace.header;
  out.header.batch_size = 1;
  out.segment_lengths = trace.segment_lengths;
  for (const auto& r : trace.records) {
    if (r.batch != batch) continue;
    StepRecord copy = r;
    copy.batch = 0;
    out.records.push_back(std::move(copy));
  }
  return out;
}

}  // namespace remoe
