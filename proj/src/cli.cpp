#include "remoe/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "remoe/bounds.hpp"
#include "remoe/cache_sim.hpp"
#include "remoe/metrics.hpp"
#include "remoe/objective.hpp"
#include "remoe/parallel.hpp"
#include "remoe/report.hpp"
#include "remoe/router.hpp"
#include "remoe/trace.hpp"
#include "remoe/train.hpp"

namespace remoe {
namespace {

using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Io {
  std::ostream& out;
  std::ostream& err;
  int threads = 1;
};

bool wants_json(const std::string& path) {
  const auto dot = path.rfind('.');
  return dot != std::string::npos && path.substr(dot) == ".json";
}

std::string stem_of(const std::string& path) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.rfind('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path;
  return path.substr(0, dot);
}

void write_json(const std::string& path, const Json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

Json double_or_null(std::optional<double> v) { return v ? Json(*v) : Json(nullptr); }

class ManifestScope {
 public:
  ManifestScope(std::string subcommand, std::uint64_t seed) : start_(Clock::now()) {
    m_.subcommand = std::move(subcommand);
    m_.seed = seed;
    m_.tool_version = kToolVersion;
  }
  RunManifest& manifest() { return m_; }
  std::string id() const { return m_.id(); }

  /// Appends to `<first output>.manifest.jsonl`.
  void commit() {
    if (m_.outputs.empty()) return;
    m_.wall_seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    append_manifest(m_.outputs.front() + ".manifest.jsonl", m_);
  }

 private:
  RunManifest m_;
  Clock::time_point start_;
};

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  int layers = 1;
  int experts = 8;
  int top_k = 2;
  int batch = 1;
  int segments = 1;
  int steps = 32;
  double stickiness = 0.5;
  std::uint64_t seed = 0;
  bool probs = false;
  double concentration = 1.0;
  bool independent_batches = false;
};

int run_synth(const SynthArgs& a, Io& io) {
  SynthConfig cfg;
  cfg.header = {a.layers, a.experts, a.top_k, a.batch, a.probs};
  cfg.n_segments = a.segments;
  cfg.steps_per_segment = a.steps;
  cfg.stickiness = a.stickiness;
  cfg.seed = a.seed;
  cfg.emit_probs = a.probs;
  cfg.concentration = a.concentration;
  cfg.independent_batches = a.independent_batches;
  RoutingTrace trace;
  try {
    trace = synth_trace(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  ManifestScope scope("synth", a.seed);
  scope.manifest().config = Json{{"n_moe_layers", a.layers},     {"n_routed_experts", a.experts},
                                 {"top_k", a.top_k},             {"batch_size", a.batch},
                                 {"n_segments", a.segments},     {"steps_per_segment", a.steps},
                                 {"stickiness", a.stickiness},   {"emit_probs", a.probs},
                                 {"concentration", a.concentration},
                                 {"independent_batches", a.independent_batches}};
  scope.manifest().outputs = {a.out};
  save_trace(a.out, trace);
  scope.commit();
  io.out << fmt::format("wrote {} records ({} segments) to {}\n", trace.records.size(), trace.n_segments(), a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- validate

struct ValidateArgs {
  std::string trace;
  std::string out;
};

int run_validate(const ValidateArgs& a, Io& io) {
  std::ifstream in(a.trace);
  if (!in) throw DataError(fmt::format("cannot open trace file '{}'", a.trace));
  RoutingTrace trace = read_trace_unchecked(in);
  normalize_trace(trace);
  const std::vector<Violation> violations = validate_trace(trace);

  if (!a.out.empty()) {
    ManifestScope scope("validate", 0);
    scope.manifest().inputs = {a.trace};
    scope.manifest().outputs = {a.out};
    if (wants_json(a.out)) {
      Json j;
      j["manifest_id"] = scope.id();
      j["trace"] = a.trace;
      j["records"] = trace.records.size();
      j["valid"] = violations.empty();
      j["violations"] = Json::array();
      for (const auto& v : violations) {
        j["violations"].push_back(Json{{"rule", v.rule},   {"segment", v.segment}, {"step", v.step},
                                       {"layer", v.layer}, {"batch", v.batch},     {"detail", v.detail}});
      }
      write_json(a.out, j);
    } else {
      CsvTable table({"rule", "segment", "step", "layer", "batch", "detail"});
      for (const auto& v : violations) {
        std::string detail = v.detail;
        std::replace(detail.begin(), detail.end(), ',', ';');
        table.add_row({v.rule, std::to_string(v.segment), std::to_string(v.step), std::to_string(v.layer),
                       std::to_string(v.batch), detail});
      }
      write_file_atomic(a.out, table.str());
    }
    scope.commit();
  }

  if (violations.empty()) {
    io.out << fmt::format("valid: {} records, {} segments\n", trace.records.size(), trace.n_segments());
    return kExitOk;
  }
  for (const auto& v : violations) io.err << v.to_string() << "\n";
  io.err << fmt::format("{} violation(s)\n", violations.size());
  return kExitData;
}

// ---------------------------------------------------------------- metrics

struct MetricsArgs {
  std::string trace;
  std::string out;
  bool per_layer = false;
  bool pooled = false;
};

int run_metrics(const MetricsArgs& a, Io& io) {
  const RoutingTrace trace = load_trace(a.trace);
  const MetricsReport r = compute_metrics(trace, a.pooled ? EorAveraging::kPooled : EorAveraging::kPerSequence);

  ManifestScope scope("metrics", 0);
  scope.manifest().config = Json{{"per_layer", a.per_layer}, {"eor_averaging", a.pooled ? "pooled" : "per_sequence"}};
  scope.manifest().inputs = {a.trace};
  scope.manifest().outputs = {a.out};

  if (wants_json(a.out)) {
    Json j;
    j["manifest_id"] = scope.id();
    j["trace"] = a.trace;
    j["eor_averaging"] = a.pooled ? "pooled" : "per_sequence";
    j["eor"] = r.eor;
    j["entropy_norm"] = double_or_null(r.entropy_norm);
    j["load_cv"] = r.load_cv;
    j["unique_experts_per_sequence"] = r.unique_experts_per_sequence;
    if (a.per_layer) {
      j["per_layer"] = Json::array();
      for (std::size_t l = 0; l < r.mean_ir_per_layer.size(); ++l) {
        j["per_layer"].push_back(
            Json{{"layer", l}, {"mean_ir", r.mean_ir_per_layer[l]}, {"load_cv", r.load_cv_per_layer[l]}});
      }
    }
    write_json(a.out, j);
  } else {
    CsvTable table({"metric", "layer", "value"});
    table.add_row({"eor", "all", format_double(r.eor)});
    table.add_row({"entropy_norm", "all", r.entropy_norm ? format_double(*r.entropy_norm) : "unavailable"});
    table.add_row({"load_cv", "all", format_double(r.load_cv)});
    table.add_row({"unique_experts_per_sequence", "all", format_double(r.unique_experts_per_sequence)});
    if (a.per_layer) {
      for (std::size_t l = 0; l < r.mean_ir_per_layer.size(); ++l) {
        table.add_row({"mean_ir", std::to_string(l), format_double(r.mean_ir_per_layer[l])});
      }
      for (std::size_t l = 0; l < r.load_cv_per_layer.size(); ++l) {
        table.add_row({"load_cv", std::to_string(l), format_double(r.load_cv_per_layer[l])});
      }
    }
    write_file_atomic(a.out, table.str());
  }
  scope.commit();
  io.out << fmt::format("eor={} load_cv={} -> {}\n", format_double(r.eor), format_double(r.load_cv), a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string trace;
  std::string out;
  int capacity = 0;
  std::string policy = "lru";
  bool reset = false;
  std::optional<double> beta;
  std::optional<double> expert_bytes;
  std::optional<double> bandwidth_gbps;
  std::optional<double> compute_ms;
  std::string fault;
  int fault_n = 1;
  std::uint64_t seed = 0;
  std::string rerouted_trace;
};

Json totals_json(const CacheTotals& t) {
  return Json{{"uHR", t.uhr()},
              {"tHR", t.thr()},
              {"uMiss", t.unique_misses},
              {"tMiss", t.token_misses},
              {"unique_hits", t.unique_hits},
              {"unique_total", t.unique_total},
              {"token_hits", t.token_hits},
              {"token_total", t.token_total},
              {"evictions", t.evictions}};
}

Json percentiles_json(const Percentiles& p) { return Json{{"p50", p.p50}, {"p95", p.p95}, {"p99", p.p99}}; }

int run_simulate(const SimulateArgs& a, Io& io) {
  CacheConfig cfg;
  cfg.capacity = a.capacity;
  const auto policy = parse_policy(a.policy);
  if (!policy) throw UsageError(fmt::format("unknown policy '{}'", a.policy));
  cfg.policy = *policy;
  cfg.reset_each_segment = a.reset;
  cfg.reroute_beta = a.beta;
  if (cfg.policy == Policy::kBelady && a.beta && *a.beta != 0.0) {
    throw UsageError("--beta is not supported with the belady policy");
  }
  if (!a.fault.empty()) {
    FaultScenario s;
    if (a.fault == "interference") {
      s.kind = FaultKind::kInterference;
    } else if (a.fault == "prefetch") {
      s.kind = FaultKind::kPrefetch;
    } else {
      throw UsageError(fmt::format("unknown fault '{}'", a.fault));
    }
    s.n = a.fault_n;
    s.seed = a.seed;
    cfg.scenario = s;
  }
  const int io_flags = (a.expert_bytes ? 1 : 0) + (a.bandwidth_gbps ? 1 : 0) + (a.compute_ms ? 1 : 0);
  if (io_flags != 0 && io_flags != 3) {
    throw UsageError("--expert-bytes, --bandwidth-gbps and --compute-ms go together");
  }

  const RoutingTrace trace = load_trace(a.trace);
  SimOptions opts;
  opts.threads = io.threads;
  const SimReport rep = simulate(trace, cfg, opts);
  std::optional<TpotReport> tpot;
  if (io_flags == 3) {
    tpot = estimate_tpot(rep, IoModel{*a.expert_bytes, *a.bandwidth_gbps, *a.compute_ms}, trace.header.batch_size);
  }

  ManifestScope scope("simulate", a.seed);
  Json config{{"capacity", a.capacity}, {"policy", std::string(to_string(cfg.policy))}, {"reset_each_segment", a.reset}};
  config["beta"] = double_or_null(a.beta);
  config["expert_bytes"] = double_or_null(a.expert_bytes);
  config["bandwidth_gbps"] = double_or_null(a.bandwidth_gbps);
  config["compute_ms"] = double_or_null(a.compute_ms);
  config["fault"] = a.fault.empty() ? Json(nullptr) : Json(a.fault);
  config["fault_n"] = a.fault_n;
  scope.manifest().config = config;
  scope.manifest().inputs = {a.trace};
  scope.manifest().outputs = {a.out};

  if (wants_json(a.out)) {
    Json j;
    j["manifest_id"] = scope.id();
    j["trace"] = a.trace;
    j["config"] = config;
    j["all"] = totals_json(rep.all);
    j["per_layer"] = Json::array();
    for (std::size_t l = 0; l < rep.per_layer.size(); ++l) {
      Json row = totals_json(rep.per_layer[l]);
      row["layer"] = l;
      row["final_resident"] = rep.final_resident[l];
      j["per_layer"].push_back(row);
    }
    j["unique_miss_percentiles"] = percentiles_json(rep.unique_miss_percentiles);
    if (tpot) j["tpot_percentiles"] = percentiles_json(tpot->tpot_percentiles);
    if (rep.rerouted_eor) j["rerouted_eor"] = *rep.rerouted_eor;
    j["steps"] = Json::array();
    for (std::size_t g = 0; g < rep.step_keys.size(); ++g) {
      Json row{{"segment", rep.step_keys[g].first},
               {"step", rep.step_keys[g].second},
               {"unique_misses", rep.step_unique_misses[g]},
               {"token_hits", rep.step_token_hits[g]}};
      if (tpot) {
        row["io_ms"] = tpot->io_ms[g];
        row["tpot_ms"] = tpot->tpot_ms[g];
      }
      j["steps"].push_back(row);
    }
    write_json(a.out, j);
  } else {
    CsvTable table({"layer", "uHR", "tHR", "uMiss", "tMiss"});
    auto add = [&table](const std::string& layer, const CacheTotals& t) {
      table.add_row({layer, format_double(t.uhr()), format_double(t.thr()), std::to_string(t.unique_misses),
                     std::to_string(t.token_misses)});
    };
    for (std::size_t l = 0; l < rep.per_layer.size(); ++l) add(std::to_string(l), rep.per_layer[l]);
    add("all", rep.all);
    write_file_atomic(a.out, table.str());

    std::vector<std::string> step_cols{"segment", "step", "unique_misses", "token_hits"};
    if (tpot) {
      step_cols.push_back("io_ms");
      step_cols.push_back("tpot_ms");
    }
    CsvTable steps(step_cols);
    for (std::size_t g = 0; g < rep.step_keys.size(); ++g) {
      std::vector<std::string> row{std::to_string(rep.step_keys[g].first), std::to_string(rep.step_keys[g].second),
                                   format_double(rep.step_unique_misses[g]), format_double(rep.step_token_hits[g])};
      if (tpot) {
        row.push_back(format_double(tpot->io_ms[g]));
        row.push_back(format_double(tpot->tpot_ms[g]));
      }
      steps.add_row(std::move(row));
    }
    const std::string steps_path = stem_of(a.out) + ".steps.csv";
    write_file_atomic(steps_path, steps.str());

    CsvTable pct({"series", "p50", "p95", "p99"});
    auto add_pct = [&pct](const std::string& name, const Percentiles& p) {
      pct.add_row({name, format_double(p.p50), format_double(p.p95), format_double(p.p99)});
    };
    add_pct("unique_misses", rep.unique_miss_percentiles);
    if (tpot) add_pct("tpot_ms", tpot->tpot_percentiles);
    const std::string pct_path = stem_of(a.out) + ".percentiles.csv";
    write_file_atomic(pct_path, pct.str());
    scope.manifest().outputs.push_back(steps_path);
    scope.manifest().outputs.push_back(pct_path);
  }
  if (!a.rerouted_trace.empty()) {
    if (!rep.rerouted_trace) throw UsageError("--rerouted-trace needs --beta");
    save_trace(a.rerouted_trace, *rep.rerouted_trace);
    scope.manifest().outputs.push_back(a.rerouted_trace);
  }
  scope.commit();
  io.out << fmt::format("uHR={} tHR={} uMiss={}", format_double(rep.all.uhr()), format_double(rep.all.thr()),
                        rep.all.unique_misses);
  if (rep.rerouted_eor) io.out << fmt::format(" rerouted_eor={}", format_double(*rep.rerouted_eor));
  io.out << fmt::format(" -> {}\n", a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- bound-check

struct BoundArgs {
  std::string trace;
  std::string out;
  std::optional<int> capacity;
  std::string policy = "lru";
  std::optional<int> campaign;
  std::uint64_t seed = 1;
  bool counterexamples = false;
};

Json step_json(const BoundStep& s) {
  Json j{{"layer", s.layer},           {"batch", s.batch},           {"segment", s.segment},
         {"step", s.step},             {"n_fetch", s.n_fetch},       {"step_bound", s.step_bound},
         {"ws_horizon", s.ws_horizon}, {"ws_bound", s.ws_bound},     {"violated", s.violated},
         {"ws_violated", s.ws_violated}, {"requested", s.requested}};
  if (s.violated || s.ws_violated) j["cache_before"] = s.cache_before;
  if (!s.injected.empty()) j["injected"] = s.injected;
  return j;
}

void emit(const std::string& out, const Json& j, Io& io) {
  if (out.empty()) {
    io.out << j.dump(2) << "\n";
  } else {
    write_json(out, j);
  }
}

int run_bound_check(const BoundArgs& a, Io& io) {
  const int modes = (a.counterexamples ? 1 : 0) + (a.campaign ? 1 : 0) + (!a.trace.empty() ? 1 : 0);
  if (modes != 1) throw UsageError("choose exactly one of --trace, --campaign or --counterexamples");

  ManifestScope scope("bound-check", a.seed);
  if (!a.out.empty()) scope.manifest().outputs = {a.out};
  Json j;
  j["manifest_id"] = Json(nullptr);
  int code = kExitOk;

  if (a.counterexamples) {
    scope.manifest().config = Json{{"mode", "counterexamples"}};
    j["mode"] = "counterexamples";
    j["scenarios"] = Json::array();
    for (const auto& c : run_counterexamples()) {
      j["scenarios"].push_back(Json{{"name", c.name},
                                    {"kind", std::string(to_string(c.kind))},
                                    {"broken_assumption", c.broken_assumption},
                                    {"top_k", c.top_k},
                                    {"capacity", c.capacity},
                                    {"violations", c.violations},
                                    {"first_violation", step_json(c.first_violation)}});
      io.out << fmt::format("{}: {} violation(s), broken assumption: {}\n", c.name, c.violations,
                            c.broken_assumption);
      if (c.violations == 0) code = kExitProperty;
    }
  } else if (a.campaign) {
    if (*a.campaign < 1) throw UsageError("--campaign needs N >= 1");
    scope.manifest().config = Json{{"mode", "campaign"}, {"traces", *a.campaign}};
    const CampaignResult r = run_bound_campaign({*a.campaign, a.seed, io.threads});
    j["mode"] = "campaign";
    j["traces"] = r.traces;
    j["seed"] = a.seed;
    j["runs"] = r.runs;
    j["steps_checked"] = r.steps_checked;
    j["step_violations"] = r.step_violations;
    j["average_violations"] = r.average_violations;
    j["ws_violations"] = r.ws_violations;
    j["ws_violations_at_2k"] = r.ws_violations_at_2k;
    j["ws_strictly_tighter"] = r.ws_strictly_tighter;
    io.out << fmt::format("{} traces, {} steps: {} step, {} average, {} working-set violation(s)\n", r.traces,
                          r.steps_checked, r.step_violations, r.average_violations, r.ws_violations);
    if (r.step_violations + r.average_violations + r.ws_violations > 0) code = kExitProperty;
  } else {
    if (!a.capacity) throw UsageError("--trace needs --capacity");
    const auto policy = parse_policy(a.policy);
    if (!policy) throw UsageError(fmt::format("unknown policy '{}'", a.policy));
    const RoutingTrace trace = load_trace(a.trace);
    CacheConfig cfg;
    cfg.capacity = *a.capacity;
    cfg.policy = *policy;
    cfg.reset_each_segment = true;
    const bool lru = cfg.policy == Policy::kLru;
    BoundReport r;
    try {
      r = lru ? check_working_set_bound(trace, cfg.capacity) : check_step_bound(trace, cfg);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    scope.manifest().inputs = {a.trace};
    scope.manifest().config = Json{{"mode", "trace"}, {"capacity", cfg.capacity}, {"policy", a.policy}};
    j["mode"] = "trace";
    j["trace"] = a.trace;
    j["policy"] = a.policy;
    j["top_k"] = r.top_k;
    j["capacity"] = r.capacity;
    j["steps_checked"] = r.steps.size();
    j["violations"] = r.violations;
    j["average_violations"] = r.average_violations;
    if (lru) {
      j["ws_violations"] = r.ws_violations;
      j["ws_strictly_tighter"] = r.ws_strictly_tighter;
    }
    j["total_fetches"] = r.total_fetches;
    j["layer_fetches"] = r.layer_fetches;
    j["sequences"] = Json::array();
    for (const auto& s : r.sequences) {
      j["sequences"].push_back(Json{{"layer", s.layer},          {"batch", s.batch},
                                    {"segment", s.segment},      {"mean_fetch", s.mean_fetch},
                                    {"mean_bound", s.mean_bound}, {"eor", s.eor},
                                    {"holds", s.holds}});
    }
    j["steps"] = Json::array();
    for (const auto& s : r.steps) j["steps"].push_back(step_json(s));
    const std::size_t ws = lru ? r.ws_violations : 0;
    io.out << fmt::format("{} steps: {} step, {} average, {} working-set violation(s)\n", r.steps.size(), r.violations,
                          r.average_violations, ws);
    if (r.violations + r.average_violations + ws > 0) code = kExitProperty;
  }
  j["manifest_id"] = scope.id();
  emit(a.out, j, io);
  scope.commit();
  return code;
}

// ---------------------------------------------------------------- router

struct RouterArgs {
  std::string check;
  std::optional<std::size_t> trials;
  std::uint64_t seed = 1;
  std::string out;
};

int run_router(const RouterArgs& a, Io& io) {
  ManifestScope scope("router", a.seed);
  if (!a.out.empty()) scope.manifest().outputs = {a.out};
  Json j;
  j["manifest_id"] = Json(nullptr);
  j["check"] = a.check;
  int code = kExitOk;
  if (a.check == "stability") {
    const std::size_t trials = a.trials.value_or(100000);
    const StabilityCampaign r = run_stability_campaign(trials, a.seed);
    j["trials"] = r.trials;
    j["condition_met"] = r.condition_met;
    j["top_k_changes"] = r.top_k_changes;
    io.out << fmt::format("stability: {} trials, {} under the margin condition, {} Top-K change(s)\n", r.trials,
                          r.condition_met, r.top_k_changes);
    if (r.top_k_changes > 0) code = kExitProperty;
  } else {
    const std::size_t trials = a.trials.value_or(10000);
    const PinskerCampaign r = run_pinsker_campaign(trials, a.seed);
    j["trials"] = r.trials;
    j["violations"] = r.violations;
    j["max_ratio"] = r.max_ratio;
    io.out << fmt::format("pinsker: {} trials, {} violation(s), max l1/bound {}\n", r.trials, r.violations,
                          format_double(r.max_ratio));
    if (r.violations > 0) code = kExitProperty;
  }
  scope.manifest().config = Json{{"check", a.check}, {"trials", j["trials"]}};
  j["seed"] = a.seed;
  j["manifest_id"] = scope.id();
  if (!a.out.empty()) {
    write_json(a.out, j);
    scope.commit();
  }
  return code;
}

// ---------------------------------------------------------------- training config

struct TrainSetup {
  LossWeights weights;
  TrainConfig train;
  ToyBenchmark data;
};

void apply_config(const Json& j, TrainSetup& s) {
  if (!j.is_object()) throw DataError("training config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    LossWeights& w = s.weights;
    TrainConfig& t = s.train;
    ToyBenchmark& d = s.data;
    if (key == "lambda_kl") w.lambda_kl = v.get<double>();
    else if (key == "lambda_reuse") w.lambda_reuse = v.get<double>();
    else if (key == "lambda_smooth") w.lambda_smooth = v.get<double>();
    else if (key == "lambda_lag") w.lambda_lag = v.get<double>();
    else if (key == "lambda_ws") w.lambda_ws = v.get<double>();
    else if (key == "lags") w.lags = v.get<std::vector<int>>();
    else if (key == "window") w.window = v.get<int>();
    else if (key == "warm_reuse_steps") w.warm_reuse_steps = v.get<int>();
    else if (key == "warm_loc_steps") w.warm_loc_steps = v.get<int>();
    else if (key == "eps") w.eps = v.get<double>();
    else if (key == "lag_normalize_by_valid") w.lag_normalize_by_valid = v.get<bool>();
    else if (key == "ws_include_partial") w.ws_include_partial = v.get<bool>();
    else if (key == "steps") t.steps = v.get<int>();
    else if (key == "lr") t.lr = v.get<double>();
    else if (key == "optimizer") {
      const auto name = v.get<std::string>();
      if (name == "adam") t.optimizer = Optimizer::kAdam;
      else if (name == "gd") t.optimizer = Optimizer::kGradientDescent;
      else throw DataError(fmt::format("unknown optimizer '{}'", name));
    } else if (key == "seed") t.seed = v.get<std::uint64_t>();
    else if (key == "clip_norm") t.clip_norm = v.get<double>();
    else if (key == "adam_beta1") t.adam_beta1 = v.get<double>();
    else if (key == "adam_beta2") t.adam_beta2 = v.get<double>();
    else if (key == "adam_eps") t.adam_eps = v.get<double>();
    else if (key == "hidden_dim") d.hidden_dim = v.get<int>();
    else if (key == "n_experts") d.n_experts = v.get<int>();
    else if (key == "top_k") d.top_k = v.get<int>();
    else if (key == "n_sequences") d.n_sequences = v.get<int>();
    else if (key == "seq_len") d.seq_len = v.get<int>();
    else if (key == "switch_every") d.switch_every = v.get<int>();
    else if (key == "noise") d.noise = v.get<double>();
    else if (key == "init_scale") d.init_scale = v.get<double>();
    else if (key == "data_seed") d.seed = v.get<std::uint64_t>();
    else throw DataError(fmt::format("unknown config key '{}'", key));
  }
}

Json setup_json(const TrainSetup& s) {
  const LossWeights& w = s.weights;
  const TrainConfig& t = s.train;
  const ToyBenchmark& d = s.data;
  return Json{{"lambda_kl", w.lambda_kl},
              {"lambda_reuse", w.lambda_reuse},
              {"lambda_smooth", w.lambda_smooth},
              {"lambda_lag", w.lambda_lag},
              {"lambda_ws", w.lambda_ws},
              {"lags", w.lags},
              {"window", w.window},
              {"warm_reuse_steps", w.warm_reuse_steps},
              {"warm_loc_steps", w.warm_loc_steps},
              {"eps", w.eps},
              {"lag_normalize_by_valid", w.lag_normalize_by_valid},
              {"ws_include_partial", w.ws_include_partial},
              {"steps", t.steps},
              {"lr", t.lr},
              {"optimizer", t.optimizer == Optimizer::kAdam ? "adam" : "gd"},
              {"seed", t.seed},
              {"clip_norm", t.clip_norm},
              {"adam_beta1", t.adam_beta1},
              {"adam_beta2", t.adam_beta2},
              {"adam_eps", t.adam_eps},
              {"hidden_dim", d.hidden_dim},
              {"n_experts", d.n_experts},
              {"top_k", d.top_k},
              {"n_sequences", d.n_sequences},
              {"seq_len", d.seq_len},
              {"switch_every", d.switch_every},
              {"noise", d.noise},
              {"init_scale", d.init_scale},
              {"data_seed", d.seed}};
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path));
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(fmt::format("'{}': {}", path, e.what()));
  }
}

TrainSetup resolve_setup(const Json& config) {
  TrainSetup s;
  try {
    apply_config(config, s);
  } catch (const nlohmann::json::type_error& e) {
    throw DataError(fmt::format("training config: {}", e.what()));
  }
  s.weights.validate();
  s.train.validate();
  s.data.validate();
  return s;
}

TrainResult run_training(const TrainSetup& s) {
  const ToyData data = make_toy_benchmark(s.data);
  return train(data.theta_init, data.sequences, data.top_k, s.train, s.weights);
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string out_theta;
  std::string log;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a, Io& io) {
  Json config = a.config.empty() ? Json::object() : read_json_file(a.config);
  if (a.seed) {
    config["seed"] = *a.seed;
    config["data_seed"] = *a.seed;
  }
  const TrainSetup setup = resolve_setup(config);
  const TrainResult r = run_training(setup);

  ManifestScope scope("train", setup.train.seed);
  scope.manifest().config = setup_json(setup);
  if (!a.config.empty()) scope.manifest().inputs = {a.config};
  scope.manifest().outputs = {a.out_theta, a.out_theta + ".json", a.log};
  save_gate(a.out_theta, r.theta);
  write_file_atomic(a.log, train_log_csv(r.log));
  scope.commit();
  io.out << fmt::format("eor {} -> {} ({:+.1f}%), trust_kl {}\n", format_double(r.initial_eor),
                        format_double(r.final_eor), 100.0 * (r.final_eor / r.initial_eor - 1.0),
                        format_double(r.final_trust_kl));
  return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 1;
  int instances = 20;
  double h = 1e-5;
  double tol = 1e-5;
  bool double_fd = false;
  std::string out;
};

int run_gradcheck_cmd(const GradcheckArgs& a, Io& io) {
  if (a.instances < 1) throw UsageError("--instances must be >= 1");
  const GradcheckResult r = run_gradcheck(a.instances, a.seed, LossWeights{}, a.h, !a.double_fd);
  ManifestScope scope("gradcheck", a.seed);
  scope.manifest().config =
      Json{{"instances", a.instances}, {"h", a.h}, {"tol", a.tol}, {"fd_precision", a.double_fd ? "double" : "extended"}};
  Json terms = Json::object();
  for (std::size_t i = 0; i < std::size(kAllLossTerms); ++i) {
    terms[to_string(kAllLossTerms[i])] = r.max_rel_error[i];
    io.out << fmt::format("{:<7} max relative error {:.3e}\n", to_string(kAllLossTerms[i]), r.max_rel_error[i]);
  }
  io.out << fmt::format("max relative error {:.3e} over {} instances\n", r.worst(), r.instances);
  if (!a.out.empty()) {
    scope.manifest().outputs = {a.out};
    if (wants_json(a.out)) {
      write_json(a.out, Json{{"manifest_id", scope.id()},
                             {"instances", r.instances},
                             {"h", r.h},
                             {"max_relative_error", r.worst()},
                             {"terms", terms}});
    } else {
      CsvTable table({"term", "max_relative_error"});
      for (const auto& [name, v] : terms.items()) table.add_row({name, format_double(v.get<double>())});
      write_file_atomic(a.out, table.str());
    }
    scope.commit();
  }
  return r.worst() < a.tol ? kExitOk : kExitProperty;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  std::string config;
  std::string out;
};

std::string cell_text(const Json& v) {
  if (v.is_array()) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ";") + x.dump();
    return s;
  }
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

int run_sweep(const SweepArgs& a, Io& io) {
  const Json cfg = read_json_file(a.config);
  if (!cfg.is_object()) throw DataError("sweep config must be a JSON object");
  for (const auto& [key, v] : cfg.items()) {
    if (key != "base" && key != "grid") throw DataError(fmt::format("unknown sweep key '{}'", key));
  }
  const Json base = cfg.contains("base") ? cfg["base"] : Json::object();
  if (!cfg.contains("grid") || !cfg["grid"].is_object() || cfg["grid"].empty()) {
    throw DataError("sweep: empty grid");
  }
  const Json& grid = cfg["grid"];
  std::vector<std::string> keys;
  std::vector<std::vector<Json>> values;
  std::size_t points = 1;
  for (const auto& [key, v] : grid.items()) {
    if (!v.is_array() || v.empty()) throw DataError(fmt::format("sweep: grid '{}' needs a non-empty list", key));
    keys.push_back(key);
    values.emplace_back(v.begin(), v.end());
    points *= v.size();
  }

  // Point p enumerates the grid with the first key varying slowest.
  std::vector<Json> point_overrides(points);
  std::vector<TrainSetup> setups(points);
  for (std::size_t p = 0; p < points; ++p) {
    Json config = base;
    std::size_t rest = p;
    for (std::size_t i = keys.size(); i-- > 0;) {
      config[keys[i]] = values[i][rest % values[i].size()];
      rest /= values[i].size();
    }
    point_overrides[p] = config;
    setups[p] = resolve_setup(config);
  }
  std::vector<TrainResult> results(points);
  parallel_for(points, io.threads, [&](std::size_t p) { results[p] = run_training(setups[p]); });

  ManifestScope scope("sweep", setups.front().train.seed);
  scope.manifest().config = cfg;
  scope.manifest().inputs = {a.config};
  scope.manifest().outputs = {a.out};
  const std::vector<std::string> metric_cols{"initial_eor", "final_eor", "eor_gain", "trust_kl", "reuse_rho",
                                             "reuse",       "smooth",    "lag",      "ws",       "total"};
  auto metrics_of = [](const TrainResult& r) {
    return std::vector<double>{r.initial_eor,        r.final_eor,          r.final_eor / r.initial_eor - 1.0,
                               r.final_trust_kl,     r.final_loss.reuse_rho, r.final_loss.reuse_loss,
                               r.final_loss.smooth,  r.final_loss.lag,     r.final_loss.ws,
                               r.final_loss.total};
  };
  if (wants_json(a.out)) {
    Json j;
    j["manifest_id"] = scope.id();
    j["points"] = Json::array();
    for (std::size_t p = 0; p < points; ++p) {
      Json row;
      for (const auto& k : keys) row[k] = point_overrides[p][k];
      const auto m = metrics_of(results[p]);
      for (std::size_t i = 0; i < m.size(); ++i) row[metric_cols[i]] = m[i];
      j["points"].push_back(row);
    }
    write_json(a.out, j);
  } else {
    std::vector<std::string> cols = keys;
    cols.insert(cols.end(), metric_cols.begin(), metric_cols.end());
    CsvTable table(cols);
    for (std::size_t p = 0; p < points; ++p) {
      std::vector<std::string> row;
      for (const auto& k : keys) row.push_back(cell_text(point_overrides[p][k]));
      for (double v : metrics_of(results[p])) row.push_back(format_double(v));
      table.add_row(std::move(row));
    }
    write_file_atomic(a.out, table.str());
  }
  scope.commit();
  io.out << fmt::format("{} grid point(s) -> {}\n", points, a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- dispatch

int run(CLI::App& app, int argc, const char* const* argv, Io& io) {
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (env REMOE_LAB_THREADS)")
      ->envname("REMOE_LAB_THREADS")
      ->check(CLI::Range(1, 1024));

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic routing trace");
  c_synth->add_option("--out", synth.out, "Output trace (.jsonl)")->required();
  c_synth->add_option("--layers", synth.layers, "MoE layers");
  c_synth->add_option("--experts", synth.experts, "Routed experts N_r");
  c_synth->add_option("--top-k", synth.top_k, "K");
  c_synth->add_option("--batch", synth.batch, "Batch size B");
  c_synth->add_option("--segments", synth.segments, "Segments");
  c_synth->add_option("--steps", synth.steps, "Steps per segment");
  c_synth->add_option("--stickiness", synth.stickiness, "Per-expert reuse probability p");
  c_synth->add_option("--seed", synth.seed, "RNG seed");
  c_synth->add_flag("--probs", synth.probs, "Emit routing distributions");
  c_synth->add_option("--concentration", synth.concentration, "Sharpness of emitted distributions");
  c_synth->add_flag("--independent-batches", synth.independent_batches, "Separate expert stream per batch item");

  ValidateArgs validate;
  auto* c_validate = app.add_subcommand("validate", "Check a trace against every format invariant");
  c_validate->add_option("--trace", validate.trace, "Trace file")->required();
  c_validate->add_option("--out", validate.out, "Optional violation report (.json or .csv)");

  MetricsArgs metrics;
  auto* c_metrics = app.add_subcommand("metrics", "Locality and concentration metrics");
  c_metrics->add_option("--trace", metrics.trace, "Trace file")->required();
  c_metrics->add_option("--out", metrics.out, "Report (.json or .csv)")->required();
  c_metrics->add_flag("--per-layer", metrics.per_layer, "Add per-layer rows");
  c_metrics->add_flag("--pooled", metrics.pooled, "Pool EOR over all adjacent pairs");

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "Per-layer expert cache simulation");
  c_sim->add_option("--trace", sim.trace, "Trace file")->required();
  c_sim->add_option("--capacity", sim.capacity, "Experts per layer cache C")->required()->check(CLI::PositiveNumber);
  c_sim->add_option("--policy", sim.policy, "lru|lfu|fifo|belady");
  c_sim->add_flag("--reset-each-segment", sim.reset, "Clear the cache at every segment start");
  c_sim->add_option("--beta", sim.beta, "Cache-aware rerouting strength")->check(CLI::NonNegativeNumber);
  c_sim->add_option("--expert-bytes", sim.expert_bytes, "Bytes per expert");
  c_sim->add_option("--bandwidth-gbps", sim.bandwidth_gbps, "Storage bandwidth in GB/s");
  c_sim->add_option("--compute-ms", sim.compute_ms, "Per-token compute baseline in ms");
  c_sim->add_option("--fault", sim.fault, "interference|prefetch between steps");
  c_sim->add_option("--fault-n", sim.fault_n, "Experts touched per fault event")->check(CLI::PositiveNumber);
  c_sim->add_option("--seed", sim.seed, "Fault RNG seed");
  c_sim->add_option("--rerouted-trace", sim.rerouted_trace, "Write the rerouted trace here");
  c_sim->add_option("--out", sim.out, "Report (.json, or .csv plus .steps.csv and .percentiles.csv)")->required();

  BoundArgs bound;
  auto* c_bound = app.add_subcommand("bound-check", "Verify the overlap-based fetch bounds");
  c_bound->add_option("--trace", bound.trace, "Trace file");
  c_bound->add_option("--capacity", bound.capacity, "Cache capacity C");
  c_bound->add_option("--policy", bound.policy, "Replacement policy");
  c_bound->add_option("--campaign", bound.campaign, "Randomized campaign over N synthetic traces");
  c_bound->add_option("--seed", bound.seed, "Campaign seed");
  c_bound->add_flag("--counterexamples", bound.counterexamples, "Run the three assumption-breaking scenarios");
  c_bound->add_option("--out", bound.out, "JSON report (stdout when omitted)");

  RouterArgs router;
  auto* c_router = app.add_subcommand("router", "Top-K stability and Pinsker campaigns");
  c_router->add_option("--check", router.check, "stability|pinsker")
      ->required()
      ->check(CLI::IsMember({"stability", "pinsker"}));
  c_router->add_option("--trials", router.trials, "Number of random draws");
  c_router->add_option("--seed", router.seed, "RNG seed");
  c_router->add_option("--out", router.out, "JSON report");

  TrainArgs trainer;
  auto* c_train = app.add_subcommand("train", "Train the toy gate with the locality objective");
  c_train->add_option("--config", trainer.config, "JSON config (LossWeights, TrainConfig and data fields)");
  c_train->add_option("--out-theta", trainer.out_theta, "Trained gate file")->required();
  c_train->add_option("--log", trainer.log, "Per-step CSV log")->required();
  c_train->add_option("--seed", trainer.seed, "Overrides seed and data_seed");

  GradcheckArgs grad;
  auto* c_grad = app.add_subcommand("gradcheck", "Analytic gradients against central differences");
  c_grad->add_option("--seed", grad.seed, "RNG seed");
  c_grad->add_option("--instances", grad.instances, "Random instances");
  c_grad->add_option("--step", grad.h, "Finite-difference step h")->check(CLI::PositiveNumber);
  c_grad->add_option("--tol", grad.tol, "Failure threshold on the max relative error");
  c_grad->add_flag("--double", grad.double_fd, "Evaluate differences in double instead of long double");
  c_grad->add_option("--out", grad.out, "Report (.json or .csv)");

  SweepArgs sweep;
  auto* c_sweep = app.add_subcommand("sweep", "Train once per grid point of loss-weight overrides");
  c_sweep->add_option("--config", sweep.config, "JSON with \"base\" and \"grid\"")->required();
  c_sweep->add_option("--out", sweep.out, "Report (.json or .csv)")->required();

  CLI::App* active = &app;
  try {
    app.parse(argc, argv);
    io.threads = threads;
    if (*c_synth) return active = c_synth, run_synth(synth, io);
    if (*c_validate) return active = c_validate, run_validate(validate, io);
    if (*c_metrics) return active = c_metrics, run_metrics(metrics, io);
    if (*c_sim) return active = c_sim, run_simulate(sim, io);
    if (*c_bound) return active = c_bound, run_bound_check(bound, io);
    if (*c_router) return active = c_router, run_router(router, io);
    if (*c_train) return active = c_train, run_train(trainer, io);
    if (*c_grad) return active = c_grad, run_gradcheck_cmd(grad, io);
    if (*c_sweep) return active = c_sweep, run_sweep(sweep, io);
    return kExitUsage;
  } catch (const CLI::CallForHelp&) {
    io.out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    io.err << "error: " << e.what() << "\n\n";
    io.err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitUsage;
  } catch (const UsageError& e) {
    io.err << "error: " << e.what() << "\n\n" << active->help();
    return kExitUsage;
  } catch (const TrainDivergence& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const TraceError& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::domain_error& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::logic_error& e) {
    io.err << "assertion failed: " << e.what() << "\n";
    return kExitProperty;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"remoe_lab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  CLI::App app{"Routing-locality lab: traces, metrics, cache simulation, bounds, gate training", "remoe_lab"};
  Io io{out, err};
  return run(app, static_cast<int>(argv.size()), argv.data(), io);
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace remoe
