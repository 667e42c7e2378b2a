#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "remoe/cache_sim.hpp"
#include "remoe/cli.hpp"
#include "remoe/metrics.hpp"
#include "remoe/router.hpp"
#include "remoe/train.hpp"

using namespace remoe;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run lab(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("remoe_test_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(lab({}).code == kExitUsage);
  CHECK(lab({"frobnicate"}).code == kExitUsage);
  CHECK(lab({"simulate", "--trace", "x.jsonl", "--out", "y.csv"}).code == kExitUsage);
  CHECK(lab({"synth"}).code == kExitUsage);
  CHECK(lab({"--threads", "0", "synth", "--out", "z.jsonl"}).code == kExitUsage);
  CHECK(lab({"--help"}).code == kExitOk);
  CHECK(lab({"simulate", "--help"}).code == kExitOk);
}

TEST_CASE("synth, validate and metrics") {
  TempDir dir("metrics");
  const std::string trace = dir / "t.jsonl";
  REQUIRE(lab({"synth", "--out", trace, "--layers", "2", "--experts", "12", "--top-k", "3", "--segments", "2",
               "--steps", "20", "--seed", "4"})
              .code == kExitOk);
  const std::string before = slurp(trace);
  CHECK(lab({"validate", "--trace", trace}).code == kExitOk);

  const Run m = lab({"metrics", "--trace", trace, "--out", dir / "m.csv", "--per-layer"});
  CHECK(m.code == kExitOk);
  const auto rows = read_csv(dir / "m.csv");
  REQUIRE(rows.size() == 1 + 4 + 2 + 2);
  CHECK(rows[0] == std::vector<std::string>{"metric", "layer", "value"});
  CHECK(rows[2] == std::vector<std::string>{"entropy_norm", "all", "unavailable"});
  const RoutingTrace t = load_trace(trace);
  CHECK(std::stod(rows[1][2]) == eor(t).grand);
  CHECK(slurp(trace) == before);

  REQUIRE(lab({"metrics", "--trace", trace, "--out", dir / "m.json", "--pooled"}).code == kExitOk);
  const auto j = nlohmann::json::parse(slurp(dir / "m.json"));
  CHECK(j["eor"].get<double>() == eor(t, EorAveraging::kPooled).grand);
  CHECK(j["entropy_norm"].is_null());
  CHECK(j.contains("manifest_id"));
  CHECK(fs::exists(dir / "m.json.manifest.jsonl"));

  REQUIRE(lab({"synth", "--out", dir / "p.jsonl", "--probs", "--seed", "1"}).code == kExitOk);
  REQUIRE(lab({"metrics", "--trace", dir / "p.jsonl", "--out", dir / "p.csv"}).code == kExitOk);
  CHECK(read_csv(dir / "p.csv")[2][2] != "unavailable");
}

TEST_CASE("bad traces exit 2") {
  TempDir dir("bad");
  const std::string header = R"({"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false})";
  spit(dir / "dup.jsonl", header + "\n" + R"({"s":0,"t":0,"l":0,"b":0,"topk":[1,1]})" + "\n");
  const Run v = lab({"validate", "--trace", dir / "dup.jsonl", "--out", dir / "v.json"});
  CHECK(v.code == kExitData);
  const auto j = nlohmann::json::parse(slurp(dir / "v.json"));
  CHECK_FALSE(j["valid"].get<bool>());
  CHECK(j["violations"][0]["rule"] == "distinctness");

  CHECK(lab({"metrics", "--trace", dir / "dup.jsonl", "--out", dir / "m.csv"}).code == kExitData);
  spit(dir / "garbage.jsonl", header + "\n{not json\n");
  CHECK(lab({"metrics", "--trace", dir / "garbage.jsonl", "--out", dir / "m.csv"}).code == kExitData);
  CHECK(lab({"metrics", "--trace", dir / "missing.jsonl", "--out", dir / "m.csv"}).code == kExitData);
  CHECK_FALSE(fs::exists(dir / "m.csv"));
}

TEST_CASE("simulate") {
  TempDir dir("simulate");
  const std::string trace = dir / "t.jsonl";
  REQUIRE(lab({"synth", "--out", trace, "--layers", "2", "--experts", "16", "--top-k", "4", "--batch", "2",
               "--segments", "3", "--steps", "30", "--probs", "--seed", "3"})
              .code == kExitOk);
  const RoutingTrace t = load_trace(trace);

  const Run r = lab({"simulate", "--trace", trace, "--capacity", "6", "--policy", "lfu", "--reset-each-segment",
                     "--expert-bytes", "1e6", "--bandwidth-gbps", "4", "--compute-ms", "20", "--out",
                     dir / "sim.csv"});
  REQUIRE(r.code == kExitOk);
  const SimReport want = simulate(t, {6, Policy::kLfu, true});
  const auto table = read_csv(dir / "sim.csv");
  REQUIRE(table.size() == 4);
  CHECK(table[0] == std::vector<std::string>{"layer", "uHR", "tHR", "uMiss", "tMiss"});
  CHECK(table[3][0] == "all");
  CHECK(std::stod(table[3][1]) == want.all.uhr());
  CHECK(std::stoull(table[3][3]) == want.all.unique_misses);
  const auto steps = read_csv(dir / "sim.steps.csv");
  CHECK(steps.size() == 1 + 90);
  CHECK(steps[0].back() == "tpot_ms");
  CHECK(fs::exists(dir / "sim.percentiles.csv"));

  REQUIRE(lab({"simulate", "--trace", trace, "--capacity", "4", "--beta", "1", "--reset-each-segment",
               "--rerouted-trace", dir / "rr.jsonl", "--out", dir / "sim.json"})
              .code == kExitOk);
  CacheConfig cfg{4, Policy::kLru, true};
  cfg.reroute_beta = 1.0;
  const SimReport rr = simulate(t, cfg);
  const auto j = nlohmann::json::parse(slurp(dir / "sim.json"));
  CHECK(j.contains("manifest_id"));
  CHECK(load_trace(dir / "rr.jsonl") == *rr.rerouted_trace);

  CHECK(lab({"simulate", "--trace", trace, "--capacity", "4", "--policy", "belady", "--beta", "1", "--out",
             dir / "x.csv"})
            .code == kExitUsage);
  CHECK(lab({"simulate", "--trace", trace, "--capacity", "4", "--policy", "mru", "--out", dir / "x.csv"}).code ==
        kExitUsage);
  CHECK(lab({"simulate", "--trace", trace, "--capacity", "0", "--out", dir / "x.csv"}).code == kExitUsage);
}

TEST_CASE("simulate output does not depend on the thread count") {
  TempDir dir("threads");
  const std::string trace = dir / "t.jsonl";
  REQUIRE(lab({"synth", "--out", trace, "--layers", "4", "--seed", "8"}).code == kExitOk);
  REQUIRE(lab({"simulate", "--trace", trace, "--capacity", "3", "--out", dir / "a.csv"}).code == kExitOk);
  REQUIRE(lab({"--threads", "3", "simulate", "--trace", trace, "--capacity", "3", "--out", dir / "b.csv"}).code ==
          kExitOk);
  ::setenv("REMOE_LAB_THREADS", "2", 1);
  REQUIRE(lab({"simulate", "--trace", trace, "--capacity", "3", "--out", dir / "c.csv"}).code == kExitOk);
  ::unsetenv("REMOE_LAB_THREADS");
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(slurp(dir / "a.csv") == slurp(dir / "c.csv"));
  CHECK(slurp(dir / "a.steps.csv") == slurp(dir / "c.steps.csv"));
}

TEST_CASE("bound-check") {
  TempDir dir("bounds");
  const Run c = lab({"bound-check", "--counterexamples", "--out", dir / "c.json"});
  CHECK(c.code == kExitOk);
  const auto j = nlohmann::json::parse(slurp(dir / "c.json"));
  REQUIRE(j["scenarios"].size() == 3);
  for (const auto& s : j["scenarios"]) CHECK(s["violations"].get<int>() >= 1);

  CHECK(lab({"bound-check"}).code == kExitUsage);
  CHECK(lab({"bound-check", "--counterexamples", "--campaign", "3"}).code == kExitUsage);
  const Run camp = lab({"bound-check", "--campaign", "25", "--seed", "2"});
  CHECK(camp.code == kExitOk);
  CHECK(nlohmann::json::parse(camp.out.substr(camp.out.find('{')))["step_violations"] == 0);

  const std::string trace = dir / "t.jsonl";
  REQUIRE(lab({"synth", "--out", trace, "--top-k", "3", "--experts", "10", "--batch", "2", "--segments", "2"}).code ==
          kExitOk);
  const Run tr = lab({"bound-check", "--trace", trace, "--capacity", "6", "--out", dir / "b.json"});
  CHECK(tr.code == kExitOk);
  const auto b = nlohmann::json::parse(slurp(dir / "b.json"));
  CHECK(b["violations"] == 0);
  CHECK(b["ws_violations"] == 0);
  CHECK(lab({"bound-check", "--trace", trace, "--capacity", "2"}).code == kExitUsage);
  CHECK(lab({"bound-check", "--trace", trace}).code == kExitUsage);
  CHECK(lab({"bound-check", "--trace", trace, "--capacity", "4", "--policy", "fifo"}).code == kExitOk);
}

TEST_CASE("router checks") {
  TempDir dir("router");
  CHECK(lab({"router", "--check", "stability", "--trials", "2000", "--out", dir / "s.json"}).code == kExitOk);
  const auto s = nlohmann::json::parse(slurp(dir / "s.json"));
  CHECK(s["top_k_changes"] == 0);
  CHECK(lab({"router", "--check", "pinsker", "--trials", "2000"}).code == kExitOk);
  CHECK(lab({"router", "--check", "magic"}).code == kExitUsage);
}

TEST_CASE("gradcheck") {
  TempDir dir("grad");
  const Run ok = lab({"gradcheck", "--instances", "3", "--out", dir / "g.json"});
  CHECK(ok.code == kExitOk);
  const auto j = nlohmann::json::parse(slurp(dir / "g.json"));
  CHECK(j["max_relative_error"].get<double>() < 1e-5);
  CHECK(j["terms"].size() == 6);
  CHECK(lab({"gradcheck", "--instances", "2", "--tol", "1e-30"}).code == kExitProperty);
  CHECK(lab({"gradcheck", "--step", "0"}).code == kExitUsage);
}

TEST_CASE("train and sweep") {
  TempDir dir("train");
  spit(dir / "cfg.json", R"({"steps": 60, "n_sequences": 3, "seq_len": 32, "warm_reuse_steps": 20, "warm_loc_steps": 40})");
  const Run r = lab({"train", "--config", dir / "cfg.json", "--out-theta", dir / "gate.bin", "--log", dir / "log.csv",
                     "--seed", "5"});
  REQUIRE(r.code == kExitOk);
  const auto log = read_csv(dir / "log.csv");
  CHECK(log.size() == 61);
  CHECK(log[0].size() == 12);

  ToyBenchmark bench;
  bench.n_sequences = 3;
  bench.seq_len = 32;
  bench.seed = 5;
  const ToyData data = make_toy_benchmark(bench);
  TrainConfig tc;
  tc.steps = 60;
  tc.seed = 5;
  LossWeights w;
  w.warm_reuse_steps = 20;
  w.warm_loc_steps = 40;
  const TrainResult direct = train(data.theta_init, data.sequences, data.top_k, tc, w);
  CHECK(load_gate(dir / "gate.bin") == direct.theta);

  spit(dir / "bad.json", R"({"stepz": 3})");
  CHECK(lab({"train", "--config", dir / "bad.json", "--out-theta", dir / "g2.bin", "--log", dir / "l2.csv"}).code ==
        kExitData);
  spit(dir / "neg.json", R"({"lr": -1})");
  CHECK(lab({"train", "--config", dir / "neg.json", "--out-theta", dir / "g2.bin", "--log", dir / "l2.csv"}).code ==
        kExitData);

  SUBCASE("a one-point sweep reproduces a train run") {
    spit(dir / "one.json", R"({"base": {"steps": 60, "n_sequences": 3, "seq_len": 32, "warm_reuse_steps": 20,
                                         "warm_loc_steps": 40, "seed": 5, "data_seed": 5},
                               "grid": {"lambda_kl": [0.45]}})");
    REQUIRE(lab({"sweep", "--config", dir / "one.json", "--out", dir / "one_out.json"}).code == kExitOk);
    const auto j = nlohmann::json::parse(slurp(dir / "one_out.json"));
    REQUIRE(j["points"].size() == 1);
    CHECK(j["points"][0]["final_eor"].get<double>() == direct.final_eor);
    CHECK(j["points"][0]["trust_kl"].get<double>() == direct.final_trust_kl);
  }
  SUBCASE("sweep directions") {
    spit(dir / "grid.json", R"({"base": {"steps": 100, "data_seed": 1},
                                "grid": {"lambda_kl": [0, 0.45, 0.7], "lags": [[1, 2], [1, 2, 4, 8, 16]]}})");
    REQUIRE(lab({"sweep", "--config", dir / "grid.json", "--out", dir / "grid.csv"}).code == kExitOk);
    const auto rows = read_csv(dir / "grid.csv");
    REQUIRE(rows.size() == 7);
    CHECK(rows[0][0] == "lambda_kl");
    CHECK(rows[0][1] == "lags");
    CHECK(rows[1][1] == "1;2");
    CHECK(rows[2][1] == "1;2;4;8;16");
    const std::size_t trust_col = 2 + 3;
    CHECK(rows[0][trust_col] == "trust_kl");
    for (std::size_t lag = 0; lag < 2; ++lag) {
      const double t0 = std::stod(rows[1 + lag][trust_col]);
      const double t1 = std::stod(rows[3 + lag][trust_col]);
      const double t2 = std::stod(rows[5 + lag][trust_col]);
      CHECK(t0 > t1);
      CHECK(t1 > t2);
    }

    spit(dir / "reuse.json", R"({"base": {"steps": 500, "data_seed": 1}, "grid": {"lambda_reuse": [0, 0.2]}})");
    REQUIRE(lab({"sweep", "--config", dir / "reuse.json", "--out", dir / "reuse.json.out.json"}).code == kExitOk);
    const auto j = nlohmann::json::parse(slurp(dir / "reuse.json.out.json"));
    CHECK(j["points"][1]["final_eor"].get<double>() > j["points"][0]["final_eor"].get<double>());
  }
  spit(dir / "empty.json", R"({"grid": {}})");
  CHECK(lab({"sweep", "--config", dir / "empty.json", "--out", dir / "e.csv"}).code == kExitData);
}

TEST_CASE("repeated runs write identical files") {
  TempDir dir("determinism");
  std::vector<std::string> runs;
  for (int i = 0; i < 2; ++i) {
    REQUIRE(lab({"synth", "--out", dir / "t.jsonl", "--probs", "--seed", "11"}).code == kExitOk);
    REQUIRE(lab({"simulate", "--trace", dir / "t.jsonl", "--capacity", "4", "--beta", "2", "--out", dir / "s.json"})
                .code == kExitOk);
    runs.push_back(slurp(dir / "t.jsonl") + slurp(dir / "s.json") + slurp(dir / "s.steps.csv"));
  }
  CHECK(runs[0] == runs[1]);
  // The sidecar manifest is a log: one line per run.
  CHECK(read_csv(dir / "s.json.manifest.jsonl").size() == 2);
}
