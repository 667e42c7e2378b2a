#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "remoe/metrics.hpp"
#include "remoe/topk.hpp"
#include "remoe/trace.hpp"
#include "support.hpp"

using namespace remoe;
using remoe::testing::from_text;
using remoe::testing::to_text;

namespace {

const char* kHeader141 =
    R"({"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false})";

bool has_rule(const std::vector<Violation>& v, const std::string& rule) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.rule == rule; });
}

std::string parse_error(const std::string& text) {
  try {
    (void)from_text(text);
  } catch (const TraceError& e) {
    return e.what();
  }
  return "";
}

SynthConfig random_synth_config(std::mt19937_64& rng) {
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  SynthConfig cfg;
  const int n = uni(2, 24);
  cfg.header = {uni(1, 3), n, uni(1, n), uni(1, 3), false};
  cfg.n_segments = uni(1, 3);
  cfg.steps_per_segment = uni(1, 12);
  cfg.stickiness = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  cfg.seed = rng();
  cfg.emit_probs = uni(0, 1) == 1;
  cfg.header.has_probs = cfg.emit_probs;
  cfg.concentration = std::uniform_real_distribution<double>(0.2, 4.0)(rng);
  cfg.independent_batches = uni(0, 1) == 1;
  return cfg;
}

// Spearman rank correlation without ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("topk follows descending value with lowest-index ties") {
  const std::vector<double> one_hot{0, 0, 1, 0};
  CHECK(topk(one_hot, 1) == ExpertList{2});
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
  CHECK(topk(uniform, 2) == ExpertList{0, 1});
  const std::vector<double> p{0.1, 0.4, 0.4, 0.1};
  CHECK(topk(p, 2) == ExpertList{1, 2});
  CHECK_THROWS_AS(topk(p, 5), std::invalid_argument);
}

TEST_CASE("parse_trace accepts a minimal trace") {
  const std::string text = std::string(kHeader141) + "\n" + R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,1]})" + "\n" +
                           R"({"s":0,"t":1,"l":0,"b":0,"topk":[1,2]})" + "\n";
  const RoutingTrace t = from_text(text);
  CHECK(t.records.size() == 2);
  CHECK(t.segment_lengths == std::vector<int>{2});
  CHECK(t.header.top_k == 2);
}

TEST_CASE("parse_trace rejects bad records") {
  const std::string head = std::string(kHeader141) + "\n";
  SUBCASE("expert id out of range") {
    const std::string msg = parse_error(head + R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,4]})");
    CHECK(msg.find("range") != std::string::npos);
  }
  SUBCASE("wrong arity") {
    CHECK(parse_error(head + R"({"s":0,"t":0,"l":0,"b":0,"topk":[0]})").find("arity") != std::string::npos);
  }
  SUBCASE("probs disagree with topk") {
    const std::string h =
        R"({"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":true})";
    const std::string msg =
        parse_error(h + "\n" + R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,1],"probs":[0.1,0.2,0.3,0.4]})");
    CHECK(msg.find("probs-topk") != std::string::npos);
  }
  SUBCASE("malformed JSON names the line") {
    try {
      (void)from_text(head + R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,1]})" + "\n{oops\n");
      FAIL("expected a TraceError");
    } catch (const TraceError& e) {
      CHECK(e.line() == 3);
    }
  }
  SUBCASE("missing header") {
    CHECK_FALSE(parse_error(R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,1]})").empty());
  }
  SUBCASE("coverage hole") {
    const std::string h2 =
        R"({"type":"header","n_moe_layers":2,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false})";
    CHECK(parse_error(h2 + "\n" + R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,1]})").find("coverage") !=
          std::string::npos);
  }
}

TEST_CASE("parse_trace normalizes record order") {
  const std::string text = std::string(kHeader141) + "\n" + R"({"s":0,"t":1,"l":0,"b":0,"topk":[2,3]})" + "\n" +
                           R"({"s":0,"t":0,"l":0,"b":0,"topk":[0,1]})" + "\n";
  const RoutingTrace t = from_text(text);
  REQUIRE(t.records.size() == 2);
  CHECK(t.records[0].step == 0);
  CHECK(t.records[1].topk == ExpertList{2, 3});
}

TEST_CASE("write_trace of an empty trace is the header line only") {
  RoutingTrace t;
  t.header = {1, 4, 2, 1, false};
  const std::string text = to_text(t);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1);
  CHECK(from_text(text) == t);
}

TEST_CASE("parse after write is the identity") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const RoutingTrace t = synth_trace(random_synth_config(rng));
    CHECK(from_text(to_text(t)) == t);
  }
}

TEST_CASE("segment boundaries survive a round trip") {
  const RoutingTrace t = remoe::testing::trace_from_sets(6, 2, {{{0, 1}, {1, 2}, {2, 3}}, {{4, 5}, {0, 5}}});
  const RoutingTrace back = from_text(to_text(t));
  CHECK(back.segment_lengths == std::vector<int>{3, 2});
  CHECK(back.records[3].segment == 1);
  CHECK(back.records[3].step == 0);
}

TEST_CASE("synth_trace laws") {
  SynthConfig cfg;
  cfg.header = {2, 16, 4, 2, false};
  cfg.n_segments = 2;
  cfg.steps_per_segment = 40;

  SUBCASE("full stickiness gives EOR 1") {
    cfg.stickiness = 1.0;
    CHECK(eor(synth_trace(cfg)).grand == 1.0);
  }
  SUBCASE("zero stickiness matches the hypergeometric overlap K / N_r") {
    cfg.header = {1, 64, 6, 1, false};
    cfg.n_segments = 1;
    cfg.steps_per_segment = 40000;
    cfg.stickiness = 0.0;
    cfg.seed = 5;
    CHECK(eor(synth_trace(cfg)).grand == doctest::Approx(6.0 / 64.0).epsilon(0.05));
  }
  SUBCASE("same seed gives byte-identical traces") {
    cfg.seed = 99;
    cfg.emit_probs = true;
    cfg.header.has_probs = true;
    CHECK(to_text(synth_trace(cfg)) == to_text(synth_trace(cfg)));
  }
}

TEST_CASE("validate_trace names each broken rule") {
  SynthConfig cfg;
  cfg.header = {2, 8, 3, 1, false};
  cfg.steps_per_segment = 5;
  cfg.seed = 4;
  const RoutingTrace good = synth_trace(cfg);
  CHECK(validate_trace(good).empty());

  SUBCASE("duplicate expert id") {
    RoutingTrace t = good;
    t.records[2].topk[1] = t.records[2].topk[0];
    const auto v = validate_trace(t);
    REQUIRE(v.size() == 1);
    CHECK(v[0].rule == "distinctness");
  }
  SUBCASE("missing layer-1 record at (s=0, t=3)") {
    RoutingTrace t = good;
    t.records.erase(std::find_if(t.records.begin(), t.records.end(),
                                 [](const StepRecord& r) { return r.step == 3 && r.layer == 1; }));
    const auto v = validate_trace(t);
    REQUIRE(v.size() == 1);
    CHECK(v[0].rule == "coverage");
    CHECK(v[0].step == 3);
    CHECK(v[0].layer == 1);
  }
  SUBCASE("unsorted records") {
    RoutingTrace t = good;
    std::swap(t.records[0], t.records[1]);
    CHECK(has_rule(validate_trace(t), "ordering"));
  }
  SUBCASE("probabilities that do not sum to one") {
    RoutingTrace t = good;
    t.header.has_probs = true;
    for (auto& r : t.records) {
      r.probs.assign(8, 0.0);
      for (std::size_t i = 0; i < r.topk.size(); ++i) r.probs[static_cast<std::size_t>(r.topk[i])] = 0.3 - 0.01 * i;
    }
    CHECK(has_rule(validate_trace(t), "probs-sum"));
  }
  SUBCASE("steps not contiguous from zero") {
    RoutingTrace t = good;
    for (auto& r : t.records) r.step += 1;
    CHECK(has_rule(validate_trace(t), "contiguity"));
  }
}

TEST_CASE("synth_trace output always validates") {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 300; ++i) {
    const SynthConfig cfg = random_synth_config(rng);
    const RoutingTrace t = synth_trace(cfg);
    const auto v = validate_trace(t);
    CHECK_MESSAGE(v.empty(), (v.empty() ? "" : v.front().to_string()));
    if (cfg.emit_probs) {
      for (const auto& r : t.records) {
        REQUIRE(r.probs.size() == static_cast<std::size_t>(cfg.header.n_routed_experts));
        CHECK(r.topk == topk(r.probs, cfg.header.top_k));
      }
    }
  }
}

TEST_CASE("EOR of synth traces rises with stickiness") {
  const std::vector<double> ps{0.0, 0.25, 0.5, 0.75, 1.0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<double> eors;
    for (double p : ps) {
      SynthConfig cfg;
      cfg.header = {1, 32, 4, 1, false};
      cfg.steps_per_segment = 400;
      cfg.stickiness = p;
      cfg.seed = seed;
      eors.push_back(eor(synth_trace(cfg)).grand);
    }
    CHECK(spearman(ps, eors) > 0.95);
  }
}

TEST_CASE("independent batches diverge, shared batches repeat") {
  SynthConfig cfg;
  cfg.header = {1, 32, 4, 2, false};
  cfg.steps_per_segment = 20;
  cfg.stickiness = 0.3;
  cfg.seed = 8;
  const RoutingTrace shared = synth_trace(cfg);
  for (std::size_t i = 0; i < shared.records.size(); i += 2) {
    CHECK(shared.records[i].topk == shared.records[i + 1].topk);
  }
  cfg.independent_batches = true;
  const RoutingTrace indep = synth_trace(cfg);
  int differing = 0;
  for (std::size_t i = 0; i < indep.records.size(); i += 2) differing += indep.records[i].topk != indep.records[i + 1].topk;
  CHECK(differing > 0);
}

TEST_CASE("select_batch keeps one batch index") {
  SynthConfig cfg;
  cfg.header = {2, 16, 2, 3, false};
  cfg.n_segments = 2;
  cfg.steps_per_segment = 4;
  cfg.independent_batches = true;
  const RoutingTrace t = synth_trace(cfg);
  const RoutingTrace b1 = select_batch(t, 1);
  CHECK(b1.header.batch_size == 1);
  CHECK(b1.records.size() == t.records.size() / 3);
  CHECK(validate_trace(b1).empty());
  CHECK(b1.segment_lengths == t.segment_lengths);
  CHECK(b1.records[0].topk == t.records[1].topk);
}
