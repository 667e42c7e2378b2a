#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "remoe/metrics.hpp"
#include "support.hpp"

using namespace remoe;
using remoe::testing::trace_from_sets;

TEST_CASE("instantaneous_reuse") {
  const ExpertList a{1, 2, 3};
  CHECK(instantaneous_reuse(a, a, 3) == 1.0);
  CHECK(instantaneous_reuse(a, ExpertList{4, 5, 6}, 3) == 0.0);
  CHECK(instantaneous_reuse(ExpertList{2, 3, 4}, a, 3) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(instantaneous_reuse(ExpertList{1, 2}, a, 3), std::invalid_argument);
}

TEST_CASE("eor") {
  CHECK(eor(trace_from_sets(4, 2, {{{0, 1}, {0, 1}, {1, 0}}})).grand == 1.0);
  CHECK(eor(trace_from_sets(4, 2, {{{0, 1}, {1, 2}, {2, 3}}})).grand == 0.5);

  SynthConfig cfg;
  cfg.header = {3, 16, 4, 2, false};
  cfg.stickiness = 1.0;
  cfg.n_segments = 3;
  CHECK(eor(synth_trace(cfg)).grand == 1.0);

  SUBCASE("length-1 segments contribute nothing") {
    const auto t = trace_from_sets(4, 2, {{{0, 1}}, {{0, 1}, {2, 3}}, {{1, 2}}});
    const EorResult r = eor(t);
    CHECK(r.grand == 0.0);
    CHECK(r.sequences == 1);
    CHECK_THROWS_AS(eor(trace_from_sets(4, 2, {{{0, 1}}, {{2, 3}}})), std::invalid_argument);
  }
  SUBCASE("per-sequence mean versus pooled pairs") {
    // Sequence A: IR 1 (one pair). Sequence B: IR 0, 0, 0 (three pairs).
    const auto t = trace_from_sets(8, 2, {{{0, 1}, {0, 1}}, {{0, 1}, {2, 3}, {4, 5}, {6, 7}}});
    CHECK(eor(t, EorAveraging::kPerSequence).grand == 0.5);
    CHECK(eor(t, EorAveraging::kPooled).grand == 0.25);
  }
}

TEST_CASE("eor agrees with the fetch-budget form 1 - mean K(1 - IR) / K") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    SynthConfig cfg;
    const int k = std::uniform_int_distribution<int>(1, 5)(rng);
    cfg.header = {2, 4 * k, k, 2, false};
    cfg.n_segments = 2;
    cfg.steps_per_segment = 10;
    cfg.independent_batches = true;
    cfg.stickiness = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    cfg.seed = rng();
    const RoutingTrace t = synth_trace(cfg);

    const auto offsets = t.segment_offsets();
    double sum = 0.0;
    int sequences = 0;
    for (int s = 0; s < t.n_segments(); ++s) {
      for (int l = 0; l < 2; ++l) {
        for (int b = 0; b < 2; ++b) {
          double budget = 0.0;
          const int len = t.segment_lengths[static_cast<std::size_t>(s)];
          for (int step = 1; step < len; ++step) {
            const auto& prev = t.at(offsets, s, step - 1, l, b).topk;
            const auto& cur = t.at(offsets, s, step, l, b).topk;
            int shared = 0;
            for (ExpertId e : cur) shared += std::count(prev.begin(), prev.end(), e);
            budget += k - shared;
          }
          sum += 1.0 - budget / (len - 1) / k;
          ++sequences;
        }
      }
    }
    CHECK(eor(t).grand == doctest::Approx(sum / sequences).epsilon(1e-12));
  }
}

TEST_CASE("normalized_entropy") {
  const std::vector<double> uniform(64, 1.0 / 64.0);
  CHECK(normalized_entropy(uniform) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(normalized_entropy(std::vector<double>{0, 1, 0, 0}) == 0.0);
  CHECK(normalized_entropy(std::vector<double>{0.5, 0.5, 0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(normalized_entropy(std::vector<double>{1.2, -0.2}), std::invalid_argument);
  CHECK_THROWS_AS(normalized_entropy(std::vector<double>{0.5, 0.4}), std::invalid_argument);

  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(9);
    double s = 0.0;
    for (auto& x : p) s += (x = std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    for (auto& x : p) x /= s;
    const double h = normalized_entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= 1.0 + 1e-12);
    std::shuffle(p.begin(), p.end(), rng);
    CHECK(normalized_entropy(p) == doctest::Approx(h).epsilon(1e-12));
  }
}

TEST_CASE("mean_normalized_entropy needs probabilities") {
  SynthConfig cfg;
  cfg.header = {1, 8, 2, 1, false};
  CHECK_FALSE(mean_normalized_entropy(synth_trace(cfg)).has_value());
  cfg.emit_probs = true;
  cfg.header.has_probs = true;
  const auto h = mean_normalized_entropy(synth_trace(cfg));
  REQUIRE(h.has_value());
  CHECK(*h > 0.0);
  CHECK(*h <= 1.0);
}

TEST_CASE("load_balance_cv") {
  CHECK(load_balance_cv(std::vector<double>{5, 5, 5, 5}) == 0.0);
  CHECK(load_balance_cv(std::vector<double>{3, 1}) == doctest::Approx(0.5));
  CHECK(load_balance_cv(std::vector<double>{8, 0, 0, 0}) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
  CHECK_THROWS_AS(load_balance_cv(std::vector<double>{0, 0}), std::invalid_argument);
  const std::vector<double> c{4, 9, 1, 0, 3};
  std::vector<double> scaled = c;
  for (auto& x : scaled) x *= 7.5;
  CHECK(load_balance_cv(scaled) == doctest::Approx(load_balance_cv(c)).epsilon(1e-12));
}

TEST_CASE("expert_selection_counts count every routed slot per layer") {
  SynthConfig cfg;
  cfg.header = {2, 8, 3, 2, false};
  cfg.steps_per_segment = 7;
  cfg.independent_batches = true;
  const RoutingTrace t = synth_trace(cfg);
  const auto counts = expert_selection_counts(t);
  REQUIRE(counts.size() == 2);
  std::vector<std::vector<double>> oracle(2, std::vector<double>(8, 0.0));
  for (const auto& r : t.records) {
    for (ExpertId e : r.topk) oracle[static_cast<std::size_t>(r.layer)][static_cast<std::size_t>(e)] += 1.0;
  }
  CHECK(counts == oracle);
  const MetricsReport m = compute_metrics(t);
  CHECK(m.load_cv == doctest::Approx((load_balance_cv(oracle[0]) + load_balance_cv(oracle[1])) / 2).epsilon(1e-12));
}

TEST_CASE("unique_experts_per_sequence") {
  CHECK(unique_experts_per_sequence(trace_from_sets(8, 2, {{{0, 1}, {1, 0}, {0, 1}}})) == 2.0);
  CHECK(unique_experts_per_sequence(trace_from_sets(8, 2, {{{0, 1}, {2, 3}}})) == 4.0);
  SynthConfig cfg;
  cfg.header = {1, 6, 2, 1, false};
  cfg.steps_per_segment = 500;
  cfg.stickiness = 0.0;
  CHECK(unique_experts_per_sequence(synth_trace(cfg)) == 6.0);

  std::mt19937_64 rng(17);
  for (int i = 0; i < 100; ++i) {
    const int k = std::uniform_int_distribution<int>(1, 4)(rng);
    const int n = std::uniform_int_distribution<int>(k, 12)(rng);
    SynthConfig c;
    c.header = {2, n, k, 2, false};
    c.n_segments = 2;
    c.steps_per_segment = std::uniform_int_distribution<int>(1, 15)(rng);
    c.stickiness = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    c.seed = rng();
    const double u = unique_experts_per_sequence(synth_trace(c));
    CHECK(u >= k);
    CHECK(u <= n);
  }
}

TEST_CASE("compute_metrics stays inside its ranges") {
  SynthConfig cfg;
  cfg.header = {2, 16, 4, 1, true};
  cfg.emit_probs = true;
  cfg.steps_per_segment = 30;
  cfg.seed = 12;
  const MetricsReport m = compute_metrics(synth_trace(cfg));
  CHECK(m.eor >= 0.0);
  CHECK(m.eor <= 1.0);
  REQUIRE(m.entropy_norm.has_value());
  CHECK(*m.entropy_norm <= 1.0);
  CHECK(m.load_cv >= 0.0);
  CHECK(m.mean_ir_per_layer.size() == 2);
}
