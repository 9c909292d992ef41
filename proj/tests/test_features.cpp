#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "nosgate/features.hpp"
#include "nosgate/rng.hpp"

using namespace nosgate;
using testutil::pkt;

namespace {

// Flows 0 and 1 share clique 0 with weight 0.5; flow 2 sits alone in clique 1.
ContentionGraph small_graph() {
  ContentionGraph g;
  g.n = 3;
  g.weights = {0, 0.5, 0, 0.5, 0, 0, 0, 0, 0};
  g.cliques = {{0, 1}, {2}};
  return g;
}

Trace small_trace() {
  Trace t;
  t.flows.resize(3);
  t.flows[2].clique_id = 1;
  t.window_us = 1'000'000;
  t.horizon_windows = 2;
  t.packets = {pkt(0, 0, 100), pkt(100'000, 0, 100), pkt(300'000, 0, 100), pkt(500'000, 1, 200),
               pkt(1'200'000, 2, 64, 1)};
  return t;
}

FlowWindowFeatures row_with(double v, bool iat = true) {
  FlowWindowFeatures f;
  f.iat_present = iat;
  f.x.fill(v);
  return f;
}

NormalizerParams plain_params() {
  NormalizerParams p;
  p.warmup = 0;
  p.debias = false;
  return p;
}

}  // namespace

TEST_CASE("pacing index from bin counts") {
  const std::vector<std::int64_t> one_bin{5, 0, 0, 0};
  CHECK(pacing_index(one_bin) == doctest::Approx(1.0));
  const std::vector<std::int64_t> uniform{2, 2, 2, 2};
  CHECK(pacing_index(uniform) == doctest::Approx(0.0));
  const std::vector<std::int64_t> single{1, 0, 0, 0};
  CHECK(pacing_index(single) == 0.0);
  const std::vector<std::int64_t> half{1, 1, 0, 0};
  CHECK(pacing_index(half) == doctest::Approx(0.5));
}

TEST_CASE("pacing index from timestamps") {
  const std::vector<TimeUs> ts{0, 100'000, 300'000};
  CHECK(pacing_index(ts, 0, 1'000'000, 10) == doctest::Approx(1.0 - std::log(3.0) / std::log(10.0)));
  const std::vector<TimeUs> clumped{10, 20, 30, 40};
  CHECK(pacing_index(clumped, 0, 1'000'000, 10) == doctest::Approx(1.0));
}

TEST_CASE("contention features") {
  const auto g = small_graph();
  const std::vector<std::int64_t> bytes{300, 200, 64};
  const auto c0 = contention_features(bytes, g, 0, 1'000'000);
  CHECK(c0.share == doctest::Approx(0.6));
  CHECK(c0.interference == doctest::Approx(100.0));
  const auto c2 = contention_features(bytes, g, 2, 500'000);
  CHECK(c2.share == doctest::Approx(1.0));
  CHECK(c2.interference == 0.0);
  CHECK_THROWS_AS(contention_features(bytes, g, 3, 1'000'000), std::domain_error);
  CHECK_THROWS_AS(contention_features(bytes, g, -1, 1'000'000), std::domain_error);
}

TEST_CASE("windowize hand example") {
  const auto rows = windowize_serial(small_trace(), small_graph());
  // Window 0: flows 0 and 1; flow 2 is not born yet. Window 1: all three.
  REQUIRE(rows.size() == 5);
  const auto& r0 = rows[0];
  CHECK(r0.flow_id == 0);
  CHECK(r0.window == 0);
  CHECK(r0.pkt_count == 3);
  CHECK(r0.x[kPktRate] == doctest::Approx(3.0));
  CHECK(r0.x[kByteRate] == doctest::Approx(300.0));
  CHECK(r0.iat_present);
  CHECK(r0.x[kIatMean] == doctest::Approx(0.15));
  CHECK(r0.x[kIatCv] == doctest::Approx(1.0 / 3.0));
  CHECK(r0.x[kPacing] == doctest::Approx(1.0 - std::log(3.0) / std::log(10.0)));
  CHECK(r0.x[kShare] == doctest::Approx(0.6));
  CHECK(r0.x[kInterference] == doctest::Approx(100.0));

  const auto& r1 = rows[1];
  CHECK(r1.flow_id == 1);
  CHECK_FALSE(r1.iat_present);
  CHECK_FALSE(r1.present(kIatMean));
  CHECK(r1.present(kPktRate));
  CHECK(r1.x[kShare] == doctest::Approx(0.4));
  CHECK(r1.x[kInterference] == doctest::Approx(150.0));

  CHECK(rows[2].window == 1);
  CHECK(rows[2].pkt_count == 0);
  CHECK(rows[2].x[kShare] == 0.0);
  CHECK(rows[4].flow_id == 2);
  CHECK(rows[4].x[kShare] == doctest::Approx(1.0));
}

TEST_CASE("windowize serial and parallel agree on a generated world") {
  auto j = read_json_file(testutil::config("smoke.json"));
  j["horizon_windows"] = 1200;
  j["episodes"] = nlohmann::json::array();
  const auto cfg = WorldConfig::from_json(j);
  const auto w = build_world(cfg, cfg.seed);
  const auto s = windowize_serial(w.trace, w.graph);
  CHECK(s == windowize_omp(w.trace, w.graph));
  for (std::size_t i = 1; i < s.size(); ++i) {
    CHECK((s[i].window > s[i - 1].window || (s[i].window == s[i - 1].window && s[i].flow_id > s[i - 1].flow_id)));
  }

  NormalizerParams p;
  const auto ns = normalize_stream_serial(s, w.trace.flows, p, 720);
  CHECK(ns == normalize_stream_omp(s, w.trace.flows, p, 720));
}

TEST_CASE("normalizer with unit rates matches a last-value oracle") {
  auto p = plain_params();
  p.lambda_m = 1.0;
  p.lambda_v = 1.0;
  p.eps_var = 1e-9;
  Rng rng(6);
  NormalizerState st;
  double prev = 0.0, prev_d2 = 0.0;
  for (int t = 0; t < 50; ++t) {
    const double x = rng.normal(3.0, 2.0);
    const auto z = normalize(st, row_with(x), p, false);
    if (t == 0) {
      CHECK(z[kPktRate] == 0.0);
    } else {
      const double var = t == 1 ? p.eps_var : std::max(prev_d2, p.eps_var);
      const double expect = std::clamp((x - prev) / std::sqrt(var + p.eps_var), -p.clip_mag, p.clip_mag);
      CHECK(z[kPktRate] == doctest::Approx(expect));
      prev_d2 = (x - prev) * (x - prev);
    }
    prev = x;
  }
}

TEST_CASE("constant stream normalizes to zero") {
  NormalizerParams p;
  NormalizerState st;
  for (int t = 0; t < 500; ++t) {
    const auto z = normalize(st, row_with(4.2), p, t >= 300);
    for (double v : z) CHECK(v == 0.0);
  }
  CHECK(st.m[kByteRate] == doctest::Approx(4.2));
}

TEST_CASE("post burn-in innovation is clipped") {
  auto p = plain_params();
  p.lambda_m = 1.0;
  NormalizerState st;
  st.seen.fill(true);
  st.q.fill(1.0 - p.eps_var);
  st.retained.fill(1.0);
  normalize_update(st, row_with(10.0), p, true);
  // lim = 8 * sqrt(1); the update moves the mean by clip_mag * post_burn_in_scale.
  CHECK(st.m[kPktRate] == doctest::Approx(8.0 * p.post_burn_in_scale));

  NormalizerState pre;
  pre.seen.fill(true);
  pre.q.fill(1.0 - p.eps_var);
  pre.retained.fill(1.0);
  auto p1 = p;
  p1.post_burn_in_scale = 1.0;
  normalize_update(pre, row_with(10.0), p1, true);
  CHECK(pre.m[kPktRate] == doctest::Approx(8.0));
  normalize_update(pre, row_with(10.0), p1, false);
  CHECK(pre.m[kPktRate] == doctest::Approx(10.0));
}

TEST_CASE("missing IAT features leave their state alone and score zero") {
  auto p = plain_params();
  NormalizerState st;
  normalize(st, row_with(1.0, true), p, false);
  normalize(st, row_with(2.0, true), p, false);
  const auto m_before = st.m[kIatMean];
  const auto q_before = st.q[kIatCv];
  const auto z = normalize(st, row_with(50.0, false), p, false);
  CHECK(z[kIatMean] == 0.0);
  CHECK(z[kIatCv] == 0.0);
  CHECK(z[kPktRate] != 0.0);
  CHECK(st.m[kIatMean] == m_before);
  CHECK(st.q[kIatCv] == q_before);
}

TEST_CASE("warm-up suppresses scores until enough updates") {
  NormalizerParams p;
  p.warmup = 10;
  NormalizerState st;
  Rng rng(1);
  for (int t = 0; t < 30; ++t) {
    const auto z = normalize(st, row_with(rng.normal()), p, false);
    // First sighting at t = 0, then one update per row.
    if (t <= 10) {
      CHECK(z[kPktRate] == 0.0);
    } else {
      CHECK(z[kPktRate] != 0.0);
    }
  }
}

TEST_CASE("debiased variance tracks the sample variance early on") {
  NormalizerParams p;
  p.warmup = 0;
  NormalizerState st;
  Rng rng(12);
  for (int t = 0; t < 40; ++t) normalize_update(st, row_with(rng.normal(0.0, 3.0)), p, false);
  // 39 updates after the first sighting; the raw EMA keeps 1 - 0.99^39 of its mass.
  auto raw = p;
  raw.debias = false;
  const double kept = 1.0 - std::pow(0.99, 39);
  CHECK(st.variance(kPktRate, p) == doctest::Approx(st.variance(kPktRate, raw) / kept));
  CHECK(st.variance(kPktRate, raw) < 0.5 * 9.0);
  CHECK(st.variance(kPktRate, p) > 0.9 * 9.0);
}

TEST_CASE("normalized stream is causal") {
  const auto t = small_trace();
  Trace longer = t;
  longer.horizon_windows = 60;
  longer.packets.clear();
  Rng rng(2);
  for (std::int32_t w = 0; w < 60; ++w) {
    for (FlowId f = 0; f < 3; ++f) {
      const auto n = 1 + rng.below(5);
      for (std::uint64_t k = 0; k < n; ++k) {
        longer.packets.push_back(pkt(w * 1'000'000LL + static_cast<TimeUs>(k) * 150'000 + f, f,
                                     64 + static_cast<std::int32_t>(rng.below(1000)), f == 2 ? 1 : 0));
      }
    }
  }
  sort_canonical(longer.packets);
  auto p = plain_params();
  const auto rows = windowize_serial(longer, small_graph());
  const auto base = normalize_stream_serial(rows, longer.flows, p, 30);
  auto altered = rows;
  for (auto& r : altered) {
    if (r.window >= 40) r.x[kByteRate] *= 7.0;
  }
  const auto changed = normalize_stream_serial(altered, longer.flows, p, 30);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    // z at window t reads x_t, so only earlier windows must be untouched.
    if (rows[i].window < 40) {
      CHECK(changed[i] == base[i]);
    }
  }
}

TEST_CASE("z-scores are invariant under positive affine maps of a feature") {
  NormalizerParams p;
  p.eps_var = 1e-12;
  p.warmup = 5;
  NormalizerState a, b;
  Rng rng(77);
  for (int t = 0; t < 400; ++t) {
    const double x = rng.normal(1.0, 0.5);
    const auto za = normalize(a, row_with(x), p, t >= 200);
    const auto zb = normalize(b, row_with(3.0 * x + 5.0), p, t >= 200);
    CHECK(zb[kPktRate] == doctest::Approx(za[kPktRate]).epsilon(1e-5));
  }
}

TEST_CASE("stream rejects unordered rows") {
  std::vector<FlowWindowFeatures> rows(2);
  rows[0].window = 1;
  rows[1].window = 0;
  std::vector<FlowInfo> flows(1);
  CHECK_THROWS_AS(normalize_stream_serial(rows, flows, {}, 0), std::invalid_argument);
}

TEST_CASE("features CSV round trip keeps missing values") {
  const auto rows = windowize_serial(small_trace(), small_graph());
  testutil::TempDir dir("features");
  write_features_csv(dir / "f.csv", rows);
  CHECK(read_features_csv(dir / "f.csv") == rows);
}

TEST_CASE("normalizer params validation") {
  CHECK_THROWS_AS(normalizer_params_from_json({{"lambda_m", 0.0}}), ConfigError);
  CHECK_THROWS_AS(normalizer_params_from_json({{"warmup", -1}}), ConfigError);
  const auto p = normalizer_params_from_json(normalizer_params_to_json(plain_params()));
  CHECK(p.warmup == 0);
  CHECK_FALSE(p.debias);
}
