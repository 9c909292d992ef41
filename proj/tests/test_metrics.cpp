#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "nosgate/metrics.hpp"
#include "nosgate/rng.hpp"

using namespace nosgate;
using testutil::pkt;

namespace {

// One flow, windows 0..n-1, nos score equal to the window's entry.
std::vector<ScoreRecord> single_flow(const std::vector<double>& s, FlowId flow = 0) {
  std::vector<ScoreRecord> v;
  for (std::size_t t = 0; t < s.size(); ++t) {
    ScoreRecord r;
    r.flow_id = flow;
    r.window = static_cast<std::int32_t>(t);
    r.s = s[t];
    r.baseline_s = s[t];
    v.push_back(r);
  }
  return v;
}

Decisions flags(std::size_t n, std::initializer_list<std::size_t> a_at, std::initializer_list<std::size_t> z_at) {
  Decisions d;
  d.a.assign(n, 0);
  d.z.assign(n, 0);
  for (auto i : a_at) d.a[i] = 1;
  for (auto i : z_at) d.z[i] = 1;
  return d;
}

std::vector<FlowThresholds> one_threshold(double t) {
  FlowThresholds f;
  f.nos = t;
  f.baseline = t;
  return {f};
}

}  // namespace

TEST_CASE("achieved FPR examples") {
  const auto recs = single_flow(std::vector<double>(10, 0.0));
  const auto thr = one_threshold(1.0);
  const auto d = flags(10, {6}, {6});
  const auto r = achieved_fpr(recs, d, thr, ScoreSource::nos, {}, 5, 0);
  CHECK(r.eligible_pairs == 5);
  CHECK(r.alarm_rate == doctest::Approx(0.2));
  CHECK(r.actionable_rate == doctest::Approx(0.2));

  // Episode on windows 7..7 with grace 1 removes windows 7 and 8.
  const std::vector<EpisodeLabel> ep{{0, 7, 7, EpisodeKind::scan, {}, true}};
  const auto r2 = achieved_fpr(recs, d, thr, ScoreSource::nos, ep, 5, 1);
  CHECK(r2.eligible_pairs == 3);
  CHECK(r2.alarm_rate == doctest::Approx(1.0 / 3.0));

  // A flow with no threshold is not eligible.
  std::vector<FlowThresholds> none(1);
  CHECK_THROWS_AS(achieved_fpr(recs, d, none, ScoreSource::nos, {}, 5, 0), std::domain_error);
}

TEST_CASE("achieved FPR on iid scores is close to 1 - q") {
  const int flows = 100, windows = 2000, burn = 1000;
  const double q = 0.99;
  Rng rng(1);
  std::vector<ScoreRecord> recs;
  std::vector<std::vector<double>> burn_scores(flows);
  for (int t = 0; t < windows; ++t) {
    for (int f = 0; f < flows; ++f) {
      ScoreRecord r;
      r.flow_id = f;
      r.window = t;
      r.s = rng.uniform();
      r.baseline_s = r.s;
      if (t < burn) burn_scores[static_cast<std::size_t>(f)].push_back(r.s);
      recs.push_back(r);
    }
  }
  std::vector<FlowThresholds> thr(flows);
  for (int f = 0; f < flows; ++f) {
    thr[static_cast<std::size_t>(f)].flow_id = f;
    thr[static_cast<std::size_t>(f)].nos = calibrate_threshold(burn_scores[static_cast<std::size_t>(f)], q, 50);
    thr[static_cast<std::size_t>(f)].baseline = thr[static_cast<std::size_t>(f)].nos;
  }
  const auto d = derive_decisions(recs, thr, ScoreSource::nos, burn, 3, 8);
  const auto r = achieved_fpr(recs, d, thr, ScoreSource::nos, {}, burn, 0);
  CHECK(r.eligible_pairs == flows * (windows - burn));
  CHECK(std::fabs(r.alarm_rate - (1.0 - q)) < 0.002);
  CHECK(r.actionable_rate <= r.alarm_rate);

  // Burn-in: values at or above the nearest-rank threshold are at most n(1-q)+1.
  for (int f = 0; f < flows; ++f) {
    const auto& b = burn_scores[static_cast<std::size_t>(f)];
    const auto above = std::count_if(b.begin(), b.end(), [&](double s) { return s >= *thr[static_cast<std::size_t>(f)].nos; });
    CHECK(static_cast<double>(above) <= b.size() * (1.0 - q) + 1.0 + 1e-9);
  }
}

TEST_CASE("incident recall and grace boundary") {
  const auto recs = single_flow(std::vector<double>(100, 0.0));
  const std::vector<EpisodeLabel> eps{{0, 10, 20, EpisodeKind::exfiltration, {}, true},
                                      {0, 40, 50, EpisodeKind::beaconing, {}, true},
                                      {0, 70, 80, EpisodeKind::scan, {}, true}};
  const auto d = flags(100, {}, {15, 58});
  CHECK(incident_recall(recs, d, eps, 8) == doctest::Approx(2.0 / 3.0));
  CHECK(incident_recall(recs, d, eps, 7) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(incident_recall(recs, d, {}, 8), std::domain_error);
}

TEST_CASE("recall is monotone in grace") {
  Rng rng(4);
  const auto recs = single_flow(std::vector<double>(500, 0.0));
  std::vector<EpisodeLabel> eps;
  for (int i = 0; i < 20; ++i) eps.push_back({0, 20 * i + 5, 20 * i + 10, EpisodeKind::scan, {}, true});
  Decisions d;
  d.a.assign(500, 0);
  d.z.assign(500, 0);
  for (auto& z : d.z) z = rng.uniform() < 0.03;
  double prev = 0.0;
  for (int g = 0; g < 30; ++g) {
    const double r = incident_recall(recs, d, eps, g);
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("time to detect") {
  const auto recs = single_flow(std::vector<double>(100, 0.0));
  const EpisodeLabel e{0, 10, 20, EpisodeKind::exfiltration, {}, true};
  CHECK(time_to_detect(recs, flags(100, {}, {14, 16}), e, 8, 250'000).value() == doctest::Approx(1.0));
  CHECK(time_to_detect(recs, flags(100, {}, {10}), e, 8, 250'000).value() == 0.0);
  CHECK_FALSE(time_to_detect(recs, flags(100, {}, {5, 29}), e, 8, 250'000).has_value());
  CHECK(time_to_detect(recs, flags(100, {}, {28}), e, 8, 250'000).value() == doctest::Approx(4.5));
}

TEST_CASE("derived decisions reproduce the detector's flags") {
  const auto cfg = WorldConfig::from_json(read_json_file(testutil::config("smoke.json")));
  const auto w = build_world(cfg, cfg.seed);
  const auto burn = cfg.split.burn_in_windows(w.trace.horizon_windows);
  const auto rows = normalize_stream_serial(windowize_serial(w.trace, w.graph), w.trace.flows, {}, burn);
  DetectionInputs in;
  in.rows = rows;
  in.n_flows = w.trace.flows.size();
  in.graph = &w.graph;
  in.burn_in_windows = burn;
  DetectionConfig c;
  const auto res = detect_serial(in, {}, c);
  const auto derived = derive_decisions(res.records, res.thresholds, ScoreSource::nos, burn, c.k, c.m);
  const auto recorded = recorded_decisions(res.records);
  CHECK(derived.a == recorded.a);
  CHECK(derived.z == recorded.z);
}

TEST_CASE("queue impact and benign annotation") {
  Trace t;
  t.flows.resize(2);
  t.window_us = 1000;
  t.horizon_windows = 10;
  t.packets = {pkt(100, 0, 100), pkt(1500, 1, 100), pkt(2500, 1, 100)};
  QueueEventLog base{{0, 0, 100, 100, 200, true}, {1, 0, 1500, 1500, 1600, true}, {1, 0, 2500, 4500, 4600, true}};
  QueueEventLog gated{{0, 0, 100, 100, 200, true}, {1, 0, 1500, 1500, 1600, true}, {1, 0, 2500, 2500, 2600, true}};
  const std::vector<EpisodeLabel> eps{{1, 1, 1, EpisodeKind::scan, {}, true}};
  annotate_benign(base, t, eps);
  annotate_benign(gated, t, eps);
  CHECK(base[0].benign);
  CHECK_FALSE(base[1].benign);
  CHECK(base[2].benign);
  const auto q = queue_impact(base, gated);
  CHECK(q.delta_p999_delay_ms == doctest::Approx(-2.0));
  CHECK(q.delta_p999_collateral_ms == doctest::Approx(-2.0));
  QueueEventLog shorter(2);
  CHECK_THROWS_AS(queue_impact(base, shorter), std::invalid_argument);
}

TEST_CASE("scoring benchmark summary is ordered") {
  const auto b = bench_scoring(100'000, {}, {}, 1);
  CHECK(b.batches == 90);
  CHECK(b.rows == 90'000);
  CHECK(b.mean_us > 0.0);
  CHECK(b.mean_us <= b.max_us);
  CHECK(b.p90_us <= b.max_us);
  const auto j = bench_to_json(b);
  CHECK(j.at("rows") == 90'000);
}
