#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <deque>
#include <sstream>

#include "helpers.hpp"
#include "nosgate/detector.hpp"
#include "nosgate/pipeline.hpp"
#include "nosgate/stats.hpp"

using namespace nosgate;

namespace {

// Brute-force K-of-M rule over the full alarm history.
class PersistenceOracle {
 public:
  PersistenceOracle(int k, int m) : k_(k), m_(m) {}
  bool update(bool a) {
    hist_.push_back(a);
    if (!z_) {
      int count = 0;
      for (std::size_t i = hist_.size() > static_cast<std::size_t>(m_) ? hist_.size() - m_ : 0; i < hist_.size(); ++i) {
        count += hist_[i] ? 1 : 0;
      }
      z_ = count >= k_;
    } else {
      int zeros = 0;
      for (auto it = hist_.rbegin(); it != hist_.rend() && !*it; ++it) ++zeros;
      z_ = zeros < m_;
    }
    return z_;
  }

 private:
  int k_, m_;
  std::vector<bool> hist_;
  bool z_ = false;
};

struct SmokeStream {
  World world;
  std::vector<NormalizedRow> rows;
  std::int32_t burn = 0;
};

const SmokeStream& smoke_stream() {
  static const SmokeStream s = [] {
    SmokeStream out;
    const auto cfg = WorldConfig::from_json(read_json_file(testutil::config("smoke.json")));
    out.world = build_world(cfg, cfg.seed);
    out.burn = cfg.split.burn_in_windows(out.world.trace.horizon_windows);
    const auto f = windowize_serial(out.world.trace, out.world.graph);
    out.rows = normalize_stream_serial(f, out.world.trace.flows, {}, out.burn);
    return out;
  }();
  return s;
}

DetectionInputs smoke_inputs() {
  const auto& s = smoke_stream();
  DetectionInputs in;
  in.rows = s.rows;
  in.n_flows = s.world.trace.flows.size();
  in.graph = &s.world.graph;
  in.burn_in_windows = s.burn;
  in.seed = 7;
  return in;
}

}  // namespace

TEST_CASE("single step from rest") {
  DetectorParams p;
  const auto s = nos_step({0.0, 0.0}, 2.0, 0.0, p);
  CHECK(s.v == doctest::Approx(0.5));
  CHECK(s.u == 0.0);
  const auto s2 = nos_step(s, 0.0, 0.0, p);
  // u' = dt * a * b * v = 0.25 * 0.05 * 0.5
  CHECK(s2.u == doctest::Approx(0.00625));
}

TEST_CASE("closed-form helpers") {
  CHECK(f_sat(100.0, 1.0, 1.0) == doctest::Approx(0.99990001).epsilon(1e-10));
  CHECK(f_sat(0.0, 1.0, 1.0) == 0.0);
  CHECK(event_surrogate(0.0, 4.0, 1.0) == doctest::Approx(0.0179862).epsilon(1e-6));
  CHECK(event_surrogate(1.0, 4.0, 1.0) == doctest::Approx(0.5));
  const std::vector<double> ones{1, 1, 1, 1};
  CHECK(evidence(ones, 0.25, 1.0) == doctest::Approx(1.0));
  CHECK(evidence(ones, 0.25, 2.0) == doctest::Approx(0.5));
  CHECK(evidence(ones, 0.25, 3.0) == doctest::Approx(0.25 * std::cbrt(4.0)));
  CHECK(baseline_score(ones, 0.25, 1.0) == evidence(ones, 0.25, 1.0));
  const std::vector<double> s{1.0, 1.0}, w{0.5, 0.5};
  CHECK(coupling_drive(s, w, 1.0) == doctest::Approx(1.0));
  CHECK(coupling_drive(s, w, 0.0) == 0.0);
  CHECK(nos_score(0.3, 2.0, 1.0, 0.5) == doctest::Approx(1.3));
}

TEST_CASE("stability margin") {
  DetectorParams p;
  p.g = 2.0;
  const auto m = coupling_stability_margin(p, 1.0);
  CHECK(m.bound == doctest::Approx(0.5));
  CHECK(m.margin == doctest::Approx(0.5 + 0.2 - 0.1 - 3.0 * std::sqrt(3.0) / 8.0));
  CHECK_FALSE(m.ok);
  p.lambda = 0.6;
  p.g = 0.2;
  CHECK(coupling_stability_margin(p, 0.7).ok);
}

TEST_CASE("max slope of the saturating term matches numeric maximization") {
  for (double kappa : {0.1, 1.0, 4.0}) {
    for (double vmax : {0.1, 0.3, 1.0, 10.0}) {
      double best = 0.0;
      const int n = 200'000;
      const double h = vmax / n;
      for (int i = 0; i < n; ++i) {
        const double v = i * h;
        best = std::max(best, (f_sat(v + h, 1.5, kappa) - f_sat(v, 1.5, kappa)) / h);
      }
      CHECK(f_sat_max_slope(1.5, kappa, vmax) == doctest::Approx(best).epsilon(1e-4));
    }
  }
}

TEST_CASE("iteration converges to the bisection fixed point for stable parameters") {
  Rng rng(31);
  int tested = 0;
  for (int draw = 0; draw < 100; ++draw) {
    DetectorParams p;
    p.lambda = rng.uniform(0.6, 1.5);
    p.chi = rng.uniform(0.0, 0.5);
    p.beta = rng.uniform(0.0, 0.2);
    p.a = rng.uniform(0.05, 0.3);
    p.b = rng.uniform(0.0, 1.0);
    p.mu = rng.uniform(0.01, 0.2);
    p.gamma = rng.uniform(0.0, 0.2);
    const double e = rng.uniform(0.0, 2.0);
    if (p.lambda + p.chi - p.beta - f_sat_max_slope(p.alpha, p.kappa, p.v_max) <= 0.05) continue;
    const double slope_u = p.a * p.b / (p.a + p.mu);
    auto h = [&](double v) {
      return f_sat(v, p.alpha, p.kappa) + (p.beta - p.lambda - p.chi - slope_u) * v + p.gamma + p.chi * p.v_rest + e;
    };
    REQUIRE(h(0.0) >= 0.0);
    REQUIRE(h(p.v_max) < 0.0);
    double lo = 0.0, hi = p.v_max;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (h(mid) > 0.0 ? lo : hi) = mid;
    }
    const double v_star = 0.5 * (lo + hi);
    const double u_star = slope_u * v_star;
    NosState s{0.0, 0.0};
    for (int t = 0; t < 20'000; ++t) s = nos_step(s, e, 0.0, p);
    CHECK(s.v == doctest::Approx(v_star).epsilon(1e-6));
    CHECK(s.u == doctest::Approx(u_star).epsilon(1e-6));
    CHECK(p.a * p.b * s.v == doctest::Approx((p.a + p.mu) * s.u).epsilon(1e-6));
    ++tested;
  }
  CHECK(tested > 50);
}

TEST_CASE("state stays bounded over a million noisy steps") {
  DetectorParams p;
  p.r = 0.5;
  Rng rng(5);
  NosState s{};
  const double u_max = p.a * p.b * p.v_max / (p.a + p.mu);
  bool ok = true;
  for (int t = 0; t < 1'000'000; ++t) {
    s = nos_step(s, rng.uniform(0.0, 50.0), rng.uniform(0.0, 2.0), p, rng.normal(0.0, 0.5));
    ok = ok && std::isfinite(s.v) && std::isfinite(s.u) && s.v >= 0.0 && s.v <= p.v_max && s.u >= 0.0 &&
         s.u <= u_max + 1e-12;
  }
  CHECK(ok);
}

TEST_CASE("reset term suppresses the membrane state") {
  DetectorParams p;
  const NosState s{p.theta, 0.0};
  auto pr = p;
  pr.r = 1.0;
  const auto free = nos_step(s, 0.5, 0.0, p);
  const auto reset = nos_step(s, 0.5, 0.0, pr);
  CHECK(free.v - reset.v == doctest::Approx(0.5));
}

TEST_CASE("persistence agrees with a brute-force K-of-M rule") {
  Rng rng(99);
  for (int m = 1; m <= 12; ++m) {
    for (int k = 1; k <= m; ++k) {
      for (int seq = 0; seq < 1000; ++seq) {
        Persistence fast(k, m);
        PersistenceOracle slow(k, m);
        const double rate = rng.uniform();
        const int len = 1 + static_cast<int>(rng.below(100));
        bool same = true;
        for (int t = 0; t < len; ++t) {
          const bool a = rng.uniform() < rate;
          same = same && fast.update(a) == slow.update(a);
        }
        CHECK(same);
      }
    }
  }
  CHECK_THROWS_AS(Persistence(4, 3), ConfigError);
  CHECK_THROWS_AS(Persistence(0, 3), ConfigError);
}

TEST_CASE("persistence example: set on K of M, clear after M quiet windows") {
  Persistence p(2, 3);
  CHECK_FALSE(p.update(true));
  CHECK_FALSE(p.update(false));
  CHECK(p.update(true));
  CHECK(p.update(false));
  CHECK(p.update(false));
  CHECK_FALSE(p.update(false));
}

TEST_CASE("threshold calibration") {
  std::vector<double> v(100);
  for (int i = 0; i < 100; ++i) v[static_cast<std::size_t>(i)] = i + 1;
  CHECK(calibrate_threshold(v, 0.99, 50).value() == 99.0);
  CHECK_FALSE(calibrate_threshold(v, 0.99, 101).has_value());
  CHECK_FALSE(calibrate_threshold({}, 0.99, 0).has_value());
}

TEST_CASE("detection: serial and parallel agree") {
  auto in = smoke_inputs();
  DetectorParams p;
  DetectionConfig c;
  const auto s = detect_serial(in, p, c);
  const auto o = detect_omp(in, p, c);
  CHECK(s.records == o.records);
  CHECK(s.thresholds == o.thresholds);

  p.lambda = 0.6;
  p.g = 0.2;
  p.noise_std = 0.05;
  const auto sc = detect_serial(in, p, c);
  const auto oc = detect_omp(in, p, c);
  CHECK(sc.records == oc.records);
  CHECK(sc.thresholds == oc.thresholds);
  CHECK_FALSE(sc.records == s.records);
}

TEST_CASE("detection: thresholds are burn-in quantiles and no flags before test") {
  auto in = smoke_inputs();
  DetectionConfig c;
  const auto r = detect_serial(in, {}, c);
  std::vector<std::vector<double>> burn(in.n_flows), burn_base(in.n_flows);
  for (const auto& rec : r.records) {
    if (rec.window < in.burn_in_windows) {
      CHECK_FALSE(rec.a);
      CHECK_FALSE(rec.z);
      burn[static_cast<std::size_t>(rec.flow_id)].push_back(rec.s);
      burn_base[static_cast<std::size_t>(rec.flow_id)].push_back(rec.baseline_s);
    }
  }
  for (std::size_t f = 0; f < in.n_flows; ++f) {
    REQUIRE(r.thresholds[f].nos.has_value());
    CHECK(*r.thresholds[f].nos == nearest_rank_value(burn[f], c.quantile));
    CHECK(*r.thresholds[f].baseline == nearest_rank_value(burn_base[f], c.quantile));
    CHECK(r.thresholds[f].burn_in_count == static_cast<std::int32_t>(burn[f].size()));
  }
  for (const auto& rec : r.records) {
    if (rec.window >= in.burn_in_windows) {
      CHECK(rec.a == (rec.s >= *r.thresholds[static_cast<std::size_t>(rec.flow_id)].nos));
    }
  }
}

TEST_CASE("detection: coupling beyond the stability margin is refused") {
  auto in = smoke_inputs();
  DetectorParams p;
  p.g = 1.0;
  CHECK_THROWS_AS(detect_serial(in, p, {}), ConfigError);
  in.graph = nullptr;
  p.g = 0.01;
  p.lambda = 0.7;
  CHECK_THROWS_AS(detect_serial(in, p, {}), ConfigError);
}

TEST_CASE("labels never influence scores") {
  testutil::TempDir dir("labels");
  std::ostringstream log;
  GenWorldOptions g;
  g.config = testutil::config("smoke.json");
  g.out = dir / "world";
  cmd_gen_world(g, log);

  DetectOptions d;
  d.world = g.out;
  d.out = dir / "det1";
  cmd_detect(d, log);

  // Scrub every label: flows become benign and the episode list is replaced.
  auto flows = read_json_file(g.out / world_files::kFlows);
  for (auto& f : flows) f["label"] = "benign";
  write_json_file(g.out / world_files::kFlows, flows);
  write_json_file(g.out / world_files::kLabels, nlohmann::json::array());
  d.out = dir / "det2";
  cmd_detect(d, log);

  CHECK(read_file_bytes(dir / "det1" / detect_files::kScores) == read_file_bytes(dir / "det2" / detect_files::kScores));
  CHECK(read_file_bytes(dir / "det1" / detect_files::kThresholds) ==
        read_file_bytes(dir / "det2" / detect_files::kThresholds));
}

TEST_CASE("scores CSV and thresholds JSON round trip") {
  auto in = smoke_inputs();
  DetectionConfig c;
  const auto r = detect_serial(in, {}, c);
  testutil::TempDir dir("scores");
  write_scores_csv(dir / "s.csv", r.records);
  CHECK(read_scores_csv(dir / "s.csv") == r.records);

  auto t = r.thresholds;
  t[0].nos.reset();
  const auto j = thresholds_to_json(t, c, in.burn_in_windows);
  CHECK(thresholds_from_json(j) == t);
  const auto c2 = detection_config_from_thresholds(j);
  CHECK(c2.quantile == c.quantile);
  CHECK(c2.k == c.k);
  CHECK(c2.m == c.m);
}

TEST_CASE("detector params validation") {
  CHECK_THROWS_AS(detector_params_from_json({{"dt", 0.0}}), ConfigError);
  CHECK_THROWS_AS(detector_params_from_json({{"bogus", 1.0}}), ConfigError);
  CHECK_THROWS_AS(detector_params_from_json({{"p", 0.5}}), ConfigError);
  const auto p = detector_params_from_json(read_json_file(testutil::config("detector_coupled.json")).value("detector", nlohmann::json::object()));
  CHECK(p.g > 0.0);
}
