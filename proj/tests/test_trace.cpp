#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "nosgate/rng.hpp"
#include "nosgate/stats.hpp"
#include "nosgate/trace.hpp"

using namespace nosgate;
using testutil::pkt;

namespace {

Trace two_flow_trace() {
  Trace t;
  t.flows.resize(2);
  t.horizon_windows = 4;
  return t;
}

}  // namespace

TEST_CASE("validate_trace: empty trace is valid") {
  CHECK(validate_trace(two_flow_trace(), {}).valid());
}

TEST_CASE("validate_trace: minimum-size packet at time zero is valid") {
  auto t = two_flow_trace();
  t.packets = {pkt(0, 0, 64)};
  CHECK(validate_trace(t, {64, 1500}).valid());
}

TEST_CASE("validate_trace: reports every violated invariant") {
  auto t = two_flow_trace();
  t.packets = {pkt(500, 0, 100), pkt(400, 1, 100), pkt(600, 5, 100), pkt(700, 0, 2000), pkt(1'000'000, 0, 100)};
  const auto r = validate_trace(t, {64, 1500});
  REQUIRE(r.violations.size() == 4);
  CHECK(r.violations[0].kind == ViolationKind::unsorted_timestamp);
  CHECK(r.violations[0].index == 1);
  CHECK(r.violations[1].kind == ViolationKind::dangling_flow);
  CHECK(r.violations[2].kind == ViolationKind::size_out_of_range);
  CHECK(r.violations[3].kind == ViolationKind::outside_horizon);
}

TEST_CASE("sha256 of the empty string") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("config hash ignores key order and whitespace") {
  const auto a = nlohmann::json::parse(R"({"b": 1, "a": {"y": 0.1, "x": [1, 2]}})");
  const auto b = nlohmann::json::parse("{\n  \"a\": {\"x\": [1,2], \"y\": 0.1},\n  \"b\": 1\n}");
  CHECK(canonical_bytes(a) == canonical_bytes(b));
  CHECK(manifest_hash(canonical_bytes(a)) == manifest_hash(canonical_bytes(b)));
  const auto c = nlohmann::json::parse(R"({"b": 2, "a": {"y": 0.1, "x": [1, 2]}})");
  CHECK(manifest_hash(canonical_bytes(a)) != manifest_hash(canonical_bytes(c)));
}

TEST_CASE("trace CSV round trip over random traces") {
  testutil::TempDir dir("trace");
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PacketRecord> packets;
    TimeUs ts = 0;
    const auto n = rng.below(500);
    for (std::uint64_t i = 0; i < n; ++i) {
      ts += static_cast<TimeUs>(rng.below(10'000));
      packets.push_back(pkt(ts, static_cast<FlowId>(rng.below(7)), 64 + static_cast<std::int32_t>(rng.below(1437)),
                            static_cast<std::int32_t>(rng.below(3))));
    }
    const auto path = dir / "t.csv";
    write_trace_csv(path, packets);
    CHECK(read_trace_csv(path) == packets);
  }
}

TEST_CASE("trace CSV parse errors name file and line") {
  testutil::TempDir dir("trace_bad");
  const auto path = dir / "bad.csv";
  {
    std::ofstream out(path);
    out << "ts_us,flow_id,len_bytes,clique_id\n0,0,100,0\n5,x,100,0\n";
  }
  try {
    read_trace_csv(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bad.csv:3") != std::string::npos);
  }
  {
    std::ofstream out(path);
    out << "time,flow\n";
  }
  CHECK_THROWS_AS(read_trace_csv(path), FormatError);
}

TEST_CASE("flows, labels and manifest JSON round trip") {
  std::vector<FlowInfo> flows(2);
  flows[0].key = {"10.0.0.1", "10.0.1.1", 4000, 443, 6};
  flows[0].device_class = "bulk_stream";
  flows[1].key = {"10.0.1.1", "10.0.0.1", 443, 4000, 6};  // reverse direction is its own flow
  flows[1].device_class = "periodic_telemetry";
  flows[1].label = "malicious";
  flows[1].clique_id = 3;
  CHECK(flows_from_json(flows_to_json(flows)) == flows);
  CHECK_FALSE(flows[0].key == flows[1].key);

  std::vector<EpisodeLabel> labels(1);
  labels[0] = {1, 10, 20, EpisodeKind::scan, {1000, 0.05, kInf}, false};
  const auto back = labels_from_json(labels_to_json(labels));
  REQUIRE(back.size() == 1);
  CHECK(back[0].flow_id == 1);
  CHECK(back[0].kind == EpisodeKind::scan);
  CHECK(back[0].budgets.r_min_bytes == 1000);
  CHECK(back[0].budgets.epsilon_s == 0.05);
  CHECK(std::isinf(back[0].budgets.delta_q_s));
  CHECK_FALSE(back[0].feasible);

  RunManifest m;
  m.world_id = "w";
  m.seed = 99;
  m.config_hash = "abc";
  m.horizon_windows = 10;
  m.config = {{"k", 1}};
  const auto m2 = manifest_from_json(manifest_to_json(m));
  CHECK(m2.world_id == "w");
  CHECK(m2.seed == 99);
  CHECK(m2.split.burn_in_frac == doctest::Approx(0.6));
  CHECK(m2.config == m.config);
}

TEST_CASE("budgets reject negative values") {
  CHECK_THROWS_AS(budgets_from_json({{"r_min_bytes", -1}}), ConfigError);
  CHECK_THROWS_AS(budgets_from_json({{"epsilon_s", -0.1}}), ConfigError);
  const auto b = budgets_from_json({{"epsilon_s", "inf"}});
  CHECK(std::isinf(b.epsilon_s));
}

TEST_CASE("split fractions") {
  Split s;
  CHECK(s.burn_in_windows(2400) == 1440);
  CHECK(s.test_start(2400) == 1440);
  Split v{0.5, 0.1, 0.4};
  CHECK(v.test_start(1000) == 600);
}

TEST_CASE("nearest rank") {
  std::vector<int> v(100);
  for (int i = 0; i < 100; ++i) v[static_cast<std::size_t>(i)] = i + 1;
  CHECK(nearest_rank_value(v, 0.99) == 99);
  CHECK(nearest_rank_value(v, 0.5) == 50);
  CHECK(nearest_rank_value(v, 0.001) == 1);
  std::vector<int> w(1000);
  for (int i = 0; i < 1000; ++i) w[static_cast<std::size_t>(i)] = i + 1;
  // ceil(0.999 * 1000) = 999 in exact arithmetic.
  CHECK(nearest_rank_value(w, 0.999) == 999);
  CHECK(nearest_rank_value(w, 1.0) == 1000);
  CHECK_THROWS_AS(nearest_rank(0.5, 0), std::domain_error);
}

TEST_CASE("derived seeds are distinct per stream and salt") {
  CHECK(derive_seed(1, 0, 1) != derive_seed(1, 1, 1));
  CHECK(derive_seed(1, 0, 1) != derive_seed(1, 0, 2));
  CHECK(derive_seed(1, 0, 1) == derive_seed(1, 0, 1));
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
}
