#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nosgate/rng.hpp"
#include "nosgate/trace.hpp"

namespace nosgate {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DeviceClass { periodic_telemetry, bulk_stream, interactive_burst };

std::string to_string(DeviceClass c);
DeviceClass device_class_from_string(const std::string& s);

// Union of generator knobs. Each device class / episode kind reads the
// fields it needs; the rest are ignored.
struct TrafficParams {
  // periodic_telemetry, beaconing
  double period_s = 1.0;
  double jitter_s = 0.0;
  // bulk_stream, exfiltration
  double rate_Bps = 50'000.0;
  std::int32_t pkt_size = 1200;
  double jitter_frac = 0.0;  // relative spacing jitter, uniform +-
  // interactive_burst
  double on_mean_s = 0.5;
  double off_fraction = 0.5;
  double on_rate_pps = 40.0;
  // evasive_c2
  double rate_pps = 10.0;
  // scan
  double burst_interval_s = 2.0;
  std::int32_t burst_len = 20;
  TimeUs probe_gap_us = 2'000;
  // sizes for periodic / burst / beacon / c2 / scan
  std::int32_t size_bytes = 200;
  std::int32_t size_jitter_bytes = 0;
  // first emission time offset inside the active span
  double start_s = 0.0;
  bool random_phase = true;
};

TrafficParams traffic_params_from_json(const nlohmann::json& j);
nlohmann::json traffic_params_to_json(const TrafficParams& p);

// Packets for one benign flow over [begin_us, end_us), strictly increasing
// timestamps, sizes clamped to bounds. flow_id/clique_id are left at 0.
std::vector<PacketRecord> gen_benign_flow(DeviceClass cls, const TrafficParams& params, TimeUs begin_us,
                                          TimeUs end_us, SizeBounds bounds, std::uint64_t seed);

// Pre-projection malicious proposal schedule for an episode span.
std::vector<PacketRecord> gen_episode_proposal(EpisodeKind kind, const TrafficParams& params, TimeUs begin_us,
                                               TimeUs end_us, SizeBounds bounds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Contention structure

struct ContentionGraph {
  std::size_t n = 0;
  std::vector<double> weights;  // row-major n x n, w_ii = 0
  std::vector<std::vector<FlowId>> cliques;
  double spectral_radius = 0.0;
  std::pair<double, double> rho_band{0.0, 1.0};

  double w(std::size_t i, std::size_t j) const { return weights[i * n + j]; }
};

// Perron root of a nonnegative square matrix by shifted power iteration.
double spectral_radius(std::span<const double> w, std::size_t n, double rel_tol = 1e-8);

// Within-clique weights uniform [0.5, 1], zero across cliques, scaled so the
// spectral radius sits mid-band. Throws GenerationError naming the band when
// it cannot be hit.
ContentionGraph build_contention_graph(std::span<const std::int32_t> clique_of_flow, std::pair<double, double> rho_band,
                                       std::uint64_t seed);

nlohmann::json contention_to_json(const ContentionGraph& g);
ContentionGraph contention_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Timing distortion

struct BenignIatReference {
  FlowId flow_id = 0;
  std::string device_class;
  std::vector<double> sorted_iats_s;
};

// Exact 1-D Wasserstein-1 distance between two sorted samples, by merging
// their piecewise-constant quantile functions. Throws std::domain_error on
// empty input.
double w1_empirical(std::span<const double> a, std::span<const double> b);

// Sorted within-window IATs (seconds) of a flow's packets; only windows with
// at least two packets contribute.
std::vector<double> window_iats_s(std::span<const PacketRecord> window_packets);

struct ProjectionResult {
  std::vector<PacketRecord> packets;
  bool feasible = true;
  bool changed = false;
  double distortion = 0.0;  // W1 after projection (before, if unchanged)
};

// Order-preserving warp of one window's arrivals so that the IAT law is
// within epsilon (W1) of the reference. Sorted IATs are interpolated toward
// reference quantiles, y = x + tau (q - x), with the smallest tau found by
// bisection. The first arrival is kept; everything stays in [lo, hi).
ProjectionResult project_iats(std::span<const PacketRecord> window_packets, const BenignIatReference& reference,
                              double epsilon_s, TimeUs lo_us, TimeUs hi_us);

struct RepairResult {
  std::vector<PacketRecord> packets;
  bool floor_reachable = true;
};

// Clamp sizes into bounds and raise them, proportionally to per-packet
// headroom, until the byte floor is met.
RepairResult repair_sizes(std::span<const PacketRecord> flow_packets, std::int64_t r_min_bytes, SizeBounds bounds);

struct FeasibilityOutcome {
  FlowId flow_id = 0;
  Budgets budgets;
  bool feasible = true;
  std::int32_t iterations_used = 0;
  double final_distortion = 0.0;   // mean W1 over span windows with >= 2 packets
  double final_delay_delta = 0.0;  // clique mean delay, attack minus benign, seconds
  std::string reason;              // empty when feasible
};

nlohmann::json feasibility_to_json(const std::vector<FeasibilityOutcome>& v);
std::vector<FeasibilityOutcome> feasibility_from_json(const nlohmann::json& j);

struct EpisodeContext {
  FlowId flow_id = 0;
  std::int32_t clique_id = 0;
  std::int32_t start_window = 0;
  std::int32_t end_window = 0;
  TimeUs window_us = 250'000;
  SizeBounds bounds;
  double capacity_Bps = 1.25e6;
  BenignIatReference reference;
  // Every other packet of the clique, sorted by (ts, flow_id). Includes the
  // host flow outside the episode span.
  std::vector<PacketRecord> background;
  std::uint64_t seed = 0;
  double thinning_factor = 0.8;

  TimeUs span_begin() const { return static_cast<TimeUs>(start_window) * window_us; }
  TimeUs span_end() const { return static_cast<TimeUs>(end_window + 1) * window_us; }
};

struct EpisodeResult {
  std::vector<PacketRecord> packets;
  FeasibilityOutcome outcome;
};

// Projection + size repair + contention loop for one malicious flow. Load is
// thinned by a fixed factor per iteration until the clique mean-delay
// increase fits delta_q or i_max iterations are spent.
EpisodeResult enforce_contention(std::vector<PacketRecord> proposal, const EpisodeContext& ctx,
                                 const Budgets& budgets, std::int32_t i_max);

// Mean span-window W1 of a flow's episode packets against the reference.
double mean_window_distortion(std::span<const PacketRecord> episode_packets, const BenignIatReference& reference,
                              TimeUs window_us);

// Canonical trace order: (ts_us, flow_id). Timestamps are unique per flow.
void sort_canonical(std::vector<PacketRecord>& packets);

// ---------------------------------------------------------------------------
// Post-hoc budget audit, recomputed from a finished trace.

struct BudgetAudit {
  FlowId flow_id = 0;
  std::int64_t span_bytes = 0;
  bool floor_ok = false;
  double mean_w1_s = 0.0;
  std::int32_t timing_windows = 0;
  bool timing_ok = false;
  double delay_delta_s = 0.0;
  bool contention_ok = false;

  bool all_ok() const { return floor_ok && timing_ok && contention_ok; }
};

// Timing distortion is recomputed with the CDF form of W1,
// integral |F_a(x) - F_b(x)| dx, independent of the quantile-merge route.
double w1_cdf_form(std::span<const double> a, std::span<const double> b);

BudgetAudit audit_episode(const Trace& trace, const EpisodeLabel& label, const BenignIatReference& reference,
                          double capacity_Bps);

// ---------------------------------------------------------------------------
// Worlds

struct DeviceGroup {
  DeviceClass cls = DeviceClass::periodic_telemetry;
  std::int32_t count = 1;
  TrafficParams params;
};

struct CliqueSpec {
  std::vector<DeviceGroup> devices;
};

struct EpisodeSpec {
  EpisodeKind kind = EpisodeKind::evasive_c2;
  std::int32_t clique = 0;
  std::int32_t slot = 0;  // host flow index within the clique
  std::int32_t start_window = 0;
  std::int32_t end_window = 0;
  Budgets budgets;
  bool r_min_max = false;  // floor = proposal count * max size
  TrafficParams params;
};

struct WorldConfig {
  std::string world_id = "world";
  std::uint64_t seed = 0;
  std::int32_t horizon_windows = 2400;
  TimeUs window_us = 250'000;
  SizeBounds size_bounds;
  double link_capacity_Bps = 1.25e6;
  std::pair<double, double> rho_band{0.5, 0.9};
  Split split;
  std::int32_t i_max = 16;
  std::int32_t reference_cap = 10'000;
  std::vector<CliqueSpec> cliques;
  std::vector<EpisodeSpec> episodes;
  nlohmann::json raw;  // as parsed, with seed resolved

  // Throws ConfigError naming the offending field.
  void validate() const;
  static WorldConfig from_json(const nlohmann::json& j);
};

struct World {
  Trace trace;
  ContentionGraph graph;
  std::vector<EpisodeLabel> labels;
  std::vector<BenignIatReference> references;  // one per episode host flow
  std::vector<FeasibilityOutcome> feasibility;
  RunManifest manifest;
};

// Pure function of (config, seed).
World build_world(const WorldConfig& config, std::uint64_t seed);

// Pooled within-window IATs of the class's flows, sorted, subsampled to at
// most `cap` evenly spaced order statistics.
std::vector<double> pooled_reference(const std::vector<std::vector<PacketRecord>>& flows, TimeUs window_us,
                                     std::int32_t cap);

namespace world_files {
inline constexpr const char* kTrace = "trace.csv";
inline constexpr const char* kFlows = "flows.json";
inline constexpr const char* kLabels = "labels.json";
inline constexpr const char* kContention = "contention.json";
inline constexpr const char* kFeasibility = "feasibility.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kReferences = "references.json";
}  // namespace world_files

void write_world(const std::filesystem::path& dir, const World& world);

// Detection-side view of a world directory: labels are not read.
struct WorldInputs {
  Trace trace;
  ContentionGraph graph;
  RunManifest manifest;
};
WorldInputs read_world_inputs(const std::filesystem::path& dir);
World read_world(const std::filesystem::path& dir);

}  // namespace nosgate
