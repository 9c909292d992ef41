#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "nosgate/trace.hpp"
#include "nosgate/worlds.hpp"

namespace nosgate {

inline constexpr std::size_t kFeatureCount = 7;

enum Feature : std::size_t { kPktRate, kByteRate, kIatMean, kIatCv, kPacing, kShare, kInterference };

inline constexpr std::array<const char*, kFeatureCount> kFeatureNames = {
    "pkt_rate", "byte_rate", "iat_mean", "iat_cv", "pacing", "share", "interference"};

struct FlowWindowFeatures {
  FlowId flow_id = 0;
  std::int32_t window = 0;
  std::int32_t pkt_count = 0;
  std::array<double, kFeatureCount> x{};
  bool iat_present = false;  // iat_mean / iat_cv are missing when pkt_count < 2

  bool present(std::size_t k) const { return iat_present || (k != kIatMean && k != kIatCv); }
  friend bool operator==(const FlowWindowFeatures&, const FlowWindowFeatures&) = default;
};

struct WindowingParams {
  std::int32_t micro_bins = 10;
};

// 1 - H(counts) / log(B); 0 when fewer than two packets.
double pacing_index(std::span<const std::int64_t> bin_counts);
double pacing_index(std::span<const TimeUs> window_ts, TimeUs window_begin_us, TimeUs window_us, std::int32_t bins);

struct ContentionFeatures {
  double share = 0.0;
  double interference = 0.0;
};

// window_bytes is indexed by flow id. Throws std::domain_error for an unknown
// flow.
ContentionFeatures contention_features(std::span<const std::int64_t> window_bytes, const ContentionGraph& graph,
                                       FlowId flow, TimeUs window_us);

// One row per flow per window from the flow's first packet window to H-1,
// ordered by (window, flow_id).
std::vector<FlowWindowFeatures> windowize_serial(const Trace& trace, const ContentionGraph& graph,
                                                 const WindowingParams& params = {});
std::vector<FlowWindowFeatures> windowize_omp(const Trace& trace, const ContentionGraph& graph,
                                              const WindowingParams& params = {});

// ---------------------------------------------------------------------------
// Online normalization

struct NormalizerParams {
  double lambda_m = 0.05;
  double lambda_v = 0.01;
  double eps_var = 1e-6;
  double clip_mag = 8.0;
  double post_burn_in_scale = 0.2;
  // Updates a feature needs before its z-score is emitted; 0 disables.
  std::int32_t warmup = 100;
  // Divide the variance EMA by (1 - prod(1 - lambda_v)) so early estimates
  // are not biased toward the initial value.
  bool debias = true;

  void validate() const;
};

NormalizerParams normalizer_params_from_json(const nlohmann::json& j, const NormalizerParams& defaults = {});
nlohmann::json normalizer_params_to_json(const NormalizerParams& p);

struct NormalizerState {
  std::array<double, kFeatureCount> m{};
  std::array<double, kFeatureCount> q{};
  std::array<bool, kFeatureCount> seen{};
  std::array<std::int32_t, kFeatureCount> updates{};
  std::array<double, kFeatureCount> retained{};  // prod(1 - lambda_v) over updates

  // Variance used for scoring, floored at eps_var.
  double variance(std::size_t k, const struct NormalizerParams& p) const;
};

using ZVector = std::array<double, kFeatureCount>;

// z-score against the current state; missing features, first sightings and
// warm-up give 0.
ZVector normalize_score(const NormalizerState& state, const FlowWindowFeatures& f, const NormalizerParams& p);
// Fold one observation into the state. After burn-in the rates shrink and the
// innovation is clipped to clip_mag standard deviations.
void normalize_update(NormalizerState& state, const FlowWindowFeatures& f, const NormalizerParams& p,
                      bool post_burn_in);
// Score, then update.
ZVector normalize(NormalizerState& state, const FlowWindowFeatures& f, const NormalizerParams& p, bool post_burn_in);

struct NormalizedRow {
  FlowId flow_id = 0;
  std::int32_t window = 0;
  ZVector z{};

  friend bool operator==(const NormalizedRow&, const NormalizedRow&) = default;
};

// One normalizer bucket per device class. Within a window every flow of a
// bucket is scored against the state at the start of the window; updates are
// then applied in flow order. Output is index-aligned with `rows`.
std::vector<NormalizedRow> normalize_stream_serial(std::span<const FlowWindowFeatures> rows,
                                                   const std::vector<FlowInfo>& flows, const NormalizerParams& p,
                                                   std::int32_t burn_in_windows);
std::vector<NormalizedRow> normalize_stream_omp(std::span<const FlowWindowFeatures> rows,
                                                const std::vector<FlowInfo>& flows, const NormalizerParams& p,
                                                std::int32_t burn_in_windows);

void write_features_csv(const std::filesystem::path& path, std::span<const FlowWindowFeatures> rows);
std::vector<FlowWindowFeatures> read_features_csv(const std::filesystem::path& path);

}  // namespace nosgate
