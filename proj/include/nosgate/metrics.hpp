#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "nosgate/detector.hpp"
#include "nosgate/trace.hpp"
#include "nosgate/wfq.hpp"

namespace nosgate {

// Per-record alarm and actionable flags, index-aligned with a score stream.
struct Decisions {
  std::vector<std::uint8_t> a;
  std::vector<std::uint8_t> z;
};

enum class ScoreSource { nos, baseline };

// Recomputes a/z from a score column and frozen thresholds with the same
// quantile and persistence rules the detector uses. Records must be ordered
// by (window, flow_id).
Decisions derive_decisions(std::span<const ScoreRecord> records, std::span<const FlowThresholds> thresholds,
                           ScoreSource source, std::int32_t burn_in_windows, std::int32_t k, std::int32_t m);

// Flags exactly as written by the detector.
Decisions recorded_decisions(std::span<const ScoreRecord> records);

struct FprResult {
  double alarm_rate = 0.0;
  double actionable_rate = 0.0;
  std::int64_t eligible_pairs = 0;
};

// Benign (flow, window) pairs in [test_start, H) whose flow has a threshold.
// Episode flows are excluded over [start, end + grace]. Throws
// std::domain_error if nothing is eligible.
FprResult achieved_fpr(std::span<const ScoreRecord> records, const Decisions& d,
                       std::span<const FlowThresholds> thresholds, ScoreSource source,
                       std::span<const EpisodeLabel> labels, std::int32_t test_start, std::int32_t grace_windows);

// Fraction of episodes with z = 1 on their flow somewhere in
// [start, end + grace]. Throws std::domain_error on an empty episode list.
double incident_recall(std::span<const ScoreRecord> records, const Decisions& d, std::span<const EpisodeLabel> labels,
                       std::int32_t grace_windows);

// Seconds from episode start to the first z = 1 inside [start, end + grace].
std::optional<double> time_to_detect(std::span<const ScoreRecord> records, const Decisions& d,
                                     const EpisodeLabel& episode, std::int32_t grace_windows, TimeUs window_us);

struct QueueImpact {
  double delta_p999_delay_ms = 0.0;
  double delta_p999_collateral_ms = 0.0;
};

// gated minus base at p99.9, over all packets and over benign packets.
QueueImpact queue_impact(const QueueEventLog& base, const QueueEventLog& gated);

// Marks the packets that belong to an episode span as non-benign.
void annotate_benign(QueueEventLog& log, const Trace& trace, std::span<const EpisodeLabel> labels);

struct BenchResult {
  std::int64_t rows = 0;
  std::int64_t batches = 0;
  double mean_us = 0.0;
  double p90_us = 0.0;
  double max_us = 0.0;
};

// Per-row wall-clock of evidence + step + score + persistence over a
// synthetic z-score stream, timed in batches of 1000 rows; the first tenth of
// the batches is warm-up and is not reported.
BenchResult bench_scoring(std::int64_t rows, const DetectorParams& params, const DetectionConfig& config,
                          std::uint64_t seed);

nlohmann::json bench_to_json(const BenchResult& b);

struct MethodReport {
  FprResult fpr;
  std::optional<double> incident_recall;
  std::vector<std::uint8_t> detected;     // per label
  std::vector<std::optional<double>> ttd_s;  // per label
};

struct MetricsReport {
  MethodReport nos;
  MethodReport baseline;
  double p99_delay_ms_base = 0.0, p99_delay_ms_gated = 0.0;
  double p999_delay_ms_base = 0.0, p999_delay_ms_gated = 0.0;
  std::optional<double> p999_collateral_ms_base, p999_collateral_ms_gated;
  QueueImpact impact;
  std::optional<double> feasibility_rate;
  std::int32_t grace_windows = 8;
};

struct ReportInputs {
  const Trace* trace = nullptr;
  std::span<const EpisodeLabel> labels;
  std::span<const FeasibilityOutcome> feasibility;
  std::span<const ScoreRecord> records;
  std::span<const FlowThresholds> thresholds;
  DetectionConfig detection;
  std::int32_t burn_in_windows = 0;
  std::int32_t test_start = 0;
  const QueueEventLog* base_log = nullptr;   // annotated
  const QueueEventLog* gated_log = nullptr;  // annotated
};

MetricsReport compute_report(const ReportInputs& in, std::int32_t grace_windows);
nlohmann::json report_to_json(const MetricsReport& r);

void write_episodes_csv(const std::filesystem::path& path, const MetricsReport& r);

}  // namespace nosgate
