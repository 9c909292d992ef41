#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "nosgate/trace.hpp"

namespace nosgate {

struct GateConfig {
  double omega_0 = 1.0;
  double omega_minus = 0.1;
  double t_g_s = 5.0;  // quarantine duration
  double link_capacity_Bps = 1.25e6;

  void validate() const;
};

GateConfig gate_config_from_json(const nlohmann::json& j, const GateConfig& defaults = {});
nlohmann::json gate_config_to_json(const GateConfig& g);

struct WeightChange {
  TimeUs from_us = 0;
  double weight = 1.0;

  friend bool operator==(const WeightChange&, const WeightChange&) = default;
};

// Piecewise-constant per-flow weights. Flows without entries run at the
// default weight for the whole horizon.
class WeightSchedule {
 public:
  explicit WeightSchedule(double default_weight = 1.0) : default_weight_(default_weight) {}

  // Entries must be appended in nondecreasing time order per flow.
  void set(FlowId flow, TimeUs from_us, double weight);
  double weight_at(FlowId flow, TimeUs t_us) const;
  double default_weight() const { return default_weight_; }
  const std::map<FlowId, std::vector<WeightChange>>& entries() const { return entries_; }
  // Throws ConfigError on any non-positive weight.
  void validate() const;

  friend bool operator==(const WeightSchedule&, const WeightSchedule&) = default;

 private:
  double default_weight_;
  std::map<FlowId, std::vector<WeightChange>> entries_;
};

struct QueueEvent {
  FlowId flow_id = 0;
  std::int32_t clique_id = 0;
  TimeUs enqueue_us = 0;
  TimeUs dequeue_us = 0;   // service start
  TimeUs complete_us = 0;  // end of transmission
  bool benign = true;

  TimeUs delay_us() const { return dequeue_us - enqueue_us; }
  friend bool operator==(const QueueEvent&, const QueueEvent&) = default;
};

// One entry per trace packet, index-aligned with Trace::packets.
using QueueEventLog = std::vector<QueueEvent>;

TimeUs transmission_us(std::int32_t len_bytes, double capacity_Bps);

// Self-clocked virtual-finish-time WFQ over a single scheduling domain.
// `packets` must be sorted by ts_us. Output is index-aligned with input.
std::vector<QueueEvent> replay_domain(std::span<const PacketRecord> packets, const WeightSchedule& schedule,
                                      double capacity_Bps);

// Every clique is an independent server of equal capacity.
QueueEventLog replay_serial(const Trace& trace, const WeightSchedule& schedule, double capacity_Bps);
QueueEventLog replay_omp(const Trace& trace, const WeightSchedule& schedule, double capacity_Bps);
inline QueueEventLog replay(const Trace& trace, const WeightSchedule& schedule, double capacity_Bps) {
  return replay_omp(trace, schedule, capacity_Bps);
}

struct GateSignal {
  FlowId flow_id = 0;
  std::int32_t window = 0;
  bool z = false;
};

// Maps actionable flags to weights. The flag for window t is known at the
// end of that window, so a weight change takes effect at (t+1)*window_us.
// omega_minus holds until max(flag clear, activation + T_g); re-activation
// restarts the quarantine clock.
WeightSchedule gate_controller(std::span<const GateSignal> signals, const GateConfig& config, TimeUs window_us);

enum class DelayFilterKind { all, benign_only, clique };

struct DelayFilter {
  DelayFilterKind kind = DelayFilterKind::all;
  std::int32_t clique_id = 0;

  static DelayFilter all() { return {}; }
  static DelayFilter benign_only() { return {DelayFilterKind::benign_only, 0}; }
  static DelayFilter clique(std::int32_t id) { return {DelayFilterKind::clique, id}; }
};

// Nearest-rank percentile of wait-until-service delays. Throws
// std::domain_error if the filter selects nothing.
TimeUs delay_percentile(const QueueEventLog& log, double pct, DelayFilter filter = DelayFilter::all());

// Mean wait in seconds over packets of the clique. Throws std::domain_error
// if the clique has no packets.
double clique_mean_delay(const QueueEventLog& log, std::int32_t clique_id);
double clique_mean_delay(std::span<const QueueEvent> events);

void write_queue_log_csv(const std::filesystem::path& path, const QueueEventLog& log, bool annotated);
QueueEventLog read_queue_log_csv(const std::filesystem::path& path);

void write_schedule_csv(const std::filesystem::path& path, const WeightSchedule& schedule);
WeightSchedule read_schedule_csv(const std::filesystem::path& path, double default_weight);

}  // namespace nosgate
