#include "nosgate/wfq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <unordered_map>

#include "nosgate/csv.hpp"
#include "nosgate/stats.hpp"

namespace nosgate {

void GateConfig::validate() const {
  if (!(omega_0 > 0.0)) throw ConfigError("gate: omega_0 must be positive");
  if (!(omega_minus > 0.0 && omega_minus < omega_0)) throw ConfigError("gate: require 0 < omega_minus < omega_0");
  if (!(t_g_s > 0.0)) throw ConfigError("gate: t_g_s must be positive");
  if (!(link_capacity_Bps > 0.0)) throw ConfigError("gate: link_capacity_Bps must be positive");
}

GateConfig gate_config_from_json(const nlohmann::json& j, const GateConfig& defaults) {
  GateConfig g = defaults;
  try {
    g.omega_0 = j.value("omega_0", g.omega_0);
    g.omega_minus = j.value("omega_minus", g.omega_minus);
    g.t_g_s = j.value("t_g_s", g.t_g_s);
    g.link_capacity_Bps = j.value("link_capacity_Bps", g.link_capacity_Bps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("gate config: ") + e.what());
  }
  g.validate();
  return g;
}

nlohmann::json gate_config_to_json(const GateConfig& g) {
  return {{"omega_0", g.omega_0},
          {"omega_minus", g.omega_minus},
          {"t_g_s", g.t_g_s},
          {"link_capacity_Bps", g.link_capacity_Bps}};
}

void WeightSchedule::set(FlowId flow, TimeUs from_us, double weight) {
  auto& v = entries_[flow];
  if (!v.empty() && from_us < v.back().from_us) {
    throw std::invalid_argument("WeightSchedule::set: entries must be time-ordered");
  }
  if (!v.empty() && v.back().from_us == from_us) {
    v.back().weight = weight;
  } else {
    v.push_back({from_us, weight});
  }
}

double WeightSchedule::weight_at(FlowId flow, TimeUs t_us) const {
  auto it = entries_.find(flow);
  if (it == entries_.end()) return default_weight_;
  const auto& v = it->second;
  auto pos = std::upper_bound(v.begin(), v.end(), t_us,
                              [](TimeUs t, const WeightChange& c) { return t < c.from_us; });
  if (pos == v.begin()) return default_weight_;
  return std::prev(pos)->weight;
}

void WeightSchedule::validate() const {
  if (!(default_weight_ > 0.0)) throw ConfigError("weight schedule: default weight must be positive");
  for (const auto& [flow, v] : entries_) {
    for (const auto& c : v) {
      if (!(c.weight > 0.0)) {
        throw ConfigError("weight schedule: non-positive weight for flow " + std::to_string(flow));
      }
    }
  }
}

TimeUs transmission_us(std::int32_t len_bytes, double capacity_Bps) {
  return static_cast<TimeUs>(std::ceil(static_cast<double>(len_bytes) * 1e6 / capacity_Bps - 1e-9));
}

std::vector<QueueEvent> replay_domain(std::span<const PacketRecord> packets, const WeightSchedule& schedule,
                                      double capacity_Bps) {
  if (!(capacity_Bps > 0.0)) throw ConfigError("replay: capacity must be positive");
  schedule.validate();

  struct Tagged {
    double tag;
    std::size_t seq;
    bool operator>(const Tagged& o) const { return tag != o.tag ? tag > o.tag : seq > o.seq; }
  };
  std::priority_queue<Tagged, std::vector<Tagged>, std::greater<>> queue;
  std::unordered_map<FlowId, double> last_tag;

  std::vector<QueueEvent> out(packets.size());
  double virtual_time = 0.0;  // tag of the packet in (or last in) service
  TimeUs busy_until = 0;
  std::size_t next = 0;

  while (next < packets.size() || !queue.empty()) {
    if (!queue.empty() && (next == packets.size() || busy_until < packets[next].ts_us)) {
      const auto e = queue.top();
      queue.pop();
      const auto& p = packets[e.seq];
      const TimeUs start = std::max(busy_until, p.ts_us);
      virtual_time = e.tag;
      const TimeUs done = start + transmission_us(p.len_bytes, capacity_Bps);
      out[e.seq] = {p.flow_id, p.clique_id, p.ts_us, start, done, true};
      busy_until = done;
      continue;
    }
    const auto& p = packets[next];
    if (queue.empty() && busy_until <= p.ts_us) {
      // System idle: restart virtual time.
      virtual_time = 0.0;
      last_tag.clear();
      busy_until = p.ts_us;
    }
    const double w = schedule.weight_at(p.flow_id, p.ts_us);
    auto [it, inserted] = last_tag.try_emplace(p.flow_id, 0.0);
    const double tag = std::max(virtual_time, it->second) + static_cast<double>(p.len_bytes) / (w * capacity_Bps);
    it->second = tag;
    queue.push({tag, next});
    ++next;
  }
  return out;
}

namespace {

std::vector<std::vector<std::size_t>> group_by_clique(const Trace& trace) {
  std::unordered_map<std::int32_t, std::size_t> slot;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < trace.packets.size(); ++i) {
    auto [it, inserted] = slot.try_emplace(trace.packets[i].clique_id, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

void replay_group(const Trace& trace, const std::vector<std::size_t>& idx, const WeightSchedule& schedule,
                  double capacity_Bps, QueueEventLog& log) {
  std::vector<PacketRecord> pkts;
  pkts.reserve(idx.size());
  for (auto i : idx) pkts.push_back(trace.packets[i]);
  auto events = replay_domain(pkts, schedule, capacity_Bps);
  for (std::size_t k = 0; k < idx.size(); ++k) log[idx[k]] = events[k];
}

}  // namespace

QueueEventLog replay_serial(const Trace& trace, const WeightSchedule& schedule, double capacity_Bps) {
  QueueEventLog log(trace.packets.size());
  for (const auto& g : group_by_clique(trace)) replay_group(trace, g, schedule, capacity_Bps, log);
  return log;
}

QueueEventLog replay_omp(const Trace& trace, const WeightSchedule& schedule, double capacity_Bps) {
  schedule.validate();
  QueueEventLog log(trace.packets.size());
  const auto groups = group_by_clique(trace);
  const auto n = static_cast<std::ptrdiff_t>(groups.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t g = 0; g < n; ++g) {
    replay_group(trace, groups[static_cast<std::size_t>(g)], schedule, capacity_Bps, log);
  }
  return log;
}

WeightSchedule gate_controller(std::span<const GateSignal> signals, const GateConfig& config, TimeUs window_us) {
  config.validate();
  std::map<FlowId, std::vector<GateSignal>> per_flow;
  for (const auto& s : signals) per_flow[s.flow_id].push_back(s);

  const auto quarantine_us = static_cast<TimeUs>(std::llround(config.t_g_s * 1e6));
  constexpr TimeUs kNever = std::numeric_limits<TimeUs>::max();

  WeightSchedule schedule(config.omega_0);
  for (auto& [flow, sig] : per_flow) {
    std::stable_sort(sig.begin(), sig.end(), [](const auto& a, const auto& b) { return a.window < b.window; });
    schedule.set(flow, 0, config.omega_0);

    // [start, end) spans, one per activation run of z.
    std::vector<std::pair<TimeUs, TimeUs>> spans;
    bool prev = false;
    for (const auto& s : sig) {
      const TimeUs boundary = static_cast<TimeUs>(s.window + 1) * window_us;
      if (s.z && !prev) {
        spans.push_back({boundary, kNever});
      } else if (!s.z && prev) {
        spans.back().second = boundary;
      }
      prev = s.z;
    }
    for (auto& [start, end] : spans) {
      if (end != kNever) end = std::max(end, start + quarantine_us);
    }
    // Merge overlapping spans.
    std::vector<std::pair<TimeUs, TimeUs>> merged;
    for (const auto& s : spans) {
      if (!merged.empty() && s.first <= merged.back().second) {
        merged.back().second = std::max(merged.back().second, s.second);
      } else {
        merged.push_back(s);
      }
    }
    for (const auto& [start, end] : merged) {
      schedule.set(flow, start, config.omega_minus);
      if (end != kNever) schedule.set(flow, end, config.omega_0);
    }
  }
  return schedule;
}

TimeUs delay_percentile(const QueueEventLog& log, double pct, DelayFilter filter) {
  std::vector<TimeUs> delays;
  delays.reserve(log.size());
  for (const auto& e : log) {
    if (filter.kind == DelayFilterKind::benign_only && !e.benign) continue;
    if (filter.kind == DelayFilterKind::clique && e.clique_id != filter.clique_id) continue;
    delays.push_back(e.delay_us());
  }
  if (delays.empty()) throw std::domain_error("delay_percentile: filter selects no packets");
  return nearest_rank_value(std::move(delays), pct / 100.0);
}

double clique_mean_delay(std::span<const QueueEvent> events) {
  if (events.empty()) throw std::domain_error("clique_mean_delay: empty clique");
  long double sum = 0;
  for (const auto& e : events) sum += static_cast<long double>(e.delay_us());
  return static_cast<double>(sum / static_cast<long double>(events.size()) / 1e6L);
}

double clique_mean_delay(const QueueEventLog& log, std::int32_t clique_id) {
  std::vector<QueueEvent> sel;
  for (const auto& e : log) {
    if (e.clique_id == clique_id) sel.push_back(e);
  }
  if (sel.empty()) throw std::domain_error("clique_mean_delay: clique " + std::to_string(clique_id) + " is empty");
  return clique_mean_delay(sel);
}

void write_queue_log_csv(const std::filesystem::path& path, const QueueEventLog& log, bool annotated) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "flow_id,clique_id,enqueue_us,dequeue_us,complete_us,benign\n";
  for (const auto& e : log) {
    out << e.flow_id << ',' << e.clique_id << ',' << e.enqueue_us << ',' << e.dequeue_us << ',' << e.complete_us
        << ',';
    if (annotated) out << (e.benign ? 1 : 0);
    out << '\n';
  }
}


QueueEventLog read_queue_log_csv(const std::filesystem::path& path) {
  CsvReader csv(path, "flow_id,clique_id,enqueue_us,dequeue_us,complete_us,benign");
  QueueEventLog log;
  while (csv.next(6)) {
    QueueEvent e;
    e.flow_id = csv.get<FlowId>(0);
    e.clique_id = csv.get<std::int32_t>(1);
    e.enqueue_us = csv.get<TimeUs>(2);
    e.dequeue_us = csv.get<TimeUs>(3);
    e.complete_us = csv.get<TimeUs>(4);
    const auto b = csv.field(5);
    if (!b.empty() && b != "0" && b != "1") csv.fail("benign must be 0, 1 or empty");
    e.benign = b != "0";
    log.push_back(e);
  }
  return log;
}

void write_schedule_csv(const std::filesystem::path& path, const WeightSchedule& schedule) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "flow_id,from_us,weight\n";
  for (const auto& [flow, v] : schedule.entries()) {
    for (const auto& c : v) out << flow << ',' << c.from_us << ',' << format_real(c.weight) << '\n';
  }
}

WeightSchedule read_schedule_csv(const std::filesystem::path& path, double default_weight) {
  CsvReader csv(path, "flow_id,from_us,weight");
  WeightSchedule s(default_weight);
  while (csv.next(3)) s.set(csv.get<FlowId>(0), csv.get<TimeUs>(1), csv.get<double>(2));
  return s;
}

}  // namespace nosgate
