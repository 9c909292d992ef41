#include "nosgate/worlds.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "nosgate/stats.hpp"
#include "nosgate/wfq.hpp"

namespace nosgate {

std::string to_string(DeviceClass c) {
  switch (c) {
    case DeviceClass::periodic_telemetry: return "periodic_telemetry";
    case DeviceClass::bulk_stream: return "bulk_stream";
    case DeviceClass::interactive_burst: return "interactive_burst";
  }
  return "unknown";
}

DeviceClass device_class_from_string(const std::string& s) {
  if (s == "periodic_telemetry") return DeviceClass::periodic_telemetry;
  if (s == "bulk_stream") return DeviceClass::bulk_stream;
  if (s == "interactive_burst") return DeviceClass::interactive_burst;
  throw ConfigError("unknown device class: " + s);
}

TrafficParams traffic_params_from_json(const nlohmann::json& j) {
  TrafficParams p;
  if (j.is_null()) return p;
  if (!j.is_object()) throw ConfigError("params: expected object");
  try {
    p.period_s = j.value("period_s", p.period_s);
    p.jitter_s = j.value("jitter_s", p.jitter_s);
    p.rate_Bps = j.value("rate_Bps", p.rate_Bps);
    p.pkt_size = j.value("pkt_size", p.pkt_size);
    p.jitter_frac = j.value("jitter_frac", p.jitter_frac);
    p.on_mean_s = j.value("on_mean_s", p.on_mean_s);
    p.off_fraction = j.value("off_fraction", p.off_fraction);
    p.on_rate_pps = j.value("on_rate_pps", p.on_rate_pps);
    p.rate_pps = j.value("rate_pps", p.rate_pps);
    p.burst_interval_s = j.value("burst_interval_s", p.burst_interval_s);
    p.burst_len = j.value("burst_len", p.burst_len);
    p.probe_gap_us = j.value("probe_gap_us", p.probe_gap_us);
    p.size_bytes = j.value("size_bytes", p.size_bytes);
    p.size_jitter_bytes = j.value("size_jitter_bytes", p.size_jitter_bytes);
    p.start_s = j.value("start_s", p.start_s);
    p.random_phase = j.value("random_phase", p.random_phase);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("params: ") + e.what());
  }
  if (p.period_s <= 0 || p.rate_Bps <= 0 || p.pkt_size <= 0 || p.on_mean_s <= 0 || p.on_rate_pps <= 0 ||
      p.rate_pps <= 0 || p.burst_interval_s <= 0 || p.burst_len < 0 || p.probe_gap_us <= 0 || p.size_bytes <= 0) {
    throw ConfigError("params: rates, periods and sizes must be positive");
  }
  if (p.jitter_s < 0 || p.jitter_frac < 0 || p.jitter_frac >= 1 || p.size_jitter_bytes < 0 || p.start_s < 0) {
    throw ConfigError("params: jitter out of range");
  }
  if (p.off_fraction < 0 || p.off_fraction > 1) throw ConfigError("params: off_fraction must be in [0, 1]");
  return p;
}

nlohmann::json traffic_params_to_json(const TrafficParams& p) {
  return {{"period_s", p.period_s},       {"jitter_s", p.jitter_s},
          {"rate_Bps", p.rate_Bps},       {"pkt_size", p.pkt_size},
          {"jitter_frac", p.jitter_frac}, {"on_mean_s", p.on_mean_s},
          {"off_fraction", p.off_fraction}, {"on_rate_pps", p.on_rate_pps},
          {"rate_pps", p.rate_pps},       {"burst_interval_s", p.burst_interval_s},
          {"burst_len", p.burst_len},     {"probe_gap_us", p.probe_gap_us},
          {"size_bytes", p.size_bytes},   {"size_jitter_bytes", p.size_jitter_bytes},
          {"start_s", p.start_s},         {"random_phase", p.random_phase}};
}

// ---------------------------------------------------------------------------
// Generators

namespace {

class Emitter {
 public:
  Emitter(TimeUs begin, TimeUs end, SizeBounds bounds) : begin_(begin), end_(end), bounds_(bounds) {}

  // Returns false once the time is past the span end.
  bool emit(double t_us, std::int32_t size) {
    auto ts = static_cast<TimeUs>(std::floor(t_us));
    if (ts < begin_) ts = begin_;
    if (!out_.empty() && ts <= out_.back().ts_us) ts = out_.back().ts_us + 1;
    if (ts >= end_) return false;
    out_.push_back({ts, 0, std::clamp(size, bounds_.min_bytes, bounds_.max_bytes), 0});
    return true;
  }
  std::vector<PacketRecord> take() { return std::move(out_); }

 private:
  TimeUs begin_, end_;
  SizeBounds bounds_;
  std::vector<PacketRecord> out_;
};

std::int32_t jittered_size(const TrafficParams& p, Rng& rng) {
  if (p.size_jitter_bytes == 0) return p.size_bytes;
  return p.size_bytes - p.size_jitter_bytes + static_cast<std::int32_t>(rng.below(2 * p.size_jitter_bytes + 1));
}

std::vector<PacketRecord> gen_periodic(const TrafficParams& p, TimeUs begin, TimeUs end, SizeBounds bounds,
                                       Rng& rng, bool phase) {
  Emitter em(begin, end, bounds);
  double t = static_cast<double>(begin) + p.start_s * 1e6 + (phase ? rng.uniform(0.0, p.period_s * 1e6) : 0.0);
  while (em.emit(t, jittered_size(p, rng))) {
    const double jitter = p.jitter_s > 0 ? rng.uniform(-p.jitter_s, p.jitter_s) : 0.0;
    t += std::max(1e-6, p.period_s + jitter) * 1e6;
  }
  return em.take();
}

std::vector<PacketRecord> gen_bulk(const TrafficParams& p, TimeUs begin, TimeUs end, SizeBounds bounds, Rng& rng,
                                   bool phase) {
  Emitter em(begin, end, bounds);
  const double spacing_us = static_cast<double>(p.pkt_size) / p.rate_Bps * 1e6;
  double t = static_cast<double>(begin) + p.start_s * 1e6 + (phase ? rng.uniform(0.0, spacing_us) : 0.0);
  while (em.emit(t, p.pkt_size)) {
    const double f = p.jitter_frac > 0 ? rng.uniform(-p.jitter_frac, p.jitter_frac) : 0.0;
    t += spacing_us * (1.0 + f);
  }
  return em.take();
}

std::vector<PacketRecord> gen_burst(const TrafficParams& p, TimeUs begin, TimeUs end, SizeBounds bounds, Rng& rng) {
  Emitter em(begin, end, bounds);
  if (p.off_fraction >= 1.0) return {};
  const double on_mean_us = p.on_mean_s * 1e6;
  const double off_mean_us = on_mean_us * p.off_fraction / (1.0 - p.off_fraction);
  double t = static_cast<double>(begin) + p.start_s * 1e6;
  bool on = rng.uniform() >= p.off_fraction;
  const double gap_mean_us = 1e6 / p.on_rate_pps;
  while (t < static_cast<double>(end)) {
    if (on) {
      const double phase_end = t + rng.exponential(on_mean_us);
      double ts = t + rng.exponential(gap_mean_us);
      while (ts < phase_end) {
        if (!em.emit(ts, jittered_size(p, rng))) return em.take();
        ts += rng.exponential(gap_mean_us);
      }
      t = phase_end;
    } else if (off_mean_us > 0) {
      t += rng.exponential(off_mean_us);
    }
    on = !on;
  }
  return em.take();
}

std::vector<PacketRecord> gen_poisson(const TrafficParams& p, TimeUs begin, TimeUs end, SizeBounds bounds, Rng& rng) {
  Emitter em(begin, end, bounds);
  const double mean_us = 1e6 / p.rate_pps;
  double t = static_cast<double>(begin) + p.start_s * 1e6 + rng.exponential(mean_us);
  while (em.emit(t, jittered_size(p, rng))) t += rng.exponential(mean_us);
  return em.take();
}

std::vector<PacketRecord> gen_scan(const TrafficParams& p, TimeUs begin, TimeUs end, SizeBounds bounds, Rng& rng) {
  Emitter em(begin, end, bounds);
  double burst_start = static_cast<double>(begin) + p.start_s * 1e6;
  while (burst_start < static_cast<double>(end)) {
    for (std::int32_t k = 0; k < p.burst_len; ++k) {
      if (!em.emit(burst_start + static_cast<double>(k * p.probe_gap_us), jittered_size(p, rng))) return em.take();
    }
    burst_start += p.burst_interval_s * 1e6;
  }
  return em.take();
}

}  // namespace

std::vector<PacketRecord> gen_benign_flow(DeviceClass cls, const TrafficParams& params, TimeUs begin_us,
                                          TimeUs end_us, SizeBounds bounds, std::uint64_t seed) {
  Rng rng(seed);
  switch (cls) {
    case DeviceClass::periodic_telemetry: return gen_periodic(params, begin_us, end_us, bounds, rng, params.random_phase);
    case DeviceClass::bulk_stream: return gen_bulk(params, begin_us, end_us, bounds, rng, params.random_phase);
    case DeviceClass::interactive_burst: return gen_burst(params, begin_us, end_us, bounds, rng);
  }
  return {};
}

std::vector<PacketRecord> gen_episode_proposal(EpisodeKind kind, const TrafficParams& params, TimeUs begin_us,
                                               TimeUs end_us, SizeBounds bounds, std::uint64_t seed) {
  Rng rng(seed);
  switch (kind) {
    case EpisodeKind::exfiltration: return gen_bulk(params, begin_us, end_us, bounds, rng, false);
    case EpisodeKind::beaconing: return gen_periodic(params, begin_us, end_us, bounds, rng, false);
    case EpisodeKind::scan: return gen_scan(params, begin_us, end_us, bounds, rng);
    case EpisodeKind::evasive_c2: return gen_poisson(params, begin_us, end_us, bounds, rng);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Contention graph

double spectral_radius(std::span<const double> w, std::size_t n, double rel_tol) {
  if (n == 0) return 0.0;
  if (w.size() != n * n) throw std::invalid_argument("spectral_radius: matrix size mismatch");
  // Power iteration on W + I: the shift makes the Perron root strictly
  // dominant in modulus even for bipartite structure.
  std::vector<double> x(n, 1.0 / std::sqrt(static_cast<double>(n))), y(n);
  double lambda = 0.0;
  for (int it = 0; it < 200'000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = x[i];
      for (std::size_t j = 0; j < n; ++j) acc += w[i * n + j] * x[j];
      y[i] = acc;
    }
    double norm = 0.0;
    for (double v : y) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    const double next = norm;  // ||(W+I)x|| with ||x|| = 1
    for (std::size_t i = 0; i < n; ++i) x[i] = y[i] / norm;
    if (it > 0 && std::fabs(next - lambda) <= rel_tol * next) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::max(0.0, lambda - 1.0);
}

ContentionGraph build_contention_graph(std::span<const std::int32_t> clique_of_flow, std::pair<double, double> rho_band,
                                       std::uint64_t seed) {
  const auto [lo, hi] = rho_band;
  if (lo < 0 || hi < lo) throw ConfigError("rho_band must satisfy 0 <= lo <= hi");
  ContentionGraph g;
  g.n = clique_of_flow.size();
  g.rho_band = rho_band;
  std::int32_t n_cliques = 0;
  for (auto c : clique_of_flow) n_cliques = std::max(n_cliques, c + 1);
  g.cliques.resize(static_cast<std::size_t>(n_cliques));
  for (std::size_t i = 0; i < g.n; ++i) g.cliques[static_cast<std::size_t>(clique_of_flow[i])].push_back(static_cast<FlowId>(i));

  const double mid = 0.5 * (lo + hi);
  Rng rng(seed);
  for (int attempt = 0; attempt < 8; ++attempt) {
    g.weights.assign(g.n * g.n, 0.0);
    for (std::size_t i = 0; i < g.n; ++i) {
      for (std::size_t j = i + 1; j < g.n; ++j) {
        if (clique_of_flow[i] != clique_of_flow[j]) continue;
        const double w = rng.uniform(0.5, 1.0);
        g.weights[i * g.n + j] = w;
        g.weights[j * g.n + i] = w;
      }
    }
    const double rho0 = spectral_radius(g.weights, g.n);
    if (rho0 > 0.0) {
      const double scale = mid / rho0;
      for (auto& w : g.weights) w *= scale;
    }
    g.spectral_radius = spectral_radius(g.weights, g.n);
    if (g.spectral_radius >= lo - 1e-9 && g.spectral_radius <= hi + 1e-9) return g;
  }
  throw GenerationError("contention graph cannot reach rho_band [" + format_real(lo) + ", " + format_real(hi) +
                        "] (spectral radius " + format_real(g.spectral_radius) + ")");
}

nlohmann::json contention_to_json(const ContentionGraph& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < g.n; ++i) {
    rows.push_back(std::vector<double>(g.weights.begin() + static_cast<std::ptrdiff_t>(i * g.n),
                                       g.weights.begin() + static_cast<std::ptrdiff_t>((i + 1) * g.n)));
  }
  return {{"weights", rows},
          {"cliques", g.cliques},
          {"spectral_radius", g.spectral_radius},
          {"rho_band", {g.rho_band.first, g.rho_band.second}}};
}

ContentionGraph contention_from_json(const nlohmann::json& j) {
  try {
    ContentionGraph g;
    const auto& rows = j.at("weights");
    g.n = rows.size();
    g.weights.reserve(g.n * g.n);
    for (const auto& r : rows) {
      if (r.size() != g.n) throw FormatError("contention: weight matrix is not square");
      for (const auto& v : r) {
        const double w = v.get<double>();
        if (w < 0) throw FormatError("contention: negative weight");
        g.weights.push_back(w);
      }
    }
    g.cliques = j.at("cliques").get<std::vector<std::vector<FlowId>>>();
    g.spectral_radius = j.at("spectral_radius").get<double>();
    g.rho_band = {j.at("rho_band").at(0).get<double>(), j.at("rho_band").at(1).get<double>()};
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("contention: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

nlohmann::json feasibility_to_json(const std::vector<FeasibilityOutcome>& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : v) {
    arr.push_back({{"flow_id", f.flow_id},
                   {"budgets", budgets_to_json(f.budgets)},
                   {"feasible", f.feasible},
                   {"iterations_used", f.iterations_used},
                   {"final_distortion", f.final_distortion},
                   {"final_delay_delta", f.final_delay_delta},
                   {"reason", f.reason}});
  }
  return arr;
}

std::vector<FeasibilityOutcome> feasibility_from_json(const nlohmann::json& j) {
  std::vector<FeasibilityOutcome> out;
  try {
    for (const auto& v : j) {
      FeasibilityOutcome f;
      f.flow_id = v.at("flow_id").get<FlowId>();
      f.budgets = budgets_from_json(v.at("budgets"));
      f.feasible = v.at("feasible").get<bool>();
      f.iterations_used = v.at("iterations_used").get<std::int32_t>();
      f.final_distortion = v.at("final_distortion").get<double>();
      f.final_delay_delta = v.at("final_delay_delta").get<double>();
      f.reason = v.value("reason", std::string());
      out.push_back(f);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feasibility: ") + e.what());
  }
  return out;
}

std::vector<double> pooled_reference(const std::vector<std::vector<PacketRecord>>& flows, TimeUs window_us,
                                     std::int32_t cap) {
  std::vector<double> pooled;
  for (const auto& f : flows) {
    for (std::size_t k = 1; k < f.size(); ++k) {
      if (f[k].ts_us / window_us != f[k - 1].ts_us / window_us) continue;
      const auto gap = f[k].ts_us - f[k - 1].ts_us;
      if (gap > 0) pooled.push_back(static_cast<double>(gap) / 1e6);
    }
  }
  std::sort(pooled.begin(), pooled.end());
  if (cap > 0 && pooled.size() > static_cast<std::size_t>(cap)) {
    std::vector<double> sub(static_cast<std::size_t>(cap));
    const double n = static_cast<double>(pooled.size());
    for (std::size_t i = 0; i < sub.size(); ++i) {
      sub[i] = pooled[static_cast<std::size_t>((static_cast<double>(i) + 0.5) * n / cap)];
    }
    pooled = std::move(sub);
  }
  return pooled;
}

// ---------------------------------------------------------------------------
// Config

void WorldConfig::validate() const {
  if (horizon_windows <= 0) throw ConfigError("horizon_windows must be positive");
  if (window_us <= 0) throw ConfigError("window_us must be positive");
  if (size_bounds.min_bytes < 1 || size_bounds.max_bytes < size_bounds.min_bytes) {
    throw ConfigError("size_bounds must satisfy 1 <= min_bytes <= max_bytes");
  }
  if (!(link_capacity_Bps > 0)) throw ConfigError("link_capacity_Bps must be positive");
  if (rho_band.first < 0 || rho_band.second < rho_band.first) throw ConfigError("rho_band must satisfy 0 <= lo <= hi");
  if (split.burn_in_frac <= 0 || split.valid_frac < 0 || split.test_frac <= 0 ||
      std::fabs(split.burn_in_frac + split.valid_frac + split.test_frac - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be positive and sum to 1");
  }
  if (i_max < 0) throw ConfigError("i_max must be nonnegative");
  if (cliques.empty()) throw ConfigError("at least one clique is required");
  std::set<std::int32_t> used;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const std::string where = "episodes[" + std::to_string(e) + "]";
    if (ep.clique < 0 || static_cast<std::size_t>(ep.clique) >= cliques.size()) throw ConfigError(where + ".clique out of range");
    std::int32_t slots = 0;
    for (const auto& d : cliques[static_cast<std::size_t>(ep.clique)].devices) slots += d.count;
    if (ep.slot < 0 || ep.slot >= slots) throw ConfigError(where + ".slot out of range");
    if (ep.start_window < 0 || ep.start_window > ep.end_window || ep.end_window >= horizon_windows) {
      throw ConfigError(where + ": require 0 <= start_window <= end_window < horizon_windows");
    }
    if (!used.insert(ep.clique).second) throw ConfigError(where + ": at most one episode per clique");
  }
  for (const auto& c : cliques) {
    for (const auto& d : c.devices) {
      if (d.count < 0) throw ConfigError("device count must be nonnegative");
    }
  }
}

WorldConfig WorldConfig::from_json(const nlohmann::json& j) {
  WorldConfig c;
  try {
    c.raw = j;
    c.world_id = j.value("world_id", c.world_id);
    c.seed = j.value("seed", c.seed);
    c.horizon_windows = j.value("horizon_windows", c.horizon_windows);
    c.window_us = j.value("window_us", c.window_us);
    if (j.contains("size_bounds")) {
      c.size_bounds.min_bytes = j["size_bounds"].value("min_bytes", c.size_bounds.min_bytes);
      c.size_bounds.max_bytes = j["size_bounds"].value("max_bytes", c.size_bounds.max_bytes);
    }
    c.link_capacity_Bps = j.value("link_capacity_Bps", c.link_capacity_Bps);
    if (j.contains("rho_band")) c.rho_band = {j["rho_band"].at(0).get<double>(), j["rho_band"].at(1).get<double>()};
    if (j.contains("split")) {
      c.split.burn_in_frac = j["split"].value("burn_in_frac", c.split.burn_in_frac);
      c.split.valid_frac = j["split"].value("valid_frac", c.split.valid_frac);
      c.split.test_frac = j["split"].value("test_frac", 1.0 - c.split.burn_in_frac - c.split.valid_frac);
    }
    c.i_max = j.value("i_max", c.i_max);
    c.reference_cap = j.value("reference_cap", c.reference_cap);
    for (const auto& cj : j.at("cliques")) {
      CliqueSpec spec;
      for (const auto& dj : cj.at("devices")) {
        DeviceGroup g;
        g.cls = device_class_from_string(dj.at("class").get<std::string>());
        g.count = dj.value("count", 1);
        g.params = traffic_params_from_json(dj.value("params", nlohmann::json::object()));
        spec.devices.push_back(g);
      }
      const int repeat = cj.value("repeat", 1);
      if (repeat < 1) throw ConfigError("clique repeat must be >= 1");
      for (int r = 0; r < repeat; ++r) c.cliques.push_back(spec);
    }
    for (const auto& ej : j.value("episodes", nlohmann::json::array())) {
      EpisodeSpec e;
      e.kind = episode_kind_from_string(ej.at("kind").get<std::string>());
      e.clique = ej.at("clique").get<std::int32_t>();
      e.slot = ej.value("slot", 0);
      e.start_window = ej.at("start_window").get<std::int32_t>();
      e.end_window = ej.at("end_window").get<std::int32_t>();
      auto bj = ej.value("budgets", nlohmann::json::object());
      if (bj.contains("r_min_bytes") && bj["r_min_bytes"].is_string()) {
        if (bj["r_min_bytes"].get<std::string>() != "max") throw ConfigError("r_min_bytes must be an integer or \"max\"");
        e.r_min_max = true;
        bj.erase("r_min_bytes");
      }
      e.budgets = budgets_from_json(bj);
      e.params = traffic_params_from_json(ej.value("params", nlohmann::json::object()));
      c.episodes.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("world config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

World build_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  World world;
  auto& trace = world.trace;
  trace.horizon_windows = config.horizon_windows;
  trace.window_us = config.window_us;
  const TimeUs horizon = trace.horizon_us();

  struct FlowSpec {
    DeviceClass cls;
    TrafficParams params;
  };
  std::vector<FlowSpec> specs;
  std::vector<std::int32_t> clique_of;
  std::vector<std::vector<FlowId>> clique_flows(config.cliques.size());
  for (std::size_t c = 0; c < config.cliques.size(); ++c) {
    std::int32_t slot = 0;
    for (const auto& g : config.cliques[c].devices) {
      for (std::int32_t k = 0; k < g.count; ++k, ++slot) {
        const auto id = static_cast<FlowId>(specs.size());
        Rng key_rng(derive_seed(seed, static_cast<std::uint64_t>(id), 11));
        FlowInfo info;
        info.key.src_ip = "10." + std::to_string((c >> 8) & 0xff) + "." + std::to_string(c & 0xff) + "." +
                          std::to_string(2 + slot % 250);
        info.key.dst_ip = "203.0.113." + std::to_string(1 + key_rng.below(254));
        info.key.src_port = static_cast<std::uint16_t>(49152 + key_rng.below(16384));
        info.key.dst_port = g.cls == DeviceClass::periodic_telemetry ? 8883 : 443;
        info.key.proto = g.cls == DeviceClass::interactive_burst ? 17 : 6;
        info.device_class = to_string(g.cls);
        info.clique_id = static_cast<std::int32_t>(c);
        trace.flows.push_back(info);
        specs.push_back({g.cls, g.params});
        clique_of.push_back(static_cast<std::int32_t>(c));
        clique_flows[c].push_back(id);
      }
    }
  }
  const auto n_flows = static_cast<std::ptrdiff_t>(specs.size());

  std::vector<std::vector<PacketRecord>> per_flow(specs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t f = 0; f < n_flows; ++f) {
    const auto& s = specs[static_cast<std::size_t>(f)];
    auto pk = gen_benign_flow(s.cls, s.params, 0, horizon, config.size_bounds,
                              derive_seed(seed, static_cast<std::uint64_t>(f), 1));
    for (auto& p : pk) {
      p.flow_id = static_cast<FlowId>(f);
      p.clique_id = clique_of[static_cast<std::size_t>(f)];
    }
    per_flow[static_cast<std::size_t>(f)] = std::move(pk);
  }

  world.graph = build_contention_graph(clique_of, config.rho_band, derive_seed(seed, 0, 2));

  // Benign IAT references per device class, from the benign generation.
  std::map<std::string, std::vector<double>> class_reference;
  auto reference_for = [&](const std::string& cls) -> const std::vector<double>& {
    auto it = class_reference.find(cls);
    if (it != class_reference.end()) return it->second;
    std::vector<std::vector<PacketRecord>> members;
    for (std::size_t f = 0; f < specs.size(); ++f) {
      if (trace.flows[f].device_class == cls) members.push_back(per_flow[f]);
    }
    auto ref = pooled_reference(members, config.window_us, config.reference_cap);
    if (ref.empty()) ref = pooled_reference(per_flow, config.window_us, config.reference_cap);
    return class_reference.emplace(cls, std::move(ref)).first->second;
  };

  struct Prepared {
    EpisodeContext ctx;
    std::vector<PacketRecord> proposal;
    Budgets budgets;
  };
  std::vector<Prepared> prepared;
  for (const auto& ep : config.episodes) {
    const auto host = clique_flows[static_cast<std::size_t>(ep.clique)][static_cast<std::size_t>(ep.slot)];
    Prepared pr;
    auto& ctx = pr.ctx;
    ctx.flow_id = host;
    ctx.clique_id = ep.clique;
    ctx.start_window = ep.start_window;
    ctx.end_window = ep.end_window;
    ctx.window_us = config.window_us;
    ctx.bounds = config.size_bounds;
    ctx.capacity_Bps = config.link_capacity_Bps;
    ctx.seed = derive_seed(seed, static_cast<std::uint64_t>(host), 4);
    ctx.reference.flow_id = host;
    ctx.reference.device_class = trace.flows[static_cast<std::size_t>(host)].device_class;
    ctx.reference.sorted_iats_s = reference_for(ctx.reference.device_class);
    if (ctx.reference.sorted_iats_s.empty() && std::isfinite(ep.budgets.epsilon_s)) {
      throw GenerationError("no benign IAT reference available for class " + ctx.reference.device_class);
    }
    for (auto f : clique_flows[static_cast<std::size_t>(ep.clique)]) {
      for (const auto& p : per_flow[static_cast<std::size_t>(f)]) {
        if (f == host && p.ts_us >= ctx.span_begin() && p.ts_us < ctx.span_end()) continue;
        ctx.background.push_back(p);
      }
    }
    sort_canonical(ctx.background);
    pr.proposal = gen_episode_proposal(ep.kind, ep.params, ctx.span_begin(), ctx.span_end(), config.size_bounds,
                                       derive_seed(seed, static_cast<std::uint64_t>(host), 3));
    pr.budgets = ep.budgets;
    if (ep.r_min_max) pr.budgets.r_min_bytes = static_cast<std::int64_t>(pr.proposal.size()) * config.size_bounds.max_bytes;
    prepared.push_back(std::move(pr));
  }

  // Episodes live in distinct cliques, so they are independent.
  std::vector<EpisodeResult> results(prepared.size());
  const auto n_eps = static_cast<std::ptrdiff_t>(prepared.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t e = 0; e < n_eps; ++e) {
    auto& pr = prepared[static_cast<std::size_t>(e)];
    results[static_cast<std::size_t>(e)] = enforce_contention(pr.proposal, pr.ctx, pr.budgets, config.i_max);
  }

  for (std::size_t e = 0; e < prepared.size(); ++e) {
    const auto& ctx = prepared[e].ctx;
    const auto& spec = config.episodes[e];
    auto& host_packets = per_flow[static_cast<std::size_t>(ctx.flow_id)];
    std::vector<PacketRecord> merged;
    for (const auto& p : host_packets) {
      if (p.ts_us < ctx.span_begin() || p.ts_us >= ctx.span_end()) merged.push_back(p);
    }
    merged.insert(merged.end(), results[e].packets.begin(), results[e].packets.end());
    std::sort(merged.begin(), merged.end(), [](const auto& a, const auto& b) { return a.ts_us < b.ts_us; });
    host_packets = std::move(merged);

    trace.flows[static_cast<std::size_t>(ctx.flow_id)].label = "malicious";
    EpisodeLabel label;
    label.flow_id = ctx.flow_id;
    label.start_window = spec.start_window;
    label.end_window = spec.end_window;
    label.kind = spec.kind;
    label.budgets = prepared[e].budgets;
    label.feasible = results[e].outcome.feasible;
    world.labels.push_back(label);
    world.feasibility.push_back(results[e].outcome);
    world.references.push_back(ctx.reference);
  }

  for (auto& f : per_flow) trace.packets.insert(trace.packets.end(), f.begin(), f.end());
  sort_canonical(trace.packets);

  auto& m = world.manifest;
  m.world_id = config.world_id;
  m.seed = seed;
  m.config = config.raw;
  m.config["seed"] = seed;
  m.config_hash = manifest_hash(canonical_bytes(m.config));
  m.split = config.split;
  m.horizon_windows = config.horizon_windows;
  m.window_us = config.window_us;
  m.link_capacity_Bps = config.link_capacity_Bps;
  m.size_bounds = config.size_bounds;
  return world;
}

// ---------------------------------------------------------------------------
// World directory IO

namespace {

nlohmann::json references_to_json(const std::vector<BenignIatReference>& refs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : refs) {
    arr.push_back({{"flow_id", r.flow_id}, {"device_class", r.device_class}, {"sorted_iats_s", r.sorted_iats_s}});
  }
  return arr;
}

std::vector<BenignIatReference> references_from_json(const nlohmann::json& j) {
  std::vector<BenignIatReference> out;
  try {
    for (const auto& v : j) {
      out.push_back({v.at("flow_id").get<FlowId>(), v.at("device_class").get<std::string>(),
                     v.at("sorted_iats_s").get<std::vector<double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("references: ") + e.what());
  }
  return out;
}

void check_trace(const Trace& trace, const RunManifest& m, const std::filesystem::path& file) {
  const auto report = validate_trace(trace, m.size_bounds);
  if (!report.valid()) {
    const auto& v = report.violations.front();
    throw FormatError(file.string() + ": record " + std::to_string(v.index) + ": " + v.message);
  }
}

}  // namespace

void write_world(const std::filesystem::path& dir, const World& world) {
  std::filesystem::create_directories(dir);
  write_trace_csv(dir / world_files::kTrace, world.trace.packets);
  write_json_file(dir / world_files::kFlows, flows_to_json(world.trace.flows));
  write_json_file(dir / world_files::kLabels, labels_to_json(world.labels));
  write_json_file(dir / world_files::kContention, contention_to_json(world.graph));
  write_json_file(dir / world_files::kFeasibility, feasibility_to_json(world.feasibility));
  write_json_file(dir / world_files::kManifest, manifest_to_json(world.manifest));
  write_json_file(dir / world_files::kReferences, references_to_json(world.references));
}

WorldInputs read_world_inputs(const std::filesystem::path& dir) {
  WorldInputs in;
  in.manifest = manifest_from_json(read_json_file(dir / world_files::kManifest));
  in.trace.flows = flows_from_json(read_json_file(dir / world_files::kFlows));
  in.trace.packets = read_trace_csv(dir / world_files::kTrace);
  in.trace.horizon_windows = in.manifest.horizon_windows;
  in.trace.window_us = in.manifest.window_us;
  check_trace(in.trace, in.manifest, dir / world_files::kTrace);
  in.graph = contention_from_json(read_json_file(dir / world_files::kContention));
  if (in.graph.n != in.trace.flows.size()) {
    throw FormatError((dir / world_files::kContention).string() + ": matrix size does not match flow table");
  }
  return in;
}

World read_world(const std::filesystem::path& dir) {
  auto in = read_world_inputs(dir);
  World w;
  w.trace = std::move(in.trace);
  w.graph = std::move(in.graph);
  w.manifest = std::move(in.manifest);
  w.labels = labels_from_json(read_json_file(dir / world_files::kLabels));
  w.feasibility = feasibility_from_json(read_json_file(dir / world_files::kFeasibility));
  if (std::filesystem::exists(dir / world_files::kReferences)) {
    w.references = references_from_json(read_json_file(dir / world_files::kReferences));
  }
  return w;
}

}  // namespace nosgate
