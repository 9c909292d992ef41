#include "nosgate/detector.hpp"

#include <algorithm>
#include <fstream>

#include "nosgate/csv.hpp"
#include "nosgate/stats.hpp"

namespace nosgate {

void DetectorParams::validate() const {
  auto finite = [](double x) { return std::isfinite(x); };
  for (double x : {alpha, kappa, beta, gamma, lambda, chi, a, b, mu, dt, k, theta, zeta, p, g, r, eta1, eta2, v_rest,
                   v_max, noise_std}) {
    if (!finite(x)) throw ConfigError("detector parameters must be finite");
  }
  if (!(dt > 0)) throw ConfigError("detector.dt must be positive");
  if (!(kappa > 0)) throw ConfigError("detector.kappa must be positive");
  if (!(alpha > 0)) throw ConfigError("detector.alpha must be positive");
  if (!(p >= 1)) throw ConfigError("detector.p must be >= 1");
  if (!(v_max > v_rest)) throw ConfigError("detector.v_max must exceed v_rest");
  if (!(k > 0)) throw ConfigError("detector.k must be positive");
  if (lambda < 0 || chi < 0) throw ConfigError("detector.lambda and detector.chi must be nonnegative");
  if (a < 0 || b < 0 || mu < 0) throw ConfigError("detector.a, b, mu must be nonnegative");
  if (zeta < 0 || g < 0 || r < 0 || noise_std < 0) throw ConfigError("detector.zeta, g, r, noise_std must be nonnegative");
  if (tau < 0) throw ConfigError("detector.tau must be nonnegative");
}

DetectorParams detector_params_from_json(const nlohmann::json& j, const DetectorParams& defaults) {
  DetectorParams p = defaults;
  if (j.is_null()) return p;
  if (!j.is_object()) throw ConfigError("detector params: expected object");
  static const std::vector<std::string> known = {"alpha", "kappa", "beta", "gamma", "lambda", "chi",  "a",
                                                 "b",     "mu",    "dt",   "k",     "theta",  "zeta", "p",
                                                 "g",     "tau",   "r",    "eta1",  "eta2",   "v_rest", "v_max",
                                                 "noise_std"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("detector params: unknown key " + key);
  }
  try {
    p.alpha = j.value("alpha", p.alpha);
    p.kappa = j.value("kappa", p.kappa);
    p.beta = j.value("beta", p.beta);
    p.gamma = j.value("gamma", p.gamma);
    p.lambda = j.value("lambda", p.lambda);
    p.chi = j.value("chi", p.chi);
    p.a = j.value("a", p.a);
    p.b = j.value("b", p.b);
    p.mu = j.value("mu", p.mu);
    p.dt = j.value("dt", p.dt);
    p.k = j.value("k", p.k);
    p.theta = j.value("theta", p.theta);
    p.zeta = j.value("zeta", p.zeta);
    p.p = j.value("p", p.p);
    p.g = j.value("g", p.g);
    p.tau = j.value("tau", p.tau);
    p.r = j.value("r", p.r);
    p.eta1 = j.value("eta1", p.eta1);
    p.eta2 = j.value("eta2", p.eta2);
    p.v_rest = j.value("v_rest", p.v_rest);
    p.v_max = j.value("v_max", p.v_max);
    p.noise_std = j.value("noise_std", p.noise_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detector params: ") + e.what());
  }
  p.validate();
  return p;
}

nlohmann::json detector_params_to_json(const DetectorParams& p) {
  return {{"alpha", p.alpha}, {"kappa", p.kappa}, {"beta", p.beta},     {"gamma", p.gamma},   {"lambda", p.lambda},
          {"chi", p.chi},     {"a", p.a},         {"b", p.b},           {"mu", p.mu},         {"dt", p.dt},
          {"k", p.k},         {"theta", p.theta}, {"zeta", p.zeta},     {"p", p.p},           {"g", p.g},
          {"tau", p.tau},     {"r", p.r},         {"eta1", p.eta1},     {"eta2", p.eta2},     {"v_rest", p.v_rest},
          {"v_max", p.v_max}, {"noise_std", p.noise_std}};
}

double evidence(std::span<const double> x, double zeta, double p) {
  if (p == 2.0) {
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return zeta * std::sqrt(acc);
  }
  if (p == 1.0) {
    double acc = 0.0;
    for (double v : x) acc += std::fabs(v);
    return zeta * acc;
  }
  double acc = 0.0;
  for (double v : x) acc += std::pow(std::fabs(v), p);
  return zeta * std::pow(acc, 1.0 / p);
}

double coupling_drive(std::span<const double> delayed_surrogates, std::span<const double> weights, double g) {
  if (g == 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t j = 0; j < delayed_surrogates.size(); ++j) acc += weights[j] * delayed_surrogates[j];
  return g * acc;
}

NosState nos_step(const NosState& s, double e, double i, const DetectorParams& p, double noise) {
  const double surrogate = event_surrogate(s.v, p.k, p.theta);
  const double drift = f_sat(s.v, p.alpha, p.kappa) + p.beta * s.v + p.gamma - s.u + e + i - p.lambda * s.v -
                       p.chi * (s.v - p.v_rest);
  NosState next;
  next.v = std::clamp(s.v + p.dt * drift + noise - p.r * surrogate, 0.0, p.v_max);
  next.u = s.u + p.dt * (p.a * p.b * s.v - (p.a + p.mu) * s.u);
  return next;
}

double f_sat_max_slope(double alpha, double kappa, double v_max) {
  // f'(v) = 2 alpha v / (1 + kappa v^2)^2 peaks at v = 1 / sqrt(3 kappa).
  const double v_peak = 1.0 / std::sqrt(3.0 * kappa);
  if (v_peak <= v_max) return 3.0 * std::sqrt(3.0) * alpha / (8.0 * std::sqrt(kappa));
  const double d = 1.0 + kappa * v_max * v_max;
  return 2.0 * alpha * v_max / (d * d);
}

StabilityMargin coupling_stability_margin(const DetectorParams& p, double rho) {
  if (rho < 0) throw std::invalid_argument("coupling_stability_margin: rho must be nonnegative");
  StabilityMargin m;
  m.bound = p.dt * p.g * rho * p.k / 4.0;
  // alpha * (max slope of v^2 / (1 + kappa v^2)) is the max slope of f_sat.
  m.margin = p.lambda + p.chi - p.beta - f_sat_max_slope(p.alpha, p.kappa, p.v_max);
  m.ok = m.bound < m.margin;
  return m;
}

std::optional<double> calibrate_threshold(std::span<const double> burn_in_scores, double q, std::int32_t w_min) {
  if (burn_in_scores.empty() || static_cast<std::int64_t>(burn_in_scores.size()) < w_min) return std::nullopt;
  return nearest_rank_value(std::vector<double>(burn_in_scores.begin(), burn_in_scores.end()), q);
}

Persistence::Persistence(std::int32_t k, std::int32_t m) : k_(k), m_(m) {
  if (m < 1 || k < 1 || k > m) throw ConfigError("persistence requires 1 <= K <= M");
  ring_.assign(static_cast<std::size_t>(m), 0);
}

bool Persistence::update(bool alarm) {
  count_ += static_cast<std::int32_t>(alarm) - ring_[pos_];
  ring_[pos_] = alarm ? 1 : 0;
  pos_ = (pos_ + 1) % ring_.size();
  if (!z_) {
    if (count_ >= k_) {
      z_ = true;
      clear_run_ = 0;
    }
    return z_;
  }
  clear_run_ = alarm ? 0 : clear_run_ + 1;
  if (clear_run_ >= m_) z_ = false;
  return z_;
}

void DetectionConfig::validate() const {
  if (!(quantile > 0.0 && quantile < 1.0)) throw ConfigError("quantile must be in (0, 1)");
  if (k < 1 || m < 1 || k > m) throw ConfigError("persistence requires 1 <= K <= M");
  if (w_min < 1) throw ConfigError("w_min must be positive");
}

// ---------------------------------------------------------------------------

namespace {

struct FlowRun {
  NosState state;
  Persistence persistence;
  std::vector<double> burn_nos, burn_base;
  std::optional<double> thr_nos, thr_base;
  bool calibrated = false;
  bool born = false;
  Rng rng{0};
};

struct Engine {
  const DetectionInputs& in;
  const DetectorParams& p;
  const DetectionConfig& c;
  std::vector<FlowRun> flows;
  // Published surrogate per (flow, window); NaN until the flow has a record.
  std::vector<std::vector<double>> published;
  std::int32_t horizon = 0;

  Engine(const DetectionInputs& in_, const DetectorParams& p_, const DetectionConfig& c_) : in(in_), p(p_), c(c_) {
    p.validate();
    c.validate();
    if (p.g > 0) {
      if (in.graph == nullptr || in.graph->n != in.n_flows) {
        throw ConfigError("coupling (g > 0) needs the contention graph of the world");
      }
      const auto m = coupling_stability_margin(p, in.graph->spectral_radius);
      if (!m.ok) {
        throw ConfigError("coupling stability margin violated: bound " + format_real(m.bound) + " >= margin " +
                          format_real(m.margin));
      }
    }
    flows.resize(in.n_flows);
    for (std::size_t f = 0; f < in.n_flows; ++f) {
      flows[f].persistence = Persistence(c.k, c.m);
      flows[f].rng = Rng(derive_seed(in.seed, f, 7));
    }
    for (const auto& r : in.rows) {
      if (r.flow_id < 0 || static_cast<std::size_t>(r.flow_id) >= in.n_flows) {
        throw std::invalid_argument("detect: unknown flow " + std::to_string(r.flow_id));
      }
      horizon = std::max(horizon, r.window + 1);
    }
    if (p.g > 0) published.assign(in.n_flows, std::vector<double>(static_cast<std::size_t>(horizon), std::nan("")));
  }

  double coupling(FlowId f, std::int32_t t) const {
    if (p.g == 0.0) return 0.0;
    const std::int32_t src = t - (1 + p.tau);
    if (src < 0) return 0.0;
    double acc = 0.0;
    for (std::size_t j = 0; j < in.n_flows; ++j) {
      const double w = in.graph->w(static_cast<std::size_t>(f), j);
      if (w == 0.0) continue;
      const double s = published[j][static_cast<std::size_t>(src)];
      if (!std::isnan(s)) acc += w * s;
    }
    return p.g * acc;
  }

  ScoreRecord advance(const NormalizedRow& row) {
    auto& fr = flows[static_cast<std::size_t>(row.flow_id)];
    const std::int32_t t = row.window;
    if (!fr.born) {
      fr.born = true;
      fr.state = {p.v_rest, 0.0};
    }
    if (!fr.calibrated && t >= in.burn_in_windows) {
      fr.calibrated = true;
      fr.thr_nos = calibrate_threshold(fr.burn_nos, c.quantile, c.w_min);
      fr.thr_base = calibrate_threshold(fr.burn_base, c.quantile, c.w_min);
      fr.burn_nos = {};
      fr.burn_base = {};
    }
    ScoreRecord rec;
    rec.flow_id = row.flow_id;
    rec.window = t;
    rec.e = evidence(row.z, p.zeta, p.p);
    rec.baseline_s = rec.e;
    const double noise = p.noise_std > 0 ? fr.rng.normal(0.0, p.noise_std) : 0.0;
    const auto next = nos_step(fr.state, rec.e, coupling(row.flow_id, t), p, noise);
    if (!std::isfinite(next.v) || !std::isfinite(next.u)) {
      throw NumericError("non-finite detector state for flow " + std::to_string(row.flow_id) + " at window " +
                         std::to_string(t));
    }
    fr.state = next;
    rec.v = next.v;
    rec.u = next.u;
    rec.s_surrogate = event_surrogate(next.v, p.k, p.theta);
    rec.s = nos_score(rec.s_surrogate, next.u, p.eta1, p.eta2);
    if (t < in.burn_in_windows) {
      fr.burn_nos.push_back(rec.s);
      fr.burn_base.push_back(rec.baseline_s);
    } else {
      rec.a = fr.thr_nos.has_value() && rec.s >= *fr.thr_nos;
      rec.z = fr.persistence.update(rec.a);
    }
    if (p.g > 0) published[static_cast<std::size_t>(row.flow_id)][static_cast<std::size_t>(t)] = rec.s_surrogate;
    return rec;
  }

  std::vector<FlowThresholds> finish() {
    std::vector<FlowThresholds> out(in.n_flows);
    for (std::size_t f = 0; f < in.n_flows; ++f) {
      auto& fr = flows[f];
      out[f].flow_id = static_cast<FlowId>(f);
      if (!fr.calibrated) {
        fr.calibrated = true;
        fr.thr_nos = calibrate_threshold(fr.burn_nos, c.quantile, c.w_min);
        fr.thr_base = calibrate_threshold(fr.burn_base, c.quantile, c.w_min);
      }
      out[f].nos = fr.thr_nos;
      out[f].baseline = fr.thr_base;
    }
    return out;
  }
};

void check_rows(std::span<const NormalizedRow> rows) {
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].window < rows[r - 1].window ||
        (rows[r].window == rows[r - 1].window && rows[r].flow_id <= rows[r - 1].flow_id)) {
      throw std::invalid_argument("detect: rows must be ordered by (window, flow_id)");
    }
  }
}

// Burn-in counts are lost when the buffers are released at calibration, so
// they are tallied separately.
std::vector<std::int32_t> burn_in_counts(std::span<const NormalizedRow> rows, std::size_t n_flows, std::int32_t burn) {
  std::vector<std::int32_t> n(n_flows, 0);
  for (const auto& r : rows) {
    if (r.window < burn) ++n[static_cast<std::size_t>(r.flow_id)];
  }
  return n;
}

}  // namespace

DetectionResult detect_serial(const DetectionInputs& in, const DetectorParams& params, const DetectionConfig& config) {
  check_rows(in.rows);
  Engine eng(in, params, config);
  DetectionResult res;
  res.records.reserve(in.rows.size());
  for (const auto& row : in.rows) res.records.push_back(eng.advance(row));
  res.thresholds = eng.finish();
  const auto n = burn_in_counts(in.rows, in.n_flows, in.burn_in_windows);
  for (std::size_t f = 0; f < n.size(); ++f) res.thresholds[f].burn_in_count = n[f];
  return res;
}

DetectionResult detect_omp(const DetectionInputs& in, const DetectorParams& params, const DetectionConfig& config) {
  check_rows(in.rows);
  Engine eng(in, params, config);
  DetectionResult res;
  res.records.resize(in.rows.size());
  if (params.g == 0.0) {
    // Flows are independent: one task per flow, rows in time order.
    std::vector<std::vector<std::size_t>> by_flow(in.n_flows);
    for (std::size_t r = 0; r < in.rows.size(); ++r) by_flow[static_cast<std::size_t>(in.rows[r].flow_id)].push_back(r);
    const auto nf = static_cast<std::ptrdiff_t>(in.n_flows);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t f = 0; f < nf; ++f) {
      for (auto r : by_flow[static_cast<std::size_t>(f)]) res.records[r] = eng.advance(in.rows[r]);
    }
  } else {
    // Window barrier: every surrogate of window t-1 is published before any
    // state of window t advances.
    std::size_t i = 0;
    while (i < in.rows.size()) {
      std::size_t j = i;
      while (j < in.rows.size() && in.rows[j].window == in.rows[i].window) ++j;
      const auto lo = static_cast<std::ptrdiff_t>(i), hi = static_cast<std::ptrdiff_t>(j);
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t r = lo; r < hi; ++r) {
        res.records[static_cast<std::size_t>(r)] = eng.advance(in.rows[static_cast<std::size_t>(r)]);
      }
      i = j;
    }
  }
  res.thresholds = eng.finish();
  const auto n = burn_in_counts(in.rows, in.n_flows, in.burn_in_windows);
  for (std::size_t f = 0; f < n.size(); ++f) res.thresholds[f].burn_in_count = n[f];
  return res;
}

// ---------------------------------------------------------------------------

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoreRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "flow_id,window,E,S,v,u,s,a,z,baseline_s\n";
  for (const auto& r : records) {
    out << r.flow_id << ',' << r.window << ',' << format_real(r.e) << ',' << format_real(r.s_surrogate) << ','
        << format_real(r.v) << ',' << format_real(r.u) << ',' << format_real(r.s) << ',' << (r.a ? 1 : 0) << ','
        << (r.z ? 1 : 0) << ',' << format_real(r.baseline_s) << '\n';
  }
}

std::vector<ScoreRecord> read_scores_csv(const std::filesystem::path& path) {
  CsvReader csv(path, "flow_id,window,E,S,v,u,s,a,z,baseline_s");
  std::vector<ScoreRecord> out;
  auto flag = [&](std::size_t i) {
    const auto f = csv.field(i);
    if (f != "0" && f != "1") csv.fail("flag must be 0 or 1");
    return f == "1";
  };
  while (csv.next(10)) {
    ScoreRecord r;
    r.flow_id = csv.get<FlowId>(0);
    r.window = csv.get<std::int32_t>(1);
    r.e = csv.get<double>(2);
    r.s_surrogate = csv.get<double>(3);
    r.v = csv.get<double>(4);
    r.u = csv.get<double>(5);
    r.s = csv.get<double>(6);
    r.a = flag(7);
    r.z = flag(8);
    r.baseline_s = csv.get<double>(9);
    out.push_back(r);
  }
  return out;
}

nlohmann::json thresholds_to_json(const std::vector<FlowThresholds>& t, const DetectionConfig& config,
                                  std::int32_t burn_in_windows) {
  nlohmann::json flows = nlohmann::json::array();
  for (const auto& f : t) {
    flows.push_back({{"flow_id", f.flow_id},
                     {"nos", f.nos ? nlohmann::json(*f.nos) : nlohmann::json(nullptr)},
                     {"baseline", f.baseline ? nlohmann::json(*f.baseline) : nlohmann::json(nullptr)},
                     {"burn_in_count", f.burn_in_count}});
  }
  return {{"quantile", config.quantile}, {"k", config.k},         {"m", config.m},
          {"w_min", config.w_min},       {"burn_in_windows", burn_in_windows}, {"flows", flows}};
}

std::vector<FlowThresholds> thresholds_from_json(const nlohmann::json& j) {
  std::vector<FlowThresholds> out;
  try {
    for (const auto& f : j.at("flows")) {
      FlowThresholds t;
      t.flow_id = f.at("flow_id").get<FlowId>();
      if (!f.at("nos").is_null()) t.nos = f.at("nos").get<double>();
      if (!f.at("baseline").is_null()) t.baseline = f.at("baseline").get<double>();
      t.burn_in_count = f.at("burn_in_count").get<std::int32_t>();
      out.push_back(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("thresholds: ") + e.what());
  }
  return out;
}

DetectionConfig detection_config_from_thresholds(const nlohmann::json& j) {
  DetectionConfig c;
  try {
    c.quantile = j.at("quantile").get<double>();
    c.k = j.at("k").get<std::int32_t>();
    c.m = j.at("m").get<std::int32_t>();
    c.w_min = j.at("w_min").get<std::int32_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("thresholds: ") + e.what());
  }
  return c;
}

}  // namespace nosgate
