#include "nosgate/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "nosgate/csv.hpp"
#include "nosgate/stats.hpp"

namespace nosgate {

double pacing_index(std::span<const std::int64_t> bin_counts) {
  const auto b = bin_counts.size();
  if (b < 2) throw std::invalid_argument("pacing_index: need at least two micro-bins");
  std::int64_t n = 0;
  for (auto c : bin_counts) n += c;
  if (n <= 1) return 0.0;
  double h = 0.0;
  for (auto c : bin_counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(n);
    h -= p * std::log(p);
  }
  return std::clamp(1.0 - h / std::log(static_cast<double>(b)), 0.0, 1.0);
}

double pacing_index(std::span<const TimeUs> window_ts, TimeUs window_begin_us, TimeUs window_us, std::int32_t bins) {
  if (bins < 2) throw std::invalid_argument("pacing_index: need at least two micro-bins");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
  for (auto ts : window_ts) {
    auto b = (ts - window_begin_us) * bins / window_us;
    ++counts[static_cast<std::size_t>(std::clamp<TimeUs>(b, 0, bins - 1))];
  }
  return pacing_index(counts);
}

ContentionFeatures contention_features(std::span<const std::int64_t> window_bytes, const ContentionGraph& graph,
                                       FlowId flow, TimeUs window_us) {
  if (flow < 0 || static_cast<std::size_t>(flow) >= graph.n || static_cast<std::size_t>(flow) >= window_bytes.size()) {
    throw std::domain_error("contention_features: unknown flow " + std::to_string(flow));
  }
  const std::vector<FlowId>* clique = nullptr;
  for (const auto& c : graph.cliques) {
    if (std::find(c.begin(), c.end(), flow) != c.end()) {
      clique = &c;
      break;
    }
  }
  if (clique == nullptr) throw std::domain_error("contention_features: flow " + std::to_string(flow) + " has no clique");
  std::int64_t clique_bytes = 0;
  double interference = 0.0;
  const double dt_s = static_cast<double>(window_us) / 1e6;
  for (auto j : *clique) {
    const auto bytes = window_bytes[static_cast<std::size_t>(j)];
    clique_bytes += bytes;
    if (j != flow) interference += graph.w(static_cast<std::size_t>(flow), static_cast<std::size_t>(j)) * bytes / dt_s;
  }
  ContentionFeatures out;
  out.share = static_cast<double>(window_bytes[static_cast<std::size_t>(flow)]) /
              static_cast<double>(std::max<std::int64_t>(1, clique_bytes));
  out.interference = interference;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct WindowContext {
  const Trace& trace;
  const ContentionGraph& graph;
  WindowingParams params;
  std::vector<std::int32_t> birth;  // first window per flow, or H if silent
  std::vector<std::size_t> clique_index;  // flow -> index into graph.cliques
};

WindowContext make_context(const Trace& trace, const ContentionGraph& graph, const WindowingParams& params) {
  if (graph.n != trace.flows.size()) throw std::invalid_argument("windowize: graph does not match flow table");
  if (params.micro_bins < 2) throw std::invalid_argument("windowize: micro_bins must be >= 2");
  WindowContext ctx{trace, graph, params, {}, {}};
  ctx.birth.assign(trace.flows.size(), trace.horizon_windows);
  for (const auto& p : trace.packets) {
    auto& b = ctx.birth[static_cast<std::size_t>(p.flow_id)];
    b = std::min(b, trace.window_of(p.ts_us));
  }
  ctx.clique_index.assign(trace.flows.size(), 0);
  for (std::size_t c = 0; c < graph.cliques.size(); ++c) {
    for (auto f : graph.cliques[c]) ctx.clique_index[static_cast<std::size_t>(f)] = c;
  }
  return ctx;
}

// Rows for one window. `packets` holds exactly the window's packets.
void emit_window(const WindowContext& ctx, std::int32_t t, std::span<const PacketRecord> packets,
                 std::vector<FlowWindowFeatures>& out) {
  const auto n_flows = ctx.trace.flows.size();
  const TimeUs dt = ctx.trace.window_us;
  const double dt_s = static_cast<double>(dt) / 1e6;
  const TimeUs begin = static_cast<TimeUs>(t) * dt;

  std::vector<std::int64_t> bytes(n_flows, 0);
  std::vector<std::vector<TimeUs>> ts(n_flows);
  for (const auto& p : packets) {
    bytes[static_cast<std::size_t>(p.flow_id)] += p.len_bytes;
    ts[static_cast<std::size_t>(p.flow_id)].push_back(p.ts_us);
  }
  std::vector<std::int64_t> clique_bytes(ctx.graph.cliques.size(), 0);
  for (std::size_t f = 0; f < n_flows; ++f) clique_bytes[ctx.clique_index[f]] += bytes[f];

  for (std::size_t f = 0; f < n_flows; ++f) {
    if (ctx.birth[f] > t) continue;
    FlowWindowFeatures row;
    row.flow_id = static_cast<FlowId>(f);
    row.window = t;
    const auto& tf = ts[f];
    row.pkt_count = static_cast<std::int32_t>(tf.size());
    row.x[kPktRate] = static_cast<double>(tf.size()) / dt_s;
    row.x[kByteRate] = static_cast<double>(bytes[f]) / dt_s;
    if (tf.size() >= 2) {
      const auto k = static_cast<double>(tf.size() - 1);
      double sum = 0.0;
      for (std::size_t i = 1; i < tf.size(); ++i) sum += static_cast<double>(tf[i] - tf[i - 1]) / 1e6;
      const double mean = sum / k;
      double var = 0.0;
      for (std::size_t i = 1; i < tf.size(); ++i) {
        const double d = static_cast<double>(tf[i] - tf[i - 1]) / 1e6 - mean;
        var += d * d;
      }
      var /= k;
      row.iat_present = true;
      row.x[kIatMean] = mean;
      row.x[kIatCv] = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    }
    row.x[kPacing] = pacing_index(tf, begin, dt, ctx.params.micro_bins);
    // Share and interference restricted to the flow's own clique.
    const auto c = ctx.clique_index[f];
    row.x[kShare] = static_cast<double>(bytes[f]) / static_cast<double>(std::max<std::int64_t>(1, clique_bytes[c]));
    double interference = 0.0;
    for (auto j : ctx.graph.cliques[c]) {
      if (static_cast<std::size_t>(j) != f) {
        interference += ctx.graph.w(f, static_cast<std::size_t>(j)) * static_cast<double>(bytes[static_cast<std::size_t>(j)]) / dt_s;
      }
    }
    row.x[kInterference] = interference;
    out.push_back(row);
  }
}

}  // namespace

std::vector<FlowWindowFeatures> windowize_serial(const Trace& trace, const ContentionGraph& graph,
                                                 const WindowingParams& params) {
  const auto ctx = make_context(trace, graph, params);
  std::vector<FlowWindowFeatures> out;
  std::size_t i = 0;
  for (std::int32_t t = 0; t < trace.horizon_windows; ++t) {
    std::size_t j = i;
    while (j < trace.packets.size() && trace.window_of(trace.packets[j].ts_us) == t) ++j;
    emit_window(ctx, t, std::span(trace.packets).subspan(i, j - i), out);
    i = j;
  }
  return out;
}

std::vector<FlowWindowFeatures> windowize_omp(const Trace& trace, const ContentionGraph& graph,
                                              const WindowingParams& params) {
  const auto ctx = make_context(trace, graph, params);
  const std::int32_t h = trace.horizon_windows;
  // Packet offset of each window boundary.
  std::vector<std::size_t> offset(static_cast<std::size_t>(h) + 1, trace.packets.size());
  {
    std::size_t i = 0;
    for (std::int32_t t = 0; t <= h; ++t) {
      const TimeUs begin = static_cast<TimeUs>(t) * trace.window_us;
      while (i < trace.packets.size() && trace.packets[i].ts_us < begin) ++i;
      offset[static_cast<std::size_t>(t)] = i;
    }
  }
  constexpr std::int32_t kChunk = 256;
  const std::int32_t n_chunks = (h + kChunk - 1) / kChunk;
  std::vector<std::vector<FlowWindowFeatures>> parts(static_cast<std::size_t>(n_chunks));
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int32_t c = 0; c < n_chunks; ++c) {
    auto& part = parts[static_cast<std::size_t>(c)];
    for (std::int32_t t = c * kChunk; t < std::min(h, (c + 1) * kChunk); ++t) {
      const auto lo = offset[static_cast<std::size_t>(t)];
      const auto hi = offset[static_cast<std::size_t>(t) + 1];
      emit_window(ctx, t, std::span(trace.packets).subspan(lo, hi - lo), part);
    }
  }
  std::vector<FlowWindowFeatures> out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// ---------------------------------------------------------------------------

void NormalizerParams::validate() const {
  if (!(lambda_m > 0 && lambda_m <= 1)) throw ConfigError("normalizer.lambda_m must be in (0, 1]");
  if (!(lambda_v > 0 && lambda_v <= 1)) throw ConfigError("normalizer.lambda_v must be in (0, 1]");
  if (!(eps_var > 0)) throw ConfigError("normalizer.eps_var must be positive");
  if (!(clip_mag > 0)) throw ConfigError("normalizer.clip_mag must be positive");
  if (!(post_burn_in_scale > 0 && post_burn_in_scale <= 1)) {
    throw ConfigError("normalizer.post_burn_in_scale must be in (0, 1]");
  }
  if (warmup < 0) throw ConfigError("normalizer.warmup must be nonnegative");
}

double NormalizerState::variance(std::size_t k, const NormalizerParams& p) const {
  double v = q[k];
  if (p.debias && updates[k] > 0 && retained[k] < 1.0) v /= 1.0 - retained[k];
  return std::max(v, p.eps_var);
}

NormalizerParams normalizer_params_from_json(const nlohmann::json& j, const NormalizerParams& defaults) {
  NormalizerParams p = defaults;
  if (j.is_null()) return p;
  try {
    p.lambda_m = j.value("lambda_m", p.lambda_m);
    p.lambda_v = j.value("lambda_v", p.lambda_v);
    p.eps_var = j.value("eps_var", p.eps_var);
    p.clip_mag = j.value("clip_mag", p.clip_mag);
    p.post_burn_in_scale = j.value("post_burn_in_scale", p.post_burn_in_scale);
    p.warmup = j.value("warmup", p.warmup);
    p.debias = j.value("debias", p.debias);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("normalizer: ") + e.what());
  }
  p.validate();
  return p;
}

nlohmann::json normalizer_params_to_json(const NormalizerParams& p) {
  return {{"lambda_m", p.lambda_m},
          {"lambda_v", p.lambda_v},
          {"eps_var", p.eps_var},
          {"clip_mag", p.clip_mag},
          {"post_burn_in_scale", p.post_burn_in_scale},
          {"warmup", p.warmup},
          {"debias", p.debias}};
}

ZVector normalize_score(const NormalizerState& state, const FlowWindowFeatures& f, const NormalizerParams& p) {
  ZVector z{};
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    if (!f.present(k) || !state.seen[k] || state.updates[k] < p.warmup) continue;
    const double v = (f.x[k] - state.m[k]) / std::sqrt(state.variance(k, p) + p.eps_var);
    z[k] = std::clamp(v, -p.clip_mag, p.clip_mag);
  }
  return z;
}

void normalize_update(NormalizerState& state, const FlowWindowFeatures& f, const NormalizerParams& p,
                      bool post_burn_in) {
  const double scale = post_burn_in ? p.post_burn_in_scale : 1.0;
  const double lm = p.lambda_m * scale;
  const double lv = p.lambda_v * scale;
  for (std::size_t k = 0; k < kFeatureCount; ++k) {
    if (!f.present(k)) continue;
    if (!state.seen[k]) {
      state.seen[k] = true;
      state.m[k] = f.x[k];
      state.q[k] = p.eps_var;
      state.updates[k] = 0;
      state.retained[k] = 1.0;
      continue;
    }
    double d = f.x[k] - state.m[k];
    if (post_burn_in) {
      const double lim = p.clip_mag * std::sqrt(state.variance(k, p) + p.eps_var);
      d = std::clamp(d, -lim, lim);
    }
    state.m[k] += lm * d;
    state.q[k] = std::max(p.eps_var, (1.0 - lv) * state.q[k] + lv * d * d);
    state.retained[k] *= 1.0 - lv;
    ++state.updates[k];
  }
}

ZVector normalize(NormalizerState& state, const FlowWindowFeatures& f, const NormalizerParams& p, bool post_burn_in) {
  const auto z = normalize_score(state, f, p);
  normalize_update(state, f, p, post_burn_in);
  return z;
}

namespace {

std::vector<std::size_t> bucket_of_flows(const std::vector<FlowInfo>& flows, std::size_t& n_buckets) {
  std::map<std::string, std::size_t> ids;
  for (const auto& f : flows) ids.emplace(f.device_class, 0);
  std::size_t next = 0;
  for (auto& [name, id] : ids) id = next++;
  n_buckets = ids.size();
  std::vector<std::size_t> out;
  out.reserve(flows.size());
  for (const auto& f : flows) out.push_back(ids.at(f.device_class));
  return out;
}

// Processes the rows of one bucket, given as indices in stream order.
void normalize_bucket(std::span<const FlowWindowFeatures> rows, std::span<const std::size_t> idx,
                      const NormalizerParams& p, std::int32_t burn_in, std::vector<NormalizedRow>& out) {
  NormalizerState state;
  std::size_t i = 0;
  while (i < idx.size()) {
    const auto t = rows[idx[i]].window;
    std::size_t j = i;
    while (j < idx.size() && rows[idx[j]].window == t) ++j;
    for (std::size_t r = i; r < j; ++r) {
      const auto& f = rows[idx[r]];
      out[idx[r]] = {f.flow_id, f.window, normalize_score(state, f, p)};
    }
    for (std::size_t r = i; r < j; ++r) normalize_update(state, rows[idx[r]], p, t >= burn_in);
    i = j;
  }
}

void check_order(std::span<const FlowWindowFeatures> rows, std::size_t n_flows) {
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].flow_id < 0 || static_cast<std::size_t>(rows[r].flow_id) >= n_flows) {
      throw std::invalid_argument("normalize_stream: unknown flow " + std::to_string(rows[r].flow_id));
    }
    if (r > 0 && (rows[r].window < rows[r - 1].window ||
                  (rows[r].window == rows[r - 1].window && rows[r].flow_id <= rows[r - 1].flow_id))) {
      throw std::invalid_argument("normalize_stream: rows must be ordered by (window, flow_id)");
    }
  }
}

}  // namespace

std::vector<NormalizedRow> normalize_stream_serial(std::span<const FlowWindowFeatures> rows,
                                                   const std::vector<FlowInfo>& flows, const NormalizerParams& p,
                                                   std::int32_t burn_in_windows) {
  p.validate();
  check_order(rows, flows.size());
  std::size_t n_buckets = 0;
  const auto bucket = bucket_of_flows(flows, n_buckets);
  std::vector<NormalizerState> state(n_buckets);
  std::vector<NormalizedRow> out(rows.size());
  std::size_t i = 0;
  while (i < rows.size()) {
    const auto t = rows[i].window;
    std::size_t j = i;
    while (j < rows.size() && rows[j].window == t) ++j;
    for (std::size_t r = i; r < j; ++r) {
      const auto& st = state[bucket[static_cast<std::size_t>(rows[r].flow_id)]];
      out[r] = {rows[r].flow_id, t, normalize_score(st, rows[r], p)};
    }
    for (std::size_t r = i; r < j; ++r) {
      normalize_update(state[bucket[static_cast<std::size_t>(rows[r].flow_id)]], rows[r], p, t >= burn_in_windows);
    }
    i = j;
  }
  return out;
}

std::vector<NormalizedRow> normalize_stream_omp(std::span<const FlowWindowFeatures> rows,
                                                const std::vector<FlowInfo>& flows, const NormalizerParams& p,
                                                std::int32_t burn_in_windows) {
  p.validate();
  check_order(rows, flows.size());
  std::size_t n_buckets = 0;
  const auto bucket = bucket_of_flows(flows, n_buckets);
  std::vector<std::vector<std::size_t>> idx(n_buckets);
  for (std::size_t r = 0; r < rows.size(); ++r) idx[bucket[static_cast<std::size_t>(rows[r].flow_id)]].push_back(r);
  std::vector<NormalizedRow> out(rows.size());
  const auto nb = static_cast<std::ptrdiff_t>(n_buckets);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t b = 0; b < nb; ++b) normalize_bucket(rows, idx[static_cast<std::size_t>(b)], p, burn_in_windows, out);
  return out;
}

// ---------------------------------------------------------------------------

void write_features_csv(const std::filesystem::path& path, std::span<const FlowWindowFeatures> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "flow_id,window,N,pkt_rate,byte_rate,iat_mean,iat_cv,pacing,share,interference\n";
  for (const auto& r : rows) {
    out << r.flow_id << ',' << r.window << ',' << r.pkt_count;
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      out << ',';
      if (r.present(k)) out << format_real(r.x[k]);
    }
    out << '\n';
  }
}

std::vector<FlowWindowFeatures> read_features_csv(const std::filesystem::path& path) {
  CsvReader csv(path, "flow_id,window,N,pkt_rate,byte_rate,iat_mean,iat_cv,pacing,share,interference");
  std::vector<FlowWindowFeatures> rows;
  while (csv.next(3 + kFeatureCount)) {
    FlowWindowFeatures r;
    r.flow_id = csv.get<FlowId>(0);
    r.window = csv.get<std::int32_t>(1);
    r.pkt_count = csv.get<std::int32_t>(2);
    const auto mean = csv.get_optional<double>(3 + kIatMean);
    const auto cv = csv.get_optional<double>(3 + kIatCv);
    if (mean.has_value() != cv.has_value()) csv.fail("iat_mean and iat_cv must be both present or both empty");
    r.iat_present = mean.has_value();
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      if (k == kIatMean || k == kIatCv) continue;
      r.x[k] = csv.get<double>(3 + k);
    }
    if (r.iat_present) {
      r.x[kIatMean] = *mean;
      r.x[kIatCv] = *cv;
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace nosgate
