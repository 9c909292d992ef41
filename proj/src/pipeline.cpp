#include "nosgate/pipeline.hpp"

#include <fstream>

#include "nosgate/stats.hpp"

namespace nosgate {

namespace {

const char* source_name(bool flag, bool file) { return flag ? "flag" : (file ? "file" : "default"); }

template <typename T>
std::string show(const T& v) {
  if constexpr (std::is_floating_point_v<T>) {
    return format_real(v);
  } else {
    return std::to_string(v);
  }
}

// Prints every key of a resolved section with where its value came from.
void print_section(std::ostream& log, const std::string& prefix, const nlohmann::json& resolved,
                   const nlohmann::json& file_section) {
  for (const auto& [key, value] : resolved.items()) {
    const bool from_file = file_section.is_object() && file_section.contains(key);
    log << prefix << key << '=' << (value.is_number_float() ? format_real(value.get<double>()) : value.dump())
        << " source=" << source_name(false, from_file) << '\n';
  }
}

nlohmann::json section(const nlohmann::json& j, const char* key) {
  if (j.is_object() && j.contains(key)) {
    if (!j[key].is_object()) throw ConfigError(std::string("params: section ") + key + " must be an object");
    return j[key];
  }
  return nlohmann::json::object();
}

void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

nlohmann::json settings_to_json(const DetectSettings& s) {
  return {{"detector", detector_params_to_json(s.detector)},
          {"normalizer", normalizer_params_to_json(s.normalizer)},
          {"detection",
           {{"quantile", s.detection.quantile}, {"k", s.detection.k}, {"m", s.detection.m}, {"w_min", s.detection.w_min}}},
          {"windowing", {{"micro_bins", s.windowing.micro_bins}}}};
}

}  // namespace

DetectSettings resolve_detect_settings(const std::optional<std::filesystem::path>& params_file,
                                       std::optional<double> quantile, std::optional<std::int32_t> k,
                                       std::optional<std::int32_t> m, std::ostream& log) {
  nlohmann::json file = nlohmann::json::object();
  if (params_file) file = read_json_file(*params_file);
  if (!file.is_object()) throw ConfigError("params: expected a JSON object");
  for (const auto& [key, _] : file.items()) {
    if (key != "detector" && key != "normalizer" && key != "detection" && key != "windowing") {
      throw ConfigError("params: unknown section " + key);
    }
  }
  DetectSettings s;
  const auto det = section(file, "detector");
  const auto norm = section(file, "normalizer");
  const auto dc = section(file, "detection");
  const auto win = section(file, "windowing");
  s.detector = detector_params_from_json(det);
  s.normalizer = normalizer_params_from_json(norm);
  try {
    s.detection.quantile = quantile.value_or(dc.value("quantile", s.detection.quantile));
    s.detection.k = k.value_or(dc.value("k", s.detection.k));
    s.detection.m = m.value_or(dc.value("m", s.detection.m));
    s.detection.w_min = dc.value("w_min", s.detection.w_min);
    s.windowing.micro_bins = win.value("micro_bins", s.windowing.micro_bins);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("params: ") + e.what());
  }
  s.detection.validate();
  if (s.windowing.micro_bins < 2) throw ConfigError("windowing.micro_bins must be >= 2");

  log << "quantile=" << show(s.detection.quantile)
      << " source=" << source_name(quantile.has_value(), dc.contains("quantile")) << '\n';
  log << "k=" << s.detection.k << " source=" << source_name(k.has_value(), dc.contains("k")) << '\n';
  log << "m=" << s.detection.m << " source=" << source_name(m.has_value(), dc.contains("m")) << '\n';
  log << "w_min=" << s.detection.w_min << " source=" << source_name(false, dc.contains("w_min")) << '\n';
  log << "micro_bins=" << s.windowing.micro_bins << " source=" << source_name(false, win.contains("micro_bins"))
      << '\n';
  print_section(log, "detector.", detector_params_to_json(s.detector), det);
  print_section(log, "normalizer.", normalizer_params_to_json(s.normalizer), norm);
  return s;
}

// ---------------------------------------------------------------------------

World cmd_gen_world(const GenWorldOptions& opt, std::ostream& log) {
  const auto j = read_json_file(opt.config);
  auto config = WorldConfig::from_json(j);
  const bool file_seed = j.contains("seed");
  const std::uint64_t seed = opt.seed.value_or(config.seed);
  log << "seed=" << seed << " source=" << source_name(opt.seed.has_value(), file_seed) << '\n';
  config.seed = seed;
  auto world = build_world(config, seed);
  write_world(opt.out, world);

  std::size_t feasible = 0;
  for (const auto& f : world.feasibility) feasible += f.feasible;
  log << "world_id=" << world.manifest.world_id << '\n'
      << "config_hash=" << world.manifest.config_hash << '\n'
      << "flows=" << world.trace.flows.size() << '\n'
      << "packets=" << world.trace.packets.size() << '\n'
      << "episodes=" << world.labels.size() << '\n'
      << "feasible_episodes=" << feasible << '\n'
      << "spectral_radius=" << format_real(world.graph.spectral_radius) << '\n'
      << "out=" << opt.out.string() << '\n';
  return world;
}

DetectionResult cmd_detect(const DetectOptions& opt, std::ostream& log) {
  const auto settings = resolve_detect_settings(opt.params, opt.quantile, opt.k, opt.m, log);
  const auto world = read_world_inputs(opt.world);
  const auto h = world.trace.horizon_windows;
  const auto burn = world.manifest.split.burn_in_windows(h);

  const auto features = windowize_omp(world.trace, world.graph, settings.windowing);
  const auto normalized = normalize_stream_omp(features, world.trace.flows, settings.normalizer, burn);
  DetectionInputs in;
  in.rows = normalized;
  in.n_flows = world.trace.flows.size();
  in.graph = &world.graph;
  in.burn_in_windows = burn;
  in.seed = world.manifest.seed;
  auto result = detect_omp(in, settings.detector, settings.detection);

  std::filesystem::create_directories(opt.out);
  write_features_csv(opt.out / detect_files::kFeatures, features);
  write_scores_csv(opt.out / detect_files::kScores, result.records);
  write_json_file(opt.out / detect_files::kThresholds,
                  thresholds_to_json(result.thresholds, settings.detection, burn));
  const auto margin = coupling_stability_margin(settings.detector, world.graph.spectral_radius);
  nlohmann::json manifest = {
      {"world_id", world.manifest.world_id},
      {"world_config_hash", world.manifest.config_hash},
      {"seed", world.manifest.seed},
      {"feature_contract", kFeatureContract},
      {"tool_version", kToolVersion},
      {"horizon_windows", h},
      {"window_us", world.trace.window_us},
      {"burn_in_windows", burn},
      {"test_start", world.manifest.split.test_start(h)},
      {"grace_windows", settings.detection.m},
      {"rows", result.records.size()},
      {"coupling_margin", {{"bound", margin.bound}, {"margin", margin.margin}, {"ok", margin.ok}}},
      {"settings", settings_to_json(settings)}};
  write_json_file(opt.out / detect_files::kManifest, manifest);

  std::size_t thresholds_set = 0, alarms = 0, actionable = 0;
  for (const auto& t : result.thresholds) thresholds_set += t.nos.has_value();
  for (const auto& r : result.records) {
    alarms += r.a;
    actionable += r.z;
  }
  log << "rows=" << result.records.size() << '\n'
      << "flows=" << in.n_flows << '\n'
      << "burn_in_windows=" << burn << '\n'
      << "thresholds_set=" << thresholds_set << '\n'
      << "alarm_windows=" << alarms << '\n'
      << "actionable_windows=" << actionable << '\n'
      << "out=" << opt.out.string() << '\n';
  return result;
}

QueueEventLog cmd_replay(const ReplayOptions& opt, std::ostream& log) {
  if (opt.mode != "base" && opt.mode != "gated") throw UsageError("--mode must be base or gated");
  if (opt.mode == "gated" && !opt.scores) throw UsageError("--mode gated requires --scores");
  const auto world = read_world_inputs(opt.world);

  GateConfig defaults;
  defaults.link_capacity_Bps = world.manifest.link_capacity_Bps;
  nlohmann::json file = nlohmann::json::object();
  if (opt.gate_config) file = read_json_file(*opt.gate_config);
  const auto gate = gate_config_from_json(file, defaults);
  const auto gate_json = gate_config_to_json(gate);
  for (const auto& [key, value] : gate_json.items()) {
    const char* src = file.contains(key) ? "file" : (key == "link_capacity_Bps" ? "world" : "default");
    log << "gate." << key << '=' << format_real(value.get<double>()) << " source=" << src << '\n';
  }

  WeightSchedule schedule(gate.omega_0);
  if (opt.mode == "gated") {
    const auto records = read_scores_csv(*opt.scores);
    std::vector<GateSignal> signals;
    signals.reserve(records.size());
    for (const auto& r : records) signals.push_back({r.flow_id, r.window, r.z});
    schedule = gate_controller(signals, gate, world.trace.window_us);
  }
  auto events = replay_omp(world.trace, schedule, gate.link_capacity_Bps);

  ensure_parent(opt.out);
  write_queue_log_csv(opt.out, events, false);
  auto stem = opt.out;
  if (opt.mode == "gated") write_schedule_csv(std::filesystem::path(stem).replace_extension(".schedule.csv"), schedule);
  nlohmann::json manifest = {{"mode", opt.mode},
                             {"world_id", world.manifest.world_id},
                             {"world_config_hash", world.manifest.config_hash},
                             {"gate", gate_config_to_json(gate)},
                             {"tool_version", kToolVersion}};
  if (opt.scores) manifest["scores_sha256"] = sha256_hex(read_file_bytes(*opt.scores));
  write_json_file(std::filesystem::path(stem).replace_extension(".manifest.json"), manifest);

  std::size_t gated_flows = 0;
  for (const auto& [flow, v] : schedule.entries()) gated_flows += v.size() > 1;
  log << "mode=" << opt.mode << '\n'
      << "packets=" << events.size() << '\n'
      << "gated_flows=" << gated_flows << '\n';
  if (!events.empty()) log << "p999_delay_ms=" << format_real(delay_percentile(events, 99.9) / 1e3) << '\n';
  log << "out=" << opt.out.string() << '\n';
  return events;
}

nlohmann::json cmd_report(const ReportOptions& opt, std::ostream& log) {
  const auto world = read_world(opt.world);
  const auto detect_dir = opt.scores.parent_path();
  const auto records = read_scores_csv(opt.scores);
  const auto thr_json = read_json_file(detect_dir / detect_files::kThresholds);
  const auto thresholds = thresholds_from_json(thr_json);
  const auto detect_manifest = read_json_file(detect_dir / detect_files::kManifest);
  auto base = read_queue_log_csv(opt.base_log);
  auto gated = read_queue_log_csv(opt.gated_log);
  if (base.size() != world.trace.packets.size()) throw FormatError(opt.base_log.string() + ": log does not match trace");
  if (gated.size() != world.trace.packets.size()) {
    throw FormatError(opt.gated_log.string() + ": log does not match trace");
  }
  annotate_benign(base, world.trace, world.labels);
  annotate_benign(gated, world.trace, world.labels);

  const auto detection = detection_config_from_thresholds(thr_json);
  const auto h = world.trace.horizon_windows;
  ReportInputs in;
  in.trace = &world.trace;
  in.labels = world.labels;
  in.feasibility = world.feasibility;
  in.records = records;
  in.thresholds = thresholds;
  in.detection = detection;
  in.burn_in_windows = world.manifest.split.burn_in_windows(h);
  in.test_start = world.manifest.split.test_start(h);
  in.base_log = &base;
  in.gated_log = &gated;
  const std::int32_t grace = opt.grace_windows.value_or(detection.m);
  log << "grace_windows=" << grace << " source=" << source_name(opt.grace_windows.has_value(), false) << '\n';
  const auto report = compute_report(in, grace);

  DetectorParams params;
  try {
    params = detector_params_from_json(detect_manifest.at("settings").at("detector"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((detect_dir / detect_files::kManifest).string() + ": " + e.what());
  }
  const auto bench = bench_scoring(opt.bench_rows, params, detection, world.manifest.seed);

  auto j = report_to_json(report);
  j["timing"] = bench_to_json(bench);
  j["manifest"] = {{"world", manifest_to_json(world.manifest)}, {"detect", detect_manifest}};
  ensure_parent(opt.out);
  write_json_file(opt.out, j);
  write_episodes_csv(opt.out.parent_path() / "episodes.csv", report);

  auto opt_str = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("none"); };
  log << "achieved_fpr_alarm=" << format_real(report.nos.fpr.alarm_rate) << '\n'
      << "achieved_fpr_actionable=" << format_real(report.nos.fpr.actionable_rate) << '\n'
      << "incident_recall=" << opt_str(report.nos.incident_recall) << '\n'
      << "baseline_fpr_alarm=" << format_real(report.baseline.fpr.alarm_rate) << '\n'
      << "baseline_incident_recall=" << opt_str(report.baseline.incident_recall) << '\n'
      << "p999_delay_ms_base=" << format_real(report.p999_delay_ms_base) << '\n'
      << "p999_delay_ms_gated=" << format_real(report.p999_delay_ms_gated) << '\n'
      << "delta_p999_delay_ms=" << format_real(report.impact.delta_p999_delay_ms) << '\n'
      << "delta_p999_collateral_ms=" << format_real(report.impact.delta_p999_collateral_ms) << '\n'
      << "feasibility_rate=" << opt_str(report.feasibility_rate) << '\n'
      << "mean_us_per_row=" << format_real(bench.mean_us) << '\n'
      << "out=" << opt.out.string() << '\n';
  return j;
}

BenchResult cmd_bench(const BenchOptions& opt, std::ostream& log) {
  if (opt.rows < 100'000) throw UsageError("--rows must be at least 100000");
  const auto settings = resolve_detect_settings(opt.params, std::nullopt, std::nullopt, std::nullopt, log);
  const auto b = bench_scoring(opt.rows, settings.detector, settings.detection, opt.seed);
  log << "rows=" << b.rows << '\n'
      << "batches=" << b.batches << '\n'
      << "mean_us_per_row=" << format_real(b.mean_us) << '\n'
      << "p90_us_per_row=" << format_real(b.p90_us) << '\n'
      << "max_us_per_row=" << format_real(b.max_us) << '\n';
  return b;
}

}  // namespace nosgate
