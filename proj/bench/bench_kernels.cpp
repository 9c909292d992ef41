// Serial vs OpenMP timing for the four parallel kernels on one world.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include <omp.h>

#include <CLI11.hpp>

#include "nosgate/detector.hpp"
#include "nosgate/features.hpp"
#include "nosgate/stats.hpp"
#include "nosgate/wfq.hpp"
#include "nosgate/worlds.hpp"

namespace {

double best_ms(int reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

void row(const char* name, double serial_ms, double omp_ms, bool same) {
  std::printf("%-12s serial %9.2f ms   omp %9.2f ms   speedup %5.2fx   %s\n", name, serial_ms, omp_ms,
              serial_ms / std::max(omp_ms, 1e-9), same ? "identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nosgate kernel benchmark"};
  std::string config = std::string(NOSGATE_CONFIG_DIR) + "/calibration.json";
  int reps = 3;
  int horizon = 8000;
  app.add_option("--config", config, "World config")->check(CLI::ExistingFile);
  app.add_option("--reps", reps, "Repetitions per kernel (best is reported)")->check(CLI::PositiveNumber);
  app.add_option("--horizon", horizon, "Override horizon windows (0 keeps the config)")->check(CLI::NonNegativeNumber);
  CLI11_PARSE(app, argc, argv);

  using namespace nosgate;
  auto j = read_json_file(config);
  if (horizon > 0) j["horizon_windows"] = horizon;
  const auto cfg = WorldConfig::from_json(j);
  const auto world = build_world(cfg, cfg.seed);
  const auto burn = cfg.split.burn_in_windows(world.trace.horizon_windows);
  std::printf("world=%s flows=%zu packets=%zu windows=%d threads=%d\n", cfg.world_id.c_str(),
              world.trace.flows.size(), world.trace.packets.size(), world.trace.horizon_windows,
              omp_get_max_threads());

  std::vector<FlowWindowFeatures> fs, fo;
  const double w_s = best_ms(reps, [&] { fs = windowize_serial(world.trace, world.graph); });
  const double w_o = best_ms(reps, [&] { fo = windowize_omp(world.trace, world.graph); });
  row("windowize", w_s, w_o, fs == fo);

  NormalizerParams np;
  std::vector<NormalizedRow> ns, no;
  const double n_s = best_ms(reps, [&] { ns = normalize_stream_serial(fs, world.trace.flows, np, burn); });
  const double n_o = best_ms(reps, [&] { no = normalize_stream_omp(fs, world.trace.flows, np, burn); });
  row("normalize", n_s, n_o, ns == no);

  DetectionInputs in;
  in.rows = ns;
  in.n_flows = world.trace.flows.size();
  in.graph = &world.graph;
  in.burn_in_windows = burn;
  in.seed = cfg.seed;
  DetectorParams dp;
  DetectionConfig dc;
  DetectionResult ds, d_o;
  const double d_s = best_ms(reps, [&] { ds = detect_serial(in, dp, dc); });
  const double d_om = best_ms(reps, [&] { d_o = detect_omp(in, dp, dc); });
  row("detect", d_s, d_om, ds.records == d_o.records && ds.thresholds == d_o.thresholds);

  // Coupled detection runs the per-window parallel path.
  dp.lambda = 0.6;
  dp.g = 0.2;
  const double c_s = best_ms(reps, [&] { ds = detect_serial(in, dp, dc); });
  const double c_o = best_ms(reps, [&] { d_o = detect_omp(in, dp, dc); });
  row("detect g>0", c_s, c_o, ds.records == d_o.records);

  WeightSchedule sched(1.0);
  QueueEventLog rs, ro;
  const double r_s = best_ms(reps, [&] { rs = replay_serial(world.trace, sched, cfg.link_capacity_Bps); });
  const double r_o = best_ms(reps, [&] { ro = replay_omp(world.trace, sched, cfg.link_capacity_Bps); });
  row("replay", r_s, r_o, rs == ro);

  const bool ok = fs == fo && ns == no && ds.records == d_o.records && rs == ro;
  return ok ? 0 : 1;
}
