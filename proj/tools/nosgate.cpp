// nosgate: gen-world, detect, replay, report, bench.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <iostream>

#include <CLI11.hpp>

#include "nosgate/pipeline.hpp"

namespace {

template <typename T>
std::optional<T> opt_if(const CLI::Option* o, const T& v) {
  return o->count() > 0 ? std::optional<T>(v) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace nosgate;
  CLI::App app{"Streaming flow detection, evasive world generation and WFQ gating replay"};
  app.require_subcommand(1);

  GenWorldOptions gen;
  std::uint64_t gen_seed = 0;
  auto* gen_cmd = app.add_subcommand("gen-world", "Generate a world directory from a config");
  gen_cmd->add_option("--config", gen.config, "World config JSON")->required()->check(CLI::ExistingFile);
  auto* gen_seed_opt = gen_cmd->add_option("--seed", gen_seed, "Seed (overrides the config)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  DetectOptions det;
  double det_q = 0.0;
  std::int32_t det_k = 0, det_m = 0;
  auto* det_cmd = app.add_subcommand("detect", "Score every flow window and calibrate thresholds");
  det_cmd->add_option("--world", det.world, "World directory")->required()->check(CLI::ExistingDirectory);
  std::filesystem::path det_params;
  auto* det_params_opt = det_cmd->add_option("--params", det_params, "Detector params JSON")->check(CLI::ExistingFile);
  auto* det_q_opt = det_cmd->add_option("--quantile", det_q, "Threshold quantile q in (0, 1)")
                        ->check([](const std::string& s) -> std::string {
                          try {
                            const double q = std::stod(s);
                            return q > 0.0 && q < 1.0 ? std::string() : "quantile must be in (0, 1)";
                          } catch (const std::exception&) {
                            return "quantile must be a number";
                          }
                        });
  auto* det_k_opt = det_cmd->add_option("--k", det_k, "Persistence K")->check(CLI::PositiveNumber);
  auto* det_m_opt = det_cmd->add_option("--m", det_m, "Persistence M")->check(CLI::PositiveNumber);
  det_cmd->add_option("--out", det.out, "Output directory")->required();

  ReplayOptions rep;
  auto* rep_cmd = app.add_subcommand("replay", "Packet-level WFQ replay, base or gated");
  rep_cmd->add_option("--world", rep.world, "World directory")->required()->check(CLI::ExistingDirectory);
  std::filesystem::path rep_scores, rep_gate;
  auto* rep_scores_opt = rep_cmd->add_option("--scores", rep_scores, "Scores CSV")->check(CLI::ExistingFile);
  auto* rep_gate_opt = rep_cmd->add_option("--gate-config", rep_gate, "Gate config JSON")->check(CLI::ExistingFile);
  rep_cmd->add_option("--mode", rep.mode, "base or gated")->check(CLI::IsMember({"base", "gated"}));
  rep_cmd->add_option("--out", rep.out, "Queue log CSV")->required();

  ReportOptions reportopt;
  std::int32_t grace = 0;
  auto* rpt_cmd = app.add_subcommand("report", "Compute detection and queue metrics");
  rpt_cmd->add_option("--world", reportopt.world, "World directory")->required()->check(CLI::ExistingDirectory);
  rpt_cmd->add_option("--scores", reportopt.scores, "Scores CSV")->required()->check(CLI::ExistingFile);
  rpt_cmd->add_option("--base-log", reportopt.base_log, "Base queue log")->required()->check(CLI::ExistingFile);
  rpt_cmd->add_option("--gated-log", reportopt.gated_log, "Gated queue log")->required()->check(CLI::ExistingFile);
  rpt_cmd->add_option("--out", reportopt.out, "report.json path")->required();
  auto* grace_opt = rpt_cmd->add_option("--grace", grace, "Grace windows (default M)")->check(CLI::NonNegativeNumber);
  rpt_cmd->add_option("--bench-rows", reportopt.bench_rows, "Rows for the scoring-cost measurement")
      ->check(CLI::Range(std::int64_t{100'000}, std::int64_t{1'000'000'000}));

  BenchOptions bench;
  std::filesystem::path bench_params;
  auto* bench_cmd = app.add_subcommand("bench", "Per-row scoring cost on a synthetic stream");
  bench_cmd->add_option("--rows", bench.rows, "Rows (>= 100000)")
      ->check(CLI::Range(std::int64_t{100'000}, std::int64_t{1'000'000'000}));
  auto* bench_params_opt = bench_cmd->add_option("--params", bench_params, "Detector params JSON")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (gen_cmd->parsed()) {
      gen.seed = opt_if(gen_seed_opt, gen_seed);
      cmd_gen_world(gen, std::cout);
    } else if (det_cmd->parsed()) {
      det.params = opt_if(det_params_opt, det_params);
      det.quantile = opt_if(det_q_opt, det_q);
      det.k = opt_if(det_k_opt, det_k);
      det.m = opt_if(det_m_opt, det_m);
      cmd_detect(det, std::cout);
    } else if (rep_cmd->parsed()) {
      rep.scores = opt_if(rep_scores_opt, rep_scores);
      rep.gate_config = opt_if(rep_gate_opt, rep_gate);
      cmd_replay(rep, std::cout);
    } else if (rpt_cmd->parsed()) {
      reportopt.grace_windows = opt_if(grace_opt, grace);
      cmd_report(reportopt, std::cout);
    } else if (bench_cmd->parsed()) {
      bench.params = opt_if(bench_params_opt, bench_params);
      cmd_bench(bench, std::cout);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
