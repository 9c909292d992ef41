#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "nosgate/detector.hpp"
#include "nosgate/features.hpp"
#include "nosgate/metrics.hpp"
#include "nosgate/wfq.hpp"
#include "nosgate/worlds.hpp"

namespace nosgate {

// Thrown for bad command-line combinations; the CLI maps it to exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Everything the detect stage reads from a params file. Any section may be
// absent.
struct DetectSettings {
  DetectorParams detector;
  NormalizerParams normalizer;
  DetectionConfig detection;
  WindowingParams windowing;
};

// Resolves flag > file > default and prints one `key=value source=...` line
// per setting to `log`.
DetectSettings resolve_detect_settings(const std::optional<std::filesystem::path>& params_file,
                                       std::optional<double> quantile, std::optional<std::int32_t> k,
                                       std::optional<std::int32_t> m, std::ostream& log);

struct GenWorldOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
};

World cmd_gen_world(const GenWorldOptions& opt, std::ostream& log);

struct DetectOptions {
  std::filesystem::path world;
  std::optional<std::filesystem::path> params;
  std::optional<double> quantile;
  std::optional<std::int32_t> k;
  std::optional<std::int32_t> m;
  std::filesystem::path out;  // directory
};

namespace detect_files {
inline constexpr const char* kFeatures = "features.csv";
inline constexpr const char* kScores = "scores.csv";
inline constexpr const char* kThresholds = "thresholds.json";
inline constexpr const char* kManifest = "detect_manifest.json";
}  // namespace detect_files

DetectionResult cmd_detect(const DetectOptions& opt, std::ostream& log);

struct ReplayOptions {
  std::filesystem::path world;
  std::optional<std::filesystem::path> scores;
  std::optional<std::filesystem::path> gate_config;
  std::string mode = "base";  // base | gated
  std::filesystem::path out;  // queue log CSV
};

QueueEventLog cmd_replay(const ReplayOptions& opt, std::ostream& log);

struct ReportOptions {
  std::filesystem::path world;
  std::filesystem::path scores;  // thresholds.json and detect_manifest.json are read from the same directory
  std::filesystem::path base_log;
  std::filesystem::path gated_log;
  std::filesystem::path out;  // report.json; episodes.csv goes next to it
  std::optional<std::int32_t> grace_windows;
  std::int64_t bench_rows = 100'000;
};

nlohmann::json cmd_report(const ReportOptions& opt, std::ostream& log);

struct BenchOptions {
  std::int64_t rows = 100'000;
  std::optional<std::filesystem::path> params;
  std::uint64_t seed = 1;
};

BenchResult cmd_bench(const BenchOptions& opt, std::ostream& log);

}  // namespace nosgate
