#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "nosgate/features.hpp"
#include "nosgate/rng.hpp"
#include "nosgate/trace.hpp"
#include "nosgate/worlds.hpp"

namespace nosgate {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DetectorParams {
  double alpha = 1.0;
  double kappa = 1.0;
  double beta = 0.1;
  double gamma = 0.0;
  double lambda = 0.5;
  double chi = 0.2;
  double a = 0.1;
  double b = 0.5;
  double mu = 0.05;
  double dt = 0.25;
  double k = 4.0;
  double theta = 1.0;
  double zeta = 0.25;
  double p = 2.0;
  double g = 0.0;
  std::int32_t tau = 0;
  double r = 0.0;
  double eta1 = 1.0;
  double eta2 = 0.0;
  double v_rest = 0.0;
  double v_max = 10.0;
  double noise_std = 0.0;

  // Range checks only; the coupling margin needs rho(W) and is checked by
  // the detection driver when g > 0.
  void validate() const;
};

DetectorParams detector_params_from_json(const nlohmann::json& j, const DetectorParams& defaults = {});
nlohmann::json detector_params_to_json(const DetectorParams& p);

inline double f_sat(double v, double alpha, double kappa) { return alpha * v * v / (1.0 + kappa * v * v); }

inline double event_surrogate(double v, double k, double theta) { return 1.0 / (1.0 + std::exp(-k * (v - theta))); }

// zeta * ||x||_p.
double evidence(std::span<const double> x, double zeta, double p);

// The memoryless comparator: the evidence drive itself.
inline double baseline_score(std::span<const double> x, double zeta, double p) { return evidence(x, zeta, p); }

// g * sum_j w_j * S_j. Entries with no history are passed as 0.
double coupling_drive(std::span<const double> delayed_surrogates, std::span<const double> weights, double g);

struct NosState {
  double v = 0.0;
  double u = 0.0;
};

// One explicit Euler step of the two-state unit. The reset term uses the
// surrogate of the incoming state. `noise` is the already-drawn xi.
NosState nos_step(const NosState& s, double e, double i, const DetectorParams& p, double noise = 0.0);

inline double nos_score(double surrogate, double u, double eta1, double eta2) { return eta1 * surrogate + eta2 * u; }

// Maximum slope of f_sat on [0, v_max].
double f_sat_max_slope(double alpha, double kappa, double v_max);

struct StabilityMargin {
  double bound = 0.0;
  double margin = 0.0;
  bool ok = false;
};

StabilityMargin coupling_stability_margin(const DetectorParams& p, double rho);

// Nearest-rank q-quantile; unset below w_min samples.
std::optional<double> calibrate_threshold(std::span<const double> burn_in_scores, double q, std::int32_t w_min);

// K-of-M persistence: sets once K of the last M alarms fire (missing history
// counts as zero) and clears only after M consecutive alarm-free windows.
class Persistence {
 public:
  Persistence(std::int32_t k = 3, std::int32_t m = 8);
  bool update(bool alarm);
  bool z() const { return z_; }

 private:
  std::int32_t k_, m_;
  std::vector<std::uint8_t> ring_;
  std::size_t pos_ = 0;
  std::int32_t count_ = 0;
  std::int32_t clear_run_ = 0;
  bool z_ = false;
};

struct DetectionConfig {
  double quantile = 0.99;
  std::int32_t k = 3;
  std::int32_t m = 8;
  std::int32_t w_min = 50;

  void validate() const;
};

struct ScoreRecord {
  FlowId flow_id = 0;
  std::int32_t window = 0;
  double e = 0.0;
  double s_surrogate = 0.0;
  double v = 0.0;
  double u = 0.0;
  double s = 0.0;
  bool a = false;
  bool z = false;
  double baseline_s = 0.0;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

struct FlowThresholds {
  FlowId flow_id = 0;
  std::optional<double> nos;
  std::optional<double> baseline;
  std::int32_t burn_in_count = 0;

  friend bool operator==(const FlowThresholds&, const FlowThresholds&) = default;
};

struct DetectionResult {
  std::vector<ScoreRecord> records;        // index-aligned with the input rows
  std::vector<FlowThresholds> thresholds;  // one per flow id
};

struct DetectionInputs {
  std::span<const NormalizedRow> rows;  // ordered by (window, flow_id)
  std::size_t n_flows = 0;
  const ContentionGraph* graph = nullptr;  // required when g > 0
  std::int32_t burn_in_windows = 0;
  std::uint64_t seed = 0;  // noise stream
};

// Records hold the state after the window's update; the score of window t is
// read from that state. Windows before burn_in_windows collect calibration
// scores; thresholds freeze when the first test window arrives.
DetectionResult detect_serial(const DetectionInputs& in, const DetectorParams& params, const DetectionConfig& config);
DetectionResult detect_omp(const DetectionInputs& in, const DetectorParams& params, const DetectionConfig& config);

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoreRecord> records);
std::vector<ScoreRecord> read_scores_csv(const std::filesystem::path& path);

nlohmann::json thresholds_to_json(const std::vector<FlowThresholds>& t, const DetectionConfig& config,
                                  std::int32_t burn_in_windows);
std::vector<FlowThresholds> thresholds_from_json(const nlohmann::json& j);
DetectionConfig detection_config_from_thresholds(const nlohmann::json& j);

}  // namespace nosgate
