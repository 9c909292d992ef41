#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace nosgate {

using FlowId = std::int32_t;
using TimeUs = std::int64_t;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Thrown when a persisted artifact cannot be parsed. The message names the
// file and the first bad record.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Directed five-tuple. src/dst swap yields a different key.
struct FlowKey {
  std::string src_ip;
  std::string dst_ip;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t proto = 6;

  friend bool operator==(const FlowKey&, const FlowKey&) = default;
};

struct FlowInfo {
  FlowKey key;
  std::string device_class;
  std::string label = "benign";  // reporting only
  std::int32_t clique_id = 0;

  friend bool operator==(const FlowInfo&, const FlowInfo&) = default;
};

struct PacketRecord {
  TimeUs ts_us = 0;
  FlowId flow_id = 0;
  std::int32_t len_bytes = 0;
  std::int32_t clique_id = 0;

  friend bool operator==(const PacketRecord&, const PacketRecord&) = default;
};

struct SizeBounds {
  std::int32_t min_bytes = 64;
  std::int32_t max_bytes = 1500;
};

struct Trace {
  std::vector<FlowInfo> flows;  // index == flow_id
  std::vector<PacketRecord> packets;
  std::int32_t horizon_windows = 0;
  TimeUs window_us = 250'000;

  TimeUs horizon_us() const { return static_cast<TimeUs>(horizon_windows) * window_us; }
  std::int32_t window_of(TimeUs ts_us) const {
    return static_cast<std::int32_t>(ts_us / window_us);
  }

  friend bool operator==(const Trace&, const Trace&) = default;
};

enum class EpisodeKind { exfiltration, beaconing, scan, evasive_c2 };

std::string to_string(EpisodeKind kind);
EpisodeKind episode_kind_from_string(const std::string& s);

// Attacker budgets. Infinite epsilon / delta mean "unconstrained".
struct Budgets {
  std::int64_t r_min_bytes = 0;
  double epsilon_s = kInf;
  double delta_q_s = kInf;
};

struct EpisodeLabel {
  FlowId flow_id = 0;
  std::int32_t start_window = 0;
  std::int32_t end_window = 0;
  EpisodeKind kind = EpisodeKind::evasive_c2;
  Budgets budgets;
  bool feasible = true;
};

struct Split {
  double burn_in_frac = 0.6;
  double valid_frac = 0.0;
  double test_frac = 0.4;

  std::int32_t burn_in_windows(std::int32_t horizon) const;
  std::int32_t test_start(std::int32_t horizon) const;
};

inline constexpr const char* kFeatureContract = "timing+contention-v1";
inline constexpr const char* kHashAlgorithm = "sha256";
inline constexpr const char* kToolVersion = "nosgate 0.3.0";

struct RunManifest {
  std::string world_id;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string hash_algorithm = kHashAlgorithm;
  std::string feature_contract = kFeatureContract;
  Split split;
  std::string tool_version = kToolVersion;
  std::int32_t horizon_windows = 0;
  TimeUs window_us = 250'000;
  double link_capacity_Bps = 0.0;
  SizeBounds size_bounds;
  nlohmann::json config;  // canonical config echo
};

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind { unsorted_timestamp, size_out_of_range, dangling_flow, outside_horizon };

struct Violation {
  std::size_t index = 0;
  ViolationKind kind = ViolationKind::unsorted_timestamp;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool valid() const { return violations.empty(); }
};

ValidationReport validate_trace(const Trace& trace, SizeBounds limits);

// ---------------------------------------------------------------------------
// Hashing

// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);
// Canonical serialization: sorted keys, no whitespace, shortest round-trip
// decimal rendering.
std::string canonical_bytes(const nlohmann::json& config);
std::string manifest_hash(std::string_view config_bytes);

// ---------------------------------------------------------------------------
// On-disk formats

void write_trace_csv(const std::filesystem::path& path, const std::vector<PacketRecord>& packets);
std::vector<PacketRecord> read_trace_csv(const std::filesystem::path& path);

nlohmann::json flows_to_json(const std::vector<FlowInfo>& flows);
std::vector<FlowInfo> flows_from_json(const nlohmann::json& j);

nlohmann::json budgets_to_json(const Budgets& b);
Budgets budgets_from_json(const nlohmann::json& j);

nlohmann::json labels_to_json(const std::vector<EpisodeLabel>& labels);
std::vector<EpisodeLabel> labels_from_json(const nlohmann::json& j);

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
std::string read_file_bytes(const std::filesystem::path& path);

// Infinite reals are stored as the string "inf".
nlohmann::json real_to_json(double v);
double real_from_json(const nlohmann::json& j);

}  // namespace nosgate
