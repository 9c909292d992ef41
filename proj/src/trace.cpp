#include "nosgate/trace.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "nosgate/csv.hpp"

namespace nosgate {

std::string to_string(EpisodeKind kind) {
  switch (kind) {
    case EpisodeKind::exfiltration: return "exfiltration";
    case EpisodeKind::beaconing: return "beaconing";
    case EpisodeKind::scan: return "scan";
    case EpisodeKind::evasive_c2: return "evasive_c2";
  }
  return "unknown";
}

EpisodeKind episode_kind_from_string(const std::string& s) {
  if (s == "exfiltration") return EpisodeKind::exfiltration;
  if (s == "beaconing") return EpisodeKind::beaconing;
  if (s == "scan") return EpisodeKind::scan;
  if (s == "evasive_c2") return EpisodeKind::evasive_c2;
  throw ConfigError("unknown episode kind: " + s);
}

std::int32_t Split::burn_in_windows(std::int32_t horizon) const {
  return static_cast<std::int32_t>(std::floor(burn_in_frac * horizon + 1e-9));
}

std::int32_t Split::test_start(std::int32_t horizon) const {
  return burn_in_windows(horizon) + static_cast<std::int32_t>(std::floor(valid_frac * horizon + 1e-9));
}

ValidationReport validate_trace(const Trace& trace, SizeBounds limits) {
  ValidationReport report;
  const auto n_flows = static_cast<FlowId>(trace.flows.size());
  const TimeUs horizon = trace.horizon_us();
  for (std::size_t i = 0; i < trace.packets.size(); ++i) {
    const auto& p = trace.packets[i];
    if (i > 0 && p.ts_us < trace.packets[i - 1].ts_us) {
      report.violations.push_back({i, ViolationKind::unsorted_timestamp,
                                   "timestamp " + std::to_string(p.ts_us) + " precedes " +
                                       std::to_string(trace.packets[i - 1].ts_us)});
    }
    if (p.len_bytes < limits.min_bytes || p.len_bytes > limits.max_bytes) {
      report.violations.push_back(
          {i, ViolationKind::size_out_of_range, "len_bytes " + std::to_string(p.len_bytes) + " out of range"});
    }
    if (p.flow_id < 0 || p.flow_id >= n_flows) {
      report.violations.push_back(
          {i, ViolationKind::dangling_flow, "flow_id " + std::to_string(p.flow_id) + " not in flow table"});
    }
    if (p.ts_us < 0 || (trace.horizon_windows > 0 && p.ts_us >= horizon)) {
      report.violations.push_back(
          {i, ViolationKind::outside_horizon, "ts_us " + std::to_string(p.ts_us) + " outside [0, H*dt)"});
    }
  }
  return report;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string canonical_bytes(const nlohmann::json& config) { return config.dump(); }

std::string manifest_hash(std::string_view config_bytes) { return sha256_hex(config_bytes); }

// ---------------------------------------------------------------------------


void write_trace_csv(const std::filesystem::path& path, const std::vector<PacketRecord>& packets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "ts_us,flow_id,len_bytes,clique_id\n";
  for (const auto& p : packets) {
    out << p.ts_us << ',' << p.flow_id << ',' << p.len_bytes << ',' << p.clique_id << '\n';
  }
}

std::vector<PacketRecord> read_trace_csv(const std::filesystem::path& path) {
  CsvReader csv(path, "ts_us,flow_id,len_bytes,clique_id");
  std::vector<PacketRecord> packets;
  while (csv.next(4)) {
    packets.push_back({csv.get<TimeUs>(0), csv.get<FlowId>(1), csv.get<std::int32_t>(2), csv.get<std::int32_t>(3)});
  }
  return packets;
}

nlohmann::json flows_to_json(const std::vector<FlowInfo>& flows) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const auto& f = flows[i];
    j[std::to_string(i)] = {{"key",
                             {{"src_ip", f.key.src_ip},
                              {"dst_ip", f.key.dst_ip},
                              {"src_port", f.key.src_port},
                              {"dst_port", f.key.dst_port},
                              {"proto", f.key.proto}}},
                            {"device_class", f.device_class},
                            {"label", f.label},
                            {"clique_id", f.clique_id}};
  }
  return j;
}

std::vector<FlowInfo> flows_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("flow table: expected object");
  std::vector<FlowInfo> flows(j.size());
  for (const auto& [id_str, v] : j.items()) {
    std::size_t id = 0;
    auto [ptr, ec] = std::from_chars(id_str.data(), id_str.data() + id_str.size(), id);
    if (ec != std::errc() || id >= flows.size()) throw FormatError("flow table: bad flow id '" + id_str + "'");
    try {
      auto& f = flows[id];
      const auto& k = v.at("key");
      f.key.src_ip = k.at("src_ip").get<std::string>();
      f.key.dst_ip = k.at("dst_ip").get<std::string>();
      f.key.src_port = k.at("src_port").get<std::uint16_t>();
      f.key.dst_port = k.at("dst_port").get<std::uint16_t>();
      f.key.proto = k.at("proto").get<std::uint8_t>();
      f.device_class = v.at("device_class").get<std::string>();
      f.label = v.value("label", std::string("unknown"));
      f.clique_id = v.value("clique_id", 0);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("flow table: flow " + id_str + ": " + e.what());
    }
  }
  return flows;
}

nlohmann::json real_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double real_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
    throw FormatError("expected number or \"inf\", got '" + s + "'");
  }
  if (j.is_null()) return kInf;
  return j.get<double>();
}

nlohmann::json budgets_to_json(const Budgets& b) {
  return {{"r_min_bytes", b.r_min_bytes},
          {"epsilon_s", real_to_json(b.epsilon_s)},
          {"delta_q_s", real_to_json(b.delta_q_s)}};
}

Budgets budgets_from_json(const nlohmann::json& j) {
  Budgets b;
  b.r_min_bytes = j.value("r_min_bytes", std::int64_t{0});
  b.epsilon_s = j.contains("epsilon_s") ? real_from_json(j["epsilon_s"]) : kInf;
  b.delta_q_s = j.contains("delta_q_s") ? real_from_json(j["delta_q_s"]) : kInf;
  if (b.r_min_bytes < 0 || b.epsilon_s < 0 || b.delta_q_s < 0) throw ConfigError("budgets must be nonnegative");
  return b;
}

nlohmann::json labels_to_json(const std::vector<EpisodeLabel>& labels) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : labels) {
    arr.push_back({{"flow_id", l.flow_id},
                   {"start_window", l.start_window},
                   {"end_window", l.end_window},
                   {"kind", to_string(l.kind)},
                   {"budgets", budgets_to_json(l.budgets)},
                   {"feasible", l.feasible}});
  }
  return arr;
}

std::vector<EpisodeLabel> labels_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("labels: expected array");
  std::vector<EpisodeLabel> out;
  for (const auto& v : j) {
    try {
      EpisodeLabel l;
      l.flow_id = v.at("flow_id").get<FlowId>();
      l.start_window = v.at("start_window").get<std::int32_t>();
      l.end_window = v.at("end_window").get<std::int32_t>();
      l.kind = episode_kind_from_string(v.at("kind").get<std::string>());
      l.budgets = budgets_from_json(v.at("budgets"));
      l.feasible = v.at("feasible").get<bool>();
      out.push_back(l);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("labels: ") + e.what());
    }
  }
  return out;
}

nlohmann::json manifest_to_json(const RunManifest& m) {
  return {{"world_id", m.world_id},
          {"seed", m.seed},
          {"config_hash", m.config_hash},
          {"hash_algorithm", m.hash_algorithm},
          {"feature_contract", m.feature_contract},
          {"split", {{"burn_in_frac", m.split.burn_in_frac}, {"valid_frac", m.split.valid_frac}, {"test_frac", m.split.test_frac}}},
          {"tool_version", m.tool_version},
          {"horizon_windows", m.horizon_windows},
          {"window_us", m.window_us},
          {"link_capacity_Bps", m.link_capacity_Bps},
          {"size_bounds", {{"min_bytes", m.size_bounds.min_bytes}, {"max_bytes", m.size_bounds.max_bytes}}},
          {"config", m.config}};
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.world_id = j.at("world_id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.hash_algorithm = j.value("hash_algorithm", std::string(kHashAlgorithm));
    m.feature_contract = j.at("feature_contract").get<std::string>();
    const auto& s = j.at("split");
    m.split = {s.at("burn_in_frac").get<double>(), s.at("valid_frac").get<double>(), s.at("test_frac").get<double>()};
    m.tool_version = j.value("tool_version", std::string());
    m.horizon_windows = j.at("horizon_windows").get<std::int32_t>();
    m.window_us = j.at("window_us").get<TimeUs>();
    m.link_capacity_Bps = j.at("link_capacity_Bps").get<double>();
    m.size_bounds = {j.at("size_bounds").at("min_bytes").get<std::int32_t>(),
                     j.at("size_bounds").at("max_bytes").get<std::int32_t>()};
    m.config = j.value("config", nlohmann::json::object());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace nosgate
