#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "nosgate/trace.hpp"

namespace testutil {

// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("nosgate_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path config(const std::string& name) { return std::filesystem::path(NOSGATE_CONFIG_DIR) / name; }

inline nosgate::PacketRecord pkt(nosgate::TimeUs ts, nosgate::FlowId f, std::int32_t len, std::int32_t clique = 0) {
  return {ts, f, len, clique};
}

}  // namespace testutil
