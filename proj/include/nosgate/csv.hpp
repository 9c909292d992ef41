#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nosgate/trace.hpp"

namespace nosgate {

// Line reader for the plain comma-separated formats used on disk (no quoting).
// Every error names the file and line.
class CsvReader {
 public:
  CsvReader(const std::filesystem::path& path, std::string_view header) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open " + path.string());
    if (!std::getline(in_, line_) || line_ != header) fail("expected header " + std::string(header));
  }

  // Advances to the next non-empty record and checks its field count.
  bool next(std::size_t expected_fields) {
    while (std::getline(in_, line_)) {
      ++line_no_;
      if (line_.empty()) continue;
      split();
      if (fields_.size() != expected_fields) fail("expected " + std::to_string(expected_fields) + " fields");
      return true;
    }
    return false;
  }

  std::string_view field(std::size_t i) const { return fields_[i]; }

  template <typename T>
  T get(std::size_t i) const {
    T value{};
    const auto f = fields_[i];
    auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), value);
    if (ec != std::errc() || ptr != f.data() + f.size()) fail("bad field '" + std::string(f) + "'");
    return value;
  }

  // Empty cell reads as nullopt.
  template <typename T>
  std::optional<T> get_optional(std::size_t i) const {
    if (fields_[i].empty()) return std::nullopt;
    return get<T>(i);
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path_.string() + ":" + std::to_string(line_no_) + ": " + what);
  }

 private:
  void split() {
    fields_.clear();
    std::string_view rest(line_);
    while (true) {
      const auto pos = rest.find(',');
      fields_.push_back(rest.substr(0, pos));
      if (pos == std::string_view::npos) break;
      rest.remove_prefix(pos + 1);
    }
  }

  std::filesystem::path path_;
  std::ifstream in_;
  std::string line_;
  std::size_t line_no_ = 1;
  std::vector<std::string_view> fields_;
};

}  // namespace nosgate
