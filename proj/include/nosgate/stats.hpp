#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nosgate {

// 1-based nearest rank ceil(q * n) for q in (0, 1]. The small offset keeps
// decimal q such as 0.999 from rounding up a whole rank (0.999 * 1000 is
// 999.0000000000001 in binary floating point).
inline std::size_t nearest_rank(double q, std::size_t n) {
  if (n == 0) throw std::domain_error("nearest_rank: empty sample");
  auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(r, 1, n);
}

template <typename T>
T nearest_rank_value(std::vector<T> values, double q) {
  if (values.empty()) throw std::domain_error("nearest_rank_value: empty sample");
  const auto r = nearest_rank(q, values.size());
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(r - 1), values.end());
  return values[r - 1];
}

// Shortest round-trip decimal rendering, stable across runs.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace nosgate
