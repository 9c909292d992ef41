// Timing projection, size repair and the contention loop of the evasive
// episode generator, plus the post-hoc budget audit.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nosgate/wfq.hpp"
#include "nosgate/worlds.hpp"

namespace nosgate {

double w1_empirical(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::domain_error("w1_empirical: empty sample");
  const std::uint64_t na = a.size();
  const std::uint64_t nb = b.size();
  // Quantile-cell boundaries in units of 1 / (na * nb) so that they compare
  // exactly.
  std::uint64_t i = 0, j = 0, pos = 0;
  long double acc = 0.0L;
  while (i < na && j < nb) {
    const std::uint64_t next_a = (i + 1) * nb;
    const std::uint64_t next_b = (j + 1) * na;
    const std::uint64_t next = std::min(next_a, next_b);
    acc += std::fabs(static_cast<long double>(a[i]) - static_cast<long double>(b[j])) *
           static_cast<long double>(next - pos);
    pos = next;
    if (next_a == next) ++i;
    if (next_b == next) ++j;
  }
  return static_cast<double>(acc / static_cast<long double>(na * nb));
}

double w1_cdf_form(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::domain_error("w1_cdf_form: empty sample");
  std::vector<double> pts(a.begin(), a.end());
  pts.insert(pts.end(), b.begin(), b.end());
  std::sort(pts.begin(), pts.end());
  long double acc = 0.0L;
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    while (ia < a.size() && a[ia] <= pts[k]) ++ia;
    while (ib < b.size() && b[ib] <= pts[k]) ++ib;
    const long double fa = static_cast<long double>(ia) / a.size();
    const long double fb = static_cast<long double>(ib) / b.size();
    acc += std::fabs(fa - fb) * (static_cast<long double>(pts[k + 1]) - pts[k]);
  }
  return static_cast<double>(acc);
}

std::vector<double> window_iats_s(std::span<const PacketRecord> window_packets) {
  std::vector<double> iats;
  for (std::size_t k = 1; k < window_packets.size(); ++k) {
    iats.push_back(static_cast<double>(window_packets[k].ts_us - window_packets[k - 1].ts_us) / 1e6);
  }
  std::sort(iats.begin(), iats.end());
  return iats;
}

void sort_canonical(std::vector<PacketRecord>& packets) {
  std::stable_sort(packets.begin(), packets.end(), [](const PacketRecord& x, const PacketRecord& y) {
    return x.ts_us != y.ts_us ? x.ts_us < y.ts_us : x.flow_id < y.flow_id;
  });
}

// ---------------------------------------------------------------------------

namespace {

struct Candidate {
  std::vector<TimeUs> times;
  double w1 = 0.0;
  bool valid = false;
};

}  // namespace

ProjectionResult project_iats(std::span<const PacketRecord> window_packets, const BenignIatReference& reference,
                              double epsilon_s, TimeUs lo_us, TimeUs hi_us) {
  ProjectionResult result;
  result.packets.assign(window_packets.begin(), window_packets.end());
  const std::size_t n = window_packets.size();
  if (n < 2) return result;
  const auto& ref = reference.sorted_iats_s;
  if (ref.empty()) throw std::domain_error("project_iats: empty reference");

  const std::size_t k = n - 1;
  std::vector<double> gaps_us(k);
  for (std::size_t p = 0; p < k; ++p) {
    gaps_us[p] = static_cast<double>(window_packets[p + 1].ts_us - window_packets[p].ts_us);
  }
  // rank[p] = position of gap p in sorted order (stable on ties).
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return gaps_us[x] < gaps_us[y]; });

  std::vector<double> sorted_s(k);
  for (std::size_t r = 0; r < k; ++r) sorted_s[r] = gaps_us[order[r]] / 1e6;
  result.distortion = w1_empirical(sorted_s, ref);
  if (result.distortion <= epsilon_s) return result;

  // Reference quantile at the centre of each of the k equal-mass cells; this
  // minimizes W1 over k-atom distributions.
  const std::size_t m = ref.size();
  std::vector<double> target_us(k);
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t idx = ((2 * r + 1) * m + 2 * k - 1) / (2 * k) - 1;
    target_us[r] = ref[std::min(idx, m - 1)] * 1e6;
  }

  const TimeUs t0 = window_packets.front().ts_us;
  const TimeUs last_allowed = hi_us - 1;

  auto build = [&](double tau) {
    Candidate c;
    std::vector<double> y(k);
    double total = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      const double x = gaps_us[order[r]];
      y[order[r]] = x + tau * (target_us[r] - x);
      total += y[order[r]];
    }
    const double room = static_cast<double>(last_allowed - t0);
    if (total > room) {
      if (room <= 0.0) return c;
      const double scale = room / total;
      for (auto& g : y) g *= scale;
    }
    c.times.resize(n);
    c.times[0] = t0;
    double cum = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      cum += y[p];
      c.times[p + 1] = t0 + static_cast<TimeUs>(std::llround(cum));
      if (c.times[p + 1] <= c.times[p]) return c;
    }
    if (c.times.back() > last_allowed || t0 < lo_us) return c;
    std::vector<double> iats(k);
    for (std::size_t p = 0; p < k; ++p) iats[p] = static_cast<double>(c.times[p + 1] - c.times[p]) / 1e6;
    std::sort(iats.begin(), iats.end());
    c.w1 = w1_empirical(iats, ref);
    c.valid = true;
    return c;
  };

  Candidate best = build(1.0);
  if (!best.valid || best.w1 > epsilon_s) {
    result.feasible = false;
    return result;
  }
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 60 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    Candidate c = build(mid);
    if (c.valid && c.w1 <= epsilon_s) {
      hi = mid;
      best = std::move(c);
    } else {
      lo = mid;
    }
  }
  for (std::size_t p = 0; p < n; ++p) result.packets[p].ts_us = best.times[p];
  result.changed = true;
  result.distortion = best.w1;
  return result;
}

RepairResult repair_sizes(std::span<const PacketRecord> flow_packets, std::int64_t r_min_bytes, SizeBounds bounds) {
  RepairResult result;
  result.packets.assign(flow_packets.begin(), flow_packets.end());
  std::int64_t total = 0;
  for (auto& p : result.packets) {
    p.len_bytes = std::clamp(p.len_bytes, bounds.min_bytes, bounds.max_bytes);
    total += p.len_bytes;
  }
  if (total >= r_min_bytes) return result;
  const auto capacity = static_cast<std::int64_t>(result.packets.size()) * bounds.max_bytes;
  if (capacity < r_min_bytes) {
    result.floor_reachable = false;
    return result;
  }
  const std::int64_t deficit = r_min_bytes - total;
  const std::int64_t headroom = capacity - total;
  std::int64_t added = 0;
  for (auto& p : result.packets) {
    const std::int64_t h = bounds.max_bytes - p.len_bytes;
    const auto inc = static_cast<std::int64_t>((static_cast<__int128>(h) * deficit) / headroom);
    p.len_bytes += static_cast<std::int32_t>(inc);
    added += inc;
  }
  for (auto& p : result.packets) {
    if (added >= deficit) break;
    if (p.len_bytes < bounds.max_bytes) {
      ++p.len_bytes;
      ++added;
    }
  }
  return result;
}

double mean_window_distortion(std::span<const PacketRecord> episode_packets, const BenignIatReference& reference,
                              TimeUs window_us) {
  double sum = 0.0;
  std::size_t windows = 0;
  std::size_t i = 0;
  while (i < episode_packets.size()) {
    const auto w = episode_packets[i].ts_us / window_us;
    std::size_t j = i;
    while (j < episode_packets.size() && episode_packets[j].ts_us / window_us == w) ++j;
    if (j - i >= 2) {
      const auto iats = window_iats_s(episode_packets.subspan(i, j - i));
      sum += w1_empirical(iats, reference.sorted_iats_s);
      ++windows;
    }
    i = j;
  }
  return windows == 0 ? 0.0 : sum / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------

namespace {

// Per-window projection followed by size repair. Returns a failure reason or
// an empty string.
std::string shape_episode(std::vector<PacketRecord>& packets, const EpisodeContext& ctx, const Budgets& budgets) {
  if (std::isfinite(budgets.epsilon_s)) {
    std::size_t i = 0;
    while (i < packets.size()) {
      const TimeUs w = packets[i].ts_us / ctx.window_us;
      std::size_t j = i;
      while (j < packets.size() && packets[j].ts_us / ctx.window_us == w) ++j;
      if (j - i >= 2) {
        auto proj = project_iats(std::span<const PacketRecord>(packets).subspan(i, j - i), ctx.reference,
                                 budgets.epsilon_s, w * ctx.window_us, (w + 1) * ctx.window_us);
        if (!proj.feasible) return "projection_infeasible";
        std::copy(proj.packets.begin(), proj.packets.end(), packets.begin() + static_cast<std::ptrdiff_t>(i));
      }
      i = j;
    }
  }
  auto repaired = repair_sizes(packets, budgets.r_min_bytes, ctx.bounds);
  packets = std::move(repaired.packets);
  if (!repaired.floor_reachable) return "floor_unreachable";
  return {};
}

double mean_delay_or_zero(const std::vector<PacketRecord>& packets, double capacity) {
  if (packets.empty()) return 0.0;
  const auto events = replay_domain(packets, WeightSchedule(1.0), capacity);
  return clique_mean_delay(events);
}

}  // namespace

EpisodeResult enforce_contention(std::vector<PacketRecord> proposal, const EpisodeContext& ctx,
                                 const Budgets& budgets, std::int32_t i_max) {
  EpisodeResult res;
  auto& out = res.outcome;
  out.flow_id = ctx.flow_id;
  out.budgets = budgets;

  auto packets = std::move(proposal);
  for (auto& p : packets) {
    p.flow_id = ctx.flow_id;
    p.clique_id = ctx.clique_id;
  }
  std::sort(packets.begin(), packets.end(), [](const auto& a, const auto& b) { return a.ts_us < b.ts_us; });

  const double d_ben = mean_delay_or_zero(ctx.background, ctx.capacity_Bps);
  auto delay_delta = [&] {
    if (packets.empty()) return 0.0;
    std::vector<PacketRecord> merged = ctx.background;
    merged.insert(merged.end(), packets.begin(), packets.end());
    sort_canonical(merged);
    return mean_delay_or_zero(merged, ctx.capacity_Bps) - d_ben;
  };

  Rng rng(ctx.seed);
  std::string reason = shape_episode(packets, ctx, budgets);
  double delta = reason.empty() ? delay_delta() : 0.0;
  std::int32_t iter = 0;
  while (reason.empty()) {
    if (delta <= budgets.delta_q_s) break;
    if (iter == i_max) {
      reason = "contention_exceeded";
      break;
    }
    ++iter;
    // Thin: keep floor(factor * n) packets chosen uniformly at random.
    const std::size_t n = packets.size();
    const auto keep = static_cast<std::size_t>(std::floor(ctx.thinning_factor * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t r = 0; r < keep; ++r) std::swap(idx[r], idx[r + rng.below(n - r)]);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    std::vector<PacketRecord> kept;
    kept.reserve(keep);
    for (auto k : idx) kept.push_back(packets[k]);
    packets = std::move(kept);
    reason = shape_episode(packets, ctx, budgets);
    if (reason.empty()) delta = delay_delta();
  }

  out.feasible = reason.empty();
  out.reason = reason;
  out.iterations_used = iter;
  out.final_distortion = mean_window_distortion(packets, ctx.reference, ctx.window_us);
  out.final_delay_delta = delay_delta();
  res.packets = std::move(packets);
  return res;
}

// ---------------------------------------------------------------------------

BudgetAudit audit_episode(const Trace& trace, const EpisodeLabel& label, const BenignIatReference& reference,
                          double capacity_Bps) {
  BudgetAudit audit;
  audit.flow_id = label.flow_id;
  const TimeUs begin = static_cast<TimeUs>(label.start_window) * trace.window_us;
  const TimeUs end = static_cast<TimeUs>(label.end_window + 1) * trace.window_us;
  if (label.flow_id < 0 || static_cast<std::size_t>(label.flow_id) >= trace.flows.size()) {
    throw std::domain_error("audit_episode: unknown flow " + std::to_string(label.flow_id));
  }
  const auto clique = trace.flows[static_cast<std::size_t>(label.flow_id)].clique_id;

  auto in_episode = [&](const PacketRecord& p) {
    return p.flow_id == label.flow_id && p.ts_us >= begin && p.ts_us < end;
  };

  std::vector<PacketRecord> episode, with_attack, without_attack;
  for (const auto& p : trace.packets) {
    if (p.clique_id != clique) continue;
    with_attack.push_back(p);
    if (in_episode(p)) {
      episode.push_back(p);
    } else {
      without_attack.push_back(p);
    }
  }

  for (const auto& p : episode) audit.span_bytes += p.len_bytes;
  audit.floor_ok = audit.span_bytes >= label.budgets.r_min_bytes;

  // Timing distortion, CDF route.
  double sum = 0.0;
  std::size_t i = 0;
  while (i < episode.size()) {
    const auto w = episode[i].ts_us / trace.window_us;
    std::size_t j = i;
    while (j < episode.size() && episode[j].ts_us / trace.window_us == w) ++j;
    if (j - i >= 2) {
      std::vector<double> iats;
      for (std::size_t k = i + 1; k < j; ++k) iats.push_back(static_cast<double>(episode[k].ts_us - episode[k - 1].ts_us) / 1e6);
      std::sort(iats.begin(), iats.end());
      sum += w1_cdf_form(iats, reference.sorted_iats_s);
      ++audit.timing_windows;
    }
    i = j;
  }
  audit.mean_w1_s = audit.timing_windows == 0 ? 0.0 : sum / audit.timing_windows;
  audit.timing_ok = !std::isfinite(label.budgets.epsilon_s) || audit.mean_w1_s <= label.budgets.epsilon_s + 1e-9;

  auto mean_delay = [&](const std::vector<PacketRecord>& pk) {
    if (pk.empty()) return 0.0;
    return clique_mean_delay(replay_domain(pk, WeightSchedule(1.0), capacity_Bps));
  };
  audit.delay_delta_s = episode.empty() ? 0.0 : mean_delay(with_attack) - mean_delay(without_attack);
  audit.contention_ok =
      !std::isfinite(label.budgets.delta_q_s) || audit.delay_delta_s <= label.budgets.delta_q_s + 1e-6;
  return audit;
}

}  // namespace nosgate
