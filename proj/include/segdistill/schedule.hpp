#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "segdistill/common.hpp"

namespace segdistill {

enum class ScheduleKind { linear_beta, cosine };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear_beta ? "linear-beta" : "cosine"; }

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear-beta" || s == "linear_beta") return ScheduleKind::linear_beta;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + s + "' (expected 'linear-beta' or 'cosine')");
}

/// Cumulative signal-fraction schedule alpha_bar[t] for t = 0..S, with
/// alpha_bar[0] = 1 (clean data) and strictly decreasing values in (0, 1].
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> alpha_bar;

  double at(int t) const {
    if (t < 0 || t > steps) throw DataError("timestep " + std::to_string(t) + " outside [0, " +
                                            std::to_string(steps) + "]");
    return alpha_bar[static_cast<std::size_t>(t)];
  }
};

namespace detail {

inline void validate_schedule(const NoiseSchedule& s) {
  if (s.steps < 1) throw ConfigError("schedule needs at least one step");
  if (s.alpha_bar.size() != static_cast<std::size_t>(s.steps) + 1)
    throw ConfigError("schedule length does not match step count");
  if (s.alpha_bar[0] != 1.0) throw ConfigError("schedule must start at alpha_bar = 1");
  for (int t = 1; t <= s.steps; ++t) {
    const double a = s.alpha_bar[static_cast<std::size_t>(t)];
    if (!(a > 0.0) || a > 1.0)
      throw ConfigError("alpha_bar[" + std::to_string(t) + "] = " + format_double(a) + " outside (0, 1]");
    if (a >= s.alpha_bar[static_cast<std::size_t>(t) - 1])
      throw ConfigError("alpha_bar must be strictly decreasing (violated at t = " + std::to_string(t) + ")");
  }
}

}  // namespace detail

/// Builds the cumulative schedule. linear-beta: per-step noise rates beta_i
/// linearly spaced over [beta_start, beta_end] (a single step uses
/// beta_start), alpha_bar[t] = prod_{i<=t} (1 - beta_i). cosine: the
/// squared-cosine profile f(t) = cos^2(((t/S + 0.008)/1.008) * pi/2)
/// normalized to f(0), with per-step rates clipped at 0.999; its continuous
/// alpha_bar curve is step-count independent, so refining S refines the
/// same trajectory.
inline NoiseSchedule build_schedule(ScheduleKind kind, int steps, double beta_start = 1e-4,
                                    double beta_end = 2e-2) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  NoiseSchedule s;
  s.steps = steps;
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  if (kind == ScheduleKind::linear_beta) {
    if (!(beta_start > 0.0) || !(beta_end > 0.0) || beta_start >= 1.0 || beta_end >= 1.0)
      throw ConfigError("beta range must lie inside (0, 1)");
    for (int t = 1; t <= steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
      const double beta = beta_start + (beta_end - beta_start) * frac;
      s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
    }
  } else {
    auto f = [](double u) {
      const double x = (u + 0.008) / 1.008 * 1.5707963267948966192313216916398;
      const double c = std::cos(x);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 1; t <= steps; ++t) {
      const double target = f(static_cast<double>(t) / steps) / f0;
      const double prev = s.alpha_bar[static_cast<std::size_t>(t) - 1];
      const double beta = std::min(1.0 - target / prev, 0.999);
      s.alpha_bar[static_cast<std::size_t>(t)] = prev * (1.0 - beta);
    }
  }
  detail::validate_schedule(s);
  return s;
}

/// A schedule from explicit alpha_bar values for t = 1..S (t = 0 implied).
inline NoiseSchedule schedule_from_alpha_bar(std::vector<double> alpha_tail) {
  NoiseSchedule s;
  s.steps = static_cast<int>(alpha_tail.size());
  s.alpha_bar.assign(1, 1.0);
  s.alpha_bar.insert(s.alpha_bar.end(), alpha_tail.begin(), alpha_tail.end());
  detail::validate_schedule(s);
  return s;
}

}  // namespace segdistill
