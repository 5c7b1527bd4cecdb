#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "cpmerge/core.hpp"

namespace cpmerge {

/// Merge plan relative to the planning instant (time 0, CAV position 0).
/// `candidate` is zero-based.
struct MergePlan {
  CubicCoeffs psi;
  double merge_time = 0.0;
  double merge_speed = 0.0;
  int candidate = 0;
  double margin = kInf;  // min over HDVs of |mu - T| - (delta + C)

  friend bool operator==(const MergePlan&, const MergePlan&) = default;
};

/// Arrival forecast of one HDV, in seconds relative to the planning instant.
/// `observed[l]` marks passages already seen; those carry no uncertainty.
struct HdvForecast {
  std::vector<double> arrival;
  std::vector<bool> observed;
};

struct TimeInterval {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const TimeInterval&, const TimeInterval&) = default;
};

/// Merge times ruled out by the headway constraint, per candidate. Open
/// intervals for the conformal surrogate constraint, closed for the strict
/// ground-truth constraint.
struct ForbiddenSet {
  std::vector<std::vector<TimeInterval>> per_candidate;
  bool closed = false;

  bool contains(int l, double T) const {
    for (const auto& iv : per_candidate[static_cast<std::size_t>(l)]) {
      if (closed ? (T >= iv.lo && T <= iv.hi) : (T > iv.lo && T < iv.hi)) return true;
    }
    return false;
  }
};

inline std::vector<TimeInterval> merge_intervals(std::vector<TimeInterval> ivs, bool closed) {
  std::sort(ivs.begin(), ivs.end(), [](const TimeInterval& a, const TimeInterval& b) {
    return a.lo < b.lo || (a.lo == b.lo && a.hi < b.hi);
  });
  std::vector<TimeInterval> out;
  for (const auto& iv : ivs) {
    if (!out.empty() && (iv.lo < out.back().hi || (closed && iv.lo == out.back().hi))) {
      out.back().hi = std::max(out.back().hi, iv.hi);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

/// Union over HDVs of (mu - delta - C, mu + delta + C) per candidate, merged.
/// Observed passages use C = 0. `closed` selects closed intervals.
inline ForbiddenSet forbidden_intervals(std::span<const HdvForecast> hdvs,
                                        std::span<const double> bounds, double delta,
                                        bool closed = false) {
  ForbiddenSet fs;
  fs.closed = closed;
  fs.per_candidate.resize(bounds.size());
  for (std::size_t l = 0; l < bounds.size(); ++l) {
    std::vector<TimeInterval> ivs;
    for (const auto& f : hdvs) {
      const double c = f.observed[l] ? 0.0 : bounds[l];
      const double w = delta + c;
      if (w == kInf) {
        ivs.push_back({-kInf, kInf});
      } else {
        ivs.push_back({f.arrival[l] - w, f.arrival[l] + w});
      }
    }
    fs.per_candidate[l] = merge_intervals(std::move(ivs), closed);
  }
  return fs;
}

/// Slack on the kinematic limits to absorb rounding in the cubic solve.
inline constexpr double kKinematicTolerance = 1e-9;

/// True iff the boundary-value cubic keeps speed and acceleration within the
/// CAV limits over [0, T_m].
inline bool kinematic_feasible(double v0, double p_m, double T_m, double v_m, const ZoneConfig& config) {
  if (!(T_m > 0.0)) return false;
  const auto psi = solve_boundary_coeffs(v0, p_m, v_m, T_m, 0.0);
  const auto ex = trajectory_extremes(psi, T_m);
  const double tol = kKinematicTolerance;
  return ex.v_lo >= config.v_min - tol && ex.v_hi <= config.v_max + tol &&
         ex.u_lo >= config.u_min - tol && ex.u_hi <= config.u_max + tol;
}

struct PlannerSettings {
  double speed_step = 0.25;      // m/s resolution of the merge-speed grid
  double nudge_fraction = 1e-3;  // interval endpoints are shifted by dt * this
};

/// Merge-speed grid v_min, v_min + step, ..., up to v_max.
inline std::vector<double> merge_speed_grid(const ZoneConfig& config, const PlannerSettings& settings) {
  std::vector<double> out;
  const double span = config.v_max - config.v_min;
  const auto n = static_cast<long>(std::floor(span / settings.speed_step + 1e-9));
  for (long k = 0; k <= n; ++k) out.push_back(config.v_min + settings.speed_step * static_cast<double>(k));
  return out;
}

struct PlanningProblem {
  VehicleState cav;                    // ramp frame
  std::span<const HdvForecast> hdvs;   // relative times
  std::span<const double> bounds;      // C^l at the planning step
  double max_merge_time = 0.0;         // latest admissible T^m
  std::optional<double> warm_start;    // previous plan's T^m shifted to now
  bool strict = false;                 // ground-truth constraint |T - tau| > delta
};

/// Merge-time candidates: multiples of dt from the kinematic lower bound to the
/// limit, upper endpoints of forbidden intervals plus a nudge, and the warm
/// start. Sorted, unique.
inline std::vector<double> merge_time_candidates(double distance, const ForbiddenSet& fs, int l,
                                                 const PlanningProblem& prob, const ZoneConfig& config,
                                                 const PlannerSettings& settings) {
  std::vector<double> out;
  const double lower = std::max(config.dt, distance / config.v_max);
  const auto k0 = std::max(1L, static_cast<long>(std::floor(lower / config.dt)));
  for (long k = k0;; ++k) {
    const double T = static_cast<double>(k) * config.dt;
    if (T > prob.max_merge_time) break;
    out.push_back(T);
  }
  const double nudge = config.dt * settings.nudge_fraction;
  for (const auto& iv : fs.per_candidate[static_cast<std::size_t>(l)]) {
    const double T = iv.hi + nudge;
    if (std::isfinite(T) && T >= config.dt && T <= prob.max_merge_time) out.push_back(T);
  }
  if (prob.warm_start && *prob.warm_start >= config.dt && *prob.warm_start <= prob.max_merge_time)
    out.push_back(*prob.warm_start);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline double plan_margin(std::span<const HdvForecast> hdvs, std::span<const double> bounds, double delta,
                          int l, double T) {
  double margin = kInf;
  for (const auto& f : hdvs) {
    const auto li = static_cast<std::size_t>(l);
    const double c = f.observed[li] ? 0.0 : bounds[li];
    margin = std::min(margin, std::abs(f.arrival[li] - T) - (delta + c));
  }
  return margin;
}

/// Minimum-time merge over (T^m, v_m, candidate) on the discrete grid.
/// Ties: larger margin, then smaller candidate, then larger merge speed.
inline std::optional<MergePlan> solve_merge(const PlanningProblem& prob, const ZoneConfig& config,
                                            const PlannerSettings& settings = {}) {
  const auto fs = forbidden_intervals(prob.hdvs, prob.bounds, config.headway, prob.strict);
  const auto speeds = merge_speed_grid(config, settings);
  std::optional<MergePlan> best;
  for (int l = 0; l < config.num_candidates(); ++l) {
    const double distance = config.candidate_positions[static_cast<std::size_t>(l)] - prob.cav.position;
    if (distance <= 0.0) continue;
    for (double T : merge_time_candidates(distance, fs, l, prob, config, settings)) {
      if (best && T > best->merge_time) break;
      if (fs.contains(l, T)) continue;
      // Mean speed must lie within the limits for any admissible profile.
      const double mean = distance / T;
      if (mean > config.v_max + kKinematicTolerance || mean < config.v_min - kKinematicTolerance)
        continue;
      std::optional<double> vm;
      for (auto it = speeds.rbegin(); it != speeds.rend(); ++it) {
        if (kinematic_feasible(prob.cav.speed, distance, T, *it, config)) {
          vm = *it;
          break;
        }
      }
      if (!vm) continue;
      MergePlan plan;
      plan.merge_time = T;
      plan.merge_speed = *vm;
      plan.candidate = l;
      plan.psi = solve_boundary_coeffs(prob.cav.speed, distance, *vm, T, 0.0);
      plan.margin = plan_margin(prob.hdvs, prob.bounds, config.headway, l, T);
      const bool better = !best || T < best->merge_time ||
                          (T == best->merge_time && plan.margin > best->margin);
      if (better) best = plan;
      break;  // later T for this candidate cannot improve
    }
  }
  return best;
}

/// Minimum-time merge under the conformal surrogate constraint
/// |mu - T| >= delta + C at the current step.
inline std::optional<MergePlan> solve_problem2(const VehicleState& cav, std::span<const HdvForecast> predictions,
                                               std::span<const double> bounds_row, const ZoneConfig& config,
                                               double max_merge_time, const PlannerSettings& settings = {},
                                               std::optional<double> warm_start = std::nullopt) {
  PlanningProblem prob{cav, predictions, bounds_row, max_merge_time, warm_start, false};
  return solve_merge(prob, config, settings);
}

/// Same search with the true arrival times and |T - tau| > delta.
inline std::optional<MergePlan> solve_problem1_oracle(const VehicleState& cav,
                                                      std::span<const HdvForecast> true_arrivals,
                                                      const ZoneConfig& config, double max_merge_time,
                                                      const PlannerSettings& settings = {},
                                                      std::optional<double> warm_start = std::nullopt) {
  const std::vector<double> zeros(static_cast<std::size_t>(config.num_candidates()), 0.0);
  PlanningProblem prob{cav, true_arrivals, zeros, max_merge_time, warm_start, true};
  return solve_merge(prob, config, settings);
}

}  // namespace cpmerge
