#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpmerge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a configuration or input violates a documented precondition.
/// The message starts with the dotted path of the offending field when one exists.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DegenerateHorizon : public Error {
 public:
  using Error::Error;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Longitudinal state of one vehicle, measured in its own lane's coordinates.
struct VehicleState {
  double position = 0.0;  // m
  double speed = 0.0;     // m/s

  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

/// Control-zone geometry, sampling and CAV limits.
///
/// Candidate positions are given in ramp coordinates (distance from the
/// ramp's control-zone entry). The highway lane is offset by `lane_offset`,
/// so candidate l sits at `candidate_positions[l] + lane_offset` in the
/// highway frame. All candidate indices are zero-based.
struct ZoneConfig {
  double dt = 0.1;
  int horizon_steps = 200;
  std::vector<double> candidate_positions = default_candidates();
  double lane_offset = 0.0;
  double headway = 1.0;  // delta, s
  double v_min = 5.0;
  double v_max = 35.0;
  double u_min = -3.0;
  double u_max = 3.0;
  double epsilon = 0.1;

  static std::vector<double> default_candidates(int count = 10, double first = 100.0,
                                                double spacing = 10.0) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int l = 0; l < count; ++l) out.push_back(first + spacing * l);
    return out;
  }

  int num_candidates() const { return static_cast<int>(candidate_positions.size()); }
  int num_steps() const { return horizon_steps + 1; }
  double horizon_time() const { return horizon_steps * dt; }
  double step_time(int step) const { return static_cast<double>(step) * dt; }
  double highway_candidate(int l) const {
    return candidate_positions[static_cast<std::size_t>(l)] + lane_offset;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ValidationError("zone." + field + ": " + why);
    };
    if (!(dt > 0.0) || !std::isfinite(dt)) fail("dt", "must be positive");
    if (horizon_steps < 1) fail("horizon_steps", "must be at least 1");
    if (candidate_positions.empty()) fail("candidate_positions", "must not be empty");
    for (std::size_t l = 1; l < candidate_positions.size(); ++l) {
      if (!(candidate_positions[l] > candidate_positions[l - 1]))
        fail("candidate_positions", "must be strictly increasing");
    }
    if (candidate_positions.size() > 2) {
      const double spacing = candidate_positions[1] - candidate_positions[0];
      for (std::size_t l = 2; l < candidate_positions.size(); ++l) {
        const double s = candidate_positions[l] - candidate_positions[l - 1];
        if (std::abs(s - spacing) > 1e-9 * std::max(1.0, std::abs(spacing)))
          fail("candidate_positions", "must be equally spaced");
      }
    }
    if (!(headway >= 0.0)) fail("headway", "must be non-negative");
    if (!(v_min > 0.0)) fail("v_min", "must be positive");
    if (!(v_max >= v_min)) fail("v_max", "must be at least v_min");
    if (!(u_min < 0.0)) fail("u_min", "must be negative");
    if (!(u_max > 0.0)) fail("u_max", "must be positive");
    if (!(epsilon > 0.0 && epsilon < 1.0)) fail("epsilon", "must lie in (0, 1)");
  }
};

/// Coefficients of p(t) = a t^3 + b t^2 + c t + d.
struct CubicCoeffs {
  double a = 0.0;  // m/s^3
  double b = 0.0;  // m/s^2
  double c = 0.0;  // m/s
  double d = 0.0;  // m

  friend bool operator==(const CubicCoeffs&, const CubicCoeffs&) = default;
};

struct TrajectoryPoint {
  double position = 0.0;
  double speed = 0.0;
  double accel = 0.0;
};

inline TrajectoryPoint eval_trajectory(const CubicCoeffs& psi, double t) {
  return {((psi.a * t + psi.b) * t + psi.c) * t + psi.d,
          (3.0 * psi.a * t + 2.0 * psi.b) * t + psi.c,
          6.0 * psi.a * t + 2.0 * psi.b};
}

/// Cubic through p(0)=0, v(0)=v0, p(T)=p_m, v(T)=v_m. Time is measured from
/// the planning instant.
inline CubicCoeffs solve_boundary_coeffs(double v0, double p_m, double v_m, double T_m,
                                         double min_horizon) {
  if (!(T_m > 0.0) || T_m < min_horizon * (1.0 - 1e-12)) {
    throw DegenerateHorizon("merge horizon " + std::to_string(T_m) +
                            " s is shorter than one step");
  }
  const double r_pos = p_m - v0 * T_m;
  const double r_vel = v_m - v0;
  const double T2 = T_m * T_m;
  CubicCoeffs psi;
  psi.a = (r_vel * T_m - 2.0 * r_pos) / (T2 * T_m);
  psi.b = (3.0 * r_pos - r_vel * T_m) / T2;
  psi.c = v0;
  psi.d = 0.0;
  return psi;
}

struct TrajectoryExtremes {
  double v_lo = 0.0;
  double v_hi = 0.0;
  double u_lo = 0.0;
  double u_hi = 0.0;
};

/// Exact speed and acceleration range of the cubic over [0, T_m].
inline TrajectoryExtremes trajectory_extremes(const CubicCoeffs& psi, double T_m) {
  const auto start = eval_trajectory(psi, 0.0);
  const auto end = eval_trajectory(psi, T_m);
  TrajectoryExtremes ex;
  ex.v_lo = std::min(start.speed, end.speed);
  ex.v_hi = std::max(start.speed, end.speed);
  if (psi.a != 0.0) {
    const double vertex = -psi.b / (3.0 * psi.a);
    if (vertex > 0.0 && vertex < T_m) {
      const double v = eval_trajectory(psi, vertex).speed;
      ex.v_lo = std::min(ex.v_lo, v);
      ex.v_hi = std::max(ex.v_hi, v);
    }
  }
  ex.u_lo = std::min(start.accel, end.accel);
  ex.u_hi = std::max(start.accel, end.accel);
  return ex;
}

/// Per-candidate arrival times; nullopt means the candidate is not reached
/// within the recorded series.
struct ArrivalTimes {
  std::vector<std::optional<double>> times;

  std::size_t size() const { return times.size(); }
  bool reached(std::size_t l) const { return times[l].has_value(); }
  friend bool operator==(const ArrivalTimes&, const ArrivalTimes&) = default;
};

/// Linear interpolation of the instant a position series crosses `target`
/// between samples k and k+1. Shared by ground-truth extraction and the
/// online passage trackers so both produce bit-identical times.
inline double crossing_time(double t_k, double dt, double p_k, double p_next, double target) {
  return t_k + dt * (target - p_k) / (p_next - p_k);
}

inline std::optional<double> first_crossing(std::span<const double> positions, double dt,
                                            double target, double t0 = 0.0) {
  if (positions.empty()) return std::nullopt;
  if (positions.front() >= target) {
    // Already past the target when the record starts: extrapolate backwards
    // along the first segment.
    if (positions.size() < 2 || positions.front() == target) return t0;
    return crossing_time(t0, dt, positions[0], positions[1], target);
  }
  for (std::size_t k = 0; k + 1 < positions.size(); ++k) {
    if (positions[k + 1] >= target) {
      return crossing_time(t0 + static_cast<double>(k) * dt, dt, positions[k],
                           positions[k + 1], target);
    }
  }
  return std::nullopt;
}

/// Ground-truth arrival times tau^l of a vehicle whose lane is offset by
/// `lane_offset` from the ramp frame the candidates are expressed in.
inline ArrivalTimes arrival_times_from_positions(std::span<const double> positions,
                                                 const ZoneConfig& config, double lane_offset,
                                                 double t0 = 0.0) {
  for (std::size_t k = 0; k + 1 < positions.size(); ++k) {
    if (!(positions[k + 1] > positions[k])) {
      throw ValidationError("positions: series must be strictly increasing (step " +
                            std::to_string(k + 1) + ")");
    }
  }
  ArrivalTimes out;
  out.times.reserve(config.candidate_positions.size());
  for (double candidate : config.candidate_positions) {
    out.times.push_back(first_crossing(positions, config.dt, candidate + lane_offset, t0));
  }
  return out;
}

}  // namespace cpmerge
