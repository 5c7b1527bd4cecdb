#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cpmerge/core.hpp"

namespace cpmerge {

/// Hidden per-driver parameters of the simulated human driver. Never exposed
/// to the controller.
struct DriverParams {
  double rho = 0.0;         // altruism level, m/s^2
  double alpha = 0.005;     // sensitivity to the CAV, 1/m^2
  double idm_v0 = 30.0;     // desired speed
  double idm_T = 1.5;       // desired time headway
  double idm_s0 = 2.0;      // minimum gap
  double idm_a = 1.5;       // maximum acceleration
  double idm_b = 2.0;       // comfortable deceleration
  double noise_std = 0.1;   // std of the per-step driving impulse
  double length = 5.0;      // vehicle length used for bumper-to-bumper gaps
  double accel_min = -9.0;  // IDM output clamp
  double accel_max = 3.0;

  void validate(const std::string& path = "driver") const {
    auto fail = [&](const char* field, const char* why) {
      throw ValidationError(path + "." + field + ": " + why);
    };
    if (!(rho >= 0.0)) fail("rho", "must be non-negative");
    if (!(alpha >= 0.0)) fail("alpha", "must be non-negative");
    if (!(noise_std >= 0.0)) fail("noise_std", "must be non-negative");
    if (!(idm_v0 > 0.0)) fail("idm_v0", "must be positive");
    if (!(idm_T > 0.0)) fail("idm_T", "must be positive");
    if (!(idm_s0 > 0.0)) fail("idm_s0", "must be positive");
    if (!(idm_a > 0.0)) fail("idm_a", "must be positive");
    if (!(idm_b > 0.0)) fail("idm_b", "must be positive");
    if (!(length >= 0.0)) fail("length", "must be non-negative");
    if (!(accel_min < 0.0 && accel_max > 0.0)) fail("accel_min", "clamp must bracket zero");
  }
};

/// Treiber IDM with exponent 4. The leader state is in the same lane frame.
inline double idm_accel(const VehicleState& own, const std::optional<VehicleState>& leader,
                        const DriverParams& p) {
  const double free_term = std::pow(own.speed / p.idm_v0, 4);
  double interaction = 0.0;
  if (leader) {
    const double gap = leader->position - own.position - p.length;
    if (gap <= 0.0) return p.accel_min;
    const double approach = own.speed - leader->speed;
    const double desired =
        p.idm_s0 + std::max(0.0, own.speed * p.idm_T +
                                     own.speed * approach / (2.0 * std::sqrt(p.idm_a * p.idm_b)));
    interaction = (desired / gap) * (desired / gap);
  }
  const double u = p.idm_a * (1.0 - free_term - interaction);
  return std::clamp(u, p.accel_min, p.accel_max);
}

/// Yielding deceleration rho * exp(-alpha * dp^2); the caller subtracts it.
inline double altruism_decrement(double delta_p, double rho, double alpha) {
  return rho * std::exp(-alpha * delta_p * delta_p);
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  template <class Rng>
  double sample(Rng& rng) const {
    if (hi == lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  bool valid() const { return std::isfinite(lo) && std::isfinite(hi) && lo <= hi; }
};

/// Distribution every scenario is drawn from. HDV 0 is the front-most vehicle
/// on the highway; HDV n follows HDV n-1.
struct ScenarioTemplate {
  int min_hdvs = 3;
  int max_hdvs = 4;
  Range lead_position{-40.0, 20.0};  // highway frame
  Range gap{30.0, 90.0};             // bumper-to-bumper gap to the vehicle ahead
  Range speed{24.0, 32.0};
  Range idm_v0{25.0, 35.0};
  Range idm_T{1.5, 1.5};
  Range idm_s0{2.0, 2.0};
  Range idm_a{1.5, 1.5};
  Range idm_b{2.0, 2.0};
  Range rho{0.0, 2.0};
  Range alpha{0.005, 0.005};
  Range noise_std{0.1, 0.1};
  double vehicle_length = 5.0;
  bool with_cav = true;
  double cav_position = 0.0;  // ramp frame
  Range cav_speed{15.0, 25.0};
  Range cav_target_speed{15.0, 30.0};

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ValidationError("scenario." + field + ": " + why);
    };
    if (min_hdvs < 0 || max_hdvs < min_hdvs) fail("min_hdvs", "need 0 <= min_hdvs <= max_hdvs");
    const std::pair<const char*, const Range*> ranges[] = {
        {"lead_position", &lead_position}, {"gap", &gap},         {"speed", &speed},
        {"idm_v0", &idm_v0},               {"idm_T", &idm_T},     {"idm_s0", &idm_s0},
        {"idm_a", &idm_a},                 {"idm_b", &idm_b},     {"rho", &rho},
        {"alpha", &alpha},                 {"noise_std", &noise_std},
        {"cav_speed", &cav_speed},         {"cav_target_speed", &cav_target_speed}};
    for (const auto& [name, r] : ranges) {
      if (!r->valid()) fail(name, "range must be finite with lo <= hi");
    }
    if (!(speed.lo > 0.0)) fail("speed", "initial speeds must be positive");
    if (!(idm_v0.lo > 0.0 && idm_T.lo > 0.0 && idm_s0.lo > 0.0 && idm_a.lo > 0.0 &&
          idm_b.lo > 0.0))
      fail("idm_*", "IDM parameters must be strictly positive");
    if (rho.lo < 0.0 || alpha.lo < 0.0 || noise_std.lo < 0.0)
      fail("rho", "rho, alpha and noise_std must be non-negative");
    if (gap.lo < idm_s0.hi) fail("gap", "minimum gap range violates the IDM minimum gap s0");
    if (with_cav && !(cav_speed.lo > 0.0)) fail("cav_speed", "must be positive");
  }
};

struct Scenario {
  std::uint64_t seed = 0;
  std::vector<VehicleState> hdv_initial;  // highway frame, front-most first
  std::vector<DriverParams> drivers;
  std::optional<VehicleState> cav_initial;  // ramp frame
  double cav_target_speed = 20.0;           // used by the data-collection cruise policy
};

inline std::uint64_t mix_seed(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Draws one scenario; scenarios with different seeds are i.i.d. draws from
/// the template, which is what makes calibration trajectories exchangeable.
inline Scenario sample_scenario(std::uint64_t seed, const ScenarioTemplate& tmpl) {
  tmpl.validate();
  std::mt19937_64 rng(mix_seed(seed));
  Scenario sc;
  sc.seed = seed;
  const int count = tmpl.min_hdvs == tmpl.max_hdvs
                        ? tmpl.min_hdvs
                        : std::uniform_int_distribution<int>(tmpl.min_hdvs, tmpl.max_hdvs)(rng);
  double position = tmpl.lead_position.sample(rng);
  for (int n = 0; n < count; ++n) {
    if (n > 0) position -= tmpl.vehicle_length + tmpl.gap.sample(rng);
    DriverParams d;
    d.idm_v0 = tmpl.idm_v0.sample(rng);
    d.idm_T = tmpl.idm_T.sample(rng);
    d.idm_s0 = tmpl.idm_s0.sample(rng);
    d.idm_a = tmpl.idm_a.sample(rng);
    d.idm_b = tmpl.idm_b.sample(rng);
    d.rho = tmpl.rho.sample(rng);
    d.alpha = tmpl.alpha.sample(rng);
    d.noise_std = tmpl.noise_std.sample(rng);
    d.length = tmpl.vehicle_length;
    const double speed = std::min(tmpl.speed.sample(rng), d.idm_v0);
    sc.hdv_initial.push_back({position, speed});
    sc.drivers.push_back(d);
  }
  if (tmpl.with_cav) {
    sc.cav_initial = VehicleState{tmpl.cav_position, tmpl.cav_speed.sample(rng)};
    sc.cav_target_speed = tmpl.cav_target_speed.sample(rng);
  }
  return sc;
}

/// What HDV n sees: leader, itself, follower, CAV, all in the highway frame.
using RawObservation = std::array<VehicleState, 4>;

inline constexpr double kSentinelDistance = 1000.0;
inline constexpr double kMinHdvSpeed = 0.01;

/// Step-by-step simulator of one scenario. Copyable: a copy carries the full
/// state including the disturbance generator, so a fork replays exactly the
/// future the original would see under the same CAV inputs.
class Simulator {
 public:
  Simulator(const ZoneConfig& config, const Scenario& scenario, std::uint64_t noise_seed)
      : config_(config),
        drivers_(scenario.drivers),
        hdvs_(scenario.hdv_initial),
        cav_(scenario.cav_initial),
        rng_(mix_seed(noise_seed ^ 0xA5A5A5A5DEADBEEFULL)) {
    if (drivers_.size() != hdvs_.size())
      throw ValidationError("scenario.drivers: one parameter set per HDV required");
    for (std::size_t n = 0; n < drivers_.size(); ++n)
      drivers_[n].validate("scenario.drivers[" + std::to_string(n) + "]");
    last_hdv_accel_.assign(hdvs_.size(), 0.0);
  }

  const ZoneConfig& config() const { return config_; }
  int step_index() const { return step_; }
  double time() const { return config_.step_time(step_); }
  std::size_t num_hdvs() const { return hdvs_.size(); }
  const std::vector<VehicleState>& hdvs() const { return hdvs_; }
  const std::vector<DriverParams>& drivers() const { return drivers_; }
  const std::optional<VehicleState>& cav() const { return cav_; }
  bool collided() const { return collided_; }
  const std::vector<double>& last_hdv_accels() const { return last_hdv_accel_; }
  double last_cav_accel() const { return last_cav_accel_; }

  /// CAV position projected onto the highway frame.
  std::optional<double> cav_highway_position() const {
    if (!cav_) return std::nullopt;
    return cav_->position + config_.lane_offset;
  }

  RawObservation observation(std::size_t n) const {
    return make_observation(hdvs_, cav_highway_state(), n);
  }

  std::optional<VehicleState> cav_highway_state() const {
    if (!cav_) return std::nullopt;
    return VehicleState{cav_->position + config_.lane_offset, cav_->speed};
  }

  static RawObservation make_observation(const std::vector<VehicleState>& hdvs,
                                         const std::optional<VehicleState>& cav_highway,
                                         std::size_t n) {
    const VehicleState self = hdvs[n];
    RawObservation o;
    o[0] = n > 0 ? hdvs[n - 1] : VehicleState{self.position + kSentinelDistance, self.speed};
    o[1] = self;
    o[2] = n + 1 < hdvs.size() ? hdvs[n + 1]
                               : VehicleState{self.position - kSentinelDistance, self.speed};
    o[3] = cav_highway ? *cav_highway
                       : VehicleState{self.position + kSentinelDistance, self.speed};
    return o;
  }

  /// Advances one step. `cav_accel` is ignored when the scenario has no CAV.
  /// Returns false once a collision has been detected.
  bool step(double cav_accel) {
    if (collided_) return false;
    const double dt = config_.dt;
    const auto cav_hw = cav_highway_position();
    std::vector<double> accel(hdvs_.size());
    for (std::size_t n = 0; n < hdvs_.size(); ++n) {
      const DriverParams& d = drivers_[n];
      std::optional<VehicleState> leader;
      if (n > 0) leader = hdvs_[n - 1];
      double u = idm_accel(hdvs_[n], leader, d);
      if (cav_hw) u -= altruism_decrement(hdvs_[n].position - *cav_hw, d.rho, d.alpha);
      // Drawn unconditionally so the stream layout does not depend on noise_std.
      const double w = normal_(rng_);
      u += d.noise_std * w;
      accel[n] = u;
    }
    for (std::size_t n = 0; n < hdvs_.size(); ++n) {
      VehicleState& s = hdvs_[n];
      double u = accel[n];
      if (s.speed + u * dt < kMinHdvSpeed) u = (kMinHdvSpeed - s.speed) / dt;
      s.position += s.speed * dt + 0.5 * u * dt * dt;
      s.speed += u * dt;
      accel[n] = u;
    }
    last_hdv_accel_ = std::move(accel);
    if (cav_) {
      cav_->position += cav_->speed * dt + 0.5 * cav_accel * dt * dt;
      cav_->speed += cav_accel * dt;
      last_cav_accel_ = cav_accel;
    }
    ++step_;
    for (std::size_t n = 1; n < hdvs_.size(); ++n) {
      if (hdvs_[n - 1].position - hdvs_[n].position - drivers_[n].length <= 0.0) collided_ = true;
    }
    return !collided_;
  }

 private:
  ZoneConfig config_;
  std::vector<DriverParams> drivers_;
  std::vector<VehicleState> hdvs_;
  std::optional<VehicleState> cav_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::vector<double> last_hdv_accel_;
  double last_cav_accel_ = 0.0;
  int step_ = 0;
  bool collided_ = false;
};

/// Step-wise CAV control source. Called with the simulator state before the step.
using CavPolicy = std::function<double(const Simulator&)>;

/// Proportional speed tracking toward a target, clamped to the CAV limits.
/// Used to drive the CAV while collecting training data.
inline CavPolicy cruise_policy(double target_speed, const ZoneConfig& config, double gain = 0.5) {
  return [=](const Simulator& sim) {
    const double v = sim.cav() ? sim.cav()->speed : 0.0;
    return std::clamp(gain * (target_speed - v), config.u_min, config.u_max);
  };
}

/// One simulated episode. HDV series are in the highway frame, the CAV series
/// in the ramp frame. Accelerations at index k are those applied from k to k+1
/// (the final entry is 0).
struct ScenarioTrace {
  std::uint64_t seed = 0;
  ZoneConfig config;
  std::vector<std::vector<VehicleState>> hdv_states;
  std::vector<std::vector<double>> hdv_accels;
  std::vector<ArrivalTimes> arrivals;
  std::optional<std::vector<VehicleState>> cav_states;
  std::vector<double> cav_accels;
  bool collision = false;

  std::size_t num_hdvs() const { return hdv_states.size(); }
  int steps() const {
    if (!hdv_states.empty()) return static_cast<int>(hdv_states.front().size());
    if (cav_states) return static_cast<int>(cav_states->size());
    return 0;
  }

  std::vector<double> hdv_positions(std::size_t n) const {
    std::vector<double> out;
    out.reserve(hdv_states[n].size());
    for (const auto& s : hdv_states[n]) out.push_back(s.position);
    return out;
  }

  RawObservation observation(std::size_t n, int step) const {
    std::vector<VehicleState> row;
    row.reserve(hdv_states.size());
    for (const auto& series : hdv_states) row.push_back(series[static_cast<std::size_t>(step)]);
    std::optional<VehicleState> cav;
    if (cav_states) {
      const auto& c = (*cav_states)[static_cast<std::size_t>(step)];
      cav = VehicleState{c.position + config.lane_offset, c.speed};
    }
    return Simulator::make_observation(row, cav, n);
  }

  /// Recomputes every HDV's arrival times from its position series.
  void compute_arrivals() {
    arrivals.clear();
    for (std::size_t n = 0; n < hdv_states.size(); ++n) {
      const auto pos = hdv_positions(n);
      arrivals.push_back(arrival_times_from_positions(pos, config, config.lane_offset));
    }
  }
};

/// Records the simulator's current state into the trace.
inline void record_state(ScenarioTrace& trace, const Simulator& sim) {
  for (std::size_t n = 0; n < sim.num_hdvs(); ++n) trace.hdv_states[n].push_back(sim.hdvs()[n]);
  if (trace.cav_states) trace.cav_states->push_back(*sim.cav());
}

/// Runs the scenario for the full horizon (or until a collision). With no
/// policy the CAV, if present, holds its speed.
inline ScenarioTrace rollout(const Scenario& scenario, const CavPolicy& policy,
                             const ZoneConfig& config, std::uint64_t noise_seed) {
  Simulator sim(config, scenario, noise_seed);
  ScenarioTrace trace;
  trace.seed = scenario.seed;
  trace.config = config;
  trace.hdv_states.assign(sim.num_hdvs(), {});
  trace.hdv_accels.assign(sim.num_hdvs(), {});
  if (sim.cav()) trace.cav_states.emplace();
  record_state(trace, sim);
  for (int k = 0; k < config.horizon_steps; ++k) {
    const double u = (sim.cav() && policy) ? policy(sim) : 0.0;
    const bool ok = sim.step(u);
    for (std::size_t n = 0; n < sim.num_hdvs(); ++n)
      trace.hdv_accels[n].push_back(sim.last_hdv_accels()[n]);
    if (sim.cav()) trace.cav_accels.push_back(u);
    record_state(trace, sim);
    if (!ok) {
      trace.collision = true;
      break;
    }
  }
  for (auto& a : trace.hdv_accels) a.push_back(0.0);
  if (sim.cav()) trace.cav_accels.push_back(0.0);
  trace.compute_arrivals();
  return trace;
}

/// Data-collection episode: the CAV cruises toward the scenario's target speed.
inline ScenarioTrace rollout_with_cruise(const Scenario& scenario, const ZoneConfig& config) {
  return rollout(scenario, cruise_policy(scenario.cav_target_speed, config), config,
                 scenario.seed);
}

}  // namespace cpmerge
