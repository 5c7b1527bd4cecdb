#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <thread>
#include <vector>

#include "cpmerge/conformal.hpp"
#include "cpmerge/core.hpp"
#include "cpmerge/hdv_sim.hpp"
#include "cpmerge/planner.hpp"
#include "cpmerge/predictor.hpp"
#include "cpmerge/stats.hpp"

namespace cpmerge {

/// Where the controller's arrival forecasts come from.
enum class ForecastSource {
  predictor,    // black-box predictor, conformal bounds from the table
  clairvoyant,  // simulator fork: the arrivals that actually follow if the CAV keeps its plan
};

enum class PlanRule {
  conformal,      // surrogate constraint with C^l(t)
  ground_truth,   // strict |T - tau| > delta, C = 0
};

struct LoopOptions {
  ForecastSource source = ForecastSource::predictor;
  PlanRule rule = PlanRule::conformal;
  PlannerSettings planner;
};

struct PlanRecord {
  int step = 0;
  bool feasible = false;
  bool committed = false;  // executing a plan that can no longer be re-solved
  std::optional<MergePlan> plan;
  double accel = 0.0;
};

struct RunResult {
  std::uint64_t seed = 0;
  bool merged = false;
  int merge_step = -1;             // step during which the CAV crossed its candidate
  int candidate = -1;
  double merge_time = kInf;        // realized, seconds since episode start
  std::vector<double> headways;    // per HDV, |T - tau_n| at the executed candidate
  bool violation = false;
  bool collision = false;
  int infeasible_steps = 0;
  int planning_steps = 0;
  double min_planned_margin = kInf;
  std::vector<PlanRecord> plans;
  ScenarioTrace trace;
};

namespace detail {

/// Rolls a copy of the simulator to the end of the horizon with the CAV
/// following `plan` (time-shifted so its origin is the current step), then
/// holding speed. Returns arrival times relative to the current time.
inline std::vector<HdvForecast> clairvoyant_forecast(const Simulator& sim, const ScenarioTrace& history,
                                                     const std::optional<MergePlan>& plan) {
  const ZoneConfig& cfg = sim.config();
  Simulator fork = sim;
  std::vector<std::vector<double>> positions(sim.num_hdvs());
  for (std::size_t n = 0; n < sim.num_hdvs(); ++n) positions[n] = history.hdv_positions(n);
  int elapsed = 0;
  while (fork.step_index() < cfg.horizon_steps && !fork.collided()) {
    double u = 0.0;
    if (plan) {
      const double s = static_cast<double>(elapsed) * cfg.dt;
      if (s < plan->merge_time) u = eval_trajectory(plan->psi, s).accel;
    }
    fork.step(u);
    ++elapsed;
    for (std::size_t n = 0; n < fork.num_hdvs(); ++n) positions[n].push_back(fork.hdvs()[n].position);
  }
  const double now = sim.time();
  std::vector<HdvForecast> out(sim.num_hdvs());
  for (std::size_t n = 0; n < sim.num_hdvs(); ++n) {
    const auto tau = arrival_times_from_positions(positions[n], cfg, cfg.lane_offset);
    out[n].arrival.resize(tau.size());
    out[n].observed.resize(tau.size());
    for (std::size_t l = 0; l < tau.size(); ++l) {
      // Arrivals past the simulated horizon are pushed beyond any admissible merge time.
      const double abs_time = tau.times[l] ? *tau.times[l] : cfg.horizon_time() + 1e6;
      out[n].arrival[l] = abs_time - now;
      out[n].observed[l] = tau.times[l] && *tau.times[l] <= now;
    }
  }
  return out;
}

}  // namespace detail

/// Receding-horizon closed loop: at every step observe, forecast, plan, apply
/// the first control of the plan, advance the simulator. After the merge the
/// episode is simulated to the horizon so the realized headways can be audited
/// against ground truth.
inline RunResult run_closed_loop(const Scenario& scenario, const Predictor* predictor,
                                 const ConformalTable* table, const ZoneConfig& config,
                                 const LoopOptions& options = {}) {
  if (!scenario.cav_initial) throw ValidationError("scenario: closed loop needs a CAV");
  const bool use_table = options.rule == PlanRule::conformal;
  if (options.source == ForecastSource::predictor && !predictor)
    throw ValidationError("loop: predictor forecasts requested without a predictor");
  if (use_table) {
    if (!table) throw ValidationError("loop: conformal rule requires a table");
    if (table->candidates != config.num_candidates())
      throw ValidationError("table: candidate count does not match the zone");
    if (options.source == ForecastSource::predictor && table->fingerprint != predictor->fingerprint())
      throw ValidationError("table: calibrated for a different predictor (fingerprint mismatch)");
  }
  if (options.rule == PlanRule::ground_truth && options.source != ForecastSource::clairvoyant)
    throw ValidationError("loop: the ground-truth rule needs clairvoyant forecasts");

  Simulator sim(config, scenario, scenario.seed);
  RunResult result;
  result.seed = scenario.seed;
  ScenarioTrace& trace = result.trace;
  trace.seed = scenario.seed;
  trace.config = config;
  trace.hdv_states.assign(sim.num_hdvs(), {});
  trace.hdv_accels.assign(sim.num_hdvs(), {});
  trace.cav_states.emplace();
  record_state(trace, sim);

  std::vector<std::unique_ptr<PredictorTrack>> tracks;
  if (options.source == ForecastSource::predictor) {
    for (std::size_t n = 0; n < sim.num_hdvs(); ++n) tracks.push_back(predictor->track());
  }
  const std::vector<double> zero_row(static_cast<std::size_t>(config.num_candidates()), 0.0);

  std::optional<MergePlan> active;  // plan being executed, origin at active_step
  int active_step = 0;
  bool committed = false;

  for (int t = 0; t < config.horizon_steps; ++t) {
    double u = 0.0;
    if (!result.merged) {
      const VehicleState cav = *sim.cav();
      std::vector<HdvForecast> forecasts;
      if (options.source == ForecastSource::predictor) {
        const double now = sim.time();
        for (std::size_t n = 0; n < sim.num_hdvs(); ++n) {
          tracks[n]->observe(sim.observation(n), t);
          const auto pred = tracks[n]->predict();
          HdvForecast f;
          f.observed = pred.observed;
          for (double mu : pred.times) f.arrival.push_back(mu - now);
          forecasts.push_back(std::move(f));
        }
      }
      PlanRecord rec;
      rec.step = t;
      const double elapsed = static_cast<double>(t - active_step) * config.dt;
      if (committed && active) {
        rec.feasible = true;
        rec.committed = true;
        rec.plan = active;
        u = elapsed < active->merge_time ? eval_trajectory(active->psi, elapsed).accel : 0.0;
      } else {
        if (options.source == ForecastSource::clairvoyant) {
          std::optional<MergePlan> shifted;
          if (active) {
            shifted = *active;
            // Re-express the active plan from the current step for the fork.
            shifted->psi = solve_boundary_coeffs(cav.speed,
                                                 config.candidate_positions[static_cast<std::size_t>(active->candidate)] - cav.position,
                                                 active->merge_speed,
                                                 std::max(active->merge_time - elapsed, config.dt), 0.0);
            shifted->merge_time = std::max(active->merge_time - elapsed, config.dt);
          }
          forecasts = detail::clairvoyant_forecast(sim, trace, shifted);
        }
        std::optional<double> warm;
        if (active) warm = active->merge_time - elapsed;
        const double max_T = (config.horizon_steps - t) * config.dt - config.headway;
        PlanningProblem prob{cav, forecasts, use_table ? table->row(t) : std::span<const double>(zero_row),
                             max_T, warm, options.rule == PlanRule::ground_truth};
        auto plan = solve_merge(prob, config, options.planner);
        ++result.planning_steps;
        if (plan) {
          rec.feasible = true;
          rec.plan = plan;
          active = plan;
          active_step = t;
          u = plan->psi.b * 2.0;
          result.min_planned_margin = std::min(result.min_planned_margin, plan->margin);
          // Re-solving at the next step would need T^m < dt.
          committed = plan->merge_time < 2.0 * config.dt;
        } else {
          ++result.infeasible_steps;
          active.reset();
          u = std::max(config.u_min / 2.0, (config.v_min - cav.speed) / config.dt);
        }
      }
      u = std::clamp(u, config.u_min, config.u_max);
      rec.accel = u;
      result.plans.push_back(rec);
    }

    const double before = sim.cav()->position;
    const bool ok = sim.step(u);
    for (std::size_t n = 0; n < sim.num_hdvs(); ++n) trace.hdv_accels[n].push_back(sim.last_hdv_accels()[n]);
    trace.cav_accels.push_back(u);
    record_state(trace, sim);
    if (!ok) {
      trace.collision = true;
      result.collision = true;
      break;
    }
    if (!result.merged && active) {
      const double target = config.candidate_positions[static_cast<std::size_t>(active->candidate)];
      const double after = sim.cav()->position;
      if (before < target && after >= target) {
        result.merged = true;
        result.merge_step = t;
        result.candidate = active->candidate;
        result.merge_time = crossing_time(config.step_time(t), config.dt, before, after, target);
      }
    }
  }
  for (auto& a : trace.hdv_accels) a.push_back(0.0);
  trace.cav_accels.push_back(0.0);
  trace.compute_arrivals();

  if (result.merged) {
    for (const auto& tau : trace.arrivals) {
      const auto& at = tau.times[static_cast<std::size_t>(result.candidate)];
      const double h = at ? std::abs(result.merge_time - *at) : kInf;
      result.headways.push_back(h);
      if (h <= config.headway) result.violation = true;
    }
  }
  return result;
}

struct BatchReport {
  int runs = 0;
  int merged = 0;
  int violations = 0;
  int collisions = 0;
  double merge_rate = 0.0;
  double violation_rate = 0.0;
  stats::Interval violation_ci;
  double mean_merge_time = 0.0;    // over merged runs
  double p50_merge_time = 0.0;
  double p90_merge_time = 0.0;
  double infeasible_step_rate = 0.0;
  // Ground-truth planner on the same seeds.
  bool has_oracle = false;
  int oracle_merged = 0;
  double oracle_mean_merge_time = 0.0;
  int matched = 0;                       // seeds where both merged
  double matched_mean_merge_time = 0.0;  // conformal, over matched seeds
  double matched_oracle_mean_merge_time = 0.0;
  double oracle_min_gap = 0.0;  // min over matched seeds of conformal T - oracle T
  double oracle_max_gap = 0.0;
  std::vector<RunResult> results;
  std::vector<RunResult> oracle_results;
};

/// Runs `fn(i)` for i in [0, n) across worker threads.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned workers = 0) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Monte-Carlo evaluation over seeded episodes. Results are ordered by seed
/// regardless of worker scheduling.
inline BatchReport batch_evaluate(std::span<const std::uint64_t> seeds, const ScenarioTemplate& tmpl,
                                  const Predictor& predictor, const ConformalTable& table,
                                  const ZoneConfig& config, bool with_oracle = true,
                                  const PlannerSettings& planner = {}, unsigned workers = 0) {
  if (seeds.empty()) throw ValidationError("batch: num_runs must be >= 1");
  BatchReport rep;
  rep.runs = static_cast<int>(seeds.size());
  rep.results.resize(seeds.size());
  if (with_oracle) rep.oracle_results.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    const auto sc = sample_scenario(seeds[i], tmpl);
    LoopOptions opt;
    opt.planner = planner;
    rep.results[i] = run_closed_loop(sc, &predictor, &table, config, opt);
    if (with_oracle) {
      LoopOptions oracle{ForecastSource::clairvoyant, PlanRule::ground_truth, planner};
      rep.oracle_results[i] = run_closed_loop(sc, nullptr, nullptr, config, oracle);
    }
  }, workers);

  std::vector<double> times;
  long infeasible = 0, planning = 0;
  for (const auto& r : rep.results) {
    if (r.merged) {
      ++rep.merged;
      times.push_back(r.merge_time);
    }
    rep.violations += r.violation ? 1 : 0;
    rep.collisions += r.collision ? 1 : 0;
    infeasible += r.infeasible_steps;
    planning += r.planning_steps;
  }
  rep.merge_rate = static_cast<double>(rep.merged) / rep.runs;
  rep.violation_rate = static_cast<double>(rep.violations) / rep.runs;
  rep.violation_ci = stats::wilson_interval(static_cast<std::size_t>(rep.violations), static_cast<std::size_t>(rep.runs));
  if (!times.empty()) {
    rep.mean_merge_time = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size());
    rep.p50_merge_time = percentile(times, 0.5);
    rep.p90_merge_time = percentile(times, 0.9);
  }
  rep.infeasible_step_rate = planning ? static_cast<double>(infeasible) / static_cast<double>(planning) : 0.0;

  if (with_oracle) {
    rep.has_oracle = true;
    double oracle_sum = 0.0, m_conf = 0.0, m_orc = 0.0;
    rep.oracle_min_gap = kInf;
    rep.oracle_max_gap = -kInf;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto& o = rep.oracle_results[i];
      if (o.merged) {
        ++rep.oracle_merged;
        oracle_sum += o.merge_time;
      }
      if (o.merged && rep.results[i].merged) {
        ++rep.matched;
        m_conf += rep.results[i].merge_time;
        m_orc += o.merge_time;
        const double gap = rep.results[i].merge_time - o.merge_time;
        rep.oracle_min_gap = std::min(rep.oracle_min_gap, gap);
        rep.oracle_max_gap = std::max(rep.oracle_max_gap, gap);
      }
    }
    if (rep.oracle_merged) rep.oracle_mean_merge_time = oracle_sum / rep.oracle_merged;
    if (rep.matched) {
      rep.matched_mean_merge_time = m_conf / rep.matched;
      rep.matched_oracle_mean_merge_time = m_orc / rep.matched;
    } else {
      rep.oracle_min_gap = rep.oracle_max_gap = 0.0;
    }
  }
  return rep;
}

}  // namespace cpmerge
