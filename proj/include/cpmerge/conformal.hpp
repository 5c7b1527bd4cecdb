#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpmerge/core.hpp"
#include "cpmerge/predictor.hpp"
#include "cpmerge/stats.hpp"

namespace cpmerge {

/// Quantile index q = ceil((K+1)(1-epsilon)), one-based.
inline std::size_t conformal_rank(std::size_t k, double epsilon) {
  const double raw = (static_cast<double>(k) + 1.0) * (1.0 - epsilon);
  // Guard against (K+1)(1-eps) landing a hair above an integer it equals
  // mathematically, e.g. 10 * 0.9.
  const double snapped = std::nearbyint(raw);
  const double value = std::abs(raw - snapped) < 1e-9 ? snapped : std::ceil(raw);
  return static_cast<std::size_t>(value);
}

/// The q-th smallest score, or +inf when q exceeds the number of scores.
inline double conformal_bound(std::span<const double> scores, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ValidationError("epsilon: must lie in (0, 1)");
  const std::size_t q = conformal_rank(scores.size(), epsilon);
  if (q > scores.size()) return kInf;
  std::vector<double> sorted(scores.begin(), scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(q - 1), sorted.end());
  return sorted[q - 1];
}

struct RangeInterval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const { return x >= lo && x <= hi; }
};

/// Closed interval [mu - bound, mu + bound]; an infinite bound covers the line.
inline RangeInterval conformal_range(double mu, double bound) {
  if (bound == kInf) return {-kInf, kInf};
  return {mu - bound, mu + bound};
}

/// Predictions of one trajectory at every step alongside its ground truth.
struct ScoredTrajectory {
  std::vector<std::vector<double>> predicted;  // [step][candidate], absolute seconds
  ArrivalTimes arrivals;
};

inline ScoredTrajectory score_trajectory(const Predictor& predictor, const Trajectory& traj) {
  ScoredTrajectory out;
  out.arrivals = traj.arrivals;
  for (auto& p : predict_series(predictor, traj)) out.predicted.push_back(std::move(p.times));
  return out;
}

inline std::vector<ScoredTrajectory> score_trajectories(const Predictor& predictor,
                                                        std::span<const Trajectory> trajectories) {
  std::vector<ScoredTrajectory> out;
  out.reserve(trajectories.size());
  for (const auto& tr : trajectories) out.push_back(score_trajectory(predictor, tr));
  return out;
}

/// |tau^l - mu^l(t)| over the calibration trajectories that reach candidate l
/// and were observed at step t.
inline std::vector<double> nonconformity_scores(std::span<const ScoredTrajectory> calib, int t,
                                                int l) {
  std::vector<double> scores;
  for (const auto& tr : calib) {
    const auto& tau = tr.arrivals.times[static_cast<std::size_t>(l)];
    if (!tau || t >= static_cast<int>(tr.predicted.size())) continue;
    scores.push_back(std::abs(*tau - tr.predicted[static_cast<std::size_t>(t)][static_cast<std::size_t>(l)]));
  }
  if (scores.empty()) {
    throw ValidationError("calibration: no trajectory reaches candidate " + std::to_string(l) +
                          " at step " + std::to_string(t));
  }
  return scores;
}

/// Calibrated bounds C^l(t) on a (steps x candidates) grid.
struct ConformalTable {
  int steps = 0;
  int candidates = 0;
  double epsilon = 0.1;
  std::uint64_t fingerprint = 0;
  bool monotonized = false;
  std::vector<double> bounds;     // row-major [step][candidate]
  std::vector<int> calib_sizes;  // K per cell

  ConformalTable() = default;
  ConformalTable(int steps_, int candidates_, double eps, std::uint64_t fp)
      : steps(steps_), candidates(candidates_), epsilon(eps), fingerprint(fp),
        bounds(static_cast<std::size_t>(steps_) * candidates_, 0.0),
        calib_sizes(static_cast<std::size_t>(steps_) * candidates_, 0) {}

  std::size_t index(int t, int l) const {
    return static_cast<std::size_t>(t) * static_cast<std::size_t>(candidates) + static_cast<std::size_t>(l);
  }
  double bound(int t, int l) const { return bounds[index(t, l)]; }
  double& bound(int t, int l) { return bounds[index(t, l)]; }
  int calib_size(int t, int l) const { return calib_sizes[index(t, l)]; }

  /// Row for step t; steps past the end reuse the last row.
  std::span<const double> row(int t) const {
    t = std::clamp(t, 0, steps - 1);
    return std::span<const double>(bounds).subspan(index(t, 0), static_cast<std::size_t>(candidates));
  }

  friend bool operator==(const ConformalTable&, const ConformalTable&) = default;
};

/// One conformal predictor per (step, candidate) cell. Cells no calibration
/// trajectory reaches get K = 0 and an infinite bound.
inline ConformalTable build_table_from_scores(std::span<const ScoredTrajectory> calib, int steps,
                                              int candidates, double epsilon,
                                              std::uint64_t fingerprint) {
  if (calib.empty()) throw ValidationError("calibration: empty calibration set");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ValidationError("epsilon: must lie in (0, 1)");
  ConformalTable table(steps, candidates, epsilon, fingerprint);
  std::vector<double> scores;
  for (int t = 0; t < steps; ++t) {
    for (int l = 0; l < candidates; ++l) {
      scores.clear();
      for (const auto& tr : calib) {
        const auto& tau = tr.arrivals.times[static_cast<std::size_t>(l)];
        if (!tau || t >= static_cast<int>(tr.predicted.size())) continue;
        scores.push_back(std::abs(*tau - tr.predicted[static_cast<std::size_t>(t)][static_cast<std::size_t>(l)]));
      }
      table.calib_sizes[table.index(t, l)] = static_cast<int>(scores.size());
      table.bound(t, l) = scores.empty() ? kInf : conformal_bound(scores, epsilon);
    }
  }
  return table;
}

inline ConformalTable build_table(std::span<const Trajectory> calib, const Predictor& predictor,
                                  const ZoneConfig& config) {
  const auto scored = score_trajectories(predictor, calib);
  return build_table_from_scores(scored, config.num_steps(), config.num_candidates(),
                                 config.epsilon, predictor.fingerprint());
}

/// Replaces every candidate column with its running minimum over time.
inline ConformalTable monotonize(const ConformalTable& table) {
  ConformalTable out = table;
  for (int l = 0; l < out.candidates; ++l) {
    for (int t = 1; t < out.steps; ++t) out.bound(t, l) = std::min(out.bound(t, l), out.bound(t - 1, l));
  }
  out.monotonized = true;
  return out;
}

struct CoverageCell {
  std::size_t hits = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 1.0; }
  stats::Interval ci() const { return stats::wilson_interval(hits, total); }
};

struct CoverageReport {
  CoverageCell pooled;
  std::vector<CoverageCell> per_step;
  std::vector<CoverageCell> per_candidate;
  std::vector<CoverageCell> per_cell;  // row-major like ConformalTable
  int steps = 0;
  int candidates = 0;

  const CoverageCell& cell(int t, int l) const {
    return per_cell[static_cast<std::size_t>(t) * static_cast<std::size_t>(candidates) + static_cast<std::size_t>(l)];
  }
};

/// Fraction of (trajectory, step, candidate) triples whose true arrival lies
/// in the conformal range. Candidates a trajectory never reaches are skipped.
inline CoverageReport evaluate_coverage(std::span<const ScoredTrajectory> test,
                                        const ConformalTable& table) {
  if (test.empty()) throw ValidationError("coverage: empty test set");
  CoverageReport rep;
  rep.steps = table.steps;
  rep.candidates = table.candidates;
  rep.per_step.resize(static_cast<std::size_t>(table.steps));
  rep.per_candidate.resize(static_cast<std::size_t>(table.candidates));
  rep.per_cell.resize(table.bounds.size());
  for (const auto& tr : test) {
    const int steps = std::min(table.steps, static_cast<int>(tr.predicted.size()));
    for (int t = 0; t < steps; ++t) {
      for (int l = 0; l < table.candidates; ++l) {
        const auto& tau = tr.arrivals.times[static_cast<std::size_t>(l)];
        if (!tau) continue;
        const double mu = tr.predicted[static_cast<std::size_t>(t)][static_cast<std::size_t>(l)];
        const bool hit = conformal_range(mu, table.bound(t, l)).contains(*tau);
        for (CoverageCell* c : {&rep.pooled, &rep.per_step[static_cast<std::size_t>(t)],
                                &rep.per_candidate[static_cast<std::size_t>(l)],
                                &rep.per_cell[table.index(t, l)]}) {
          c->hits += hit ? 1 : 0;
          c->total += 1;
        }
      }
    }
  }
  return rep;
}

}  // namespace cpmerge
