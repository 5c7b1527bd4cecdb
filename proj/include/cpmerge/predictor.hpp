#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpmerge/core.hpp"
#include "cpmerge/hdv_sim.hpp"
#include "cpmerge/network.hpp"

namespace cpmerge {

/// Absolute arrival-time predictions at every candidate. `observed[l]` marks
/// candidates the HDV has already been seen to pass; their time is the
/// observed passage time rather than a model output.
struct Prediction {
  std::vector<double> times;
  std::vector<bool> observed;
};

/// Watches one HDV's own position and records the interpolated instant it
/// passes each candidate, using the same interpolation as the ground truth.
class PassageTracker {
 public:
  explicit PassageTracker(const ZoneConfig& config)
      : dt_(config.dt), passed_(config.candidate_positions.size()) {
    for (int l = 0; l < config.num_candidates(); ++l) targets_.push_back(config.highway_candidate(l));
  }

  void observe(double position, int step) {
    if (last_step_ >= 0 && step == last_step_ + 1) {
      for (std::size_t l = 0; l < targets_.size(); ++l) {
        if (passed_[l] || position < targets_[l]) continue;
        if (last_step_ == 0 && last_position_ == targets_[l]) {
          passed_[l] = 0.0;
        } else if (last_step_ == 0 || last_position_ < targets_[l]) {
          // Also covers vehicles already past the candidate at step 0, which
          // the ground truth extrapolates back along the first segment.
          passed_[l] = crossing_time(static_cast<double>(last_step_) * dt_, dt_, last_position_,
                                     position, targets_[l]);
        }
      }
    }
    last_position_ = position;
    last_step_ = step;
  }

  const std::optional<double>& passed(std::size_t l) const { return passed_[l]; }
  double last_position() const { return last_position_; }

 private:
  double dt_;
  std::vector<double> targets_;
  std::vector<std::optional<double>> passed_;
  double last_position_ = 0.0;
  int last_step_ = -1;
};

/// Per-HDV predictor state: fed one observation per step, starting at step 0.
class PredictorTrack {
 public:
  virtual ~PredictorTrack() = default;
  virtual void observe(const RawObservation& obs, int step) = 0;
  /// Prediction at the time of the most recent observation.
  virtual Prediction predict() const = 0;
  virtual std::unique_ptr<PredictorTrack> clone() const = 0;
};

/// Arrival-time predictor treated as a black box by calibration and planning.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::unique_ptr<PredictorTrack> track() const = 0;
  virtual std::uint64_t fingerprint() const = 0;
  virtual std::string kind() const = 0;
  virtual const ZoneConfig& config() const = 0;
};

/// Constant-speed extrapolation from the latest state. Candidates already
/// behind the vehicle get `known_passage` when available, else `now`.
inline std::vector<double> physics_predict(const VehicleState& latest, double now,
                                           const ZoneConfig& config,
                                           std::span<const std::optional<double>> known_passage = {}) {
  std::vector<double> out;
  out.reserve(config.candidate_positions.size());
  for (int l = 0; l < config.num_candidates(); ++l) {
    const double target = config.highway_candidate(l);
    if (latest.position < target) {
      out.push_back(now + (target - latest.position) / latest.speed);
    } else if (static_cast<std::size_t>(l) < known_passage.size() && known_passage[l]) {
      out.push_back(*known_passage[l]);
    } else {
      out.push_back(now);
    }
  }
  return out;
}

class PhysicsPredictor final : public Predictor {
 public:
  explicit PhysicsPredictor(ZoneConfig config) : config_(std::move(config)) {}

  class Track final : public PredictorTrack {
   public:
    explicit Track(const ZoneConfig& config) : config_(&config), passage_(config) {}
    void observe(const RawObservation& obs, int step) override {
      passage_.observe(obs[1].position, step);
      latest_ = obs[1];
      now_ = config_->step_time(step);
    }
    Prediction predict() const override {
      Prediction p;
      std::vector<std::optional<double>> known(config_->candidate_positions.size());
      p.observed.assign(known.size(), false);
      for (std::size_t l = 0; l < known.size(); ++l) {
        known[l] = passage_.passed(l);
        p.observed[l] = known[l].has_value();
      }
      p.times = physics_predict(latest_, now_, *config_, known);
      return p;
    }
    std::unique_ptr<PredictorTrack> clone() const override { return std::make_unique<Track>(*this); }

   private:
    const ZoneConfig* config_;
    PassageTracker passage_;
    VehicleState latest_{};
    double now_ = 0.0;
  };

  std::unique_ptr<PredictorTrack> track() const override { return std::make_unique<Track>(config_); }
  std::uint64_t fingerprint() const override { return 0x9B1C5F0E11A5C0DEULL; }
  std::string kind() const override { return "physics"; }
  const ZoneConfig& config() const override { return config_; }

 private:
  ZoneConfig config_;
};

/// Encoder/LSTM/decoder network wrapped as a predictor.
class RecurrentPredictor final : public Predictor {
 public:
  RecurrentPredictor(NetParams params, ZoneConfig config)
      : params_(std::move(params)), config_(std::move(config)),
        scale_(EncodingScale::for_zone(config_)), fingerprint_(params_.fingerprint()) {
    if (params_.num_candidates() != config_.num_candidates())
      throw ValidationError("predictor: network has " + std::to_string(params_.num_candidates()) +
                            " heads but the zone has " +
                            std::to_string(config_.num_candidates()) + " candidates");
  }

  class Track final : public PredictorTrack {
   public:
    explicit Track(const RecurrentPredictor& owner) : owner_(&owner), passage_(owner.config_) {}
    void observe(const RawObservation& obs, int step) override {
      passage_.observe(obs[1].position, step);
      hidden_ = step_hidden(owner_->params_, hidden_, encode_observation(obs, owner_->scale_));
      now_ = owner_->config_.step_time(step);
    }
    Prediction predict() const override {
      Prediction p;
      p.times = decode_arrivals(owner_->params_, hidden_, now_);
      p.observed.assign(p.times.size(), false);
      for (std::size_t l = 0; l < p.times.size(); ++l) {
        if (const auto& seen = passage_.passed(l)) {
          p.times[l] = *seen;
          p.observed[l] = true;
        }
      }
      return p;
    }
    std::unique_ptr<PredictorTrack> clone() const override { return std::make_unique<Track>(*this); }
    const HiddenState& hidden() const { return hidden_; }

   private:
    const RecurrentPredictor* owner_;
    PassageTracker passage_;
    HiddenState hidden_{};
    double now_ = 0.0;
  };

  std::unique_ptr<PredictorTrack> track() const override { return std::make_unique<Track>(*this); }
  std::uint64_t fingerprint() const override { return fingerprint_; }
  std::string kind() const override { return "lstm"; }
  const ZoneConfig& config() const override { return config_; }
  const NetParams& params() const { return params_; }

 private:
  NetParams params_;
  ZoneConfig config_;
  EncodingScale scale_;
  std::uint64_t fingerprint_;
};

/// One HDV's observation history and ground-truth arrivals: the unit of the
/// training, calibration and test sets.
struct Trajectory {
  std::uint64_t scenario_id = 0;
  int vehicle = 0;  // HDV index within the scenario
  std::vector<RawObservation> observations;
  ArrivalTimes arrivals;
};

enum class TrajectoryPick {
  all,               // every HDV of every scenario
  one_per_scenario,  // one HDV per scenario, index drawn from the scenario seed
};

inline std::vector<Trajectory> extract_trajectories(std::span<const ScenarioTrace> traces,
                                                    TrajectoryPick pick = TrajectoryPick::all) {
  std::vector<Trajectory> out;
  for (const auto& trace : traces) {
    if (trace.collision || trace.num_hdvs() == 0) continue;
    std::size_t first = 0, last = trace.num_hdvs();
    if (pick == TrajectoryPick::one_per_scenario) {
      first = mix_seed(trace.seed ^ 0xE60ULL) % trace.num_hdvs();
      last = first + 1;
    }
    for (std::size_t n = first; n < last; ++n) {
      Trajectory tr;
      tr.scenario_id = trace.seed;
      tr.vehicle = static_cast<int>(n);
      tr.arrivals = trace.arrivals[n];
      for (int t = 0; t < trace.steps(); ++t) tr.observations.push_back(trace.observation(n, t));
      out.push_back(std::move(tr));
    }
  }
  return out;
}

/// Runs a fresh track over the whole trajectory; entry t is the prediction
/// made after observing steps 0..t.
inline std::vector<Prediction> predict_series(const Predictor& predictor, const Trajectory& traj) {
  auto track = predictor.track();
  std::vector<Prediction> out;
  out.reserve(traj.observations.size());
  for (std::size_t t = 0; t < traj.observations.size(); ++t) {
    track->observe(traj.observations[t], static_cast<int>(t));
    out.push_back(track->predict());
  }
  return out;
}

inline std::vector<TrainingSequence> make_training_set(std::span<const Trajectory> trajectories,
                                                       const ZoneConfig& config) {
  std::vector<TrainingSequence> out;
  out.reserve(trajectories.size());
  for (const auto& tr : trajectories) {
    auto seq = make_training_sequence(tr.observations, tr.arrivals, config);
    if (!seq.inputs.empty()) out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace cpmerge
