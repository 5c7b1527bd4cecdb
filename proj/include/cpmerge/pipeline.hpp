#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cpmerge/conformal.hpp"
#include "cpmerge/hdv_sim.hpp"
#include "cpmerge/io.hpp"
#include "cpmerge/loop.hpp"
#include "cpmerge/network.hpp"
#include "cpmerge/predictor.hpp"

namespace cpmerge {

enum class Split { train, calib, test, eval };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::calib: return "calib";
    case Split::test: return "test";
    case Split::eval: return "eval";
  }
  return "?";
}

/// Seeds for one split. Splits draw from disjoint blocks of 2^32 seeds so no
/// scenario appears in two of them for any base seed.
inline std::vector<std::uint64_t> split_seeds(std::uint64_t base, Split split, std::size_t count,
                                              std::size_t offset = 0) {
  const std::uint64_t block = (base << 4 | static_cast<std::uint64_t>(split)) << 32;
  std::vector<std::uint64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = block + offset + i;
  return out;
}

/// Data-collection rollouts, one per seed, in seed order.
inline std::vector<ScenarioTrace> generate_traces(std::span<const std::uint64_t> seeds,
                                                  const ScenarioTemplate& tmpl, const ZoneConfig& config,
                                                  unsigned workers = 0) {
  std::vector<ScenarioTrace> out(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    out[i] = rollout_with_cruise(sample_scenario(seeds[i], tmpl), config);
  }, workers);
  return out;
}

inline TrainOptions train_options(const io::PredictorConfig& p) {
  TrainOptions o;
  o.learning_rate = p.learning_rate;
  o.epochs = p.epochs;
  o.batch_size = p.batch_size;
  o.seed = p.seed;
  o.optimizer = p.optimizer == "adam" ? Optimizer::adam : Optimizer::sgd;
  return o;
}

/// Fits the configured predictor on training rollouts. Every HDV of every
/// collision-free scenario contributes one sequence.
inline TrainResult train_predictor(std::span<const ScenarioTrace> traces, const io::RunConfig& cfg,
                                   std::function<void(int, double)> on_epoch = {}) {
  const auto trajs = extract_trajectories(traces, TrajectoryPick::all);
  const auto data = make_training_set(trajs, cfg.zone);
  auto opts = train_options(cfg.predictor);
  opts.on_epoch = std::move(on_epoch);
  return train(data, cfg.zone.num_candidates(), opts);
}

/// Calibration and test sets use one HDV per scenario so their trajectories
/// are i.i.d. draws.
inline std::vector<Trajectory> exchangeable_trajectories(std::span<const ScenarioTrace> traces) {
  return extract_trajectories(traces, TrajectoryPick::one_per_scenario);
}

}  // namespace cpmerge
