#include <random>

#include <gtest/gtest.h>

#include "cpmerge/network.hpp"
#include "oracles.hpp"

using namespace cpmerge;

namespace {

ObservationVec random_obs(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2, 2);
  ObservationVec o;
  for (double& v : o) v = u(rng);
  return o;
}

/// Short synthetic sequences with some masked targets.
std::vector<TrainingSequence> random_sequences(std::uint64_t seed, int count, int L) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> target(0.5, 15);
  std::bernoulli_distribution keep(0.8);
  std::vector<TrainingSequence> out(static_cast<std::size_t>(count));
  for (auto& seq : out) {
    const int T = 5 + static_cast<int>(rng() % 20);
    for (int t = 0; t < T; ++t) {
      seq.inputs.push_back(random_obs(rng));
      std::vector<std::optional<double>> row(static_cast<std::size_t>(L));
      for (auto& r : row)
        if (keep(rng)) r = target(rng);
      seq.targets.push_back(row);
    }
  }
  return out;
}

std::vector<const TrainingSequence*> pointers(const std::vector<TrainingSequence>& v) {
  std::vector<const TrainingSequence*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST(NetParams, ParameterCountAndLayout) {
  EXPECT_EQ(NetParams::count(10), 1118u);
  NetParams p(10);
  EXPECT_EQ(p.size(), 1118u);
  std::size_t next = 0;
  for (const auto& t : p.layout()) {
    EXPECT_EQ(t.offset, next) << t.name;
    next += t.size();
  }
  EXPECT_EQ(next, p.size());
  EXPECT_THROW(NetParams(0), ValidationError);
}

TEST(NetParams, InitializationIsSeededAndBounded) {
  const auto a = NetParams::initialize(10, 3), b = NetParams::initialize(10, 3), c = NetParams::initialize(10, 4);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), c.fingerprint());
  for (const auto& t : a.layout()) {
    if (t.cols == 1) continue;  // biases share the preceding weight's fan-in
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_LE(std::abs(a[t.offset + i]), bound) << t.name;
  }
}

TEST(Encoding, ScalesRelativePositions) {
  const EncodingScale s{100.0, 35.0, 100.0};
  RawObservation raw{VehicleState{150, 30}, VehicleState{100, 20}, VehicleState{100, 20}, VehicleState{1100, 20}};
  const auto o = encode_observation(raw, s);
  EXPECT_DOUBLE_EQ(o[0], 0.5);   // leader 50 m ahead
  EXPECT_DOUBLE_EQ(o[2], 0.0);   // self at the reference position
  EXPECT_DOUBLE_EQ(o[4], 0.0);   // follower at the same spot
  EXPECT_DOUBLE_EQ(o[6], 10.0);  // sentinel 1000 m ahead
  EXPECT_DOUBLE_EQ(o[1], 30.0 / 35.0);
  EXPECT_DOUBLE_EQ(o[3], 20.0 / 35.0);
}

TEST(Encoding, IdenticalStates) {
  const EncodingScale s{100.0, 35.0, 100.0};
  const VehicleState v{42, 17};
  const auto o = encode_observation({v, v, v, v}, s);
  EXPECT_EQ(o[0], 0.0);
  EXPECT_EQ(o[4], 0.0);
  EXPECT_EQ(o[6], 0.0);
  EXPECT_DOUBLE_EQ(o[2], (42.0 - 100.0) / 100.0);
  for (int i = 1; i < 8; i += 2) EXPECT_EQ(o[i], 17.0 / 35.0);
}

TEST(Encoding, RejectsNonFinite) {
  const VehicleState v{0, 10};
  EXPECT_THROW(encode_observation({v, VehicleState{NAN, 1}, v, v}, {}), ValidationError);
  EXPECT_THROW(encode_observation({v, v, v, VehicleState{0, INFINITY}}, {}), ValidationError);
}

TEST(StepHidden, ZeroParamsFixedPoint) {
  NetParams p(10);
  const auto h = step_hidden(p, {}, ObservationVec{1, 2, 3, 4, 5, 6, 7, 8});
  for (int k = 0; k < kHiddenDim; ++k) {
    EXPECT_EQ(h.h[k], 0.0);
    EXPECT_EQ(h.cell[k], 0.0);
  }
  const auto mu = decode_arrivals(p, h, 3.5);
  for (double m : mu) EXPECT_EQ(m, 3.5);
}

TEST(StepHidden, MatchesEigenReference) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = NetParams::initialize(10, 100 + trial);
    const oracle::ReferenceNet ref(p);
    HiddenState s;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(6), c = Eigen::VectorXd::Zero(6);
    for (int t = 0; t < 30; ++t) {
      const auto x = random_obs(rng);
      s = step_hidden(p, s, x);
      ref.step(Eigen::Map<const Eigen::VectorXd>(x.data(), 8), h, c);
      for (int k = 0; k < 6; ++k) {
        ASSERT_NEAR(s.h[k], h(k), 1e-12);
        ASSERT_NEAR(s.cell[k], c(k), 1e-12);
      }
      const auto mine = head_outputs(p, s);
      const auto theirs = ref.heads(h);
      for (int l = 0; l < 10; ++l) ASSERT_NEAR(mine[l], theirs[l], 1e-12);
    }
  }
}

TEST(StepHidden, BoundedUnderRepeatedInput) {
  const auto p = NetParams::initialize(10, 9);
  HiddenState s;
  for (int t = 0; t < 500; ++t) {
    s = step_hidden(p, s, ObservationVec{});
    for (double v : s.h) ASSERT_LT(std::abs(v), 1.0);
  }
}

TEST(Decode, NeverBeforeNow) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = NetParams::initialize(10, trial);
    HiddenState s;
    for (int t = 0; t < 5; ++t) s = step_hidden(p, s, random_obs(rng));
    for (double m : decode_arrivals(p, s, 7.0)) EXPECT_GE(m, 7.0);
  }
}

TEST(Causality, FutureObservationsDoNotLeak) {
  std::mt19937_64 rng(8);
  const auto p = NetParams::initialize(10, 1);
  std::vector<ObservationVec> xs;
  for (int t = 0; t < 40; ++t) xs.push_back(random_obs(rng));
  auto run = [&](const std::vector<ObservationVec>& in) {
    std::vector<HiddenState> out;
    HiddenState s;
    for (const auto& x : in) out.push_back(s = step_hidden(p, s, x));
    return out;
  };
  const auto base = run(xs);
  auto perturbed = xs;
  for (int t = 20; t < 40; ++t) perturbed[t] = random_obs(rng);
  const auto other = run(perturbed);
  for (int t = 0; t < 20; ++t) EXPECT_TRUE(base[t] == other[t]) << t;
  EXPECT_FALSE(base[25] == other[25]);
}

TEST(GradientCheck, QuadraticToyIsExact) {
  std::vector<double> theta{1.5};
  auto loss = [&] { return 3.0 * theta[0] * theta[0]; };
  auto grad = [&] { return std::vector<double>{6.0 * theta[0]}; };
  const std::vector<std::size_t> coords{0};
  const auto r = check_gradients_generic(theta, loss, grad, coords, 1);
  EXPECT_LT(r.max_error, 1e-9);
  EXPECT_EQ(r.checked, 1u);
}

TEST(GradientCheck, DetectsSignFlip) {
  std::vector<double> theta{1.5, -0.7};
  auto loss = [&] { return theta[0] * theta[0] + 2 * theta[1] * theta[1]; };
  auto flipped = [&] { return std::vector<double>{-2 * theta[0], -4 * theta[1]}; };
  const std::vector<std::size_t> coords{0, 1};
  EXPECT_NEAR(check_gradients_generic(theta, loss, flipped, coords, 2).max_error, 2.0, 1e-6);
}

TEST(GradientCheck, BpttMatchesFiniteDifferences) {
  const auto data = random_sequences(17, 40, 10);
  const auto ptrs = pointers(data);
  for (int b = 0; b < 4; ++b) {
    const auto p = NetParams::initialize(10, 50 + b);
    const std::vector<const TrainingSequence*> batch(ptrs.begin() + b * 10, ptrs.begin() + b * 10 + 10);
    const auto r = check_gradients_report(p, batch, b, 100);
    EXPECT_EQ(r.checked, 100u);
    EXPECT_LT(r.max_error, 1e-4);
  }
}

TEST(GradientCheck, SkipsCoordinatesAtKinks) {
  // A ReLU toy: loss = relu(theta)^2 is smooth away from 0, kinked at 0.
  std::vector<double> theta{1e-6};
  auto loss = [&] { return std::pow(std::max(0.0, theta[0]), 2); };
  auto grad = [&] { return std::vector<double>{2 * std::max(0.0, theta[0])}; };
  auto sig = [&] { return static_cast<std::uint64_t>(theta[0] > 0); };
  const std::vector<std::size_t> coords{0};
  const auto r = check_gradients_generic(theta, loss, grad, coords, 1, 1e-5, sig);
  EXPECT_EQ(r.checked, 0u);
  EXPECT_EQ(r.skipped, 1u);
}

TEST(Train, LearningRateZeroLeavesParamsUnchanged) {
  const auto data = random_sequences(3, 8, 10);
  const auto init = NetParams::initialize(10, 1);
  TrainOptions o;
  o.learning_rate = 0.0;
  o.epochs = 1;
  o.optimizer = Optimizer::sgd;
  EXPECT_TRUE(train(data, 10, o, init).params == init);
}

TEST(Train, DeterministicAndDescending) {
  const auto data = random_sequences(4, 24, 10);
  TrainOptions o;
  o.epochs = 5;
  o.batch_size = 4;
  const auto a = train(data, 10, o), b = train(data, 10, o);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_LT(a.loss_curve.back(), a.initial_loss);
}

TEST(Train, MemorizesConstantMapping) {
  // Identical trajectories: the network only has to learn one fixed sequence.
  TrainingSequence seq;
  for (int t = 0; t < 30; ++t) {
    seq.inputs.push_back(ObservationVec{0.3, 0.8, -1.0 + 0.02 * t, 0.57, -0.4, 0.8, 0.9, 0.6});
    std::vector<std::optional<double>> row;
    for (int l = 0; l < 3; ++l) row.push_back(5.0 + l - 0.1 * t);
    seq.targets.push_back(row);
  }
  const std::vector<TrainingSequence> data(8, seq);
  TrainOptions o;
  o.epochs = 400;
  o.batch_size = 8;
  o.learning_rate = 1e-2;
  const auto r = train(data, 3, o);
  EXPECT_LT(r.loss_curve.back(), 0.01);
}

TEST(Train, RejectsEmptyDataset) {
  EXPECT_THROW(train({}, 10, TrainOptions{}), ValidationError);
}

TEST(Train, SeedsOutputBiasesWithTargetMeans) {
  std::vector<TrainingSequence> data(1);
  data[0].inputs.assign(2, ObservationVec{});
  data[0].targets = {{2.0, std::nullopt}, {4.0, 7.0}};
  NetParams p(2);
  seed_output_biases(p, data);
  EXPECT_DOUBLE_EQ(p[NetParams::head_b2(0)], 3.0);
  EXPECT_DOUBLE_EQ(p[NetParams::head_b2(1)], 7.0);
}
