#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpmerge/core.hpp"
#include "cpmerge/hdv_sim.hpp"

namespace cpmerge {

inline constexpr int kObsDim = 8;
inline constexpr int kEncoderWidth = 10;
inline constexpr int kHiddenDim = 6;
inline constexpr int kHeadWidth = 8;
inline constexpr int kGateDim = 4 * kHiddenDim;

using ObservationVec = std::array<double, kObsDim>;

struct HiddenState {
  std::array<double, kHiddenDim> h{};
  std::array<double, kHiddenDim> cell{};

  friend bool operator==(const HiddenState&, const HiddenState&) = default;
};

/// Input scaling. Positions of other vehicles are taken relative to the
/// observed HDV; the HDV's own position is taken relative to
/// `reference_position` (first candidate, highway frame), otherwise the
/// network has no way to tell how far the candidates are.
struct EncodingScale {
  double position_scale = 100.0;
  double speed_scale = 35.0;
  double reference_position = 100.0;

  static EncodingScale for_zone(const ZoneConfig& config) {
    return {100.0, config.v_max, config.highway_candidate(0)};
  }
};

inline ObservationVec encode_observation(const RawObservation& raw, const EncodingScale& scale) {
  for (const auto& s : raw) {
    if (!std::isfinite(s.position) || !std::isfinite(s.speed))
      throw ValidationError("observation: non-finite vehicle state");
  }
  const double self = raw[1].position;
  ObservationVec o{};
  for (int i = 0; i < 4; ++i) {
    const double ref = i == 1 ? scale.reference_position : self;
    o[2 * i] = (raw[i].position - ref) / scale.position_scale;
    o[2 * i + 1] = raw[i].speed / scale.speed_scale;
  }
  return o;
}

/// Named slice of the flat parameter vector (row-major rows x cols).
struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// All trainable parameters of the encoder/LSTM/decoder network stored in one
/// flat vector. The same layout doubles as the gradient container.
class NetParams {
 public:
  explicit NetParams(int num_candidates = 10)
      : num_candidates_(num_candidates), values_(count(num_candidates), 0.0) {
    if (num_candidates < 1) throw ValidationError("predictor.num_candidates: must be >= 1");
  }

  static std::size_t count(int num_candidates) {
    const std::size_t enc = kEncoderWidth * kObsDim + kEncoderWidth +
                            kHiddenDim * kEncoderWidth + kHiddenDim;
    const std::size_t lstm = 2 * kGateDim * kHiddenDim + kGateDim;
    const std::size_t head = kHeadWidth * kHiddenDim + kHeadWidth + kHeadWidth + 1;
    return enc + lstm + head * static_cast<std::size_t>(num_candidates);
  }

  int num_candidates() const { return num_candidates_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // Offsets into the flat vector.
  static constexpr std::size_t kEnc1W = 0;
  static constexpr std::size_t kEnc1B = kEnc1W + kEncoderWidth * kObsDim;
  static constexpr std::size_t kEnc2W = kEnc1B + kEncoderWidth;
  static constexpr std::size_t kEnc2B = kEnc2W + kHiddenDim * kEncoderWidth;
  static constexpr std::size_t kGateWx = kEnc2B + kHiddenDim;
  static constexpr std::size_t kGateWh = kGateWx + kGateDim * kHiddenDim;
  static constexpr std::size_t kGateB = kGateWh + kGateDim * kHiddenDim;
  static constexpr std::size_t kHeads = kGateB + kGateDim;
  static constexpr std::size_t kHeadStride = kHeadWidth * kHiddenDim + kHeadWidth + kHeadWidth + 1;

  static std::size_t head_w1(int l) { return kHeads + kHeadStride * static_cast<std::size_t>(l); }
  static std::size_t head_b1(int l) { return head_w1(l) + kHeadWidth * kHiddenDim; }
  static std::size_t head_w2(int l) { return head_b1(l) + kHeadWidth; }
  static std::size_t head_b2(int l) { return head_w2(l) + kHeadWidth; }

  std::vector<TensorSpec> layout() const {
    std::vector<TensorSpec> out = {
        {"encoder.0.weight", kEncoderWidth, kObsDim, kEnc1W},
        {"encoder.0.bias", kEncoderWidth, 1, kEnc1B},
        {"encoder.1.weight", kHiddenDim, kEncoderWidth, kEnc2W},
        {"encoder.1.bias", kHiddenDim, 1, kEnc2B},
        {"lstm.weight_ih", kGateDim, kHiddenDim, kGateWx},
        {"lstm.weight_hh", kGateDim, kHiddenDim, kGateWh},
        {"lstm.bias", kGateDim, 1, kGateB},
    };
    for (int l = 0; l < num_candidates_; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      out.push_back({p + ".0.weight", kHeadWidth, kHiddenDim, head_w1(l)});
      out.push_back({p + ".0.bias", kHeadWidth, 1, head_b1(l)});
      out.push_back({p + ".1.weight", 1, kHeadWidth, head_w2(l)});
      out.push_back({p + ".1.bias", 1, 1, head_b2(l)});
    }
    return out;
  }

  /// Uniform(+-1/sqrt(fan_in)) per tensor; fan_in is the column count, or the
  /// matching weight's column count for biases.
  static NetParams initialize(int num_candidates, std::uint64_t seed) {
    NetParams p(num_candidates);
    std::mt19937_64 rng(mix_seed(seed ^ 0x5EEDULL));
    int fan_in = 1;
    for (const auto& t : p.layout()) {
      if (t.cols > 1) fan_in = t.cols;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t i = 0; i < t.size(); ++i) p.values_[t.offset + i] = dist(rng);
    }
    return p;
  }

  /// FNV-1a over the candidate count and raw parameter bytes.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t n) {
      const auto* bytes = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    };
    const std::int64_t l = num_candidates_;
    feed(&l, sizeof l);
    feed(values_.data(), values_.size() * sizeof(double));
    return h;
  }

  friend bool operator==(const NetParams& a, const NetParams& b) {
    if (a.num_candidates_ != b.num_candidates_ || a.values_.size() != b.values_.size())
      return false;
    return std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(double)) == 0;
  }

 private:
  int num_candidates_;
  std::vector<double> values_;
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }

/// Everything the backward pass needs from one recurrent step.
struct StepCache {
  ObservationVec x{};
  std::array<double, kEncoderWidth> z1{}, a1{};
  std::array<double, kHiddenDim> z2{}, a2{};
  std::array<double, kHiddenDim> i{}, f{}, g{}, o{};
  std::array<double, kHiddenDim> c_prev{}, c{}, tanh_c{}, h_prev{}, h{};
};

inline void forward_step(const NetParams& p, const HiddenState& prev, const ObservationVec& x,
                         StepCache& s) {
  const auto w = p.values();
  s.x = x;
  for (int r = 0; r < kEncoderWidth; ++r) {
    double acc = w[NetParams::kEnc1B + r];
    for (int k = 0; k < kObsDim; ++k) acc += w[NetParams::kEnc1W + r * kObsDim + k] * x[k];
    s.z1[r] = acc;
    s.a1[r] = relu(acc);
  }
  for (int r = 0; r < kHiddenDim; ++r) {
    double acc = w[NetParams::kEnc2B + r];
    for (int k = 0; k < kEncoderWidth; ++k)
      acc += w[NetParams::kEnc2W + r * kEncoderWidth + k] * s.a1[k];
    s.z2[r] = acc;
    s.a2[r] = relu(acc);
  }
  std::array<double, kGateDim> gates{};
  for (int r = 0; r < kGateDim; ++r) {
    double acc = w[NetParams::kGateB + r];
    for (int k = 0; k < kHiddenDim; ++k) {
      acc += w[NetParams::kGateWx + r * kHiddenDim + k] * s.a2[k];
      acc += w[NetParams::kGateWh + r * kHiddenDim + k] * prev.h[k];
    }
    gates[r] = acc;
  }
  for (int k = 0; k < kHiddenDim; ++k) {
    s.i[k] = sigmoid(gates[k]);
    s.f[k] = sigmoid(gates[kHiddenDim + k]);
    s.g[k] = std::tanh(gates[2 * kHiddenDim + k]);
    s.o[k] = sigmoid(gates[3 * kHiddenDim + k]);
    s.c_prev[k] = prev.cell[k];
    s.h_prev[k] = prev.h[k];
    s.c[k] = s.f[k] * prev.cell[k] + s.i[k] * s.g[k];
    s.tanh_c[k] = std::tanh(s.c[k]);
    s.h[k] = s.o[k] * s.tanh_c[k];
  }
}

struct HeadCache {
  std::array<double, kHeadWidth> z{}, a{};
  double out_pre = 0.0;
  double out = 0.0;
};

inline void head_forward(const NetParams& p, int l, const std::array<double, kHiddenDim>& h,
                         HeadCache& hc) {
  const auto w = p.values();
  const std::size_t w1 = NetParams::head_w1(l), b1 = NetParams::head_b1(l);
  const std::size_t w2 = NetParams::head_w2(l), b2 = NetParams::head_b2(l);
  double out = w[b2];
  for (int r = 0; r < kHeadWidth; ++r) {
    double acc = w[b1 + r];
    for (int k = 0; k < kHiddenDim; ++k) acc += w[w1 + r * kHiddenDim + k] * h[k];
    hc.z[r] = acc;
    hc.a[r] = relu(acc);
    out += w[w2 + r] * hc.a[r];
  }
  hc.out_pre = out;
  hc.out = relu(out);
}

}  // namespace detail

/// Encoder (two ReLU linear layers) followed by one LSTM cell update.
inline HiddenState step_hidden(const NetParams& params, const HiddenState& prev,
                               const ObservationVec& obs) {
  detail::StepCache s;
  detail::forward_step(params, prev, obs, s);
  HiddenState next;
  next.h = s.h;
  next.cell = s.c;
  return next;
}

/// Per-candidate predicted time-to-arrival (>= 0).
inline std::vector<double> head_outputs(const NetParams& params, const HiddenState& hidden) {
  std::vector<double> out(static_cast<std::size_t>(params.num_candidates()));
  detail::HeadCache hc;
  for (int l = 0; l < params.num_candidates(); ++l) {
    detail::head_forward(params, l, hidden.h, hc);
    out[static_cast<std::size_t>(l)] = hc.out;
  }
  return out;
}

/// Absolute predicted arrival times: now + time-to-arrival.
inline std::vector<double> decode_arrivals(const NetParams& params, const HiddenState& hidden,
                                           double now) {
  auto out = head_outputs(params, hidden);
  for (double& v : out) v += now;
  return out;
}

/// One training sequence: encoded observations from step 0 and, per step and
/// candidate, the time-to-arrival target (nullopt where masked out).
struct TrainingSequence {
  std::vector<ObservationVec> inputs;
  std::vector<std::vector<std::optional<double>>> targets;  // [step][candidate]
};

/// Builds the sequence for one HDV. Candidates the HDV never reaches, and
/// candidates it has already passed, carry no target. The sequence is cut
/// after the last step with any target.
inline TrainingSequence make_training_sequence(std::span<const RawObservation> observations,
                                               const ArrivalTimes& arrivals, const ZoneConfig& config) {
  const auto scale = EncodingScale::for_zone(config);
  TrainingSequence seq;
  int last = -1;
  for (std::size_t t = 0; t < observations.size(); ++t) {
    const double now = config.step_time(static_cast<int>(t));
    std::vector<std::optional<double>> row(arrivals.size());
    bool any = false;
    for (std::size_t l = 0; l < arrivals.size(); ++l) {
      if (arrivals.times[l] && *arrivals.times[l] >= now) {
        row[l] = *arrivals.times[l] - now;
        any = true;
      }
    }
    if (any) last = static_cast<int>(t);
    seq.inputs.push_back(encode_observation(observations[t], scale));
    seq.targets.push_back(std::move(row));
  }
  seq.inputs.resize(static_cast<std::size_t>(last + 1));
  seq.targets.resize(static_cast<std::size_t>(last + 1));
  return seq;
}

struct LossSum {
  long double sum = 0.0;  // sum of squared errors; extended precision keeps finite differences clean
  std::size_t terms = 0;  // number of masked-in (step, candidate) pairs
};

/// Squared-error sum over one sequence; accumulates d(sum)/d(params) into
/// `grad` when given (backpropagation through time).
inline LossSum sequence_loss(const NetParams& params, const TrainingSequence& seq,
                             NetParams* grad = nullptr) {
  using namespace detail;
  const std::size_t T = seq.inputs.size();
  const int L = params.num_candidates();
  std::vector<StepCache> cache(T);
  std::vector<std::array<double, kHiddenDim>> dh_from_heads(T);
  HiddenState state;
  LossSum loss;
  const auto w = params.values();
  std::span<double> g;
  if (grad) g = grad->values();
  HeadCache hc;
  for (std::size_t t = 0; t < T; ++t) {
    forward_step(params, state, seq.inputs[t], cache[t]);
    state.h = cache[t].h;
    state.cell = cache[t].c;
    dh_from_heads[t].fill(0.0);
    for (int l = 0; l < L; ++l) {
      const auto& target = seq.targets[t][static_cast<std::size_t>(l)];
      if (!target) continue;
      head_forward(params, l, cache[t].h, hc);
      const double err = hc.out - *target;
      loss.sum += err * err;
      ++loss.terms;
      if (!grad) continue;
      const double d_out = hc.out_pre > 0.0 ? 2.0 * err : 0.0;
      if (d_out == 0.0) continue;
      const std::size_t w1 = NetParams::head_w1(l), b1 = NetParams::head_b1(l);
      const std::size_t w2 = NetParams::head_w2(l), b2 = NetParams::head_b2(l);
      g[b2] += d_out;
      for (int r = 0; r < kHeadWidth; ++r) {
        g[w2 + r] += d_out * hc.a[r];
        const double dz = hc.z[r] > 0.0 ? d_out * w[w2 + r] : 0.0;
        if (dz == 0.0) continue;
        g[b1 + r] += dz;
        for (int k = 0; k < kHiddenDim; ++k) {
          g[w1 + r * kHiddenDim + k] += dz * cache[t].h[k];
          dh_from_heads[t][k] += dz * w[w1 + r * kHiddenDim + k];
        }
      }
    }
  }
  if (!grad) return loss;

  std::array<double, kHiddenDim> dh_next{}, dc_next{};
  for (std::size_t step = T; step-- > 0;) {
    const StepCache& s = cache[step];
    std::array<double, kHiddenDim> dh{}, dc{};
    std::array<double, kGateDim> dgates{};
    for (int k = 0; k < kHiddenDim; ++k) {
      dh[k] = dh_from_heads[step][k] + dh_next[k];
      const double d_o = dh[k] * s.tanh_c[k];
      dc[k] = dc_next[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
      const double d_i = dc[k] * s.g[k];
      const double d_f = dc[k] * s.c_prev[k];
      const double d_g = dc[k] * s.i[k];
      dgates[k] = d_i * s.i[k] * (1.0 - s.i[k]);
      dgates[kHiddenDim + k] = d_f * s.f[k] * (1.0 - s.f[k]);
      dgates[2 * kHiddenDim + k] = d_g * (1.0 - s.g[k] * s.g[k]);
      dgates[3 * kHiddenDim + k] = d_o * s.o[k] * (1.0 - s.o[k]);
      dc_next[k] = dc[k] * s.f[k];
    }
    std::array<double, kHiddenDim> da2{};
    dh_next.fill(0.0);
    for (int r = 0; r < kGateDim; ++r) {
      const double d = dgates[r];
      if (d == 0.0) continue;
      g[NetParams::kGateB + r] += d;
      for (int k = 0; k < kHiddenDim; ++k) {
        g[NetParams::kGateWx + r * kHiddenDim + k] += d * s.a2[k];
        g[NetParams::kGateWh + r * kHiddenDim + k] += d * s.h_prev[k];
        da2[k] += d * w[NetParams::kGateWx + r * kHiddenDim + k];
        dh_next[k] += d * w[NetParams::kGateWh + r * kHiddenDim + k];
      }
    }
    std::array<double, kEncoderWidth> da1{};
    for (int r = 0; r < kHiddenDim; ++r) {
      const double dz = s.z2[r] > 0.0 ? da2[r] : 0.0;
      if (dz == 0.0) continue;
      g[NetParams::kEnc2B + r] += dz;
      for (int k = 0; k < kEncoderWidth; ++k) {
        g[NetParams::kEnc2W + r * kEncoderWidth + k] += dz * s.a1[k];
        da1[k] += dz * w[NetParams::kEnc2W + r * kEncoderWidth + k];
      }
    }
    for (int r = 0; r < kEncoderWidth; ++r) {
      const double dz = s.z1[r] > 0.0 ? da1[r] : 0.0;
      if (dz == 0.0) continue;
      g[NetParams::kEnc1B + r] += dz;
      for (int k = 0; k < kObsDim; ++k) g[NetParams::kEnc1W + r * kObsDim + k] += dz * s.x[k];
    }
  }
  return loss;
}

/// Mean squared error over a minibatch and its gradient.
inline double batch_loss(const NetParams& params, std::span<const TrainingSequence* const> batch,
                         NetParams* grad = nullptr) {
  LossSum total;
  if (grad) std::fill(grad->values().begin(), grad->values().end(), 0.0);
  for (const auto* seq : batch) {
    const auto part = sequence_loss(params, *seq, grad);
    total.sum += part.sum;
    total.terms += part.terms;
  }
  if (total.terms == 0) return 0.0;
  const double scale = 1.0 / static_cast<double>(total.terms);
  if (grad) {
    for (double& v : grad->values()) v *= scale;
  }
  return static_cast<double>(total.sum * scale);
}

enum class Optimizer { sgd, adam };

struct TrainOptions {
  double learning_rate = 3e-3;
  int epochs = 50;
  int batch_size = 16;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::adam;
  std::function<void(int epoch, double loss)> on_epoch;
};

struct TrainResult {
  NetParams params;
  double initial_loss = 0.0;
  std::vector<double> loss_curve;  // mean training loss after each epoch
};

/// Mean squared error over a whole set of sequences.
inline double dataset_loss(const NetParams& params, std::span<const TrainingSequence> data) {
  LossSum total;
  for (const auto& seq : data) {
    const auto part = sequence_loss(params, seq);
    total.sum += part.sum;
    total.terms += part.terms;
  }
  return total.terms ? static_cast<double>(total.sum / static_cast<long double>(total.terms)) : 0.0;
}

/// Sets each decoder head's output bias to the mean training target of its
/// candidate. A ReLU head whose output starts negative for every input gets
/// no gradient and never recovers; starting at the mean keeps all heads live.
inline void seed_output_biases(NetParams& params, std::span<const TrainingSequence> data) {
  const int L = params.num_candidates();
  std::vector<double> sum(static_cast<std::size_t>(L), 0.0);
  std::vector<std::size_t> n(static_cast<std::size_t>(L), 0);
  for (const auto& seq : data) {
    for (const auto& row : seq.targets) {
      for (int l = 0; l < L && l < static_cast<int>(row.size()); ++l) {
        if (!row[static_cast<std::size_t>(l)]) continue;
        sum[static_cast<std::size_t>(l)] += *row[static_cast<std::size_t>(l)];
        ++n[static_cast<std::size_t>(l)];
      }
    }
  }
  for (int l = 0; l < L; ++l) {
    const auto i = static_cast<std::size_t>(l);
    if (n[i]) params[NetParams::head_b2(l)] = sum[i] / static_cast<double>(n[i]);
  }
}

/// Mini-batch gradient descent with backpropagation through time.
/// Deterministic for a given seed.
inline TrainResult train(std::span<const TrainingSequence> data, int num_candidates,
                         const TrainOptions& options, std::optional<NetParams> init = std::nullopt) {
  if (data.empty()) throw ValidationError("train: empty dataset");
  if (options.batch_size < 1) throw ValidationError("predictor.batch_size: must be >= 1");
  if (options.epochs < 0) throw ValidationError("predictor.epochs: must be >= 0");
  TrainResult result{init ? *init : NetParams::initialize(num_candidates, options.seed), 0.0, {}};
  NetParams& params = result.params;
  if (!init) seed_output_biases(params, data);
  result.initial_loss = dataset_loss(params, data);
  if (!std::isfinite(result.initial_loss)) throw Error("train: initial loss is not finite");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(options.seed ^ 0x7EA1ULL));
  NetParams grad(num_candidates);
  std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long long updates = 0;
  std::vector<const TrainingSequence*> batch;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      batch.clear();
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&data[order[i]]);
      const double loss = batch_loss(params, batch, &grad);
      if (!std::isfinite(loss)) {
        throw Error("train: loss diverged at epoch " + std::to_string(epoch) +
                    " (try a smaller learning rate)");
      }
      ++updates;
      auto p = params.values();
      auto gv = grad.values();
      if (options.optimizer == Optimizer::sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= options.learning_rate * gv[i];
      } else {
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(updates));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(updates));
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = beta1 * m[i] + (1.0 - beta1) * gv[i];
          v[i] = beta2 * v[i] + (1.0 - beta2) * gv[i] * gv[i];
          p[i] -= options.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + adam_eps);
        }
      }
    }
    const double epoch_loss = dataset_loss(params, data);
    if (!std::isfinite(epoch_loss)) throw Error("train: loss diverged after epoch " + std::to_string(epoch));
    result.loss_curve.push_back(epoch_loss);
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);
  }
  return result;
}

/// Relative error used by the gradient checks: |a-b| / max(|a|, |b|, floor).
inline double gradient_relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Hash of the sign of every ReLU input that influences the batch loss. Two
/// parameter vectors with the same signature lie on the same smooth piece.
inline std::uint64_t relu_signature(const NetParams& params, std::span<const TrainingSequence* const> batch) {
  using namespace detail;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](bool bit) {
    h ^= bit ? 0x9FULL : 0x3BULL;
    h *= 0x100000001b3ULL;
  };
  StepCache sc;
  HeadCache hc;
  for (const auto* seq : batch) {
    HiddenState state;
    for (std::size_t t = 0; t < seq->inputs.size(); ++t) {
      forward_step(params, state, seq->inputs[t], sc);
      state.h = sc.h;
      state.cell = sc.c;
      for (double z : sc.z1) feed(z > 0.0);
      for (double z : sc.z2) feed(z > 0.0);
      for (int l = 0; l < params.num_candidates(); ++l) {
        if (!seq->targets[t][static_cast<std::size_t>(l)]) continue;
        head_forward(params, l, state.h, hc);
        for (double z : hc.z) feed(z > 0.0);
        feed(hc.out_pre > 0.0);
      }
    }
  }
  return h;
}

struct GradientCheck {
  double max_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +-step straddles a ReLU kink
};

/// Compares an analytic gradient against central differences, visiting
/// `coordinates` in order until `wanted` have been checked. When `signature`
/// is given, coordinates where it differs between the two probes and the
/// base point are skipped: the finite difference there spans a kink and says
/// nothing about the derivative.
inline GradientCheck check_gradients_generic(
    std::span<double> params, const std::function<double()>& loss,
    const std::function<std::vector<double>()>& analytic_gradient,
    std::span<const std::size_t> coordinates, std::size_t wanted, double step = 1e-5,
    const std::function<std::uint64_t()>& signature = {}) {
  const auto analytic = analytic_gradient();
  const std::uint64_t base = signature ? signature() : 0;
  GradientCheck out;
  for (std::size_t idx : coordinates) {
    if (out.checked == wanted) break;
    const double saved = params[idx];
    params[idx] = saved + step;
    const double up = loss();
    const bool up_smooth = !signature || signature() == base;
    params[idx] = saved - step;
    const double down = loss();
    const bool down_smooth = !signature || signature() == base;
    params[idx] = saved;
    if (!up_smooth || !down_smooth) {
      ++out.skipped;
      continue;
    }
    const double numeric = (up - down) / (2.0 * step);
    out.max_error = std::max(out.max_error, gradient_relative_error(analytic[idx], numeric));
    ++out.checked;
  }
  return out;
}

/// BPTT gradients against central finite differences (step 1e-5) on
/// `num_coordinates` randomly chosen parameters away from ReLU kinks.
inline GradientCheck check_gradients_report(const NetParams& params,
                                            std::span<const TrainingSequence* const> batch,
                                            std::uint64_t seed = 7, std::size_t num_coordinates = 100) {
  NetParams work = params;
  std::mt19937_64 rng(mix_seed(seed));
  std::vector<std::size_t> coords(work.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  std::shuffle(coords.begin(), coords.end(), rng);
  return check_gradients_generic(
      work.values(), [&] { return batch_loss(work, batch); },
      [&] {
        NetParams g(work.num_candidates());
        batch_loss(work, batch, &g);
        return std::vector<double>(g.values().begin(), g.values().end());
      },
      coords, num_coordinates, 1e-5, [&] { return relu_signature(work, batch); });
}

/// Max relative error of check_gradients_report.
inline double check_gradients(const NetParams& params, std::span<const TrainingSequence* const> batch,
                              std::uint64_t seed = 7, std::size_t num_coordinates = 100) {
  return check_gradients_report(params, batch, seed, num_coordinates).max_error;
}

}  // namespace cpmerge
