#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "cpmerge/conformal.hpp"
#include "cpmerge/core.hpp"
#include "cpmerge/hdv_sim.hpp"
#include "cpmerge/loop.hpp"
#include "cpmerge/network.hpp"
#include "cpmerge/planner.hpp"
#include "cpmerge/predictor.hpp"

namespace cpmerge::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Number formatting

/// Shortest decimal that round-trips exactly.
inline std::string format_double(double v) {
  if (v == kInf) return "inf";
  if (v == -kInf) return "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& what) {
  if (s == "inf") return kInf;
  if (s == "-inf") return -kInf;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ValidationError(what + ": not a number: '" + std::string(s) + "'");
  return v;
}

inline std::string format_hex(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

inline double parse_hex(std::string_view s, const std::string& what) {
  double v = 0.0;
  bool neg = !s.empty() && s.front() == '-';
  if (neg) s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ValidationError(what + ": not a hex float: '" + std::string(s) + "'");
  return neg ? -v : v;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

inline std::uint64_t parse_hex64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ValidationError(what + ": not a hex integer");
  return v;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Configuration

struct PredictorConfig {
  std::string kind = "lstm";  // "lstm" or "physics"
  double learning_rate = 3e-3;
  int epochs = 50;
  int batch_size = 16;
  std::uint64_t seed = 1;
  std::string optimizer = "adam";  // "adam" or "sgd"
};

struct RunConfig {
  ZoneConfig zone;
  ScenarioTemplate scenario;
  PredictorConfig predictor;
  PlannerSettings planner;
  std::uint64_t seed = 1;
  int train_count = 3000;
  int calib_count = 500;
  int test_count = 100;
};

/// Field reader that reports the dotted path of whatever is missing or wrong.
class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(path_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) const {
    if (!j_.contains(key)) return;  // defaults stay in place
    const json& v = j_.at(key);
    const std::string where = path_.empty() ? key : path_ + "." + key;
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ValidationError(where + ": expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ValidationError(where + ": expected a boolean");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ValidationError(where + ": expected an integer");
        if (std::is_unsigned_v<T> && v.get<long long>() < 0) throw ValidationError(where + ": must be non-negative");
        out = v.get<T>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ValidationError(where + ": expected a string");
        out = v.get<std::string>();
      } else if constexpr (std::is_same_v<T, Range>) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
          throw ValidationError(where + ": expected [lo, hi]");
        out = Range{v[0].get<double>(), v[1].get<double>()};
      } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        if (!v.is_array()) throw ValidationError(where + ": expected an array of numbers");
        out.clear();
        for (const auto& e : v) {
          if (!e.is_number()) throw ValidationError(where + ": expected an array of numbers");
          out.push_back(e.get<double>());
        }
      }
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }

  JsonReader child(const char* key) const {
    static const json empty = json::object();
    const std::string where = path_.empty() ? key : path_ + "." + key;
    return JsonReader(j_.contains(key) ? j_.at(key) : empty, where);
  }

  void reject_unknown(std::initializer_list<const char*> known) const {
    for (const auto& [k, _] : j_.items()) {
      bool ok = false;
      for (const char* name : known) ok = ok || k == name;
      if (!ok) throw ValidationError((path_.empty() ? k : path_ + "." + k) + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
};

inline json to_json(const ZoneConfig& z) {
  return {{"dt", z.dt},
          {"horizon_steps", z.horizon_steps},
          {"candidate_positions", z.candidate_positions},
          {"lane_offset", z.lane_offset},
          {"headway", z.headway},
          {"v_min", z.v_min},
          {"v_max", z.v_max},
          {"u_min", z.u_min},
          {"u_max", z.u_max},
          {"epsilon", z.epsilon}};
}

inline ZoneConfig zone_from_json(const JsonReader& r) {
  ZoneConfig z;
  r.reject_unknown({"dt", "horizon_steps", "candidate_positions", "lane_offset", "headway", "v_min",
                    "v_max", "u_min", "u_max", "epsilon"});
  r.read("dt", z.dt);
  r.read("horizon_steps", z.horizon_steps);
  r.read("candidate_positions", z.candidate_positions);
  r.read("lane_offset", z.lane_offset);
  r.read("headway", z.headway);
  r.read("v_min", z.v_min);
  r.read("v_max", z.v_max);
  r.read("u_min", z.u_min);
  r.read("u_max", z.u_max);
  r.read("epsilon", z.epsilon);
  return z;
}

inline json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

inline json to_json(const ScenarioTemplate& s) {
  return {{"min_hdvs", s.min_hdvs},
          {"max_hdvs", s.max_hdvs},
          {"lead_position", range_json(s.lead_position)},
          {"gap", range_json(s.gap)},
          {"speed", range_json(s.speed)},
          {"idm_v0", range_json(s.idm_v0)},
          {"idm_T", range_json(s.idm_T)},
          {"idm_s0", range_json(s.idm_s0)},
          {"idm_a", range_json(s.idm_a)},
          {"idm_b", range_json(s.idm_b)},
          {"rho", range_json(s.rho)},
          {"alpha", range_json(s.alpha)},
          {"noise_std", range_json(s.noise_std)},
          {"vehicle_length", s.vehicle_length},
          {"with_cav", s.with_cav},
          {"cav_position", s.cav_position},
          {"cav_speed", range_json(s.cav_speed)},
          {"cav_target_speed", range_json(s.cav_target_speed)}};
}

inline ScenarioTemplate scenario_from_json(const JsonReader& r) {
  ScenarioTemplate s;
  r.reject_unknown({"min_hdvs", "max_hdvs", "lead_position", "gap", "speed", "idm_v0", "idm_T", "idm_s0",
                    "idm_a", "idm_b", "rho", "alpha", "noise_std", "vehicle_length", "with_cav",
                    "cav_position", "cav_speed", "cav_target_speed"});
  r.read("min_hdvs", s.min_hdvs);
  r.read("max_hdvs", s.max_hdvs);
  r.read("lead_position", s.lead_position);
  r.read("gap", s.gap);
  r.read("speed", s.speed);
  r.read("idm_v0", s.idm_v0);
  r.read("idm_T", s.idm_T);
  r.read("idm_s0", s.idm_s0);
  r.read("idm_a", s.idm_a);
  r.read("idm_b", s.idm_b);
  r.read("rho", s.rho);
  r.read("alpha", s.alpha);
  r.read("noise_std", s.noise_std);
  r.read("vehicle_length", s.vehicle_length);
  r.read("with_cav", s.with_cav);
  r.read("cav_position", s.cav_position);
  r.read("cav_speed", s.cav_speed);
  r.read("cav_target_speed", s.cav_target_speed);
  return s;
}

inline json to_json(const RunConfig& c) {
  return {{"zone", to_json(c.zone)},
          {"scenario", to_json(c.scenario)},
          {"predictor",
           {{"kind", c.predictor.kind},
            {"learning_rate", c.predictor.learning_rate},
            {"epochs", c.predictor.epochs},
            {"batch_size", c.predictor.batch_size},
            {"seed", c.predictor.seed},
            {"optimizer", c.predictor.optimizer}}},
          {"planner", {{"speed_step", c.planner.speed_step}, {"nudge_fraction", c.planner.nudge_fraction}}},
          {"seed", c.seed},
          {"train_count", c.train_count},
          {"calib_count", c.calib_count},
          {"test_count", c.test_count}};
}

inline void validate(const RunConfig& c) {
  c.zone.validate();
  c.scenario.validate();
  if (c.predictor.kind != "lstm" && c.predictor.kind != "physics")
    throw ValidationError("predictor.kind: must be \"lstm\" or \"physics\"");
  if (c.predictor.optimizer != "sgd" && c.predictor.optimizer != "adam")
    throw ValidationError("predictor.optimizer: must be \"sgd\" or \"adam\"");
  if (!(c.predictor.learning_rate >= 0.0)) throw ValidationError("predictor.learning_rate: must be >= 0");
  if (c.predictor.epochs < 0) throw ValidationError("predictor.epochs: must be >= 0");
  if (c.predictor.batch_size < 1) throw ValidationError("predictor.batch_size: must be >= 1");
  if (!(c.planner.speed_step > 0.0)) throw ValidationError("planner.speed_step: must be positive");
  if (!(c.planner.nudge_fraction > 0.0 && c.planner.nudge_fraction < 1.0))
    throw ValidationError("planner.nudge_fraction: must lie in (0, 1)");
  if (c.train_count < 0 || c.calib_count < 0 || c.test_count < 0)
    throw ValidationError("train_count: split sizes must be non-negative");
}

inline RunConfig config_from_json(const json& j) {
  JsonReader r(j, "");
  r.reject_unknown({"zone", "scenario", "predictor", "planner", "seed", "train_count", "calib_count", "test_count"});
  RunConfig c;
  c.zone = zone_from_json(r.child("zone"));
  c.scenario = scenario_from_json(r.child("scenario"));
  const auto p = r.child("predictor");
  p.reject_unknown({"kind", "learning_rate", "epochs", "batch_size", "seed", "optimizer"});
  p.read("kind", c.predictor.kind);
  p.read("learning_rate", c.predictor.learning_rate);
  p.read("epochs", c.predictor.epochs);
  p.read("batch_size", c.predictor.batch_size);
  p.read("seed", c.predictor.seed);
  p.read("optimizer", c.predictor.optimizer);
  const auto pl = r.child("planner");
  pl.reject_unknown({"speed_step", "nudge_fraction"});
  pl.read("speed_step", c.planner.speed_step);
  pl.read("nudge_fraction", c.planner.nudge_fraction);
  r.read("seed", c.seed);
  r.read("train_count", c.train_count);
  r.read("calib_count", c.calib_count);
  r.read("test_count", c.test_count);
  validate(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

/// Human-readable reference of every configuration field and its default.
inline std::string config_reference() {
  const RunConfig d;
  const json j = to_json(d);
  struct Doc {
    const char* path;
    const char* text;
  };
  static const Doc docs[] = {
      {"zone.dt", "sampling time, s"},
      {"zone.horizon_steps", "number of steps T; the time grid is 0..T"},
      {"zone.candidate_positions", "merging candidates in the ramp frame, m (strictly increasing, equally spaced)"},
      {"zone.lane_offset", "highway frame = ramp frame + lane_offset, m"},
      {"zone.headway", "minimum time headway delta at the merge, s"},
      {"zone.v_min", "CAV minimum speed, m/s (> 0)"},
      {"zone.v_max", "CAV maximum speed, m/s"},
      {"zone.u_min", "CAV minimum acceleration, m/s^2 (< 0)"},
      {"zone.u_max", "CAV maximum acceleration, m/s^2 (> 0)"},
      {"zone.epsilon", "miscoverage level; bounds target 1 - epsilon coverage"},
      {"scenario.min_hdvs", "fewest HDVs per scenario"},
      {"scenario.max_hdvs", "most HDVs per scenario"},
      {"scenario.lead_position", "[lo, hi] initial position of the front-most HDV, highway frame, m"},
      {"scenario.gap", "[lo, hi] bumper-to-bumper gap to the vehicle ahead, m"},
      {"scenario.speed", "[lo, hi] initial HDV speed, m/s (capped at the driver's desired speed)"},
      {"scenario.idm_v0", "[lo, hi] IDM desired speed, m/s"},
      {"scenario.idm_T", "[lo, hi] IDM desired time headway, s"},
      {"scenario.idm_s0", "[lo, hi] IDM minimum gap, m"},
      {"scenario.idm_a", "[lo, hi] IDM maximum acceleration, m/s^2"},
      {"scenario.idm_b", "[lo, hi] IDM comfortable deceleration, m/s^2"},
      {"scenario.rho", "[lo, hi] altruism level, m/s^2"},
      {"scenario.alpha", "[lo, hi] sensitivity to CAV proximity, 1/m^2"},
      {"scenario.noise_std", "[lo, hi] std of the per-step driving disturbance, m/s^2"},
      {"scenario.vehicle_length", "vehicle length, m"},
      {"scenario.with_cav", "include a CAV on the ramp"},
      {"scenario.cav_position", "initial CAV position, ramp frame, m"},
      {"scenario.cav_speed", "[lo, hi] initial CAV speed, m/s"},
      {"scenario.cav_target_speed", "[lo, hi] cruise speed of the CAV during data collection, m/s"},
      {"predictor.kind", "\"lstm\" (encoder/LSTM/decoder network) or \"physics\" (constant speed)"},
      {"predictor.learning_rate", "gradient step size"},
      {"predictor.epochs", "passes over the training set"},
      {"predictor.batch_size", "trajectories per minibatch"},
      {"predictor.seed", "initialization and shuffling seed"},
      {"predictor.optimizer", "\"sgd\" (plain minibatch descent) or \"adam\""},
      {"planner.speed_step", "merge-speed grid resolution, m/s"},
      {"planner.nudge_fraction", "interval endpoints are tried at endpoint + dt * nudge_fraction"},
      {"seed", "base seed; train/calibration/test scenarios use disjoint seed ranges"},
      {"train_count", "training scenarios generated by gen-data"},
      {"calib_count", "calibration scenarios generated by gen-data"},
      {"test_count", "test scenarios generated by gen-data"},
  };
  std::ostringstream os;
  os << "Configuration reference (JSON). Omitted fields take the default.\n\n";
  for (const auto& d : docs) {
    const json::json_pointer ptr("/" + [&] {
      std::string p = d.path;
      for (char& ch : p)
        if (ch == '.') ch = '/';
      return p;
    }());
    os << d.path << " = " << j.at(ptr).dump() << "\n    " << d.text << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Trajectory dataset: CSV rows plus a JSON sidecar with arrival times

inline constexpr std::string_view kTrajectoryHeader =
    "scenario_id,step,time_s,vehicle_id,role,lane,position_m,speed_mps,accel_mps2";

/// HDVs get vehicle ids 1..N (front-most first), the CAV id 0.
inline void write_trajectory_csv(std::ostream& os, std::span<const ScenarioTrace> traces) {
  os << kTrajectoryHeader << '\n';
  for (const auto& tr : traces) {
    for (int k = 0; k < tr.steps(); ++k) {
      const std::string prefix = std::to_string(tr.seed) + ',' + std::to_string(k) + ',' +
                                 format_double(tr.config.step_time(k)) + ',';
      if (tr.cav_states) {
        const auto& s = (*tr.cav_states)[static_cast<std::size_t>(k)];
        os << prefix << "0,cav,ramp," << format_double(s.position) << ',' << format_double(s.speed) << ','
           << format_double(tr.cav_accels[static_cast<std::size_t>(k)]) << '\n';
      }
      for (std::size_t n = 0; n < tr.num_hdvs(); ++n) {
        const auto& s = tr.hdv_states[n][static_cast<std::size_t>(k)];
        os << prefix << (n + 1) << ",hdv,highway," << format_double(s.position) << ','
           << format_double(s.speed) << ',' << format_double(tr.hdv_accels[n][static_cast<std::size_t>(k)]) << '\n';
      }
    }
  }
}

inline std::string arrival_key(std::uint64_t scenario, std::size_t vehicle_id) {
  return std::to_string(scenario) + ":" + std::to_string(vehicle_id);
}

inline json arrivals_sidecar(std::span<const ScenarioTrace> traces, const ZoneConfig& zone) {
  json j;
  j["format"] = "cpmerge.arrivals";
  j["version"] = 1;
  j["zone"] = to_json(zone);
  j["scenarios"] = json::array();
  j["arrivals"] = json::object();
  for (const auto& tr : traces) {
    j["scenarios"].push_back({{"scenario_id", tr.seed}, {"num_hdvs", tr.num_hdvs()},
                              {"collision", tr.collision}, {"has_cav", tr.cav_states.has_value()}});
    for (std::size_t n = 0; n < tr.num_hdvs(); ++n) {
      json a = json::array();
      for (const auto& t : tr.arrivals[n].times) a.push_back(t ? json(*t) : json(nullptr));
      j["arrivals"][arrival_key(tr.seed, n + 1)] = a;
    }
  }
  return j;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Reads traces back from CSV + sidecar. Arrival times come from the sidecar
/// so externally converted data need not satisfy the simulator's invariants.
inline std::vector<ScenarioTrace> read_dataset(std::istream& csv, const json& sidecar) {
  if (sidecar.value("format", "") != "cpmerge.arrivals")
    throw ValidationError("arrivals: not a cpmerge arrivals sidecar");
  const ZoneConfig zone = zone_from_json(JsonReader(sidecar.at("zone"), "arrivals.zone"));
  zone.validate();
  std::vector<ScenarioTrace> traces;
  std::map<std::uint64_t, std::size_t> index;
  for (const auto& s : sidecar.at("scenarios")) {
    ScenarioTrace tr;
    tr.seed = s.at("scenario_id").get<std::uint64_t>();
    tr.config = zone;
    tr.collision = s.value("collision", false);
    const auto n = s.at("num_hdvs").get<std::size_t>();
    tr.hdv_states.assign(n, {});
    tr.hdv_accels.assign(n, {});
    if (s.value("has_cav", false)) tr.cav_states.emplace();
    for (std::size_t v = 0; v < n; ++v) {
      const auto key = arrival_key(tr.seed, v + 1);
      if (!sidecar.at("arrivals").contains(key)) throw ValidationError("arrivals." + key + ": missing");
      ArrivalTimes at;
      for (const auto& e : sidecar["arrivals"][key]) at.times.push_back(e.is_null() ? std::nullopt : std::optional<double>(e.get<double>()));
      if (static_cast<int>(at.size()) != zone.num_candidates())
        throw ValidationError("arrivals." + key + ": expected one entry per candidate");
      tr.arrivals.push_back(std::move(at));
    }
    index[tr.seed] = traces.size();
    traces.push_back(std::move(tr));
  }
  std::string line;
  if (!std::getline(csv, line) || line != kTrajectoryHeader)
    throw ValidationError("trajectories: unexpected CSV header");
  std::size_t row = 1;
  while (std::getline(csv, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = "trajectories row " + std::to_string(row);
    if (f.size() != 9) throw ValidationError(where + ": expected 9 columns");
    const auto sid = static_cast<std::uint64_t>(parse_double(f[0], where));
    const auto it = index.find(sid);
    if (it == index.end()) throw ValidationError(where + ": scenario not in sidecar");
    ScenarioTrace& tr = traces[it->second];
    const auto step = static_cast<std::size_t>(parse_double(f[1], where));
    const auto vid = static_cast<std::size_t>(parse_double(f[3], where));
    const VehicleState s{parse_double(f[6], where), parse_double(f[7], where)};
    const double accel = parse_double(f[8], where);
    if (f[4] == "cav") {
      if (!tr.cav_states || tr.cav_states->size() != step) throw ValidationError(where + ": CAV rows out of order");
      tr.cav_states->push_back(s);
      tr.cav_accels.push_back(accel);
    } else if (f[4] == "hdv") {
      if (vid < 1 || vid > tr.num_hdvs() || tr.hdv_states[vid - 1].size() != step)
        throw ValidationError(where + ": HDV rows out of order or unknown vehicle");
      tr.hdv_states[vid - 1].push_back(s);
      tr.hdv_accels[vid - 1].push_back(accel);
    } else {
      throw ValidationError(where + ": role must be hdv or cav");
    }
  }
  for (const auto& tr : traces) {
    const int steps = tr.steps();
    for (const auto& s : tr.hdv_states)
      if (static_cast<int>(s.size()) != steps) throw ValidationError("trajectories: ragged HDV series");
  }
  return traces;
}

struct DatasetPaths {
  std::string csv;
  std::string sidecar;
};

inline DatasetPaths dataset_paths(const std::string& dir, const std::string& split) {
  return {dir + "/" + split + ".csv", dir + "/" + split + ".arrivals.json"};
}

inline void write_dataset(const std::string& dir, const std::string& split,
                          std::span<const ScenarioTrace> traces, const ZoneConfig& zone) {
  const auto p = dataset_paths(dir, split);
  std::ofstream csv(p.csv, std::ios::binary);
  std::ofstream side(p.sidecar, std::ios::binary);
  if (!csv || !side) throw Error("cannot write dataset split '" + split + "' under " + dir);
  write_trajectory_csv(csv, traces);
  side << arrivals_sidecar(traces, zone).dump(1) << '\n';
}

inline std::vector<ScenarioTrace> load_dataset(const std::string& dir, const std::string& split) {
  const auto p = dataset_paths(dir, split);
  std::ifstream csv(p.csv, std::ios::binary);
  std::ifstream side(p.sidecar, std::ios::binary);
  if (!csv || !side) throw ValidationError("dataset: missing split '" + split + "' under " + dir);
  json j;
  try {
    side >> j;
  } catch (const json::exception& e) {
    throw ValidationError("dataset: invalid sidecar: " + std::string(e.what()));
  }
  return read_dataset(csv, j);
}

// ---------------------------------------------------------------------------
// Model checkpoint: text header lines, parameters as hex floats (bit exact)

inline void write_checkpoint(std::ostream& os, const NetParams* params, int num_candidates) {
  os << "cpmerge-checkpoint 1\n";
  os << "kind " << (params ? "lstm" : "physics") << "\n";
  os << "candidates " << num_candidates << "\n";
  os << "parameters " << (params ? params->size() : 0) << "\n";
  if (params) {
    const auto v = params->values();
    for (const auto& t : params->layout()) {
      os << "tensor " << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
      for (int r = 0; r < t.rows; ++r) {
        for (int c = 0; c < t.cols; ++c) {
          if (c) os << ' ';
          os << format_hex(v[t.offset + static_cast<std::size_t>(r) * t.cols + c]);
        }
        os << '\n';
      }
    }
  }
  os << "end\n";
}

struct Checkpoint {
  std::string kind;
  int num_candidates = 0;
  std::optional<NetParams> params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  auto expect = [&](const std::string& key) {
    std::string k;
    if (!(is >> k) || k != key) throw ValidationError("checkpoint: expected '" + key + "'");
  };
  expect("cpmerge-checkpoint");
  int version = 0;
  is >> version;
  if (version != 1) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  expect("kind");
  is >> ck.kind;
  expect("candidates");
  is >> ck.num_candidates;
  expect("parameters");
  std::size_t count = 0;
  is >> count;
  if (ck.kind == "physics") {
    if (count != 0) throw ValidationError("checkpoint: physics model has no parameters");
  } else if (ck.kind == "lstm") {
    NetParams p(ck.num_candidates);
    if (count != p.size()) throw ValidationError("checkpoint: parameter count does not match the architecture");
    auto v = p.values();
    for (const auto& t : p.layout()) {
      std::string name;
      int rows = 0, cols = 0;
      expect("tensor");
      is >> name >> rows >> cols;
      if (name != t.name || rows != t.rows || cols != t.cols)
        throw ValidationError("checkpoint: tensor '" + name + "' does not match expected '" + t.name + "'");
      for (std::size_t i = 0; i < t.size(); ++i) {
        std::string tok;
        if (!(is >> tok)) throw ValidationError("checkpoint: truncated tensor " + t.name);
        v[t.offset + i] = parse_hex(tok, "checkpoint." + t.name);
      }
    }
    ck.params = std::move(p);
  } else {
    throw ValidationError("checkpoint: unknown kind '" + ck.kind + "'");
  }
  expect("end");
  return ck;
}

inline void save_checkpoint(const std::string& path, const NetParams* params, int num_candidates) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_checkpoint(os, params, num_candidates);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

inline std::unique_ptr<Predictor> make_predictor(const Checkpoint& ck, const ZoneConfig& zone) {
  if (ck.num_candidates != zone.num_candidates())
    throw ValidationError("checkpoint: candidate count does not match zone.candidate_positions");
  if (ck.kind == "physics") return std::make_unique<PhysicsPredictor>(zone);
  return std::make_unique<RecurrentPredictor>(*ck.params, zone);
}

// ---------------------------------------------------------------------------
// Conformal table

inline json to_json(const ConformalTable& t) {
  json j;
  j["format"] = "cpmerge.conformal_table";
  j["version"] = 1;
  j["epsilon"] = t.epsilon;
  j["fingerprint"] = hex64(t.fingerprint);
  j["monotonized"] = t.monotonized;
  j["steps"] = t.steps;
  j["candidates"] = t.candidates;
  j["bounds"] = json::array();
  j["calib_sizes"] = json::array();
  for (int s = 0; s < t.steps; ++s) {
    json row = json::array(), k = json::array();
    for (int l = 0; l < t.candidates; ++l) {
      row.push_back(number_or_null(t.bound(s, l)));
      k.push_back(t.calib_size(s, l));
    }
    j["bounds"].push_back(row);
    j["calib_sizes"].push_back(k);
  }
  return j;
}

inline ConformalTable table_from_json(const json& j) {
  if (j.value("format", "") != "cpmerge.conformal_table") throw ValidationError("table: wrong format tag");
  ConformalTable t(j.at("steps").get<int>(), j.at("candidates").get<int>(), j.at("epsilon").get<double>(),
                   parse_hex64(j.at("fingerprint").get<std::string>(), "table.fingerprint"));
  t.monotonized = j.at("monotonized").get<bool>();
  const auto& b = j.at("bounds");
  const auto& k = j.at("calib_sizes");
  if (static_cast<int>(b.size()) != t.steps || static_cast<int>(k.size()) != t.steps)
    throw ValidationError("table.bounds: row count does not match steps");
  for (int s = 0; s < t.steps; ++s) {
    if (static_cast<int>(b[s].size()) != t.candidates) throw ValidationError("table.bounds: ragged row");
    for (int l = 0; l < t.candidates; ++l) {
      const auto& e = b[s][l];
      t.bound(s, l) = e.is_null() ? kInf : e.get<double>();
      if (t.bound(s, l) < 0.0) throw ValidationError("table.bounds: negative bound");
      t.calib_sizes[t.index(s, l)] = k[s][l].get<int>();
    }
  }
  return t;
}

inline void save_table(const std::string& path, const ConformalTable& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << to_json(t).dump(1) << '\n';
}

inline ConformalTable load_table(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("table: cannot open " + path);
  json j;
  try {
    is >> j;
    return table_from_json(j);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("table: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

inline json to_json(const CoverageReport& r, double epsilon) {
  auto cell = [](const CoverageCell& c) {
    const auto ci = c.ci();
    return json{{"hits", c.hits}, {"total", c.total}, {"rate", c.rate()}, {"ci95", {ci.lo, ci.hi}}};
  };
  json j;
  j["epsilon"] = epsilon;
  j["target"] = 1.0 - epsilon;
  j["pooled"] = cell(r.pooled);
  j["per_step"] = json::array();
  for (const auto& c : r.per_step) j["per_step"].push_back(cell(c));
  j["per_candidate"] = json::array();
  for (const auto& c : r.per_candidate) j["per_candidate"].push_back(cell(c));
  j["per_cell_rate"] = json::array();
  for (int t = 0; t < r.steps; ++t) {
    json row = json::array();
    for (int l = 0; l < r.candidates; ++l) row.push_back(r.cell(t, l).rate());
    j["per_cell_rate"].push_back(row);
  }
  return j;
}

inline json to_json(const MergePlan& p) {
  return {{"a", p.psi.a}, {"b", p.psi.b}, {"c", p.psi.c}, {"d", p.psi.d},
          {"merge_time", p.merge_time}, {"merge_speed", p.merge_speed},
          {"candidate", p.candidate}, {"margin", number_or_null(p.margin)}};
}

inline json to_json(const RunResult& r) {
  json j;
  j["seed"] = r.seed;
  j["merged"] = r.merged;
  j["merge_step"] = r.merge_step;
  j["candidate"] = r.candidate;
  j["merge_time"] = number_or_null(r.merge_time);
  j["headways"] = json::array();
  for (double h : r.headways) j["headways"].push_back(number_or_null(h));
  j["violation"] = r.violation;
  j["collision"] = r.collision;
  j["infeasible_steps"] = r.infeasible_steps;
  j["planning_steps"] = r.planning_steps;
  j["min_planned_margin"] = number_or_null(r.min_planned_margin);
  j["plans"] = json::array();
  for (const auto& p : r.plans) {
    json e{{"step", p.step}, {"feasible", p.feasible}, {"committed", p.committed}, {"accel", p.accel}};
    if (p.plan) e["plan"] = to_json(*p.plan);
    j["plans"].push_back(e);
  }
  return j;
}

inline json to_json(const BatchReport& r) {
  json j{{"runs", r.runs},
         {"merged", r.merged},
         {"violations", r.violations},
         {"collisions", r.collisions},
         {"merge_rate", r.merge_rate},
         {"violation_rate", r.violation_rate},
         {"violation_ci95", {r.violation_ci.lo, r.violation_ci.hi}},
         {"mean_merge_time", r.mean_merge_time},
         {"p50_merge_time", r.p50_merge_time},
         {"p90_merge_time", r.p90_merge_time},
         {"infeasible_step_rate", r.infeasible_step_rate},
         {"note", "violation rate is a Monte-Carlo observation; the coverage guarantee holds per planning "
                  "instant and per HDV"}};
  if (r.has_oracle) {
    j["oracle"] = {{"merged", r.oracle_merged},
                   {"mean_merge_time", r.oracle_mean_merge_time},
                   {"matched_runs", r.matched},
                   {"matched_mean_merge_time", r.matched_mean_merge_time},
                   {"matched_oracle_mean_merge_time", r.matched_oracle_mean_merge_time},
                   {"min_gap", r.oracle_min_gap},
                   {"max_gap", r.oracle_max_gap}};
  }
  j["runs_detail"] = json::array();
  for (const auto& res : r.results) {
    j["runs_detail"].push_back({{"seed", res.seed}, {"merged", res.merged}, {"candidate", res.candidate},
                                {"merge_time", number_or_null(res.merge_time)}, {"violation", res.violation},
                                {"infeasible_steps", res.infeasible_steps}});
  }
  return j;
}

/// Per-step plot data: CAV and HDV states plus the plan in force.
inline void write_plot_csv(std::ostream& os, const RunResult& r) {
  const auto& tr = r.trace;
  os << "step,time_s,cav_position_m,cav_speed_mps,feasible,candidate,merge_time_s,merge_speed_mps,margin_s";
  for (std::size_t n = 0; n < tr.num_hdvs(); ++n) os << ",hdv" << (n + 1) << "_position_m,hdv" << (n + 1) << "_speed_mps";
  os << '\n';
  for (int k = 0; k < tr.steps(); ++k) {
    const auto& c = (*tr.cav_states)[static_cast<std::size_t>(k)];
    os << k << ',' << format_double(tr.config.step_time(k)) << ',' << format_double(c.position) << ','
       << format_double(c.speed) << ',';
    const PlanRecord* rec = static_cast<std::size_t>(k) < r.plans.size() ? &r.plans[static_cast<std::size_t>(k)] : nullptr;
    if (rec && rec->plan) {
      os << 1 << ',' << rec->plan->candidate << ',' << format_double(rec->plan->merge_time) << ','
         << format_double(rec->plan->merge_speed) << ',' << format_double(rec->plan->margin);
    } else {
      os << (rec ? 0 : -1) << ",,,,";
    }
    for (std::size_t n = 0; n < tr.num_hdvs(); ++n) {
      const auto& s = tr.hdv_states[n][static_cast<std::size_t>(k)];
      os << ',' << format_double(s.position) << ',' << format_double(s.speed);
    }
    os << '\n';
  }
}

}  // namespace cpmerge::io
