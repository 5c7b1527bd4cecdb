#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cpmerge/io.hpp"
#include "cpmerge/pipeline.hpp"

using namespace cpmerge;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("cpmerge_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                                ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(const std::string& text) {
  try {
    io::config_from_json(io::json::parse(text));
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Numbers, RoundTrip) {
  for (double v : {0.1, -1e-300, 1.0 / 3.0, 123456789.123, 5e-324}) {
    EXPECT_EQ(io::parse_double(io::format_double(v), "x"), v);
    EXPECT_EQ(io::parse_hex(io::format_hex(v), "x"), v);
  }
  EXPECT_EQ(io::parse_double(io::format_double(kInf), "x"), kInf);
  EXPECT_EQ(io::parse_hex64(io::hex64(0xDEADBEEF12345678ULL), "x"), 0xDEADBEEF12345678ULL);
  EXPECT_THROW(io::parse_double("1.5x", "field"), ValidationError);
}

TEST(Config, DefaultsRoundTrip) {
  const io::RunConfig d;
  const auto back = io::config_from_json(io::to_json(d));
  EXPECT_EQ(io::to_json(back), io::to_json(d));
  EXPECT_EQ(io::config_from_json(io::json::object()).zone.candidate_positions, d.zone.candidate_positions);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(error_of(R"({"zone": {"dt": "fast"}})"), "zone.dt: expected a number");
  EXPECT_EQ(error_of(R"({"zone": {"dx": 1}})"), "zone.dx: unknown field");
  EXPECT_EQ(error_of(R"({"scenario": {"rho": [1]}})"), "scenario.rho: expected [lo, hi]");
  EXPECT_EQ(error_of(R"({"predictor": {"kind": "gru"}})"), "predictor.kind: must be \"lstm\" or \"physics\"");
  EXPECT_EQ(error_of(R"({"predictor": {"epochs": 2.5}})"), "predictor.epochs: expected an integer");
  EXPECT_EQ(error_of(R"({"seed": -1})"), "seed: must be non-negative");
  EXPECT_EQ(error_of(R"({"zone": {"candidate_positions": [100, 90]}})").rfind("zone.candidate_positions", 0), 0u);
  EXPECT_EQ(error_of(R"({"zone": []})"), "zone: expected an object");
}

TEST(Config, ReferenceDocumentsEveryField) {
  const auto ref = io::config_reference();
  for (const char* key : {"zone.dt", "zone.epsilon", "scenario.rho", "predictor.optimizer", "planner.speed_step",
                          "train_count"})
    EXPECT_NE(ref.find(key), std::string::npos) << key;
}

TEST(Config, LoadReportsMissingFileAndBadJson) {
  TempDir dir;
  EXPECT_THROW(io::load_config(dir.file("nope.json")), ValidationError);
  std::ofstream(dir.file("bad.json")) << "{ not json";
  EXPECT_THROW(io::load_config(dir.file("bad.json")), ValidationError);
}

TEST(Dataset, RoundTripsExactly) {
  TempDir dir;
  ZoneConfig z;
  const auto traces = generate_traces(split_seeds(3, Split::train, 4), ScenarioTemplate{}, z, 1);
  io::write_dataset(dir.str(), "train", traces, z);
  const auto back = io::load_dataset(dir.str(), "train");
  ASSERT_EQ(back.size(), traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    EXPECT_EQ(back[i].seed, traces[i].seed);
    EXPECT_EQ(back[i].hdv_states, traces[i].hdv_states);
    EXPECT_EQ(back[i].hdv_accels, traces[i].hdv_accels);
    EXPECT_EQ(back[i].cav_states, traces[i].cav_states);
    EXPECT_EQ(back[i].cav_accels, traces[i].cav_accels);
    EXPECT_EQ(back[i].arrivals, traces[i].arrivals);
    EXPECT_EQ(back[i].collision, traces[i].collision);
  }
  // Same seed, same bytes.
  const auto first = slurp(dir.file("train.csv"));
  io::write_dataset(dir.str(), "again", generate_traces(split_seeds(3, Split::train, 4), ScenarioTemplate{}, z, 3), z);
  EXPECT_EQ(slurp(dir.file("again.csv")), first);
  EXPECT_EQ(slurp(dir.file("again.arrivals.json")), slurp(dir.file("train.arrivals.json")));
}

TEST(Dataset, EmptySplitIsHeaderOnly) {
  TempDir dir;
  io::write_dataset(dir.str(), "test", {}, ZoneConfig{});
  EXPECT_EQ(slurp(dir.file("test.csv")), std::string(io::kTrajectoryHeader) + "\n");
  EXPECT_TRUE(io::load_dataset(dir.str(), "test").empty());
}

TEST(Dataset, RejectsMalformedInput) {
  ZoneConfig z;
  const auto traces = generate_traces(split_seeds(3, Split::train, 1), ScenarioTemplate{}, z, 1);
  const auto side = io::arrivals_sidecar(traces, z);
  std::istringstream bad_header("a,b,c\n");
  EXPECT_THROW(io::read_dataset(bad_header, side), ValidationError);
  std::istringstream bad_role(std::string(io::kTrajectoryHeader) + "\n" + std::to_string(traces[0].seed) +
                              ",0,0,1,bus,highway,1,2,3\n");
  EXPECT_THROW(io::read_dataset(bad_role, side), ValidationError);
  std::istringstream unknown(std::string(io::kTrajectoryHeader) + "\n999,0,0,1,hdv,highway,1,2,3\n");
  EXPECT_THROW(io::read_dataset(unknown, side), ValidationError);
  EXPECT_THROW(io::read_dataset(bad_header, io::json{{"format", "other"}}), ValidationError);
}

TEST(Checkpoint, BitExactRoundTrip) {
  TempDir dir;
  const auto p = NetParams::initialize(10, 77);
  io::save_checkpoint(dir.file("m.ckpt"), &p, 10);
  const auto ck = io::load_checkpoint(dir.file("m.ckpt"));
  EXPECT_EQ(ck.kind, "lstm");
  ASSERT_TRUE(ck.params);
  EXPECT_TRUE(*ck.params == p);
  EXPECT_EQ(ck.params->fingerprint(), p.fingerprint());
  const auto pred = io::make_predictor(ck, ZoneConfig{});
  EXPECT_EQ(pred->fingerprint(), p.fingerprint());
  io::save_checkpoint(dir.file("again.ckpt"), &*ck.params, 10);
  EXPECT_EQ(slurp(dir.file("again.ckpt")), slurp(dir.file("m.ckpt")));
}

TEST(Checkpoint, PhysicsHasNoParameters) {
  std::stringstream ss;
  io::write_checkpoint(ss, nullptr, 10);
  const auto ck = io::read_checkpoint(ss);
  EXPECT_EQ(ck.kind, "physics");
  EXPECT_FALSE(ck.params);
  EXPECT_EQ(io::make_predictor(ck, ZoneConfig{})->kind(), "physics");
  ZoneConfig three;
  three.candidate_positions = {100, 110, 120};
  EXPECT_THROW(io::make_predictor(ck, three), ValidationError);
}

TEST(Checkpoint, RejectsCorruption) {
  const auto p = NetParams::initialize(4, 1);
  std::stringstream ss;
  io::write_checkpoint(ss, &p, 4);
  auto text = ss.str();
  std::istringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(io::read_checkpoint(truncated), ValidationError);
  std::istringstream wrong(std::string("cpmerge-checkpoint 2\n"));
  EXPECT_THROW(io::read_checkpoint(wrong), ValidationError);
}

TEST(Table, RoundTripWithInfinities) {
  TempDir dir;
  ConformalTable t(3, 2, 0.1, 0xFEEDFACECAFEBEEFULL);
  t.bounds = {0.1, kInf, 1.0 / 3.0, 2.5, 0.0, kInf};
  t.calib_sizes = {5, 0, 9, 9, 9, 0};
  t.monotonized = true;
  io::save_table(dir.file("t.json"), t);
  const auto back = io::load_table(dir.file("t.json"));
  EXPECT_TRUE(back == t);
  const auto j = io::to_json(t);
  EXPECT_TRUE(j["bounds"][0][1].is_null());
  EXPECT_EQ(j["fingerprint"], "feedfacecafebeef");
  auto neg = j;
  neg["bounds"][0][0] = -1.0;
  EXPECT_THROW(io::table_from_json(neg), ValidationError);
}

TEST(Reports, PlotCsvHasOneRowPerStep) {
  ZoneConfig z;
  PhysicsPredictor pred(z);
  ConformalTable table(z.num_steps(), z.num_candidates(), z.epsilon, pred.fingerprint());
  const auto r = run_closed_loop(sample_scenario(4, {}), &pred, &table, z);
  std::stringstream ss;
  io::write_plot_csv(ss, r);
  std::string line;
  std::getline(ss, line);
  const auto header = io::split_csv(line);
  EXPECT_EQ(header.size(), 9 + 2 * r.trace.num_hdvs());
  int rows = 0;
  while (std::getline(ss, line)) {
    EXPECT_EQ(io::split_csv(line).size(), header.size());
    ++rows;
  }
  EXPECT_EQ(rows, z.num_steps());
  const auto j = io::to_json(r);
  EXPECT_EQ(j["merged"], r.merged);
}
