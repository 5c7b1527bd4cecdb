// Command-line driver: data generation, training, calibration, evaluation.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cpmerge/cpmerge.hpp"
#include "cpmerge/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cpmerge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitInfeasible = 3;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> epsilon;
  std::string out;
};

io::RunConfig load(const Common& c) {
  io::RunConfig cfg = c.config_path.empty() ? io::RunConfig{} : io::load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.epsilon) cfg.zone.epsilon = *c.epsilon;
  io::validate(cfg);
  return cfg;
}

void add_common(CLI::App* cmd, Common& c, bool with_out = true) {
  cmd->add_option("--config", c.config_path, "JSON run configuration (defaults apply when omitted)");
  cmd->add_option("--seed", c.seed, "override the base seed");
  cmd->add_option("--epsilon", c.epsilon, "override the miscoverage level");
  if (with_out) cmd->add_option("--out", c.out, "output path")->required();
}

void write_json(const std::string& path, const io::json& j) {
  if (path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << j.dump(2) << '\n';
}

std::unique_ptr<Predictor> load_predictor(const std::string& path, const ZoneConfig& zone) {
  return io::make_predictor(io::load_checkpoint(path), zone);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal-prediction-aware on-ramp merging"};
  app.require_subcommand(1);

  Common cfg_opts;
  bool reference = false;
  auto* config_cmd = app.add_subcommand("config", "write the effective configuration as JSON");
  add_common(config_cmd, cfg_opts, false);
  config_cmd->add_option("--out", cfg_opts.out, "output path (default: stdout)");
  config_cmd->add_flag("--reference", reference, "print the field reference instead");

  Common gen;
  std::vector<std::string> splits{"train", "calib", "test"};
  auto* gen_cmd = app.add_subcommand("gen-data", "simulate train/calib/test rollouts into a directory");
  add_common(gen_cmd, gen);
  gen_cmd->add_option("--splits", splits, "subset of train, calib, test");

  Common tr;
  std::string data_dir;
  auto* train_cmd = app.add_subcommand("train", "fit the predictor on the training split");
  add_common(train_cmd, tr);
  train_cmd->add_option("--data", data_dir, "dataset directory from gen-data")->required();

  Common cal;
  std::string model_path;
  bool monotone = false;
  auto* cal_cmd = app.add_subcommand("calibrate", "build the conformal bound table");
  add_common(cal_cmd, cal);
  cal_cmd->add_option("--data", data_dir, "dataset directory")->required();
  cal_cmd->add_option("--model", model_path, "checkpoint from train")->required();
  cal_cmd->add_flag("--monotonize", monotone, "replace each column with its running minimum over time");

  Common cov;
  std::string table_path;
  auto* cov_cmd = app.add_subcommand("coverage", "evaluate empirical coverage on the test split");
  add_common(cov_cmd, cov);
  cov_cmd->add_option("--data", data_dir, "dataset directory")->required();
  cov_cmd->add_option("--model", model_path, "checkpoint")->required();
  cov_cmd->add_option("--table", table_path, "conformal table")->required();

  Common sim;
  std::string plot_path;
  auto* sim_cmd = app.add_subcommand("simulate", "run one closed-loop episode");
  add_common(sim_cmd, sim);
  sim_cmd->add_option("--model", model_path, "checkpoint")->required();
  sim_cmd->add_option("--table", table_path, "conformal table")->required();
  sim_cmd->add_option("--plot", plot_path, "per-step plot data (CSV)");

  Common bat;
  int runs = 100;
  bool no_oracle = false;
  unsigned workers = 0;
  auto* batch_cmd = app.add_subcommand("batch", "Monte-Carlo closed-loop evaluation");
  add_common(batch_cmd, bat);
  batch_cmd->add_option("--model", model_path, "checkpoint")->required();
  batch_cmd->add_option("--table", table_path, "conformal table")->required();
  batch_cmd->add_option("--runs", runs, "number of episodes");
  batch_cmd->add_flag("--no-oracle", no_oracle, "skip the ground-truth planner comparison");
  batch_cmd->add_option("--workers", workers, "threads (0 = hardware concurrency)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*config_cmd) {
      if (reference) {
        std::cout << io::config_reference();
        return kExitOk;
      }
      write_json(cfg_opts.out.empty() ? "-" : cfg_opts.out, io::to_json(load(cfg_opts)));
      return kExitOk;
    }

    if (*gen_cmd) {
      const auto cfg = load(gen);
      fs::create_directories(gen.out);
      for (const auto& name : splits) {
        Split s;
        int count;
        if (name == "train") {
          s = Split::train;
          count = cfg.train_count;
        } else if (name == "calib") {
          s = Split::calib;
          count = cfg.calib_count;
        } else if (name == "test") {
          s = Split::test;
          count = cfg.test_count;
        } else {
          throw ValidationError("--splits: unknown split '" + name + "'");
        }
        const auto seeds = split_seeds(cfg.seed, s, static_cast<std::size_t>(count));
        const auto traces = generate_traces(seeds, cfg.scenario, cfg.zone);
        io::write_dataset(gen.out, name, traces, cfg.zone);
        std::size_t collisions = 0;
        for (const auto& t : traces) collisions += t.collision ? 1 : 0;
        std::cerr << name << ": " << traces.size() << " scenarios (" << collisions << " with collisions)\n";
      }
      return kExitOk;
    }

    if (*train_cmd) {
      const auto cfg = load(tr);
      if (cfg.predictor.kind == "physics") {
        io::save_checkpoint(tr.out, nullptr, cfg.zone.num_candidates());
        return kExitOk;
      }
      const auto traces = io::load_dataset(data_dir, "train");
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = train_predictor(traces, cfg, [](int epoch, double loss) {
        std::cerr << "epoch " << epoch + 1 << " loss " << loss << '\n';
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "initial loss " << res.initial_loss << ", final "
                << (res.loss_curve.empty() ? res.initial_loss : res.loss_curve.back()) << " (" << secs << " s)\n";
      io::save_checkpoint(tr.out, &res.params, cfg.zone.num_candidates());
      return kExitOk;
    }

    if (*cal_cmd) {
      const auto cfg = load(cal);
      const auto predictor = load_predictor(model_path, cfg.zone);
      const auto calib = exchangeable_trajectories(io::load_dataset(data_dir, "calib"));
      auto table = build_table(calib, *predictor, cfg.zone);
      if (monotone) table = monotonize(table);
      io::save_table(cal.out, table);
      std::cerr << "calibrated on " << calib.size() << " trajectories\n";
      return kExitOk;
    }

    if (*cov_cmd) {
      const auto cfg = load(cov);
      const auto predictor = load_predictor(model_path, cfg.zone);
      const auto table = io::load_table(table_path);
      if (table.fingerprint != predictor->fingerprint())
        throw ValidationError("table: calibrated for a different predictor (fingerprint mismatch)");
      const auto test = exchangeable_trajectories(io::load_dataset(data_dir, "test"));
      const auto scored = score_trajectories(*predictor, test);
      const auto rep = evaluate_coverage(scored, table);
      write_json(cov.out, io::to_json(rep, table.epsilon));
      std::cerr << "pooled coverage " << rep.pooled.rate() << " over " << rep.pooled.total << " cells\n";
      return kExitOk;
    }

    if (*sim_cmd) {
      const auto cfg = load(sim);
      const auto predictor = load_predictor(model_path, cfg.zone);
      const auto table = io::load_table(table_path);
      const auto seed = split_seeds(cfg.seed, Split::eval, 1).front();
      LoopOptions opts;
      opts.planner = cfg.planner;
      const auto res = run_closed_loop(sample_scenario(seed, cfg.scenario), predictor.get(), &table, cfg.zone, opts);
      write_json(sim.out, io::to_json(res));
      if (!plot_path.empty()) {
        std::ofstream os(plot_path, std::ios::binary);
        if (!os) throw Error("cannot write " + plot_path);
        io::write_plot_csv(os, res);
      }
      return (res.planning_steps > 0 && res.infeasible_steps == res.planning_steps) ? kExitInfeasible : kExitOk;
    }

    if (*batch_cmd) {
      const auto cfg = load(bat);
      if (runs < 1) throw ValidationError("--runs: must be >= 1");
      const auto predictor = load_predictor(model_path, cfg.zone);
      const auto table = io::load_table(table_path);
      const auto seeds = split_seeds(cfg.seed, Split::eval, static_cast<std::size_t>(runs));
      const auto rep = batch_evaluate(seeds, cfg.scenario, *predictor, table, cfg.zone, !no_oracle, cfg.planner, workers);
      write_json(bat.out, io::to_json(rep));
      std::cerr << "merged " << rep.merged << "/" << rep.runs << ", violations " << rep.violations
                << ", mean merge time " << rep.mean_merge_time << " s\n";
      bool all_infeasible = true;
      for (const auto& r : rep.results) all_infeasible = all_infeasible && r.planning_steps == r.infeasible_steps;
      return all_infeasible ? kExitInfeasible : kExitOk;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
