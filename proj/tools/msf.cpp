// msf: simulate datasets, run the estimator, train the weighting agent and
// score trajectories. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "msf/adaptive_weights.hpp"
#include "msf/config.hpp"
#include "msf/dataset_io.hpp"
#include "msf/evaluation.hpp"
#include "msf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace msf;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  bool force = false;
};

void add_config_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "INI configuration file");
  cmd->add_option("--set", o.overrides, "override, group.key=value (repeatable)");
}

/// Base configuration (a dataset's stored one if given), then the file, then overrides.
Config load_config(const CommonOptions& o, const std::string& dataset = {}) {
  Config cfg = dataset.empty() ? Config{} : read_dataset_config(dataset);
  if (!o.config.empty()) cfg.read_ini(o.config);
  for (const auto& s : o.overrides) cfg.set(s);
  cfg.finalize();
  return cfg;
}

void prepare_output(const fs::path& dir, bool force, bool resume = false) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (!resume && fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " is not empty; pass --force to overwrite");
    for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path());
  }
  fs::create_directories(dir);
}

std::ofstream open(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << std::setprecision(9);
  return f;
}

int cmd_simulate(const CommonOptions& o) {
  Config cfg = load_config(o);
  prepare_output(o.out, o.force);
  const Dataset d = simulate(cfg.world);
  write_dataset(o.out, d, cfg);
  std::cout << "event=simulate dir=" << o.out << " imu=" << d.imu.size() << " frames=" << d.stereo.size()
            << " scans=" << d.lidar.size() << " gps=" << d.gps.size() << " duration=" << cfg.world.duration() << '\n';
  return 0;
}

int cmd_run(const CommonOptions& o, const std::string& dataset) {
  Config cfg = load_config(o, dataset);
  const Dataset d = read_dataset(dataset);
  prepare_output(o.out, o.force);

  std::optional<Td3Agent> agent;
  WeightPolicy policy;
  if (cfg.adaptive) {
    if (cfg.checkpoint.empty()) throw UsageError("run.adaptive needs run.checkpoint");
    agent.emplace(cfg.agent);
    agent->load(cfg.checkpoint);
    policy = agent_policy(*agent, cfg.world.camera);
  }
  const PipelineResult r = run_pipeline(d, cfg.pipeline, policy);

  const fs::path out(o.out);
  write_tum((out / "local.tum").string(), r.local_trajectory());
  write_tum((out / "global.tum").string(), r.global_trajectory());
  {
    auto f = open(out / "segments.txt");
    write_segments(f, r.global.segments, static_cast<int>(r.global.poses.size()));
  }
  {
    auto f = open(out / "solver_log.txt");
    for (const auto& rep : r.local.reports) {
      if (rep.vio) f << "keyframe=" << rep.keyframe << ' ' << rep.vio->to_key_value("vio") << '\n';
      if (rep.lidar) {
        f << "keyframe=" << rep.keyframe << ' ' << rep.lidar->to_key_value("lidar") << " ground_matches="
          << rep.ground_matches << " surface_matches=" << rep.surface_matches << '\n';
      }
      for (const auto& w : rep.warnings) f << "keyframe=" << rep.keyframe << " event=warning message=\"" << w << "\"\n";
    }
    if (r.global.stage1_report) f << r.global.stage1_report->to_key_value("global_stage1") << '\n';
    if (r.global.stage2_report) f << r.global.stage2_report->to_key_value("global_stage2") << '\n';
  }

  const Trajectory truth = truth_trajectory(d.world.ground_truth);
  auto report = open(out / "report.txt");
  auto emit = [&](const std::string& line) {
    report << line << '\n';
    std::cout << line << '\n';
  };
  std::ostringstream head;
  head << std::setprecision(9) << "event=run keyframes=" << r.local.states.size() << " gps_accepted="
       << r.gps.accepted.size() << " gps_rejected=" << r.gps.rejected << " loops=" << r.loops.size()
       << " segments=" << r.global.segments.size() << " global_optimized=" << (r.global.optimized ? "true" : "false");
  emit(head.str());
  if (r.local.states.size() >= 3) {
    emit(to_key_value("local_ate", ate(r.local_trajectory(), truth)));
    emit(to_key_value("global_ate", ate(r.global_trajectory(), truth)));
    emit(to_key_value("local_rpe", rpe(r.local_trajectory(), truth)));
  }
  for (const auto& flag : r.flags) emit("event=flag message=\"" + flag + "\"");
  return 0;
}

struct CsvRow {
  int epoch;
  double reward, best;
};

std::vector<CsvRow> read_reward_csv(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw UsageError("cannot resume: " + p.string() + " missing");
  std::vector<CsvRow> rows;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    CsvRow r{};
    char c1, c2;
    std::istringstream ss(line);
    if (!(ss >> r.epoch >> c1 >> r.reward >> c2 >> r.best)) throw std::runtime_error("bad row in " + p.string());
    rows.push_back(r);
  }
  return rows;
}

int cmd_train(const CommonOptions& o, const std::string& dataset, bool resume) {
  Config cfg = load_config(o, dataset);
  const Dataset d = read_dataset(dataset);
  prepare_output(o.out, o.force, resume);
  const fs::path out(o.out);

  const auto inputs = prepare_inputs(d, cfg.pipeline);
  const auto segments = make_segments(inputs, d.world.ground_truth, cfg.world.rates.imu);
  const auto n_test = std::max<size_t>(1, static_cast<size_t>(std::lround(cfg.test_fraction * segments.size())));
  if (segments.size() < n_test + 1) {
    throw std::runtime_error("train: dataset yields " + std::to_string(segments.size()) +
                             " episode segments, need at least 2");
  }
  const std::vector<EpisodeSegment> train(segments.begin(), segments.end() - n_test);
  const std::vector<EpisodeSegment> test(segments.end() - n_test, segments.end());

  Td3Agent agent(cfg.agent);
  int first_epoch = 1;
  double best_before = -1.0;
  if (resume) {
    const auto rows = read_reward_csv(out / "rewards.csv");
    agent.load((out / "last.ckpt").string());
    if (!rows.empty()) {
      first_epoch = rows.back().epoch + 1;
      best_before = rows.back().best;
    }
  }
  BackendParams bp = cfg.pipeline.backend;
  bp.use_lidar = cfg.pipeline.use_lidar;
  ReplayBuffer buffer(cfg.agent.buffer_capacity);

  std::ofstream csv(out / "rewards.csv", resume ? std::ios::app : std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write rewards.csv");
  if (!resume) csv << "epoch,mean_test_reward,best_so_far\n";
  csv << std::setprecision(9);
  std::cout << "event=train_start segments=" << segments.size() << " train=" << train.size() << " test=" << test.size()
            << " first_epoch=" << first_epoch << '\n';
  const auto outcome = train_agent(agent, buffer, train, test, bp, cfg.training, first_epoch, [&](const EpochRecord& r) {
    const double best = std::max(best_before, r.best_so_far);
    csv << r.epoch << ',' << r.mean_test_reward << ',' << best << '\n';
    csv.flush();
    std::cout << std::setprecision(9) << "event=epoch epoch=" << r.epoch << " mean_test_reward=" << r.mean_test_reward
              << " best_so_far=" << best << '\n';
  });
  agent.save((out / "last.ckpt").string());
  if (!outcome.epochs.empty() && outcome.epochs.back().best_so_far > best_before) {
    std::ofstream f(out / "agent.ckpt", std::ios::binary);
    f << outcome.best_checkpoint;
    if (!f) throw std::runtime_error("cannot write agent.ckpt");
    std::cout << "event=checkpoint epoch=" << outcome.best_epoch << " path=" << (out / "agent.ckpt").string() << '\n';
  }
  return 0;
}

int cmd_eval(const std::string& est, const std::string& ref, const std::string& metric, int delta, double max_dt) {
  const Trajectory e = read_tum(est), r = read_tum(ref);
  if (metric == "ate") {
    std::cout << to_key_value("ate", ate(e, r, max_dt)) << '\n';
  } else if (metric == "rpe") {
    std::cout << to_key_value("rpe", rpe(e, r, delta, max_dt)) << " delta=" << delta << '\n';
  } else {
    const auto pairs = associate(e, r, max_dt);
    std::cout << to_key_value("ate", ate(pairs)) << '\n'
              << to_key_value("rpe", rpe(pairs, delta)) << " delta=" << delta << '\n'
              << to_key_value("rpe_rotation", rpe_rotation(pairs, delta)) << " delta=" << delta << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-sensor fusion odometry toolkit"};
  app.require_subcommand(1);

  CommonOptions sim, run, train;
  std::string run_dataset, train_dataset;
  bool resume = false;

  auto* s = app.add_subcommand("simulate", "generate a synthetic dataset");
  add_config_options(s, sim);
  s->add_option("-o,--out", sim.out, "dataset directory")->required();
  s->add_flag("--force", sim.force, "overwrite a non-empty output directory");

  auto* r = app.add_subcommand("run", "estimate trajectories from a dataset");
  r->add_option("-d,--dataset", run_dataset, "dataset directory")->required();
  add_config_options(r, run);
  r->add_option("-o,--out", run.out, "output directory")->required();
  r->add_flag("--force", run.force, "overwrite a non-empty output directory");

  auto* t = app.add_subcommand("train", "train the weighting agent on a dataset");
  t->add_option("-d,--dataset", train_dataset, "dataset directory")->required();
  add_config_options(t, train);
  t->add_option("-o,--out", train.out, "output directory")->required();
  t->add_flag("--force", train.force, "overwrite a non-empty output directory");
  t->add_flag("--resume", resume, "continue from last.ckpt and rewards.csv in the output directory");

  std::string est, ref, metric = "ate";
  int delta = 1;
  double max_dt = 0.02;
  auto* e = app.add_subcommand("eval", "score a TUM trajectory against a reference");
  e->add_option("--est", est, "estimated trajectory (TUM)")->required();
  e->add_option("--ref", ref, "reference trajectory (TUM)")->required();
  e->add_option("--metric", metric, "ate, rpe or all")->check(CLI::IsMember({"ate", "rpe", "all"}));
  e->add_option("--delta", delta, "RPE step in poses")->check(CLI::PositiveNumber);
  e->add_option("--max-dt", max_dt, "association tolerance, s")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (s->parsed()) return cmd_simulate(sim);
    if (r->parsed()) return cmd_run(run, run_dataset);
    if (t->parsed()) return cmd_train(train, train_dataset, resume);
    if (e->parsed()) return cmd_eval(est, ref, metric, delta, max_dt);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 1;
}
