#pragma once

// End-to-end run over a dataset: frontend pass, per-keyframe backend, then
// the segmented global graph with GPS and loop constraints.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msf/estimator.hpp"
#include "msf/evaluation.hpp"
#include "msf/pose_graph.hpp"

namespace msf {

struct PipelineConfig {
  FrontendParams frontend;
  BackendParams backend;
  LidarFeatureParams lidar;
  ImuNoise imu_noise;
  GlobalParams global;
  LoopParams loops;
  GpsGateParams gps_gate;
  double loop_sigma_rotation = 0.01;    // rad
  double loop_sigma_translation = 0.05; // m
  bool use_imu = true;
  bool use_lidar = true;
  bool use_gps = true;
  uint64_t seed = 1;
};

/// Keyframe measurement sets for the backend: frontend output, IMU
/// pre-integrated between consecutive keyframes and the scan at each keyframe.
inline std::vector<KeyframeInput> prepare_inputs(const Dataset& d, const PipelineConfig& cfg) {
  const SimulatedProvider provider(d.stereo, cfg.frontend.track_loss, cfg.seed);
  const auto kfs = run_frontend(provider, cfg.frontend, d.config.camera, cfg.seed);
  std::vector<KeyframeInput> out;
  const double max_gap = 1.5 / d.config.rates.imu;
  const double scan_tol = 0.5 / d.config.rates.lidar;
  size_t scan = 0;
  for (size_t i = 0; i < kfs.size(); ++i) {
    KeyframeInput in;
    in.visual = kfs[i];
    const double t = kfs[i].timestamp;
    if (cfg.use_imu && i > 0) {
      in.imu = preintegrate(d.imu, kfs[i - 1].timestamp, t, Vec3::Zero(), Vec3::Zero(), cfg.imu_noise, max_gap);
    }
    if (cfg.use_lidar) {
      while (scan + 1 < d.lidar.size() && std::abs(d.lidar[scan + 1].timestamp - t) <= std::abs(d.lidar[scan].timestamp - t)) ++scan;
      if (scan < d.lidar.size() && std::abs(d.lidar[scan].timestamp - t) <= scan_tol && d.lidar[scan].size() > 0) {
        auto rng = make_rng(cfg.seed, 5000 + i);
        in.lidar = extract_features(d.lidar[scan], cfg.lidar, rng);
      }
    }
    out.push_back(std::move(in));
  }
  return out;
}

struct LocalResult {
  std::vector<State> states;
  std::vector<KeyframeReport> reports;
};

using WeightPolicy = std::function<WeightAction(const KeyframeMeasurements&)>;

/// Windowed estimation over all keyframes, first keyframe from ground truth.
inline LocalResult run_local(const std::vector<KeyframeInput>& inputs, const State& first,
                             const BackendParams& bp, const WeightPolicy& policy = {}) {
  LocalResult r;
  if (inputs.empty()) return r;
  Backend backend(bp, first);
  for (const auto& in : inputs) {
    const WeightAction a = policy ? policy(in.visual) : WeightAction{};
    r.reports.push_back(backend.add_keyframe(in, a));
  }
  for (const auto& s : backend.keyframes()) r.states.push_back(s.state);
  return r;
}

inline Trajectory to_trajectory(const std::vector<State>& states) {
  Trajectory t;
  for (const auto& s : states) t.push_back({s.timestamp, s.pose()});
  return t;
}

inline Trajectory truth_trajectory(const GroundTruth& gt) {
  Trajectory t;
  for (const auto& s : gt) t.push_back({s.timestamp, s.pose()});
  return t;
}

// --- global stage --------------------------------------------------------------

/// Nearest valid fix to each keyframe (within half a GPS period), screened
/// by the gate along the odometry trajectory. The gate starts at the first
/// keyframe, whose pose is known.
struct GpsSelection {
  std::vector<GpsConstraint> accepted;
  size_t candidates = 0;
  size_t rejected = 0;
  size_t rejected_outliers = 0;  // simulator label, for audits
  size_t outliers = 0;
};

inline GpsSelection select_gps(const std::vector<GpsFix>& fixes, const std::vector<State>& keyframes,
                               double gps_rate, const GpsGateParams& gp) {
  GpsSelection sel;
  if (keyframes.empty()) return sel;
  GpsGate gate(gp);
  gate.seed(keyframes.front().position, keyframes.front().position);
  const double tol = 0.5 / gps_rate;
  size_t f = 0;
  for (size_t k = 1; k < keyframes.size(); ++k) {
    const double t = keyframes[k].timestamp;
    while (f + 1 < fixes.size() && std::abs(fixes[f + 1].timestamp - t) <= std::abs(fixes[f].timestamp - t)) ++f;
    if (f >= fixes.size() || !fixes[f].valid || std::abs(fixes[f].timestamp - t) > tol) continue;
    ++sel.candidates;
    sel.outliers += fixes[f].outlier;
    if (gate.accept(fixes[f].position, keyframes[k].position)) {
      sel.accepted.push_back({static_cast<int>(k), fixes[f]});
    } else {
      ++sel.rejected;
      sel.rejected_outliers += fixes[f].outlier;
    }
  }
  return sel;
}

/// Loop measurement by aligning keyframe j's scan against keyframe i's,
/// starting from the odometry relative pose. Without scans the relative
/// pose comes from ground truth plus noise and is flagged as such.
inline LoopMeasure make_loop_measure(const std::vector<KeyframeInput>& inputs, const std::vector<State>& odometry,
                                     const GroundTruth* truth, double imu_rate, const PipelineConfig& cfg,
                                     std::mt19937_64& rng) {
  const Mat6 info = detail::diagonal_sqrt_info(cfg.loop_sigma_rotation, cfg.loop_sigma_translation);
  return [&inputs, &odometry, truth, imu_rate, &cfg, &rng, info](int i, int j) -> std::optional<LoopCandidate> {
    LoopCandidate c;
    c.sqrt_info = info;
    const Pose initial = between(odometry[i].pose(), odometry[j].pose());
    if (cfg.use_lidar && inputs[i].lidar && inputs[j].lidar) {
      LidarLocalMap map;
      map.insert(i, inputs[i].lidar->dense, Pose());
      const auto a = two_step_alignment(inputs[j].lidar->features, map, initial, cfg.backend.alignment);
      if (!a.ground_step || !a.surface_step) return std::nullopt;
      if ((a.pose.translation - initial.translation).norm() > cfg.loops.radius) return std::nullopt;
      c.measured = a.pose;
      return c;
    }
    if (!truth) return std::nullopt;
    std::normal_distribution<double> g(0.0, 1.0);
    const Pose rel = between(truth_at(*truth, odometry[i].timestamp, imu_rate).pose(),
                             truth_at(*truth, odometry[j].timestamp, imu_rate).pose());
    const Vec3 dr = cfg.loop_sigma_rotation * Vec3(g(rng), g(rng), g(rng));
    const Vec3 dp = cfg.loop_sigma_translation * Vec3(g(rng), g(rng), g(rng));
    c.measured = Pose(exp_so3(dr) * rel.rotation, rel.translation + dp);
    c.from_truth = true;
    return c;
  };
}

struct PipelineResult {
  LocalResult local;
  GlobalResult global;
  GpsSelection gps;
  std::vector<LoopCandidate> loops;
  std::vector<std::string> flags;

  Trajectory local_trajectory() const { return to_trajectory(local.states); }
  Trajectory global_trajectory() const {
    Trajectory t;
    for (size_t k = 0; k < global.poses.size(); ++k) t.push_back({local.states[k].timestamp, global.poses[k]});
    return t;
  }
};

/// Full run: frontend, windowed local estimation, GPS screening, loop
/// detection and the segmented global graph.
inline PipelineResult run_pipeline(const Dataset& d, const PipelineConfig& cfg, const WeightPolicy& policy = {}) {
  if (d.stereo.empty()) throw std::runtime_error("run_pipeline: camera stream is empty");
  if (cfg.use_imu && d.imu.empty()) throw std::runtime_error("run_pipeline: IMU enabled but the stream is empty");
  if (cfg.use_lidar && d.lidar.empty()) throw std::runtime_error("run_pipeline: lidar enabled but the stream is empty");
  if (cfg.use_gps && d.gps.empty()) throw std::runtime_error("run_pipeline: GPS enabled but the stream is empty");
  if (d.world.ground_truth.empty()) throw std::runtime_error("run_pipeline: ground truth needed for the first keyframe");
  PipelineResult r;
  const auto inputs = prepare_inputs(d, cfg);
  if (inputs.empty()) throw std::runtime_error("run_pipeline: no keyframes");
  BackendParams bp = cfg.backend;
  bp.use_imu = cfg.use_imu;
  bp.use_lidar = cfg.use_lidar;
  const State first = truth_at(d.world.ground_truth, inputs.front().visual.timestamp, d.config.rates.imu);
  r.local = run_local(inputs, first, bp, policy);
  if (!cfg.use_lidar) r.flags.push_back("lidar disabled");
  for (const auto& rep : r.local.reports) {
    if (rep.lidar_fallback) {
      r.flags.push_back("lidar fallback at keyframe " + std::to_string(rep.keyframe));
    }
  }

  if (cfg.use_gps) {
    r.gps = select_gps(d.gps, r.local.states, d.config.rates.gps, cfg.gps_gate);
  } else {
    r.flags.push_back("gps disabled");
  }
  const auto odometry = [&] {
    std::vector<Pose> p;
    for (const auto& s : r.local.states) p.push_back(s.pose());
    return p;
  }();
  if (odometry.size() >= 2) {
    auto rng = make_rng(cfg.seed, 7000);
    r.loops = detect_loops(odometry, cfg.loops,
                           make_loop_measure(inputs, r.local.states, &d.world.ground_truth, d.config.rates.imu, cfg, rng));
    for (const auto& l : r.loops) {
      if (l.from_truth) {
        r.flags.push_back("loop " + std::to_string(l.i) + "-" + std::to_string(l.j) + " measured from ground truth");
      }
    }
    r.global = optimize_global(odometry, r.gps.accepted, r.loops, cfg.global);
  } else {
    r.global.poses = r.global.stage1 = odometry;
    r.global.flag = "too few keyframes";
  }
  if (!r.global.optimized) r.flags.push_back("pose graph skipped: " + r.global.flag);
  return r;
}

}  // namespace msf
