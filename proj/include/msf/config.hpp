#pragma once

// Run configuration: one INI file with [group] sections plus `group.key=value`
// overrides. Every key is registered once in `Config::bindings`, which drives
// parsing, overrides and write-back, so the emitted file is the schema.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "msf/adaptive_weights.hpp"
#include "msf/pipeline.hpp"
#include "msf/simulator.hpp"

namespace msf {

/// Bad key, bad value or inconsistent settings.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  const std::string t = trim(s);
  double v = 0.0;
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

template <class Int>
Int parse_int(const std::string& s) {
  const std::string t = trim(s);
  Int v = 0;
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty()) throw ConfigError("not an integer: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  const std::string t = trim(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

inline std::string format_vec3(const Vec3& v) { return format(v.x()) + ' ' + format(v.y()) + ' ' + format(v.z()); }

inline Vec3 parse_vec3(const std::string& s) {
  const auto w = words(s);
  if (w.size() != 3) throw ConfigError("expected three numbers: '" + s + "'");
  return Vec3(parse_double(w[0]), parse_double(w[1]), parse_double(w[2]));
}

}  // namespace config_detail

// --- list-valued keys ------------------------------------------------------------

/// "straight 60, arc 1.5708 15, straight 40 nowalls"
inline std::vector<TrajectorySegment> parse_trajectory(const std::string& s) {
  using namespace config_detail;
  std::vector<TrajectorySegment> out;
  for (const auto& item : split(s, ',')) {
    const auto w = words(item);
    if (w[0] == "straight" && (w.size() == 2 || (w.size() == 3 && w[2] == "nowalls"))) {
      const double len = parse_double(w[1]);
      if (!(len > 0.0)) throw ConfigError("straight segment needs a positive length: '" + item + "'");
      out.push_back(TrajectorySegment::straight(len, w.size() == 2));
    } else if (w[0] == "arc" && w.size() == 3) {
      const double angle = parse_double(w[1]), radius = parse_double(w[2]);
      if (angle == 0.0 || !(radius > 0.0)) throw ConfigError("arc segment needs a nonzero angle and positive radius: '" + item + "'");
      out.push_back(TrajectorySegment::arc(angle, radius));
    } else {
      throw ConfigError("bad trajectory segment: '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("trajectory has no segments");
  return out;
}

inline std::string format_trajectory(const std::vector<TrajectorySegment>& t) {
  using config_detail::format;
  std::string s;
  for (const auto& seg : t) {
    if (!s.empty()) s += ", ";
    if (seg.kind == TrajectorySegment::Kind::straight) {
      s += "straight " + format(seg.length) + (seg.walls ? "" : " nowalls");
    } else {
      s += "arc " + format(seg.angle) + ' ' + format(seg.radius);
    }
  }
  return s;
}

/// "5 10, 20 25"
inline std::vector<TimeInterval> parse_intervals(const std::string& s) {
  using namespace config_detail;
  std::vector<TimeInterval> out;
  for (const auto& item : split(s, ',')) {
    const auto w = words(item);
    if (w.size() != 2) throw ConfigError("bad interval: '" + item + "'");
    TimeInterval iv{parse_double(w[0]), parse_double(w[1])};
    if (!(iv.end > iv.begin)) throw ConfigError("interval end must follow its begin: '" + item + "'");
    out.push_back(iv);
  }
  return out;
}

inline std::string format_intervals(const std::vector<TimeInterval>& v) {
  using config_detail::format;
  std::string s;
  for (const auto& iv : v) s += (s.empty() ? "" : ", ") + format(iv.begin) + ' ' + format(iv.end);
  return s;
}

/// "begin end pixel_sigma dropout, ..."
inline std::vector<VisualBurst> parse_bursts(const std::string& s) {
  using namespace config_detail;
  std::vector<VisualBurst> out;
  for (const auto& item : split(s, ',')) {
    const auto w = words(item);
    if (w.size() != 4) throw ConfigError("bad visual burst: '" + item + "'");
    VisualBurst b;
    b.interval = {parse_double(w[0]), parse_double(w[1])};
    b.pixel_sigma = parse_double(w[2]);
    b.dropout = parse_double(w[3]);
    if (!(b.interval.end > b.interval.begin) || b.pixel_sigma < 0.0 || b.dropout < 0.0 || b.dropout > 1.0) {
      throw ConfigError("bad visual burst: '" + item + "'");
    }
    out.push_back(b);
  }
  return out;
}

inline std::string format_bursts(const std::vector<VisualBurst>& v) {
  using config_detail::format;
  std::string s;
  for (const auto& b : v) {
    s += (s.empty() ? "" : ", ") + format(b.interval.begin) + ' ' + format(b.interval.end) + ' ' +
         format(b.pixel_sigma) + ' ' + format(b.dropout);
  }
  return s;
}

/// "ox oy oz ux uy uz vx vy vz u_extent v_extent [infinite], ..."
inline std::vector<PlaneSpec> parse_planes(const std::string& s) {
  using namespace config_detail;
  std::vector<PlaneSpec> out;
  for (const auto& item : split(s, ',')) {
    const auto w = words(item);
    if (w.size() != 11 && !(w.size() == 12 && w[11] == "infinite")) throw ConfigError("bad plane: '" + item + "'");
    double v[11];
    for (int i = 0; i < 11; ++i) v[i] = parse_double(w[i]);
    PlaneSpec p;
    p.origin = Vec3(v[0], v[1], v[2]);
    p.u_axis = Vec3(v[3], v[4], v[5]);
    p.v_axis = Vec3(v[6], v[7], v[8]);
    p.u_extent = v[9];
    p.v_extent = v[10];
    p.infinite = w.size() == 12;
    if (p.u_axis.cross(p.v_axis).norm() < 1e-9) throw ConfigError("plane axes are parallel: '" + item + "'");
    out.push_back(p);
  }
  return out;
}

inline std::string format_planes(const std::vector<PlaneSpec>& v) {
  using namespace config_detail;
  std::string s;
  for (const auto& p : v) {
    s += (s.empty() ? "" : ", ") + format_vec3(p.origin) + ' ' + format_vec3(p.u_axis) + ' ' + format_vec3(p.v_axis) +
         ' ' + format(p.u_extent) + ' ' + format(p.v_extent) + (p.infinite ? " infinite" : "");
  }
  return s;
}

// --- configuration -------------------------------------------------------------

struct SensorSet {
  bool camera = true;
  bool imu = true;
  bool lidar = true;
  bool gps = true;
};

struct Config {
  uint64_t seed = 1;  // root of all randomness
  SensorSet sensors;
  WorldConfig world;
  PipelineConfig pipeline;
  Td3Params agent;
  TrainingParams training;
  double test_fraction = 0.2;  // trailing share of episode segments held out for testing
  bool adaptive = false;       // run with the agent's weights instead of the constants
  std::string checkpoint;      // agent checkpoint for adaptive runs and resumed training

  struct Binding {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
    const char* doc;
  };

  /// "group.key" -> accessor, in file order.
  std::vector<std::pair<std::string, Binding>> bindings() {
    using namespace config_detail;
    std::vector<std::pair<std::string, Binding>> b;
    auto real = [&](const std::string& k, double& v, const char* doc) {
      b.push_back({k, {[&v](const std::string& s) { v = parse_double(s); }, [&v] { return format(v); }, doc}});
    };
    auto integer = [&](const std::string& k, int& v, const char* doc) {
      b.push_back({k, {[&v](const std::string& s) { v = parse_int<int>(s); }, [&v] { return std::to_string(v); }, doc}});
    };
    auto count = [&](const std::string& k, size_t& v, const char* doc) {
      b.push_back({k, {[&v](const std::string& s) { v = parse_int<size_t>(s); }, [&v] { return std::to_string(v); }, doc}});
    };
    auto flag = [&](const std::string& k, bool& v, const char* doc) {
      b.push_back({k, {[&v](const std::string& s) { v = parse_bool(s); }, [&v] { return std::string(v ? "true" : "false"); }, doc}});
    };
    auto vec3 = [&](const std::string& k, Vec3& v, const char* doc) {
      b.push_back({k, {[&v](const std::string& s) { v = parse_vec3(s); }, [&v] { return format_vec3(v); }, doc}});
    };
    auto text = [&](const std::string& k, std::string& v, const char* doc) {
      b.push_back({k, {[&v](const std::string& s) { v = trim(s); }, [&v] { return v; }, doc}});
    };

    b.push_back({"general.seed", {[this](const std::string& s) { seed = parse_int<uint64_t>(s); },
                                  [this] { return std::to_string(seed); }, "root seed for every random stream"}});
    flag("sensors.camera", sensors.camera, "stereo camera (required)");
    flag("sensors.imu", sensors.imu, "IMU (required)");
    flag("sensors.lidar", sensors.lidar, "lidar factors in the window");
    flag("sensors.gps", sensors.gps, "GPS constraints in the global graph");

    auto& w = world;
    b.push_back({"world.trajectory", {[&w](const std::string& s) { w.trajectory = parse_trajectory(s); },
                                      [&w] { return format_trajectory(w.trajectory); },
                                      "segments: 'straight <m> [nowalls]' or 'arc <rad> <radius m>', comma separated"}});
    real("world.speed", w.speed, "m/s");
    real("world.height", w.height, "body height above ground, m");
    real("world.start_yaw", w.start_yaw, "rad");
    integer("world.landmark_count", w.landmark_count, "");
    real("world.wall_offset", w.wall_offset, "lateral facade distance, m");
    real("world.wall_height", w.wall_height, "m");
    flag("world.ground_plane", w.ground_plane, "");
    flag("world.auto_walls", w.auto_walls, "facades along straights");
    b.push_back({"world.planes", {[&w](const std::string& s) { w.planes = parse_planes(s); },
                                  [&w] { return format_planes(w.planes); },
                                  "extra planes: 'ox oy oz ux uy uz vx vy vz u_extent v_extent [infinite]'"}});
    flag("world.excitation", w.excitation, "sinusoidal roll/pitch/heave");
    real("world.excitation_angle", w.excitation_angle, "rad");
    real("world.excitation_heave", w.excitation_heave, "m");
    b.push_back({"world.gps_dropouts", {[&w](const std::string& s) { w.gps_dropouts = parse_intervals(s); },
                                        [&w] { return format_intervals(w.gps_dropouts); }, "'begin end' seconds, comma separated"}});
    b.push_back({"world.imu_dropouts", {[&w](const std::string& s) { w.imu_dropouts = parse_intervals(s); },
                                        [&w] { return format_intervals(w.imu_dropouts); }, "'begin end' seconds"}});
    real("world.gps_outlier_rate", w.gps_outlier_rate, "share of fixes replaced by spikes");
    real("world.gps_outlier_magnitude", w.gps_outlier_magnitude, "m");
    b.push_back({"world.visual_bursts", {[&w](const std::string& s) { w.visual_bursts = parse_bursts(s); },
                                         [&w] { return format_bursts(w.visual_bursts); },
                                         "'begin end pixel_sigma dropout', comma separated"}});
    real("world.camera_dropout", w.camera_dropout, "share of observations dropped");

    real("noise.gyro_density", w.noise.gyro_density, "rad/s/sqrt(Hz)");
    real("noise.accel_density", w.noise.accel_density, "m/s^2/sqrt(Hz)");
    real("noise.gyro_bias_walk", w.noise.gyro_bias_walk, "rad/s^2/sqrt(Hz)");
    real("noise.accel_bias_walk", w.noise.accel_bias_walk, "m/s^3/sqrt(Hz)");
    vec3("noise.initial_gyro_bias", w.noise.initial_gyro_bias, "rad/s");
    vec3("noise.initial_accel_bias", w.noise.initial_accel_bias, "m/s^2");
    real("noise.pixel_sigma", w.noise.pixel_sigma, "px");
    real("noise.gps_sigma", w.noise.gps_sigma, "m");
    real("noise.lidar_range_sigma", w.noise.lidar_range_sigma, "m");

    real("rates.imu", w.rates.imu, "Hz");
    real("rates.camera", w.rates.camera, "Hz");
    real("rates.lidar", w.rates.lidar, "Hz");
    real("rates.gps", w.rates.gps, "Hz");

    integer("camera.width", w.camera.width, "px");
    integer("camera.height", w.camera.height, "px");
    real("camera.focal", w.camera.focal, "px");
    real("camera.cx", w.camera.cx, "px");
    real("camera.cy", w.camera.cy, "px");
    real("camera.baseline", w.camera.baseline, "m");
    real("camera.min_depth", w.camera.min_depth, "m");
    real("camera.max_depth", w.camera.max_depth, "m");

    integer("lidar.rings", w.lidar.rings, "");
    real("lidar.min_elevation", w.lidar.min_elevation, "rad");
    real("lidar.max_elevation", w.lidar.max_elevation, "rad");
    integer("lidar.azimuth_steps", w.lidar.azimuth_steps, "");
    real("lidar.min_range", w.lidar.min_range, "m");
    real("lidar.max_range", w.lidar.max_range, "m");

    auto& f = pipeline.frontend;
    integer("frontend.keyframe_threshold", f.keyframe_threshold, "tracked features below which a keyframe is taken");
    integer("frontend.window", f.window, "local map keyframes");
    integer("frontend.max_features", f.max_features, "");
    real("frontend.track_loss", f.track_loss, "per-frame share of lost tracks");
    real("frontend.false_match_rate", f.false_match_rate, "share of wrong associations");
    real("frontend.min_disparity", f.min_disparity, "px");
    integer("frontend.grid_rows", f.grid_rows, "detection grid");
    integer("frontend.grid_cols", f.grid_cols, "");

    auto& be = pipeline.backend;
    integer("backend.window", be.window, "keyframes in the sliding window");
    real("backend.weight_inertial", be.weights.inertial, "family weight");
    real("backend.weight_visual", be.weights.visual, "family weight");
    real("backend.weight_lidar", be.weights.lidar, "family weight");
    real("backend.visual_huber", be.visual_huber.delta, "");
    real("backend.lidar_huber", be.lidar_huber.delta, "m");
    real("backend.prior_velocity_sigma", be.prior_velocity_sigma, "m/s");
    real("backend.prior_accel_bias_sigma", be.prior_accel_bias_sigma, "m/s^2");
    real("backend.prior_gyro_bias_sigma", be.prior_gyro_bias_sigma, "rad/s");
    integer("backend.max_iterations", be.solver.max_iter, "");
    real("backend.lambda_init", be.solver.lambda_init, "");
    real("backend.rel_tol", be.solver.rel_tol, "");
    integer("backend.imu_init_keyframes", be.imu_init_keyframes, "");
    real("backend.min_disparity", be.min_disparity, "px");
    real("backend.max_landmark_depth", be.max_landmark_depth, "m");
    real("backend.gravity_check_angle", be.gravity_check_angle, "rad");
    integer("backend.scan_iterations", be.alignment.max_iterations, "scan-to-map steps");
    count("backend.scan_min_correspondences", be.alignment.min_correspondences, "");

    auto& l = pipeline.lidar;
    real("features.curvature_a", l.curvature.a, "");
    integer("features.curvature_n", l.curvature.n, "neighbors per side");
    real("features.plane_threshold", l.curvature.plane_threshold, "");
    real("features.max_ring_angle", l.ground.max_ring_angle, "rad");
    real("features.sac_tol", l.ground.sac_tol, "m");
    integer("features.sac_iterations", l.ground.sac_iterations, "");
    real("features.max_tilt", l.ground.max_tilt, "rad");
    integer("features.sectors", l.sectors, "");
    count("features.max_ground", l.max_ground_features, "");
    count("features.max_surface", l.max_surface_features, "");
    real("features.scanner_height", l.scanner_height, "m");

    real("imu_noise.gyro_density", pipeline.imu_noise.gyro_density, "assumed by pre-integration");
    real("imu_noise.accel_density", pipeline.imu_noise.accel_density, "");
    real("imu_noise.gyro_bias_walk", pipeline.imu_noise.gyro_bias_walk, "");
    real("imu_noise.accel_bias_walk", pipeline.imu_noise.accel_bias_walk, "");

    auto& g = pipeline.global;
    integer("global.yaw_window", g.segments.yaw_window, "keyframes");
    real("global.turn_thresh", g.segments.turn_thresh, "rad");
    real("global.gps_sigma", g.gps_sigma, "m");
    real("global.odometry_sigma_rotation", g.odometry_sigma_rotation, "rad per edge");
    real("global.odometry_sigma_translation", g.odometry_sigma_translation, "m per edge");
    real("global.prior_scale", g.prior_scale, "stage-2 prior information relative to odometry");
    integer("global.max_iterations", g.solver.max_iter, "");
    real("gps_gate.gps_sigma", pipeline.gps_gate.gps_sigma, "m");
    real("gps_gate.gate_sigma", pipeline.gps_gate.gate_sigma, "rejection threshold in sigmas");
    real("gps_gate.odometry_drift", pipeline.gps_gate.odometry_drift, "relative");
    real("gps_gate.heading_baseline", pipeline.gps_gate.heading_baseline, "m");
    integer("gps_gate.reanchor_after", pipeline.gps_gate.reanchor_after, "consecutive rejections");
    real("loops.radius", pipeline.loops.radius, "m");
    integer("loops.min_gap", pipeline.loops.min_gap, "keyframes");
    integer("loops.suppress", pipeline.loops.suppress, "keyframes");
    real("loops.sigma_rotation", pipeline.loop_sigma_rotation, "rad");
    real("loops.sigma_translation", pipeline.loop_sigma_translation, "m");

    auto& a = agent;
    integer("agent.grid_rows", a.grid_rows, "observation grid");
    integer("agent.grid_cols", a.grid_cols, "");
    b.push_back({"agent.hidden", {[&a](const std::string& s) {
                                    std::vector<int> h;
                                    for (const auto& x : words(s)) h.push_back(parse_int<int>(x));
                                    for (int x : h) if (x < 1) throw ConfigError("agent.hidden: widths must be positive");
                                    a.hidden = h;
                                  },
                                  [&a] {
                                    std::string s;
                                    for (int x : a.hidden) s += (s.empty() ? "" : " ") + std::to_string(x);
                                    return s;
                                  },
                                  "hidden layer widths"}});
    real("agent.gamma", a.gamma, "discount");
    real("agent.tau", a.tau, "soft update rate");
    integer("agent.policy_delay", a.policy_delay, "");
    real("agent.target_noise", a.target_noise, "normalized action units");
    real("agent.noise_clip", a.noise_clip, "");
    real("agent.explore_sigma", a.explore_sigma, "normalized action units");
    count("agent.batch", a.batch, "");
    real("agent.actor_lr", a.actor_lr, "");
    real("agent.critic_lr", a.critic_lr, "");
    real("agent.w_min", a.w_min, "");
    real("agent.w_max", a.w_max, "");
    real("agent.reward_scale", a.reward_scale, "critic target scale");
    count("agent.buffer_capacity", a.buffer_capacity, "");
    integer("training.epochs", training.epochs, "");
    integer("training.episodes_per_epoch", training.episodes_per_epoch, "");
    integer("training.warmup_episodes", training.warmup_episodes, "random-action episodes");
    integer("training.updates_per_step", training.updates_per_step, "");
    integer("training.test_episodes", training.test_episodes, "0: all held-out segments");
    real("training.test_fraction", test_fraction, "");
    flag("run.adaptive", adaptive, "agent-chosen weights");
    text("run.checkpoint", checkpoint, "agent checkpoint");
    return b;
  }

  /// Apply one `group.key=value` assignment.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected group.key=value, got '" + assignment + "'");
    set(config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& [k, b] : bindings()) {
      if (k != key) continue;
      try {
        b.set(value);
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      }
      return;
    }
    throw ConfigError("unknown config key '" + key + "'");
  }

  std::string get(const std::string& key) {
    for (auto& [k, b] : bindings()) {
      if (k == key) return b.get();
    }
    throw ConfigError("unknown config key '" + key + "'");
  }

  void read_ini(std::istream& in) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    for (const auto& [group, section] : tree) {
      if (section.empty()) throw ConfigError("config: key '" + group + "' outside a [group] section");
      for (const auto& [key, value] : section) set(group + "." + key, value.data());
    }
  }

  void read_ini(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    read_ini(f);
  }

  void write_ini(std::ostream& out) {
    std::string group;
    for (auto& [key, b] : bindings()) {
      const auto dot = key.find('.');
      const std::string g = key.substr(0, dot);
      if (g != group) {
        out << (group.empty() ? "" : "\n") << '[' << g << "]\n";
        group = g;
      }
      if (b.doc[0]) out << "# " << b.doc << '\n';
      out << key.substr(dot + 1) << " = " << b.get() << '\n';
    }
  }

  void write_ini(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    write_ini(f);
  }

  /// Propagate the root seed and shared settings; reject inconsistent ones.
  void finalize() {
    if (!sensors.camera || !sensors.imu) throw ConfigError("sensors: camera and imu are required");
    if (world.speed <= 0.0) throw ConfigError("world.speed must be positive");
    if (world.rates.imu <= 0.0 || world.rates.camera <= 0.0 || world.rates.lidar <= 0.0 || world.rates.gps <= 0.0) {
      throw ConfigError("rates must be positive");
    }
    if (world.rates.imu < world.rates.camera || world.rates.gps > world.rates.imu) {
      throw ConfigError("rates: imu must be at least the camera and GPS rates");
    }
    if (pipeline.backend.window < 2) throw ConfigError("backend.window must be at least 2");
    if (!(agent.w_min > 0.0) || !(agent.w_max > agent.w_min)) throw ConfigError("agent: need 0 < w_min < w_max");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("training.test_fraction must be in (0, 1)");
    world.seed = seed;
    pipeline.seed = seed;
    agent.seed = seed;
    pipeline.backend.camera = world.camera;
    pipeline.lidar.azimuth_steps = world.lidar.azimuth_steps;
    pipeline.use_imu = sensors.imu;
    pipeline.use_lidar = sensors.lidar;
    pipeline.use_gps = sensors.gps;
  }
};

}  // namespace msf
