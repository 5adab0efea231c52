#pragma once

// Sliding-window backend: per keyframe a visual-inertial solve over the
// window, then a joint solve that adds lidar point-to-plane factors seeded by
// two-step scan alignment. Keyframes that leave the window are frozen.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msf/imu_preintegration.hpp"
#include "msf/lidar_features.hpp"
#include "msf/optimizer.hpp"
#include "msf/visual_frontend.hpp"

namespace msf {

/// Per-keyframe multipliers on the visual and lidar family weights.
struct WeightAction {
  double visual = 1.0;
  double lidar = 1.0;
};

struct KeyframeInput {
  KeyframeMeasurements visual;
  std::optional<PreintegratedImu> imu;  // previous keyframe to this one
  std::optional<ScanFeatures> lidar;
};

struct BackendParams {
  int window = 10;
  FamilyWeights weights{1.0, 1.0, 100.0, 1.0, 1.0};
  HuberParams visual_huber{1.0};
  HuberParams lidar_huber{0.5};
  // Prior on the oldest window state's velocity and biases once earlier
  // keyframes have left the window.
  double prior_velocity_sigma = 0.1;      // m/s
  double prior_accel_bias_sigma = 0.02;   // m/s^2
  double prior_gyro_bias_sigma = 0.002;   // rad/s
  SolverOptions solver;
  AlignmentParams alignment;
  CameraIntrinsics camera;
  bool use_imu = true;
  bool use_lidar = true;
  int imu_init_keyframes = 10;
  bool assume_imu_initialized = false;  // first state carries trusted velocity and biases
  double min_disparity = 1.0;
  double max_landmark_depth = 60.0;
  double gravity_check_angle = 0.3;  // rad, accelerometer-average sanity bound
};

struct KeyframeReport {
  int keyframe = 0;
  std::optional<SolverReport> vio;
  std::optional<SolverReport> lidar;
  bool imu_used = false;
  bool imu_initialized_now = false;
  bool lidar_fallback = false;
  size_t ground_matches = 0;
  size_t surface_matches = 0;
  std::vector<std::string> warnings;
};

struct KeyframeSlot {
  State state;
  KeyframeMeasurements visual;
  std::optional<PreintegratedImu> imu;
  std::vector<PlaneMatch> ground, surface;
  WeightAction action;
};

class Backend {
 public:
  Backend(const BackendParams& p, const State& first) : p_(p), first_(first) {
    if (p.window < 2) throw std::invalid_argument("backend window must be >= 2");
    imu_initialized_ = p.use_imu && p.assume_imu_initialized;
  }

  KeyframeReport add_keyframe(const KeyframeInput& in, const WeightAction& action = {}) {
    KeyframeReport rep;
    const int k = static_cast<int>(slots_.size());
    rep.keyframe = k;
    KeyframeSlot slot;
    slot.visual = in.visual;
    slot.action = action;
    if (p_.use_imu) slot.imu = in.imu;

    if (k == 0) {
      slot.state = first_;
      slot.state.timestamp = in.visual.timestamp;
      slots_.push_back(std::move(slot));
      add_new_landmarks(0);
      if (p_.use_lidar && in.lidar) lidar_map_.insert(0, in.lidar->dense, slots_[0].state.pose());
      return rep;
    }

    slot.state = initial_guess(slots_.back(), slot, in.visual.timestamp);
    slots_.push_back(std::move(slot));

    if (p_.use_imu) {
      if (slots_[k].imu) {
        ++imu_streak_;
      } else {
        imu_streak_ = 0;
        if (imu_initialized_) rep.warnings.push_back("IMU is interrupted; visual-only until re-initialized");
        imu_initialized_ = false;
      }
    }

    add_new_landmarks(k);
    rep.vio = vio_pass();
    if (p_.use_imu && !imu_initialized_ && imu_streak_ + 1 >= p_.imu_init_keyframes) {
      initialize_imu(rep);
      rep.vio = vio_pass();
    }
    rep.imu_used = imu_initialized_ && slots_[k].imu.has_value();
    if (!rep.vio->usable) rep.warnings.push_back("vio solve made no progress");

    if (p_.use_lidar && in.lidar) lidar_pass(in.lidar->features, rep);
    if (!imu_initialized_) {
      const State& a = slots_[k - 1].state;
      State& b = slots_[k].state;
      b.velocity = (b.position - a.position) / std::max(1e-6, b.timestamp - a.timestamp);
    }
    if (p_.use_lidar && in.lidar) lidar_map_.insert(k, in.lidar->dense, slots_[k].state.pose());
    return rep;
  }

  const std::vector<KeyframeSlot>& keyframes() const { return slots_; }
  const KeyframeSlot& newest() const { return slots_.back(); }
  bool imu_initialized() const { return imu_initialized_; }
  const LidarLocalMap& lidar_map() const { return lidar_map_; }
  const std::map<int, Vec3>& landmarks() const { return landmarks_; }
  const BackendParams& params() const { return p_; }

  /// First keyframe index of the current window.
  int window_start() const { return std::max(0, static_cast<int>(slots_.size()) - p_.window); }

 private:
  struct WindowProblem {
    Problem problem;
    std::vector<VarId> states;  // per window keyframe
    std::map<int, VarId> points;
  };

  State initial_guess(const KeyframeSlot& prev, const KeyframeSlot& curr, double t) const {
    State s = prev.state;
    if (curr.imu) {
      s = predict(prev.state, *curr.imu, t);
    } else {
      s.position += prev.state.velocity * (t - prev.state.timestamp);
    }
    s.timestamp = t;
    return s;
  }

  /// Triangulates landmarks first seen (or no longer held by the window) at
  /// keyframe k from its current pose estimate.
  void add_new_landmarks(int k) {
    const int start = window_start();
    for (const auto& o : slots_[k].visual.observations) {
      auto it = last_seen_.find(o.map_id);
      const bool known = landmarks_.count(o.map_id) && it != last_seen_.end() && it->second >= start;
      if (!known) {
        const double disparity = o.left.x() - o.right.x();
        if (disparity < p_.min_disparity) continue;
        if (p_.camera.focal * p_.camera.baseline / disparity > p_.max_landmark_depth) continue;
        landmarks_[o.map_id] = triangulate(o.left, o.right, p_.camera, slots_[k].state.pose(), p_.min_disparity);
      }
      last_seen_[o.map_id] = k;
    }
  }

  bool inertial_link(int i) const { return imu_initialized_ && slots_[i].imu.has_value(); }

  WindowProblem build(bool with_lidar) const {
    WindowProblem w;
    const int start = window_start();
    const int end = static_cast<int>(slots_.size());
    for (int i = start; i < end; ++i) w.states.push_back(w.problem.add_variable(slots_[i].state));
    // Gauge: the oldest window pose is held; its velocity and biases stay
    // free when an inertial factor reaches them.
    w.problem.fix_dims(w.states[0], {0, 1, 2, 3, 4, 5});

    std::vector<bool> linked(end - start, false);
    for (int i = start + 1; i < end; ++i) {
      if (!inertial_link(i)) continue;
      w.problem.add_factor(std::make_shared<InertialFactor>(w.states[i - 1 - start], w.states[i - start],
                                                            *slots_[i].imu, p_.weights.inertial));
      linked[i - start] = linked[i - 1 - start] = true;
    }
    for (int i = start; i < end; ++i) {
      if (!linked[i - start]) w.problem.fix_dims(w.states[i - start], {6, 7, 8, 9, 10, 11, 12, 13, 14});
    }
    if (start > 0 && linked[0]) {
      Vec9 s;
      s << Vec3::Constant(1.0 / p_.prior_velocity_sigma), Vec3::Constant(1.0 / p_.prior_accel_bias_sigma),
          Vec3::Constant(1.0 / p_.prior_gyro_bias_sigma);
      w.problem.add_factor(std::make_shared<MotionPriorFactor>(w.states[0], slots_[start].state, s));
    }

    for (int i = start; i < end; ++i) {
      const VarId body = w.states[i - start];
      const double wc = p_.weights.visual * slots_[i].action.visual;
      for (const auto& o : slots_[i].visual.observations) {
        auto lm = landmarks_.find(o.map_id);
        if (lm == landmarks_.end()) continue;
        auto [it, fresh] = w.points.try_emplace(o.map_id, VarId{});
        if (fresh) it->second = w.problem.add_variable(lm->second);
        w.problem.add_factor(std::make_shared<VisualFactor>(body, it->second, o.left, 0, p_.camera, wc, p_.visual_huber));
        w.problem.add_factor(std::make_shared<VisualFactor>(body, it->second, o.right, 1, p_.camera, wc, p_.visual_huber));
      }
      if (!with_lidar) continue;
      const double wl = p_.weights.lidar * slots_[i].action.lidar;
      for (const auto& m : slots_[i].ground) {
        w.problem.add_factor(std::make_shared<LidarPlaneFactor>(FactorKind::lidar_ground, body, m.point_body, m.triple[0],
                                                                m.triple[1], m.triple[2], wl, p_.lidar_huber));
      }
      for (const auto& m : slots_[i].surface) {
        w.problem.add_factor(std::make_shared<LidarPlaneFactor>(FactorKind::lidar_surface, body, m.point_body, m.triple[0],
                                                                m.triple[1], m.triple[2], wl, p_.lidar_huber));
      }
    }
    return w;
  }

  void write_back(const WindowProblem& w) {
    const int start = window_start();
    for (size_t i = 0; i < w.states.size(); ++i) slots_[start + i].state = w.problem.variables.states[w.states[i].index];
    for (const auto& [id, v] : w.points) landmarks_[id] = w.problem.variables.points[v.index];
  }

 public:
  /// Window solve with visual and inertial families only.
  SolverReport vio_pass() {
    WindowProblem w = build(false);
    SolverReport r = w.problem.solve(p_.solver);
    if (r.usable) write_back(w);
    return r;
  }

 private:
  /// Aligns the newest scan, attaches its plane correspondences and solves
  /// all three families jointly.
  void lidar_pass(const PlanarFeatureSet& features, KeyframeReport& rep) {
    const int k = static_cast<int>(slots_.size()) - 1;
    if (lidar_map_.empty()) return;
    const Pose vio_pose = slots_[k].state.pose();
    const AlignmentResult al = two_step_alignment(features, lidar_map_, vio_pose, p_.alignment);
    const auto& ap = p_.alignment.association;
    slots_[k].ground = associate_set(features.ground_points, al.pose, lidar_map_, true, ap);
    slots_[k].surface = associate_set(features.surface_points, al.pose, lidar_map_, false, ap);
    rep.ground_matches = slots_[k].ground.size();
    rep.surface_matches = slots_[k].surface.size();
    if (slots_[k].ground.empty() && slots_[k].surface.empty()) {
      rep.lidar_fallback = true;
      rep.warnings.push_back("no lidar correspondences; keeping vio result");
      return;
    }
    WindowProblem w = build(true);
    // Start from whichever of the aligned and visual-inertial poses is cheaper.
    State& sk = w.problem.variables.states[w.states.back().index];
    const double vio_cost = w.problem.cost();
    sk.set_pose(al.pose);
    if (w.problem.cost() > vio_cost) sk.set_pose(vio_pose);
    SolverReport r = w.problem.solve(p_.solver);
    if (r.usable || r.termination != "no_descent") write_back(w);
    rep.lidar = r;
  }

  /// Gravity sanity check, velocities from positions, then an inertial-only
  /// solve for velocities and biases with poses held.
  void initialize_imu(KeyframeReport& rep) {
    const int end = static_cast<int>(slots_.size());
    const int start = end - p_.imu_init_keyframes;
    Vec3 accel_mean = Vec3::Zero();
    double total = 0.0;
    for (int i = start + 1; i < end; ++i) {
      const auto& pre = *slots_[i].imu;
      accel_mean += slots_[i - 1].state.rotation * pre.delta_velocity();
      total += pre.dt_total();
    }
    accel_mean /= total;
    const double angle = std::acos(std::clamp(accel_mean.normalized().dot(-kGravity.normalized()), -1.0, 1.0));
    if (angle > p_.gravity_check_angle) rep.warnings.push_back("accelerometer average disagrees with gravity");

    for (int i = start; i < end; ++i) {
      const int a = std::max(start, i - 1), b = std::min(end - 1, i + 1);
      const State& sa = slots_[a].state;
      const State& sb = slots_[b].state;
      slots_[i].state.velocity = (sb.position - sa.position) / (sb.timestamp - sa.timestamp);
    }

    Problem p;
    std::vector<VarId> ids;
    for (int i = start; i < end; ++i) {
      ids.push_back(p.add_variable(slots_[i].state));
      p.fix_dims(ids.back(), {0, 1, 2, 3, 4, 5});
    }
    for (int i = start + 1; i < end; ++i) {
      p.add_factor(std::make_shared<InertialFactor>(ids[i - 1 - start], ids[i - start], *slots_[i].imu, p_.weights.inertial));
    }
    const SolverReport r = p.solve(p_.solver);
    for (int i = start; i < end; ++i) slots_[i].state = p.variables.states[ids[i - start].index];
    imu_initialized_ = true;
    rep.imu_initialized_now = true;
    rep.warnings.push_back("imu initialized: " + r.to_key_value("imu_init"));
  }

  BackendParams p_;
  State first_;
  std::vector<KeyframeSlot> slots_;
  std::map<int, Vec3> landmarks_;
  std::map<int, int> last_seen_;
  LidarLocalMap lidar_map_;
  bool imu_initialized_ = false;
  int imu_streak_ = 0;
};

}  // namespace msf
