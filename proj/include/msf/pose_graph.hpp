#pragma once

// Segmented global pose graph. The keyframe trajectory is split at turns;
// stage 1 moves each segment as a rigid unit against GPS and loop
// constraints, stage 2 refines individual keyframes with anisotropic priors
// toward the stage-1 result (turning parts free in rotation, straight parts
// free along track).

#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msf/optimizer.hpp"

namespace msf {

struct SegmentParams {
  int yaw_window = 5;
  double turn_thresh = 0.175;  // rad
};

struct Segment {
  enum class Kind { straight, turning };
  int first = 0;  // boundary keyframes are shared with the neighbors
  int last = 0;
  Kind kind = Kind::straight;
  Pose first_pose, last_pose;
};

inline const char* to_string(Segment::Kind k) { return k == Segment::Kind::turning ? "turning" : "straight"; }

/// Accumulated |yaw change| over a centered window of keyframes.
inline std::vector<double> windowed_yaw_change(const std::vector<Pose>& poses, int window) {
  const int n = static_cast<int>(poses.size());
  std::vector<double> step(std::max(0, n - 1));
  for (int i = 0; i + 1 < n; ++i) {
    step[i] = std::abs(wrap_angle(rpy_from_rotation(poses[i + 1].rotation).z() - rpy_from_rotation(poses[i].rotation).z()));
  }
  const int h = std::max(1, window / 2);
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const int a = std::max(0, i - h), b = std::min(n - 1, i + h);
    for (int k = a; k < b; ++k) out[i] += step[k];
  }
  return out;
}

/// Maximal runs of turning / straight keyframes. Single-keyframe runs join
/// their neighbors; consecutive segments share their boundary keyframe.
inline std::vector<Segment> segment_trajectory(const std::vector<Pose>& poses, const SegmentParams& p = {}) {
  const int n = static_cast<int>(poses.size());
  if (n < 2) throw std::invalid_argument("segment_trajectory: need at least 2 keyframes");
  if (p.yaw_window < 2 || !(p.turn_thresh > 0.0)) throw std::invalid_argument("segment_trajectory: bad parameters");
  const auto change = windowed_yaw_change(poses, p.yaw_window);
  std::vector<bool> turning(n);
  for (int i = 0; i < n; ++i) turning[i] = change[i] > p.turn_thresh;

  struct Run { int a, b; bool turn; };
  auto runs_of = [&] {
    std::vector<Run> runs;
    for (int i = 0; i < n; ++i) {
      if (runs.empty() || runs.back().turn != turning[i]) runs.push_back({i, i, turning[i]});
      runs.back().b = i;
    }
    return runs;
  };
  auto runs = runs_of();
  for (size_t r = 0; r < runs.size() && runs.size() > 1; ++r) {
    if (runs[r].a == runs[r].b) turning[runs[r].a] = !runs[r].turn;
  }
  runs = runs_of();

  std::vector<Segment> out;
  for (size_t r = 0; r < runs.size(); ++r) {
    Segment s;
    s.first = r == 0 ? 0 : runs[r].a - 1;
    s.last = runs[r].b;
    s.kind = runs[r].turn ? Segment::Kind::turning : Segment::Kind::straight;
    s.first_pose = poses[s.first];
    s.last_pose = poses[s.last];
    out.push_back(s);
  }
  return out;
}

/// Segment index owning each keyframe (boundaries go to the earlier segment).
inline std::vector<int> segment_membership(const std::vector<Segment>& segs, int n) {
  std::vector<int> owner(n, -1);
  for (int s = static_cast<int>(segs.size()) - 1; s >= 0; --s) {
    for (int k = segs[s].first; k <= segs[s].last; ++k) owner[k] = s;
  }
  return owner;
}

/// Sidecar: one line per keyframe with its segment and kind.
inline void write_segments(std::ostream& out, const std::vector<Segment>& segs, int n) {
  const auto owner = segment_membership(segs, n);
  out << "# keyframe segment kind\n";
  for (int k = 0; k < n; ++k) out << k << ' ' << owner[k] << ' ' << to_string(segs[owner[k]].kind) << '\n';
}

// --- loops -------------------------------------------------------------------

struct LoopParams {
  double radius = 5.0;
  int min_gap = 50;
  int suppress = 10;  // keyframes skipped after an accepted candidate
};

struct LoopCandidate {
  int i = 0, j = 0;
  Pose measured;  // pose_i^-1 * pose_j
  Mat6 sqrt_info = Mat6::Identity();
  bool from_truth = false;
};

/// Relative-pose measurement for a keyframe pair; nothing when it fails.
using LoopMeasure = std::function<std::optional<LoopCandidate>(int i, int j)>;

/// Proximity candidates (closest earlier keyframe at least min_gap back),
/// each measured by `measure`; failed measurements are dropped.
inline std::vector<LoopCandidate> detect_loops(const std::vector<Pose>& poses, const LoopParams& p,
                                               const LoopMeasure& measure) {
  std::vector<LoopCandidate> out;
  const int n = static_cast<int>(poses.size());
  int next_allowed = 0;
  for (int j = 0; j < n; ++j) {
    if (j < next_allowed) continue;
    int best = -1;
    double best_d = p.radius;
    for (int i = 0; i + p.min_gap <= j; ++i) {
      const double d = (poses[i].translation - poses[j].translation).norm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    if (best < 0) continue;
    if (auto c = measure(best, j)) {
      c->i = best;
      c->j = j;
      out.push_back(*c);
      next_allowed = j + p.suppress;
    }
  }
  return out;
}

// --- GPS gate ------------------------------------------------------------------

/// Normalized distance test of a fix against a predicted position.
inline bool gps_gate(const Vec3& fix, const Vec3& predicted, double predicted_sigma, double gate_sigma = 5.0) {
  if (!(predicted_sigma > 0.0)) throw std::invalid_argument("gps_gate: sigma must be positive");
  return (fix - predicted).norm() / predicted_sigma <= gate_sigma;
}

struct GpsGateParams {
  double gps_sigma = 0.5;
  double gate_sigma = 5.0;
  double odometry_drift = 0.05;  // relative error of odometry displacement
  double heading_baseline = 10.0;  // m of travel used to align odometry heading
  int reanchor_after = 8;          // consecutive rejections before trusting fixes again
};

/// Predicts each fix from the last accepted one plus the odometry
/// displacement, rotated by the heading offset between odometry and GPS.
class GpsGate {
 public:
  explicit GpsGate(const GpsGateParams& p = {}) : p_(p) {}

  /// Known starting position (e.g. the initialization pose) as the first anchor.
  void seed(const Vec3& position, const Vec3& odometry_position) { history_.push_back({position, odometry_position}); }

  bool accept(const Vec3& fix, const Vec3& odometry_position) {
    if (history_.empty() || rejected_run_ >= p_.reanchor_after) {
      history_.clear();
      history_.push_back({fix, odometry_position});
      rejected_run_ = 0;
      return true;
    }
    const auto& last = history_.back();
    const Vec3 disp = odometry_position - last.odometry;
    const Vec3 predicted = last.fix + Eigen::AngleAxisd(heading_offset(), Vec3::UnitZ()) * disp;
    const double sigma = std::sqrt(2.0 * p_.gps_sigma * p_.gps_sigma +
                                   std::pow(p_.odometry_drift * disp.norm(), 2));
    if (!gps_gate(fix, predicted, sigma, p_.gate_sigma)) {
      ++rejected_run_;
      return false;
    }
    rejected_run_ = 0;
    history_.push_back({fix, odometry_position});
    if (history_.size() > 200) history_.erase(history_.begin());
    return true;
  }

 private:
  struct Entry {
    Vec3 fix, odometry;
  };

  double heading_offset() const {
    const auto& b = history_.back();
    for (auto it = history_.rbegin(); it != history_.rend(); ++it) {
      const Vec3 dg = b.fix - it->fix, dodo = b.odometry - it->odometry;
      if (dodo.head<2>().norm() >= p_.heading_baseline && dg.head<2>().norm() >= p_.heading_baseline) {
        return wrap_angle(std::atan2(dg.y(), dg.x()) - std::atan2(dodo.y(), dodo.x()));
      }
    }
    return 0.0;
  }

  GpsGateParams p_;
  std::vector<Entry> history_;
  int rejected_run_ = 0;
};

// --- global optimization -------------------------------------------------------

struct GlobalParams {
  SegmentParams segments;
  double gps_sigma = 0.5;
  double odometry_sigma_rotation = 0.02;    // rad per keyframe edge
  double odometry_sigma_translation = 0.2;  // m per keyframe edge
  double prior_scale = 10.0;                // stage-2 prior information relative to odometry
  SolverOptions solver{50, 1e-4, 1e-9, 1e10};
};

struct GpsConstraint {
  int keyframe = 0;
  GpsFix fix;
};

struct GlobalResult {
  std::vector<Pose> stage1;
  std::vector<Pose> poses;
  std::vector<Segment> segments;
  std::optional<SolverReport> stage1_report, stage2_report;
  bool optimized = false;  // false: no global constraint, odometry returned
  std::string flag;
};

namespace detail {

/// Evaluates an inner factor on keyframe poses that are rigidly attached to
/// segment poses: keyframe = segment * offset. Jacobians are chained through
/// d(T o) / dT = [[I, 0], [-[R t_o]x, I]] in the (dtheta, dp) tangent.
class RigidMemberFactor final : public Factor {
 public:
  RigidMemberFactor(FactorPtr inner, std::vector<VarId> segments, std::vector<Pose> offsets)
      : Factor(inner->kind(), std::move(segments), inner->weight(), inner->robust()),
        inner_(std::move(inner)), offsets_(std::move(offsets)) {}

  int residual_dim() const override { return inner_->residual_dim(); }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    Variables local;
    for (size_t a = 0; a < offsets_.size(); ++a) local.add(compose(vars.pose_of(variables()[a]), offsets_[a]));
    std::vector<MatX> inner_jac;
    if (!inner_->evaluate(local, r, jac ? &inner_jac : nullptr)) return false;
    if (jac) {
      jac->resize(offsets_.size());
      for (size_t a = 0; a < offsets_.size(); ++a) {
        const Pose seg = vars.pose_of(variables()[a]);
        MatX m = MatX::Identity(6, 6);
        m.block<3, 3>(3, 0) = -skew(seg.rotation * offsets_[a].translation);
        (*jac)[a] = inner_jac[a] * m;
      }
    }
    return true;
  }

 private:
  FactorPtr inner_;
  std::vector<Pose> offsets_;
};

inline Mat6 diagonal_sqrt_info(double sigma_rot, double sigma_trans) {
  Mat6 s = Mat6::Zero();
  s.diagonal() << Vec3::Constant(1.0 / sigma_rot), Vec3::Constant(1.0 / sigma_trans);
  return s;
}

}  // namespace detail

/// Two-stage optimization of odometry keyframe poses against GPS fixes and
/// loop candidates (keyframe indices refer to `odometry`).
inline GlobalResult optimize_global(const std::vector<Pose>& odometry, const std::vector<GpsConstraint>& gps,
                                    const std::vector<LoopCandidate>& loops, const GlobalParams& p = {},
                                    const std::vector<bool>& odometry_valid = {}) {
  const int n = static_cast<int>(odometry.size());
  GlobalResult res;
  res.poses = res.stage1 = odometry;
  if (n < 2) {
    res.flag = "too few keyframes";
    return res;
  }
  for (int k = 0; k + 1 < n && k + 1 <= static_cast<int>(odometry_valid.size()); ++k) {
    if (!odometry_valid[k]) {
      throw std::runtime_error("optimize_global: graph disconnected between keyframes " + std::to_string(k) +
                               " and " + std::to_string(k + 1));
    }
  }
  for (const auto& g : gps) {
    if (g.keyframe < 0 || g.keyframe >= n) throw std::out_of_range("optimize_global: GPS keyframe out of range");
  }
  for (const auto& l : loops) {
    if (l.i < 0 || l.j >= n || l.i >= l.j) throw std::out_of_range("optimize_global: bad loop pair");
  }
  res.segments = segment_trajectory(odometry, p.segments);
  if (gps.empty() && loops.empty()) {
    res.flag = "no global constraints";
    return res;
  }
  res.optimized = true;
  const auto& segs = res.segments;
  const auto owner = segment_membership(segs, n);
  const Mat6 odo_info = detail::diagonal_sqrt_info(p.odometry_sigma_rotation, p.odometry_sigma_translation);

  // Stage 1: one pose per segment, placed at the segment's first keyframe.
  Problem s1;
  std::vector<VarId> seg_var;
  for (const auto& s : segs) seg_var.push_back(s1.add_variable(odometry[s.first]));
  std::vector<Pose> offset(n);
  for (int k = 0; k < n; ++k) offset[k] = between(odometry[segs[owner[k]].first], odometry[k]);
  for (size_t s = 0; s + 1 < segs.size(); ++s) {
    const double edges = segs[s].last - segs[s].first;
    s1.add_factor(std::make_shared<RelativePoseFactor>(FactorKind::odometry, seg_var[s], seg_var[s + 1],
                                                       between(odometry[segs[s].first], odometry[segs[s + 1].first]),
                                                       odo_info / std::sqrt(edges)));
  }
  for (const auto& g : gps) {
    const int s = owner[g.keyframe];
    Variables dummy;
    const VarId local = dummy.add(Pose());
    s1.add_factor(std::make_shared<detail::RigidMemberFactor>(std::make_shared<GpsFactor>(local, g.fix, p.gps_sigma),
                                                              std::vector<VarId>{seg_var[s]},
                                                              std::vector<Pose>{offset[g.keyframe]}));
  }
  for (const auto& l : loops) {
    const int a = owner[l.i], b = owner[l.j];
    if (a == b) continue;  // rigid within a segment
    auto inner = std::make_shared<RelativePoseFactor>(FactorKind::loop, VarId{VarKind::pose, 0}, VarId{VarKind::pose, 1},
                                                      l.measured, l.sqrt_info);
    s1.add_factor(std::make_shared<detail::RigidMemberFactor>(inner, std::vector<VarId>{seg_var[a], seg_var[b]},
                                                              std::vector<Pose>{offset[l.i], offset[l.j]}));
  }
  if (gps.empty()) s1.set_constant(seg_var[0]);
  res.stage1_report = s1.solve(p.solver);
  for (int k = 0; k < n; ++k) res.stage1[k] = compose(s1.variables.poses[seg_var[owner[k]].index], offset[k]);

  // Stage 2: every keyframe, odometry edges, global factors, and priors
  // toward stage 1 that leave the part-specific direction free.
  Problem s2;
  std::vector<VarId> kf;
  for (int k = 0; k < n; ++k) kf.push_back(s2.add_variable(res.stage1[k]));
  for (int k = 0; k + 1 < n; ++k) {
    s2.add_factor(std::make_shared<RelativePoseFactor>(FactorKind::odometry, kf[k], kf[k + 1],
                                                       between(odometry[k], odometry[k + 1]), odo_info));
  }
  for (const auto& g : gps) s2.add_factor(std::make_shared<GpsFactor>(kf[g.keyframe], g.fix, p.gps_sigma));
  for (const auto& l : loops) {
    s2.add_factor(std::make_shared<RelativePoseFactor>(FactorKind::loop, kf[l.i], kf[l.j], l.measured, l.sqrt_info));
  }
  const double ps = std::sqrt(p.prior_scale);
  for (int k = 0; k < n; ++k) {
    const Pose& ref = res.stage1[k];
    Mat6 s = Mat6::Zero();
    if (segs[owner[k]].kind == Segment::Kind::turning) {
      s.block<3, 3>(3, 3) = Mat3::Identity() * (ps / p.odometry_sigma_translation);
    } else {
      s.block<3, 3>(0, 0) = Mat3::Identity() * (ps / p.odometry_sigma_rotation);
      Mat3 sel = Mat3::Zero();
      sel(1, 1) = sel(2, 2) = ps / p.odometry_sigma_translation;  // body y, z; x is along track
      s.block<3, 3>(3, 3) = sel * ref.rotation.matrix().transpose();
    }
    s2.add_factor(std::make_shared<PosePriorFactor>(kf[k], ref, s));
  }
  if (gps.empty()) s2.set_constant(kf[0]);
  res.stage2_report = s2.solve(p.solver);
  for (int k = 0; k < n; ++k) res.poses[k] = s2.variables.poses[kf[k].index];
  return res;
}

/// Summed GPS and loop cost of a set of keyframe poses.
inline double global_constraint_cost(const std::vector<Pose>& poses, const std::vector<GpsConstraint>& gps,
                                     const std::vector<LoopCandidate>& loops, double gps_sigma) {
  double c = 0.0;
  for (const auto& g : gps) c += gps_residual(poses[g.keyframe].translation, g.fix, gps_sigma).squaredNorm();
  for (const auto& l : loops) {
    const Vec6 r = l.sqrt_info * loop_residual(poses[l.i], poses[l.j], l.measured);
    c += r.squaredNorm();
  }
  return c;
}

}  // namespace msf
