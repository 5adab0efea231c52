#pragma once

// Residual terms of the weighted robust least-squares objective
//
//   sum w_b |r_B|^2 + sum w_c rho(|r_C|^2) + sum w_l rho(|r_L|^2) (+ GPS, loop)
//
// Every factor evaluates to a residual plus Jacobians w.r.t. the tangent
// spaces of its variables: states (dtheta, dp, dv, dba, dbg), poses
// (dtheta, dp) and points (dP). Rotations are perturbed on the left.

#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msf/geometry.hpp"
#include "msf/imu_preintegration.hpp"
#include "msf/simulator.hpp"

namespace msf {

// --- variables -------------------------------------------------------------

enum class VarKind { state, pose, point };

struct VarId {
  VarKind kind = VarKind::state;
  int index = -1;
  friend bool operator==(const VarId&, const VarId&) = default;
};

inline int tangent_dim(VarKind k) {
  switch (k) {
    case VarKind::state: return State::kDim;
    case VarKind::pose: return 6;
    case VarKind::point: return 3;
  }
  return 0;
}

/// Value storage for everything a factor graph optimizes.
struct Variables {
  std::vector<State> states;
  std::vector<Pose> poses;
  std::vector<Vec3> points;

  VarId add(const State& s) {
    states.push_back(s);
    return {VarKind::state, static_cast<int>(states.size()) - 1};
  }
  VarId add(const Pose& p) {
    poses.push_back(p);
    return {VarKind::pose, static_cast<int>(poses.size()) - 1};
  }
  VarId add(const Vec3& p) {
    points.push_back(p);
    return {VarKind::point, static_cast<int>(points.size()) - 1};
  }

  /// Pose of a state or pose variable.
  Pose pose_of(VarId id) const {
    if (id.kind == VarKind::state) return states.at(id.index).pose();
    if (id.kind == VarKind::pose) return poses.at(id.index);
    throw std::invalid_argument("pose_of: variable is a point");
  }

  void retract(VarId id, const VecX& delta) {
    switch (id.kind) {
      case VarKind::state: states[id.index] = msf::retract(states[id.index], StateDelta(delta)); break;
      case VarKind::pose: poses[id.index] = msf::retract(poses[id.index], Vec6(delta)); break;
      case VarKind::point: points[id.index] += delta; break;
    }
  }
};

// --- robustifier -----------------------------------------------------------

struct HuberParams {
  double delta = 1.0;  // knee on the residual norm; the squared knee is delta^2
};

struct RhoValue {
  double rho;
  double slope;  // d rho / d s
};

/// Huber on the squared norm s: rho = s below delta^2, 2 delta sqrt(s) - delta^2 above.
inline RhoValue huber(double s, const HuberParams& p) {
  const double d2 = p.delta * p.delta;
  if (s <= d2) return {s, 1.0};
  const double r = std::sqrt(s);
  return {2.0 * p.delta * r - d2, p.delta / r};
}

// --- free residual functions ----------------------------------------------

/// Observed pixel minus projection of P through the world-to-camera pose.
/// Nothing when the point is not in front of the camera.
inline std::optional<Vec2> visual_residual(const Pose& camera_from_world, const Vec3& landmark,
                                           const Vec2& pixel, const CameraIntrinsics& k) {
  const Vec3 pc = transform(camera_from_world, landmark);
  if (!(pc.z() > 1e-6)) return std::nullopt;
  return Vec2(pixel - project(k, pc));
}

/// Unsigned distance of a point to the plane through a triple.
inline double lidar_residual(const Vec3& point, const Vec3& pu, const Vec3& pv, const Vec3& pw) {
  const Vec3 n = (pu - pv).cross(pu - pw);
  const double nn = n.norm();
  if (!(nn > 1e-9)) throw std::invalid_argument("lidar_residual: collinear plane triple");
  return std::abs((point - pu).dot(n)) / nn;
}

/// Whitened GPS position error; sigma is the isotropic standard deviation.
inline Vec3 gps_residual(const Vec3& position, const GpsFix& fix, double sigma) {
  if (!fix.valid) throw std::invalid_argument("gps_residual: invalid fix");
  return (position - fix.position) / sigma;
}

/// Tangent error of measured^-1 * pose_i^-1 * pose_j as (rotation, translation).
inline Vec6 loop_residual(const Pose& pose_i, const Pose& pose_j, const Pose& measured) {
  const Pose e = compose(inverse(measured), between(pose_i, pose_j));
  Vec6 r;
  r.head<3>() = log_so3(e.rotation);
  r.tail<3>() = e.translation;
  return r;
}

// --- factor interface ------------------------------------------------------

enum class FactorKind { visual, inertial, lidar_ground, lidar_surface, gps, loop, odometry, prior };

inline const char* to_string(FactorKind k) {
  switch (k) {
    case FactorKind::visual: return "visual";
    case FactorKind::inertial: return "inertial";
    case FactorKind::lidar_ground: return "lidar_ground";
    case FactorKind::lidar_surface: return "lidar_surface";
    case FactorKind::gps: return "gps";
    case FactorKind::loop: return "loop";
    case FactorKind::odometry: return "odometry";
    case FactorKind::prior: return "prior";
  }
  return "?";
}

inline bool is_lidar(FactorKind k) {
  return k == FactorKind::lidar_ground || k == FactorKind::lidar_surface;
}

class Factor {
 public:
  Factor(FactorKind kind, std::vector<VarId> vars, double weight,
         std::optional<HuberParams> robust = std::nullopt)
      : kind_(kind), vars_(std::move(vars)), weight_(weight), robust_(robust) {
    if (!(weight >= 0.0) || !std::isfinite(weight)) {
      throw std::invalid_argument("factor weight must be finite and >= 0");
    }
  }
  virtual ~Factor() = default;

  FactorKind kind() const { return kind_; }
  const std::vector<VarId>& variables() const { return vars_; }
  double weight() const { return weight_; }
  void set_weight(double w) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("factor weight must be >= 0");
    weight_ = w;
  }
  const std::optional<HuberParams>& robust() const { return robust_; }

  virtual int residual_dim() const = 0;

  /// Residual and (optionally) one Jacobian per variable. Returns false when
  /// the factor is inactive at this linearization point.
  virtual bool evaluate(const Variables& vars, VecX& residual,
                        std::vector<MatX>* jacobians) const = 0;

  /// Weighted, robustified contribution to the objective.
  double cost(const Variables& vars) const {
    VecX r;
    if (!evaluate(vars, r, nullptr)) return 0.0;
    const double s = r.squaredNorm();
    return weight_ * (robust_ ? huber(s, *robust_).rho : s);
  }

 protected:
  /// Embeds a Jacobian w.r.t. (dtheta, dp) into the variable's tangent.
  static MatX pose_block(VarId id, const MatX& j6) {
    MatX j = MatX::Zero(j6.rows(), tangent_dim(id.kind));
    j.leftCols(6) = j6;
    return j;
  }

 private:
  FactorKind kind_;
  std::vector<VarId> vars_;
  double weight_;
  std::optional<HuberParams> robust_;
};

using FactorPtr = std::shared_ptr<const Factor>;
using FactorGraph = std::vector<FactorPtr>;

// --- concrete factors ------------------------------------------------------

/// Reprojection of a world landmark into the left (0) or right (1) camera of
/// a body pose.
class VisualFactor final : public Factor {
 public:
  VisualFactor(VarId body, VarId landmark, const Vec2& pixel, int camera,
               const CameraIntrinsics& intrinsics, double weight, HuberParams huber_params)
      : Factor(FactorKind::visual, {body, landmark}, weight, huber_params),
        pixel_(pixel), camera_(camera), k_(intrinsics) {}

  int residual_dim() const override { return 2; }
  const Vec2& pixel() const { return pixel_; }
  int camera() const { return camera_; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    const Pose T = vars.pose_of(variables()[0]);
    const Vec3& P = vars.points.at(variables()[1].index);
    const Mat3 Rt = T.rotation.matrix().transpose();
    const Mat3 Rcb = body_from_camera().matrix().transpose();
    const Vec3 pb = Rt * (P - T.translation);
    Vec3 pc = Rcb * pb;
    if (camera_ == 1) pc.x() -= k_.baseline;
    if (!(pc.z() > 1e-6)) return false;
    r = pixel_ - project(k_, pc);
    if (jac) {
      Eigen::Matrix<double, 2, 3> dpi;
      const double iz = 1.0 / pc.z();
      dpi << k_.focal * iz, 0.0, -k_.focal * pc.x() * iz * iz,
             0.0, k_.focal * iz, -k_.focal * pc.y() * iz * iz;
      const Eigen::Matrix<double, 2, 3> d = -dpi * Rcb;
      MatX j6(2, 6);
      j6.leftCols(3) = d * Rt * skew(P - T.translation);
      j6.rightCols(3) = -d * Rt;
      jac->resize(2);
      (*jac)[0] = pose_block(variables()[0], j6);
      (*jac)[1] = d * Rt;
    }
    return true;
  }

 private:
  Vec2 pixel_;
  int camera_;
  CameraIntrinsics k_;
};

/// Pre-integrated IMU between consecutive keyframe states, whitened by the
/// pre-integration covariance. Never robustified.
class InertialFactor final : public Factor {
 public:
  InertialFactor(VarId prev, VarId curr, PreintegratedImu pre, double weight,
                 const Vec3& gravity = kGravity)
      : Factor(FactorKind::inertial, {prev, curr}, weight), pre_(std::move(pre)),
        sqrt_info_(pre_.sqrt_information()), gravity_(gravity) {
    if (prev.kind != VarKind::state || curr.kind != VarKind::state) {
      throw std::invalid_argument("inertial factor connects two states");
    }
  }

  int residual_dim() const override { return 15; }
  const PreintegratedImu& preintegration() const { return pre_; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    const State& a = vars.states.at(variables()[0].index);
    const State& b = vars.states.at(variables()[1].index);
    r = sqrt_info_ * residual(pre_, a, b, gravity_);
    if (jac) {
      const InertialJacobians J = residual_jacobians(pre_, a, b, gravity_);
      jac->resize(2);
      (*jac)[0] = sqrt_info_ * J.prev;
      (*jac)[1] = sqrt_info_ * J.curr;
    }
    return true;
  }

 private:
  PreintegratedImu pre_;
  Mat15 sqrt_info_;
  Vec3 gravity_;
};

/// Distance of a body-frame lidar point, mapped through the body pose, to the
/// plane of a fixed world-frame triple. Signed internally; the squared norm
/// equals the squared point-to-plane distance.
class LidarPlaneFactor final : public Factor {
 public:
  LidarPlaneFactor(FactorKind kind, VarId body, const Vec3& point_body, const Vec3& pu,
                   const Vec3& pv, const Vec3& pw, double weight, HuberParams huber_params)
      : Factor(kind, {body}, weight, huber_params), point_(point_body), pu_(pu) {
    if (!is_lidar(kind)) throw std::invalid_argument("lidar factor kind expected");
    const Vec3 n = (pu - pv).cross(pu - pw);
    if (!(n.norm() > 1e-9)) throw std::invalid_argument("lidar factor: collinear triple");
    normal_ = n.normalized();
  }

  int residual_dim() const override { return 1; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    const Pose T = vars.pose_of(variables()[0]);
    const Vec3 pw = transform(T, point_);
    r.resize(1);
    r(0) = normal_.dot(pw - pu_);
    if (jac) {
      MatX j6(1, 6);
      // d(exp(d) R x)/dd = -[R x]
      j6.leftCols(3) = -normal_.transpose() * skew(T.rotation * point_);
      j6.rightCols(3) = normal_.transpose();
      jac->assign(1, pose_block(variables()[0], j6));
    }
    return true;
  }

 private:
  Vec3 point_;
  Vec3 pu_;
  Vec3 normal_;
};

class GpsFactor final : public Factor {
 public:
  GpsFactor(VarId body, const GpsFix& fix, double sigma, double weight = 1.0)
      : Factor(FactorKind::gps, {body}, weight), fix_(fix), sigma_(sigma) {
    if (!fix.valid) throw std::invalid_argument("GPS factor needs a valid fix");
    if (!(sigma > 0.0)) throw std::invalid_argument("GPS sigma must be positive");
  }

  int residual_dim() const override { return 3; }
  const GpsFix& fix() const { return fix_; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    r = gps_residual(vars.pose_of(variables()[0]).translation, fix_, sigma_);
    if (jac) {
      MatX j6 = MatX::Zero(3, 6);
      j6.rightCols(3) = Mat3::Identity() / sigma_;
      jac->assign(1, pose_block(variables()[0], j6));
    }
    return true;
  }

 private:
  GpsFix fix_;
  double sigma_;
};

/// Relative-pose constraint. Used for loop closures and for odometry edges of
/// the pose graph; residual whitened by sqrt_info (6x6).
class RelativePoseFactor final : public Factor {
 public:
  RelativePoseFactor(FactorKind kind, VarId i, VarId j, const Pose& measured, const Mat6& sqrt_info,
                     double weight = 1.0)
      : Factor(kind, {i, j}, weight), measured_(measured), sqrt_info_(sqrt_info) {}

  int residual_dim() const override { return 6; }
  const Pose& measured() const { return measured_; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    const Pose Ti = vars.pose_of(variables()[0]);
    const Pose Tj = vars.pose_of(variables()[1]);
    const Vec6 e = loop_residual(Ti, Tj, measured_);
    r = sqrt_info_ * e;
    if (jac) {
      const Mat3 MtRit = measured_.rotation.matrix().transpose() * Ti.rotation.matrix().transpose();
      const Vec3 er = e.head<3>();
      MatX ji = MatX::Zero(6, 6), jj = MatX::Zero(6, 6);
      ji.block<3, 3>(0, 0) = -left_jacobian_inverse(er) * MtRit;
      ji.block<3, 3>(3, 0) = MtRit * skew(Tj.translation - Ti.translation);
      ji.block<3, 3>(3, 3) = -MtRit;
      jj.block<3, 3>(0, 0) = right_jacobian_inverse(er) * Tj.rotation.matrix().transpose();
      jj.block<3, 3>(3, 3) = MtRit;
      jac->resize(2);
      (*jac)[0] = pose_block(variables()[0], sqrt_info_ * ji);
      (*jac)[1] = pose_block(variables()[1], sqrt_info_ * jj);
    }
    return true;
  }

 private:
  Pose measured_;
  Mat6 sqrt_info_;
};

/// Soft anchor of a pose to a reference: (log(R R0^T), t - t0), whitened.
class PosePriorFactor final : public Factor {
 public:
  PosePriorFactor(VarId body, const Pose& reference, const Mat6& sqrt_info, double weight = 1.0)
      : Factor(FactorKind::prior, {body}, weight), reference_(reference), sqrt_info_(sqrt_info) {}

  int residual_dim() const override { return 6; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    const Pose T = vars.pose_of(variables()[0]);
    Vec6 e;
    e.head<3>() = log_so3(T.rotation * reference_.rotation.inverse());
    e.tail<3>() = T.translation - reference_.translation;
    r = sqrt_info_ * e;
    if (jac) {
      MatX j6 = MatX::Zero(6, 6);
      j6.block<3, 3>(0, 0) = left_jacobian_inverse(e.head<3>());
      j6.block<3, 3>(3, 3) = Mat3::Identity();
      jac->assign(1, pose_block(variables()[0], sqrt_info_ * j6));
    }
    return true;
  }

 private:
  Pose reference_;
  Mat6 sqrt_info_;
};

/// Soft anchor of a state's velocity and biases, e.g. carried over from the
/// keyframes that left the window. Residual order (v, ba, bg).
class MotionPriorFactor final : public Factor {
 public:
  MotionPriorFactor(VarId state, const State& reference, const Vec9& sqrt_info_diagonal, double weight = 1.0)
      : Factor(FactorKind::prior, {state}, weight), reference_(reference), sqrt_info_(sqrt_info_diagonal) {
    if (state.kind != VarKind::state) throw std::invalid_argument("MotionPriorFactor needs a state variable");
  }

  int residual_dim() const override { return 9; }

  bool evaluate(const Variables& vars, VecX& r, std::vector<MatX>* jac) const override {
    const State& s = vars.states[variables()[0].index];
    Vec9 e;
    e << s.velocity - reference_.velocity, s.bias_accel - reference_.bias_accel, s.bias_gyro - reference_.bias_gyro;
    r = sqrt_info_.cwiseProduct(e);
    if (jac) {
      MatX j = MatX::Zero(9, State::kDim);
      j.rightCols(9) = sqrt_info_.asDiagonal();
      jac->assign(1, j);
    }
    return true;
  }

 private:
  State reference_;
  Vec9 sqrt_info_;
};

// --- objective -------------------------------------------------------------

/// Per-family weights (w_b, w_c, w_l) plus the global-graph families.
struct FamilyWeights {
  double inertial = 1.0;
  double visual = 1.0;
  double lidar = 1.0;
  double gps = 1.0;
  double loop = 1.0;

  double of(FactorKind k) const {
    switch (k) {
      case FactorKind::inertial: return inertial;
      case FactorKind::visual: return visual;
      case FactorKind::lidar_ground:
      case FactorKind::lidar_surface: return lidar;
      case FactorKind::gps: return gps;
      case FactorKind::loop: return loop;
      default: return 1.0;
    }
  }
};

/// Objective with each factor's own weight.
inline double weighted_cost(const FactorGraph& graph, const Variables& vars) {
  double c = 0.0;
  for (const auto& f : graph) c += f->cost(vars);
  return c;
}

/// Objective with every factor's weight replaced by its family weight.
inline double weighted_cost(const FactorGraph& graph, const Variables& vars,
                            const FamilyWeights& w) {
  double c = 0.0;
  for (const auto& f : graph) {
    VecX r;
    if (!f->evaluate(vars, r, nullptr)) continue;
    const double s = r.squaredNorm();
    c += w.of(f->kind()) * (f->robust() ? huber(s, *f->robust()).rho : s);
  }
  return c;
}

/// Debug dump: kind, variable ids, weight, current residual norm.
inline void dump_graph(std::ostream& out, const FactorGraph& graph, const Variables& vars) {
  for (const auto& f : graph) {
    VecX r;
    const bool active = f->evaluate(vars, r, nullptr);
    out << to_string(f->kind());
    for (const auto& v : f->variables()) {
      out << ' ' << (v.kind == VarKind::state ? 's' : v.kind == VarKind::pose ? 'x' : 'l') << v.index;
    }
    out << " w=" << f->weight() << " r=" << (active ? r.norm() : -1.0) << '\n';
  }
}

}  // namespace msf
