#pragma once

// SO(3)/SE(3) primitives and the per-keyframe robot state.
// Frames: world W (z up), body B coincident with the IMU (x forward, y left, z up).

#include <algorithm>
#include <cmath>
#include <Eigen/Core>
#include <Eigen/Geometry>

namespace msf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline const Vec3 kGravity{0.0, 0.0, -9.81};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Element of SO(3), stored as an orthonormal 3x3 matrix.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Re-orthonormalizes the input through a quaternion.
  explicit Rotation(const Mat3& m) : m_(Eigen::Quaterniond(m).normalized().toRotationMatrix()) {}
  explicit Rotation(const Eigen::Quaterniond& q) : m_(q.normalized().toRotationMatrix()) {}

  static Rotation identity() { return Rotation(); }

  const Mat3& matrix() const { return m_; }
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(m_).normalized(); }

  Rotation inverse() const { return from_orthonormal(m_.transpose()); }
  Rotation operator*(const Rotation& o) const { return from_orthonormal(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  /// Yaw of the body x axis projected into the world xy plane.
  double yaw() const { return std::atan2(m_(1, 0), m_(0, 0)); }

  // Skips re-orthonormalization; callers guarantee m is a product of rotations.
  static Rotation from_orthonormal(const Mat3& m) {
    Rotation r;
    r.m_ = m;
    return r;
  }

 private:
  Mat3 m_;
};

/// Rodrigues formula; Taylor branch below 1e-8 rad.
inline Rotation exp_so3(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 w = skew(omega);
  double a, b;
  if (theta < 1e-8) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Rotation::from_orthonormal(Mat3::Identity() + a * w + b * w * w);
}

/// Axis-angle vector with norm in [0, pi]. Goes through the quaternion so the
/// trace ~ -1 case stays well conditioned.
inline Vec3 log_so3(const Rotation& r) {
  Eigen::Quaterniond q = r.quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3 v = q.vec();
  const double n = v.norm();
  if (n < 1e-12) return 2.0 * v / q.w();
  const double theta = 2.0 * std::atan2(n, q.w());
  return theta / n * v;
}

/// Right Jacobian of SO(3): exp(w + d) ~= exp(w) exp(Jr(w) d).
inline Mat3 right_jacobian(const Vec3& w) {
  const double t2 = w.squaredNorm();
  const Mat3 W = skew(w);
  if (t2 < 1e-12) return Mat3::Identity() - 0.5 * W + W * W / 6.0;
  const double t = std::sqrt(t2);
  return Mat3::Identity() - (1.0 - std::cos(t)) / t2 * W + (t - std::sin(t)) / (t2 * t) * W * W;
}

inline Mat3 right_jacobian_inverse(const Vec3& w) {
  const double t2 = w.squaredNorm();
  const Mat3 W = skew(w);
  if (t2 < 1e-12) return Mat3::Identity() + 0.5 * W + W * W / 12.0;
  const double t = std::sqrt(t2);
  return Mat3::Identity() + 0.5 * W +
         (1.0 / t2 - (1.0 + std::cos(t)) / (2.0 * t * std::sin(t))) * W * W;
}

inline Mat3 left_jacobian(const Vec3& w) { return right_jacobian(-w); }
inline Mat3 left_jacobian_inverse(const Vec3& w) { return right_jacobian_inverse(-w); }

/// Rigid transform x -> R x + t.
struct Pose {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Rotation& r, const Vec3& t) : rotation(r), translation(t) {}

  static Pose identity() { return Pose(); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation.matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

inline Pose compose(const Pose& a, const Pose& b) {
  return Pose(a.rotation * b.rotation, a.rotation * b.translation + a.translation);
}

inline Pose inverse(const Pose& a) {
  const Rotation rt = a.rotation.inverse();
  return Pose(rt, -(rt * a.translation));
}

inline Vec3 transform(const Pose& a, const Vec3& p) { return a.rotation * p + a.translation; }

/// Relative pose a^-1 * b.
inline Pose between(const Pose& a, const Pose& b) { return compose(inverse(a), b); }

/// Left-multiplied tangent update: R <- exp(dtheta) R, t <- t + dt.
inline Pose retract(const Pose& p, const Vec6& delta) {
  return Pose(exp_so3(delta.head<3>()) * p.rotation, p.translation + delta.tail<3>());
}

inline Rotation rotation_from_rpy(double roll, double pitch, double yaw) {
  const Eigen::Quaterniond q = Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                               Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                               Eigen::AngleAxisd(roll, Vec3::UnitX());
  return Rotation(q);
}

/// (roll, pitch, yaw) for R = Rz(yaw) Ry(pitch) Rx(roll).
inline Vec3 rpy_from_rotation(const Rotation& r) {
  const Mat3& m = r.matrix();
  const double pitch = std::asin(std::clamp(-m(2, 0), -1.0, 1.0));
  const double roll = std::atan2(m(2, 1), m(2, 2));
  const double yaw = std::atan2(m(1, 0), m(0, 0));
  return {roll, pitch, yaw};
}

inline double wrap_angle(double a) {
  return std::remainder(a, 2.0 * M_PI);
}

/// Robot state of one keyframe. Tangent order used everywhere:
/// (dtheta, dp, dv, dba, dbg), rotation updated on the left.
struct State {
  static constexpr int kDim = 15;

  Rotation rotation;
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 bias_accel = Vec3::Zero();
  Vec3 bias_gyro = Vec3::Zero();
  double timestamp = 0.0;

  Pose pose() const { return Pose(rotation, position); }
  void set_pose(const Pose& p) {
    rotation = p.rotation;
    position = p.translation;
  }
};

using StateDelta = Eigen::Matrix<double, State::kDim, 1>;

inline State retract(const State& s, const StateDelta& d) {
  State out = s;
  out.rotation = exp_so3(d.segment<3>(0)) * s.rotation;
  out.position += d.segment<3>(3);
  out.velocity += d.segment<3>(6);
  out.bias_accel += d.segment<3>(9);
  out.bias_gyro += d.segment<3>(12);
  return out;
}

}  // namespace msf
