#pragma once

// Pre-integration of IMU samples between two keyframes and the five-block
// inertial residual [r_v, r_p, r_R, r_ba, r_bg].
//
// Each sample is held constant over its interval and integrated exactly
// (closed-form rotation-coupled integrals), matching the simulator's sample
// semantics. Bias Jacobians and the (dtheta, dv, dp) covariance are
// propagated to first order.

#include <cmath>
#include <algorithm>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>

#include "msf/geometry.hpp"
#include "msf/simulator.hpp"

namespace msf {

/// Noise densities the estimator assumes, discretized as sigma^2/dt per step.
struct ImuNoise {
  double gyro_density = 1.7e-4;
  double accel_density = 2.0e-3;
  double gyro_bias_walk = 2.0e-5;
  double accel_bias_walk = 3.0e-4;
};

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat15 = Eigen::Matrix<double, 15, 15>;
using Vec15 = Eigen::Matrix<double, 15, 1>;

struct ImuDeltas {
  Rotation rotation;
  Vec3 velocity = Vec3::Zero();
  Vec3 position = Vec3::Zero();
};

class PreintegratedImu {
 public:
  PreintegratedImu() = default;
  PreintegratedImu(const Vec3& bias_accel, const Vec3& bias_gyro, ImuNoise noise = {})
      : lin_bias_accel_(bias_accel), lin_bias_gyro_(bias_gyro), noise_(noise) {}

  double dt_total() const { return dt_total_; }
  const Rotation& delta_rotation() const { return delta_rotation_; }
  const Vec3& delta_velocity() const { return delta_velocity_; }
  const Vec3& delta_position() const { return delta_position_; }
  const Vec3& bias_accel() const { return lin_bias_accel_; }
  const Vec3& bias_gyro() const { return lin_bias_gyro_; }
  const ImuNoise& noise() const { return noise_; }
  /// Covariance of (dtheta, dv, dp), dtheta a right perturbation of delta_rotation.
  const Mat9& covariance() const { return covariance_; }
  const Mat3& dR_dbg() const { return dR_dbg_; }
  const Mat3& dv_dba() const { return dv_dba_; }
  const Mat3& dv_dbg() const { return dv_dbg_; }
  const Mat3& dp_dba() const { return dp_dba_; }
  const Mat3& dp_dbg() const { return dp_dbg_; }
  size_t sample_count() const { return samples_.size(); }

  /// Adds one sample held for dt seconds.
  void integrate(const ImuSample& sample, double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("integrate: dt must be > 0");
    if (!sample.gyro.allFinite() || !sample.accel.allFinite()) {
      throw std::invalid_argument("integrate: non-finite IMU sample");
    }
    samples_.push_back({sample, dt});
    step(sample.gyro, sample.accel, dt);
  }

  /// Deltas re-expressed for new biases using the stored Jacobians.
  ImuDeltas corrected(const Vec3& bias_accel, const Vec3& bias_gyro) const {
    const Vec3 dba = bias_accel - lin_bias_accel_;
    const Vec3 dbg = bias_gyro - lin_bias_gyro_;
    ImuDeltas d;
    d.rotation = delta_rotation_ * exp_so3(dR_dbg_ * dbg);
    d.velocity = delta_velocity_ + dv_dba_ * dba + dv_dbg_ * dbg;
    d.position = delta_position_ + dp_dba_ * dba + dp_dbg_ * dbg;
    return d;
  }

  /// Full re-integration of the stored samples about new biases.
  PreintegratedImu reintegrated(const Vec3& bias_accel, const Vec3& bias_gyro) const {
    PreintegratedImu out(bias_accel, bias_gyro, noise_);
    for (const auto& s : samples_) out.integrate(s.sample, s.dt);
    return out;
  }

  /// Same samples with deltas moved to new biases through the first-order
  /// Jacobians; no re-integration.
  PreintegratedImu shifted(const Vec3& bias_accel, const Vec3& bias_gyro) const {
    PreintegratedImu out = *this;
    const ImuDeltas d = corrected(bias_accel, bias_gyro);
    out.delta_rotation_ = d.rotation;
    out.delta_velocity_ = d.velocity;
    out.delta_position_ = d.position;
    out.lin_bias_accel_ = bias_accel;
    out.lin_bias_gyro_ = bias_gyro;
    return out;
  }

  /// Residual covariance in residual order (v, p, R, ba, bg).
  Mat15 residual_covariance() const {
    Mat15 c = Mat15::Zero();
    // (dtheta, dv, dp) -> (r_v, r_p, r_R) = (-dv, -dp, -dR dtheta)
    Mat9 t = Mat9::Zero();
    t.block<3, 3>(0, 3) = -Mat3::Identity();
    t.block<3, 3>(3, 6) = -Mat3::Identity();
    t.block<3, 3>(6, 0) = -delta_rotation_.matrix();
    c.topLeftCorner<9, 9>() = t * covariance_ * t.transpose();
    const double T = std::max(dt_total_, 1e-9);
    c.block<3, 3>(9, 9) = noise_.accel_bias_walk * noise_.accel_bias_walk * T * Mat3::Identity();
    c.block<3, 3>(12, 12) = noise_.gyro_bias_walk * noise_.gyro_bias_walk * T * Mat3::Identity();
    return c;
  }

  /// Upper-triangular U with U^T U = covariance^-1.
  Mat15 sqrt_information() const {
    Mat15 c = residual_covariance();
    c.diagonal().array() += 1e-12;
    const Mat15 info = c.inverse();
    const Mat15 sym = 0.5 * (info + info.transpose());
    return sym.llt().matrixU();
  }

 private:
  struct Stored {
    ImuSample sample;
    double dt;
  };

  void step(const Vec3& gyro, const Vec3& accel, double dt) {
    const Vec3 a = accel - lin_bias_accel_;
    const Vec3 phi = (gyro - lin_bias_gyro_) * dt;
    const Rotation dR = exp_so3(phi);
    const Mat3 g1 = integrated_rotation(phi);
    const Mat3 g2 = double_integrated_rotation(phi);
    const Mat3& Rk = delta_rotation_.matrix();
    const Vec3 g1a = g1 * a, g2a = g2 * a;

    // Covariance (dtheta, dv, dp), right perturbation on the rotation.
    Mat9 A = Mat9::Identity();
    A.block<3, 3>(0, 0) = dR.matrix().transpose();
    A.block<3, 3>(3, 0) = -Rk * skew(g1a) * dt;
    A.block<3, 3>(6, 0) = -Rk * skew(g2a) * dt * dt;
    A.block<3, 3>(6, 3) = Mat3::Identity() * dt;
    Eigen::Matrix<double, 9, 6> B = Eigen::Matrix<double, 9, 6>::Zero();
    B.block<3, 3>(0, 0) = right_jacobian(phi) * dt;
    B.block<3, 3>(3, 3) = Rk * g1 * dt;
    B.block<3, 3>(6, 3) = Rk * g2 * dt * dt;
    Eigen::Matrix<double, 6, 6> Q = Eigen::Matrix<double, 6, 6>::Zero();
    Q.topLeftCorner<3, 3>() = noise_.gyro_density * noise_.gyro_density / dt * Mat3::Identity();
    Q.bottomRightCorner<3, 3>() = noise_.accel_density * noise_.accel_density / dt * Mat3::Identity();
    covariance_ = A * covariance_ * A.transpose() + B * Q * B.transpose();

    // Bias Jacobians; d(G1 a)/dphi ~ -[a]/2 and d(G2 a)/dphi ~ -[a]/6.
    dp_dba_ += dv_dba_ * dt - Rk * g2 * dt * dt;
    dp_dbg_ += dv_dbg_ * dt - Rk * skew(g2a) * dR_dbg_ * dt * dt + Rk * skew(a) * (dt * dt * dt / 6.0);
    dv_dba_ -= Rk * g1 * dt;
    dv_dbg_ += -Rk * skew(g1a) * dR_dbg_ * dt + Rk * skew(a) * (0.5 * dt * dt);
    dR_dbg_ = dR.matrix().transpose() * dR_dbg_ - right_jacobian(phi) * dt;

    delta_position_ += delta_velocity_ * dt + Rk * g2a * dt * dt;
    delta_velocity_ += Rk * g1a * dt;
    delta_rotation_ = delta_rotation_ * dR;
    dt_total_ += dt;
  }

  double dt_total_ = 0.0;
  Rotation delta_rotation_;
  Vec3 delta_velocity_ = Vec3::Zero();
  Vec3 delta_position_ = Vec3::Zero();
  Vec3 lin_bias_accel_ = Vec3::Zero();
  Vec3 lin_bias_gyro_ = Vec3::Zero();
  ImuNoise noise_;
  Mat9 covariance_ = Mat9::Zero();
  Mat3 dR_dbg_ = Mat3::Zero();
  Mat3 dv_dba_ = Mat3::Zero();
  Mat3 dv_dbg_ = Mat3::Zero();
  Mat3 dp_dba_ = Mat3::Zero();
  Mat3 dp_dbg_ = Mat3::Zero();
  std::vector<Stored> samples_;
};

inline PreintegratedImu integrate(PreintegratedImu pre, const ImuSample& sample, double dt) {
  pre.integrate(sample, dt);
  return pre;
}

/// Moves the linearization point to new biases. First-order for small
/// changes; re-integrates when the bias moved by more than `relinearize`.
inline PreintegratedImu correct_for_bias(const PreintegratedImu& pre, const Vec3& bias_accel,
                                         const Vec3& bias_gyro, double relinearize = 0.1) {
  const double moved = std::sqrt((bias_accel - pre.bias_accel()).squaredNorm() +
                                 (bias_gyro - pre.bias_gyro()).squaredNorm());
  if (moved > relinearize) return pre.reintegrated(bias_accel, bias_gyro);
  return pre.shifted(bias_accel, bias_gyro);
}

/// Samples covering [t0, t1) integrated about the given biases. Returns
/// nothing when the stream has a gap longer than max_gap inside the interval.
inline std::optional<PreintegratedImu> preintegrate(const std::vector<ImuSample>& imu, double t0,
                                                    double t1, const Vec3& bias_accel,
                                                    const Vec3& bias_gyro, const ImuNoise& noise,
                                                    double max_gap) {
  PreintegratedImu pre(bias_accel, bias_gyro, noise);
  auto it = std::lower_bound(imu.begin(), imu.end(), t0 - 1e-9,
                             [](const ImuSample& s, double t) { return s.timestamp < t; });
  if (it == imu.end() || std::abs(it->timestamp - t0) > max_gap) return std::nullopt;
  for (; it != imu.end() && it->timestamp < t1 - 1e-9; ++it) {
    const double next = (it + 1 != imu.end()) ? std::min((it + 1)->timestamp, t1) : t1;
    const double dt = next - it->timestamp;
    if (dt > max_gap) return std::nullopt;
    if (dt > 0.0) pre.integrate(*it, dt);
  }
  if (std::abs(pre.dt_total() - (t1 - t0)) > 1e-6) return std::nullopt;
  return pre;
}

/// Five-block inertial residual (v, p, R, ba, bg), rotation block vectorized
/// with log(R_prev^T R_curr dR^T). Deltas are bias-corrected with the
/// previous state's biases.
inline Vec15 residual(const PreintegratedImu& pre, const State& prev, const State& curr,
                      const Vec3& gravity = kGravity) {
  const double T = pre.dt_total();
  const ImuDeltas d = pre.corrected(prev.bias_accel, prev.bias_gyro);
  const Mat3 RiT = prev.rotation.matrix().transpose();
  Vec15 r;
  r.segment<3>(0) = RiT * (curr.velocity - prev.velocity - gravity * T) - d.velocity;
  r.segment<3>(3) = RiT * (curr.position - prev.position - prev.velocity * T - 0.5 * gravity * T * T) -
                    d.position;
  r.segment<3>(6) = log_so3(prev.rotation.inverse() * curr.rotation * d.rotation.inverse());
  r.segment<3>(9) = curr.bias_accel - prev.bias_accel;
  r.segment<3>(12) = curr.bias_gyro - prev.bias_gyro;
  return r;
}

struct InertialJacobians {
  Mat15 prev = Mat15::Zero();  // d r / d (dtheta, dp, dv, dba, dbg) of the previous state
  Mat15 curr = Mat15::Zero();
};

/// Analytic Jacobians in the left-multiplied tangent parameterization.
inline InertialJacobians residual_jacobians(const PreintegratedImu& pre, const State& prev,
                                            const State& curr, const Vec3& gravity = kGravity) {
  enum { kTheta = 0, kP = 3, kV = 6, kBa = 9, kBg = 12 };
  enum { rV = 0, rP = 3, rR = 6, rBa = 9, rBg = 12 };
  const double T = pre.dt_total();
  const Mat3 RiT = prev.rotation.matrix().transpose();
  const Mat3 RjT = curr.rotation.matrix().transpose();
  const Vec3 dbg = prev.bias_gyro - pre.bias_gyro();
  const ImuDeltas d = pre.corrected(prev.bias_accel, prev.bias_gyro);
  const Vec3 xv = curr.velocity - prev.velocity - gravity * T;
  const Vec3 xp = curr.position - prev.position - prev.velocity * T - 0.5 * gravity * T * T;
  const Vec3 rr = log_so3(prev.rotation.inverse() * curr.rotation * d.rotation.inverse());
  const Mat3 jr_inv = right_jacobian_inverse(rr);
  const Mat3 jl_inv = left_jacobian_inverse(rr);
  const Mat3 I = Mat3::Identity();

  InertialJacobians J;
  J.prev.block<3, 3>(rV, kTheta) = RiT * skew(xv);
  J.prev.block<3, 3>(rV, kV) = -RiT;
  J.prev.block<3, 3>(rV, kBa) = -pre.dv_dba();
  J.prev.block<3, 3>(rV, kBg) = -pre.dv_dbg();
  J.curr.block<3, 3>(rV, kV) = RiT;

  J.prev.block<3, 3>(rP, kTheta) = RiT * skew(xp);
  J.prev.block<3, 3>(rP, kP) = -RiT;
  J.prev.block<3, 3>(rP, kV) = -RiT * T;
  J.prev.block<3, 3>(rP, kBa) = -pre.dp_dba();
  J.prev.block<3, 3>(rP, kBg) = -pre.dp_dbg();
  J.curr.block<3, 3>(rP, kP) = RiT;

  J.prev.block<3, 3>(rR, kTheta) = -jl_inv * RiT;
  J.prev.block<3, 3>(rR, kBg) =
      -jr_inv * d.rotation.matrix() * right_jacobian(pre.dR_dbg() * dbg) * pre.dR_dbg();
  J.curr.block<3, 3>(rR, kTheta) = jr_inv * d.rotation.matrix() * RjT;

  J.prev.block<3, 3>(rBa, kBa) = -I;
  J.curr.block<3, 3>(rBa, kBa) = I;
  J.prev.block<3, 3>(rBg, kBg) = -I;
  J.curr.block<3, 3>(rBg, kBg) = I;
  return J;
}

/// Propagates a state through the pre-integrated motion.
inline State predict(const State& prev, const PreintegratedImu& pre, double timestamp,
                     const Vec3& gravity = kGravity) {
  const double T = pre.dt_total();
  const ImuDeltas d = pre.corrected(prev.bias_accel, prev.bias_gyro);
  State s = prev;
  s.timestamp = timestamp;
  s.rotation = prev.rotation * d.rotation;
  s.velocity = prev.velocity + gravity * T + prev.rotation * d.velocity;
  s.position = prev.position + prev.velocity * T + 0.5 * gravity * T * T + prev.rotation * d.position;
  return s;
}

}  // namespace msf
