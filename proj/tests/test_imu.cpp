#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "msf/imu_preintegration.hpp"
#include "test_util.hpp"

using namespace msf;
using namespace msf::testing;

namespace {

std::vector<ImuSample> random_stream(std::mt19937_64& rng, int n, double rate) {
  std::vector<ImuSample> out;
  for (int k = 0; k < n; ++k) {
    ImuSample s;
    s.timestamp = k / rate;
    s.gyro = random_vec(rng, 1.0);
    s.accel = random_vec(rng, 5.0) + Vec3(0, 0, 9.81);
    out.push_back(s);
  }
  return out;
}

PreintegratedImu integrate_all(const std::vector<ImuSample>& imu, double dt, const Vec3& ba,
                               const Vec3& bg) {
  PreintegratedImu pre(ba, bg);
  for (const auto& s : imu) pre.integrate(s, dt);
  return pre;
}

/// Substepped integration; the specific force uses the mid-substep attitude.
ImuDeltas dense_oracle(const std::vector<ImuSample>& imu, double dt, int substeps) {
  ImuDeltas d;
  const double h = dt / substeps;
  for (const auto& s : imu) {
    for (int i = 0; i < substeps; ++i) {
      const Vec3 a = d.rotation * exp_so3(0.5 * s.gyro * h) * s.accel;
      d.position += d.velocity * h + 0.5 * a * h * h;
      d.velocity += a * h;
      d.rotation = d.rotation * exp_so3(s.gyro * h);
    }
  }
  return d;
}

}  // namespace

TEST(Preintegration, EmptyIsIdentity) {
  PreintegratedImu pre;
  EXPECT_EQ(pre.dt_total(), 0.0);
  EXPECT_LT((pre.delta_rotation().matrix() - Mat3::Identity()).norm(), 1e-15);
  EXPECT_EQ(pre.delta_velocity(), Vec3::Zero());
  EXPECT_EQ(pre.delta_position(), Vec3::Zero());
}

TEST(Preintegration, ConstantAcceleration) {
  PreintegratedImu pre;
  ImuSample s;
  s.accel = Vec3(1, 0, 0);
  for (int k = 0; k < 400; ++k) pre.integrate(s, 0.005);
  EXPECT_NEAR(pre.dt_total(), 2.0, 1e-12);
  EXPECT_LT((pre.delta_velocity() - Vec3(2, 0, 0)).norm(), 1e-12);
  EXPECT_LT((pre.delta_position() - Vec3(2, 0, 0)).norm(), 1e-12);
  EXPECT_LT((pre.delta_rotation().matrix() - Mat3::Identity()).norm(), 1e-15);
}

TEST(Preintegration, ConstantRotationRate) {
  PreintegratedImu pre;
  ImuSample s;
  s.gyro = Vec3(0, 0, 0.5);
  for (int k = 0; k < 200; ++k) pre.integrate(s, 0.005);
  EXPECT_LT((pre.delta_rotation().matrix() - exp_so3(Vec3(0, 0, 0.5)).matrix()).norm(), 1e-12);
}

TEST(Preintegration, RejectsBadInput) {
  PreintegratedImu pre;
  ImuSample s;
  EXPECT_THROW(pre.integrate(s, 0.0), std::invalid_argument);
  s.accel.x() = std::nan("");
  EXPECT_THROW(pre.integrate(s, 0.005), std::invalid_argument);
}

TEST(Preintegration, MatchesDenseOracle) {
  std::mt19937_64 rng(5);
  const auto imu = random_stream(rng, 200, 200.0);
  const PreintegratedImu pre = integrate_all(imu, 0.005, Vec3::Zero(), Vec3::Zero());
  const ImuDeltas d = dense_oracle(imu, 0.005, 100);
  EXPECT_LT(log_so3(pre.delta_rotation().inverse() * d.rotation).norm(), 1e-4);
  EXPECT_LT((pre.delta_velocity() - d.velocity).norm(), 1e-4);
  EXPECT_LT((pre.delta_position() - d.position).norm(), 1e-4);
}

TEST(Preintegration, FirstOrderGyroBiasCorrection) {
  std::mt19937_64 rng(9);
  auto imu = random_stream(rng, 200, 200.0);
  for (auto& s : imu) s.accel.setZero();
  const PreintegratedImu pre = integrate_all(imu, 0.005, Vec3::Zero(), Vec3::Zero());
  const Vec3 dbg = random_vec(rng, 1.0).normalized() * 1e-3;
  const PreintegratedImu fo = correct_for_bias(pre, Vec3::Zero(), dbg);
  const PreintegratedImu full = pre.reintegrated(Vec3::Zero(), dbg);
  EXPECT_LT(log_so3(fo.delta_rotation().inverse() * full.delta_rotation()).norm(), 1e-5);
  // Unchanged bias leaves the deltas untouched.
  const PreintegratedImu same = correct_for_bias(pre, Vec3::Zero(), Vec3::Zero());
  EXPECT_EQ(same.delta_velocity(), pre.delta_velocity());
  EXPECT_LT((same.delta_rotation().matrix() - pre.delta_rotation().matrix()).norm(), 1e-15);
}

TEST(Preintegration, AccelBiasShiftsVelocityLinearly) {
  std::mt19937_64 rng(10);
  auto imu = random_stream(rng, 200, 200.0);
  for (auto& s : imu) s.gyro.setZero();
  const PreintegratedImu pre = integrate_all(imu, 0.005, Vec3::Zero(), Vec3::Zero());
  const Vec3 dba(1e-3, -2e-3, 5e-4);
  const PreintegratedImu fo = correct_for_bias(pre, dba, Vec3::Zero());
  const PreintegratedImu full = pre.reintegrated(dba, Vec3::Zero());
  EXPECT_LT((fo.delta_velocity() - pre.delta_velocity() - pre.dv_dba() * dba).norm(), 1e-12);
  EXPECT_LT((fo.delta_velocity() - full.delta_velocity()).norm(), 1e-6);
  EXPECT_LT((fo.delta_position() - full.delta_position()).norm(), 1e-6);
}

TEST(Preintegration, BiasJacobiansMatchReintegration) {
  std::mt19937_64 rng(12);
  const auto imu = random_stream(rng, 100, 200.0);
  const Vec3 ba = random_vec(rng, 0.1), bg = random_vec(rng, 0.01);
  const PreintegratedImu pre = integrate_all(imu, 0.005, ba, bg);
  const double h = 1e-6;
  // The per-step Jacobian of the rotation-coupled integrals uses their
  // small-angle derivative, good to ~|phi| relative.
  const double tol = 1e-5;
  for (int k = 0; k < 3; ++k) {
    const Vec3 e = Vec3::Unit(k) * h;
    const auto pg = pre.reintegrated(ba, bg + e), mg = pre.reintegrated(ba, bg - e);
    const auto pa = pre.reintegrated(ba + e, bg), ma = pre.reintegrated(ba - e, bg);
    const Vec3 dR = log_so3(mg.delta_rotation().inverse() * pg.delta_rotation()) / (2 * h);
    EXPECT_LT((dR - pre.dR_dbg().col(k)).norm(), tol);
    EXPECT_LT(((pg.delta_velocity() - mg.delta_velocity()) / (2 * h) - pre.dv_dbg().col(k)).norm(), tol);
    EXPECT_LT(((pg.delta_position() - mg.delta_position()) / (2 * h) - pre.dp_dbg().col(k)).norm(), tol);
    EXPECT_LT(((pa.delta_velocity() - ma.delta_velocity()) / (2 * h) - pre.dv_dba().col(k)).norm(), tol);
    EXPECT_LT(((pa.delta_position() - ma.delta_position()) / (2 * h) - pre.dp_dba().col(k)).norm(), tol);
  }
}

TEST(Preintegration, LargeBiasChangeReintegrates) {
  std::mt19937_64 rng(13);
  const auto imu = random_stream(rng, 50, 200.0);
  const PreintegratedImu pre = integrate_all(imu, 0.005, Vec3::Zero(), Vec3::Zero());
  const Vec3 bg(0.2, 0, 0);
  const PreintegratedImu c = correct_for_bias(pre, Vec3::Zero(), bg);
  const PreintegratedImu full = pre.reintegrated(Vec3::Zero(), bg);
  EXPECT_EQ(c.delta_velocity(), full.delta_velocity());
}

TEST(Preintegration, CovarianceGrowsAndStaysSymmetric) {
  std::mt19937_64 rng(14);
  const auto imu = random_stream(rng, 100, 200.0);
  PreintegratedImu pre;
  double trace = 0.0;
  for (const auto& s : imu) {
    pre.integrate(s, 0.005);
    const double t = pre.covariance().trace();
    EXPECT_GE(t, trace);
    trace = t;
    EXPECT_LT((pre.covariance() - pre.covariance().transpose()).norm(), 1e-15 + 1e-12 * t);
  }
  Eigen::SelfAdjointEigenSolver<Mat9> es(pre.covariance());
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-18);
}

TEST(InertialResidual, ZeroAtTruth) {
  WorldConfig c;
  c.noise = NoiseConfig::zero();
  c.trajectory = {TrajectorySegment::straight(10.0), TrajectorySegment::arc(1.0, 12.0)};
  c.excitation = true;
  c.noise.initial_accel_bias = Vec3(0.05, 0.02, -0.03);
  c.noise.initial_gyro_bias = Vec3(0.001, -0.002, 0.003);
  const World w = generate_world(c);
  const auto imu = synthesize_imu(w.ground_truth, c);
  for (size_t k = 0; k + 20 < w.ground_truth.size(); k += 20) {
    const State& a = w.ground_truth[k];
    const State& b = w.ground_truth[k + 20];
    const auto pre = preintegrate(imu, a.timestamp, b.timestamp, a.bias_accel, a.bias_gyro, {}, 0.1);
    ASSERT_TRUE(pre.has_value());
    EXPECT_LT(residual(*pre, a, b).cwiseAbs().maxCoeff(), 1e-8) << "at " << k;
  }
}

TEST(InertialResidual, StationaryGravityCancels) {
  PreintegratedImu pre;
  ImuSample s;
  s.accel = Vec3(0, 0, 9.81);
  for (int k = 0; k < 100; ++k) pre.integrate(s, 0.01);
  State a, b;
  b.timestamp = 1.0;
  EXPECT_LT(residual(pre, a, b, Vec3(0, 0, -9.81)).norm(), 1e-12);
}

TEST(InertialResidual, VelocityPerturbation) {
  PreintegratedImu pre;
  ImuSample s;
  s.accel = Vec3(0, 0, 9.81);
  for (int k = 0; k < 100; ++k) pre.integrate(s, 0.01);
  State a, b;
  b.velocity = Vec3(0.1, 0, 0);
  b.position = Vec3(0.0, 0, 0);
  const Vec15 r = residual(pre, a, b);
  EXPECT_LT((r.segment<3>(0) - Vec3(0.1, 0, 0)).norm(), 1e-12);
}

TEST(InertialResidual, JacobiansMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto imu = random_stream(rng, 20, 200.0);
    const Vec3 lin_ba = random_vec(rng, 0.1), lin_bg = random_vec(rng, 0.01);
    const PreintegratedImu pre = integrate_all(imu, 0.005, lin_ba, lin_bg);
    State a = random_state(rng), b = random_state(rng);
    a.bias_accel = lin_ba + random_vec(rng, 0.01);
    a.bias_gyro = lin_bg + random_vec(rng, 0.005);
    const InertialJacobians J = residual_jacobians(pre, a, b);
    const MatX na = numeric_jacobian(
        [&](const VecX& d) -> VecX { return residual(pre, retract(a, StateDelta(d)), b); }, 15);
    const MatX nb = numeric_jacobian(
        [&](const VecX& d) -> VecX { return residual(pre, a, retract(b, StateDelta(d))); }, 15);
    EXPECT_LT(max_rel_error(J.prev, na), 1e-4) << "trial " << trial;
    EXPECT_LT(max_rel_error(J.curr, nb), 1e-4) << "trial " << trial;
    const Mat3 I = Mat3::Identity();
    EXPECT_TRUE((J.curr.block<3, 3>(9, 9) == I));
    EXPECT_TRUE((J.prev.block<3, 3>(9, 9) == -I));
    EXPECT_TRUE((J.curr.block<3, 3>(12, 12) == I));
    EXPECT_TRUE((J.prev.block<3, 3>(12, 12) == -I));
    // The current state's biases do not enter the first three blocks.
    EXPECT_EQ((J.curr.block<9, 6>(0, 9).norm()), 0.0);
  }
}

TEST(InertialResidual, SplitStreamComposes) {
  WorldConfig c;
  c.noise = NoiseConfig::zero();
  c.trajectory = {TrajectorySegment::arc(1.5, 10.0)};
  c.excitation = true;
  const World w = generate_world(c);
  const auto imu = synthesize_imu(w.ground_truth, c);
  const State& a = w.ground_truth[0];
  const State& m = w.ground_truth[37];
  const State& b = w.ground_truth[80];
  const auto whole = preintegrate(imu, a.timestamp, b.timestamp, Vec3::Zero(), Vec3::Zero(), {}, 0.1);
  const auto first = preintegrate(imu, a.timestamp, m.timestamp, Vec3::Zero(), Vec3::Zero(), {}, 0.1);
  const auto second = preintegrate(imu, m.timestamp, b.timestamp, Vec3::Zero(), Vec3::Zero(), {}, 0.1);
  ASSERT_TRUE(whole && first && second);
  const State mid = predict(a, *first, m.timestamp);
  const State end_split = predict(mid, *second, b.timestamp);
  const State end_whole = predict(a, *whole, b.timestamp);
  EXPECT_LT((end_split.position - end_whole.position).norm(), 1e-6);
  EXPECT_LT((end_split.velocity - end_whole.velocity).norm(), 1e-6);
  EXPECT_LT(log_so3(end_split.rotation.inverse() * end_whole.rotation).norm(), 1e-6);
  EXPECT_LT(residual(*whole, a, end_split).norm(), 1e-6);
}

TEST(InertialResidual, GapInStreamDetected) {
  std::mt19937_64 rng(3);
  auto imu = random_stream(rng, 200, 200.0);
  imu.erase(imu.begin() + 50, imu.begin() + 80);
  EXPECT_FALSE(preintegrate(imu, 0.0, 0.9, Vec3::Zero(), Vec3::Zero(), {}, 0.05).has_value());
  EXPECT_TRUE(preintegrate(imu, 0.0, 0.2, Vec3::Zero(), Vec3::Zero(), {}, 0.05).has_value());
}
