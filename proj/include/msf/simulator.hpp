#pragma once

// Deterministic synthetic world and sensor synthesis: IMU, rectified stereo
// camera, multi-ring lidar and GPS, with ground truth at IMU rate.
//
// IMU samples are step averages over [t_k, t_k+1): the gyro reading is
// log(R_k^T R_k+1)/dt and the accelerometer reading is the constant specific
// force that carries v_k to v_k+1 along the rotating body frame. Ground-truth
// positions are generated with the same recurrence, so noise-free
// pre-integration reproduces the truth to rounding.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "msf/geometry.hpp"

namespace msf {

// --- configuration ---------------------------------------------------------

struct TrajectorySegment {
  enum class Kind { straight, arc };
  Kind kind = Kind::straight;
  double length = 0.0;  // straight: meters
  double angle = 0.0;   // arc: signed turn, rad (positive = left)
  double radius = 0.0;  // arc: meters
  bool walls = true;    // flank a straight with building facades

  static TrajectorySegment straight(double length, bool walls = true) {
    return {Kind::straight, length, 0.0, 0.0, walls};
  }
  static TrajectorySegment arc(double angle, double radius) {
    return {Kind::arc, 0.0, angle, radius, false};
  }
  double path_length() const { return kind == Kind::straight ? length : std::abs(angle) * radius; }
};

/// Planar patch origin + s*u_axis + t*v_axis, s in [0,u_extent], t in [0,v_extent].
/// Infinite planes ignore the extents.
struct PlaneSpec {
  Vec3 origin = Vec3::Zero();
  Vec3 u_axis = Vec3::UnitX();
  Vec3 v_axis = Vec3::UnitY();
  double u_extent = 0.0;
  double v_extent = 0.0;
  bool infinite = false;

  Vec3 normal() const { return u_axis.cross(v_axis).normalized(); }
  static PlaneSpec ground(double z = 0.0) {
    return {Vec3(0, 0, z), Vec3::UnitX(), Vec3::UnitY(), 0.0, 0.0, true};
  }
};

struct TimeInterval {
  double begin = 0.0;
  double end = 0.0;
  bool contains(double t) const { return t >= begin && t <= end; }
};

/// Period of degraded visual tracking (blur, glare).
struct VisualBurst {
  TimeInterval interval;
  double pixel_sigma = 5.0;
  double dropout = 0.5;
};

/// Noise defaults are this simulator's own choices; none come from a real sensor.
struct NoiseConfig {
  double gyro_density = 1.7e-4;       // rad/s/sqrt(Hz)
  double accel_density = 2.0e-3;      // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 2.0e-5;     // rad/s^2/sqrt(Hz)
  double accel_bias_walk = 3.0e-4;    // m/s^3/sqrt(Hz)
  Vec3 initial_gyro_bias = Vec3::Zero();
  Vec3 initial_accel_bias = Vec3::Zero();
  double pixel_sigma = 1.0;           // px
  double gps_sigma = 0.5;             // m
  double lidar_range_sigma = 0.02;    // m

  static NoiseConfig zero() {
    NoiseConfig n;
    n.gyro_density = n.accel_density = n.gyro_bias_walk = n.accel_bias_walk = 0.0;
    n.pixel_sigma = n.gps_sigma = n.lidar_range_sigma = 0.0;
    return n;
  }
};

struct RateConfig {
  double imu = 200.0;
  double camera = 10.0;
  double lidar = 10.0;
  double gps = 10.0;
};

struct CameraIntrinsics {
  int width = 640;
  int height = 480;
  double focal = 400.0;
  double cx = 320.0;
  double cy = 240.0;
  double baseline = 0.5;
  double min_depth = 0.5;
  double max_depth = 60.0;

  bool inside(const Vec2& uv) const {
    return uv.x() >= 0.0 && uv.y() >= 0.0 && uv.x() < width && uv.y() < height;
  }
};

struct LidarConfig {
  int rings = 16;
  double min_elevation = -15.0 * M_PI / 180.0;
  double max_elevation = 15.0 * M_PI / 180.0;
  int azimuth_steps = 360;
  double min_range = 0.5;
  double max_range = 60.0;
  /// Explicit ring elevations override the uniform min..max spread.
  std::vector<double> elevations;

  std::vector<double> ring_elevations() const {
    if (!elevations.empty()) return elevations;
    std::vector<double> e(rings);
    for (int r = 0; r < rings; ++r) {
      e[r] = rings == 1 ? min_elevation
                        : min_elevation + (max_elevation - min_elevation) * r / (rings - 1);
    }
    return e;
  }
};

struct WorldConfig {
  uint64_t seed = 1;
  std::vector<TrajectorySegment> trajectory{TrajectorySegment::straight(100.0)};
  double speed = 5.0;          // m/s
  double height = 1.5;         // body above ground, m
  double start_yaw = 0.0;
  int landmark_count = 1500;
  double wall_offset = 8.0;    // lateral distance of facades
  double wall_height = 8.0;
  std::vector<PlaneSpec> planes;       // extra geometry beyond ground and facades
  bool ground_plane = true;
  bool auto_walls = true;
  bool excitation = false;     // sinusoidal roll/pitch/heave
  double excitation_angle = 0.02;
  double excitation_heave = 0.05;
  NoiseConfig noise;
  RateConfig rates;
  CameraIntrinsics camera;
  LidarConfig lidar;
  std::vector<TimeInterval> gps_dropouts;
  std::vector<TimeInterval> imu_dropouts;
  double gps_outlier_rate = 0.0;
  double gps_outlier_magnitude = 50.0;
  std::vector<VisualBurst> visual_bursts;
  double camera_dropout = 0.0;

  /// Segments stretched so each takes a whole number of IMU steps at `speed`;
  /// yaw-rate changes then fall on sample boundaries.
  std::vector<TrajectorySegment> driven_trajectory() const {
    std::vector<TrajectorySegment> out = trajectory;
    for (auto& seg : out) {
      const double steps = std::max<double>(1.0, std::llround(seg.path_length() / speed * rates.imu));
      const double len = steps * speed / rates.imu;
      if (seg.kind == TrajectorySegment::Kind::straight) {
        seg.length = len;
      } else {
        seg.radius = len / std::abs(seg.angle);
      }
    }
    return out;
  }

  double path_length() const {
    double l = 0.0;
    for (const auto& s : driven_trajectory()) l += s.path_length();
    return l;
  }
  double duration() const { return path_length() / speed; }
};

// --- outputs ---------------------------------------------------------------

using GroundTruth = std::vector<State>;

struct ImuSample {
  double timestamp = 0.0;
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
};

struct StereoMeasurement {
  int landmark_id = -1;
  Vec2 left = Vec2::Zero();
  Vec2 right = Vec2::Zero();
};

struct StereoObservation {
  double timestamp = 0.0;
  std::vector<StereoMeasurement> measurements;
};

struct LidarReturn {
  int column = 0;
  double azimuth = 0.0;
  double range = 0.0;
  Vec3 point = Vec3::Zero();  // body frame
  int plane_id = -1;          // simulator label, not used by the estimator
};

struct LidarRing {
  double elevation = 0.0;
  std::vector<LidarReturn> returns;  // ascending column
};

struct LidarScanRaw {
  double timestamp = 0.0;
  std::vector<LidarRing> rings;
  size_t size() const {
    size_t n = 0;
    for (const auto& r : rings) n += r.returns.size();
    return n;
  }
};

struct GpsFix {
  double timestamp = 0.0;
  Vec3 position = Vec3::Zero();
  bool valid = true;
  bool outlier = false;  // simulator label
};

struct World {
  GroundTruth ground_truth;
  std::vector<Vec3> landmarks;
  std::vector<PlaneSpec> planes;
};

struct Dataset {
  WorldConfig config;
  World world;
  std::vector<ImuSample> imu;
  std::vector<StereoObservation> stereo;
  std::vector<LidarScanRaw> lidar;
  std::vector<GpsFix> gps;
};

// --- helpers ---------------------------------------------------------------

/// Stream-specific generator so toggling one sensor never reshuffles another.
inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return std::mt19937_64(z ^ (z >> 31));
}

enum RngStream : uint64_t { kRngLandmarks = 1, kRngImu, kRngStereo, kRngLidar, kRngGps, kRngWalls };

/// Rotation taking camera axes (x right, y down, z forward) into the body frame.
inline Rotation body_from_camera() {
  Mat3 m;
  m << 0, 0, 1,
      -1, 0, 0,
       0, -1, 0;
  return Rotation::from_orthonormal(m);
}

/// World-to-camera transform of the left (index 0) or right (1) camera.
inline Pose camera_from_world(const Pose& world_from_body, int camera, double baseline) {
  const Pose world_from_cam = compose(world_from_body, Pose(body_from_camera(), Vec3::Zero()));
  Pose cam_from_world = inverse(world_from_cam);
  if (camera == 1) cam_from_world.translation.x() -= baseline;
  return cam_from_world;
}

inline size_t samples_per(double fast, double slow) {
  const double ratio = fast / slow;
  const double r = std::round(ratio);
  if (slow <= 0.0 || std::abs(ratio - r) > 1e-9 || r < 1.0) {
    throw std::invalid_argument("sensor rates must divide the IMU rate");
  }
  return static_cast<size_t>(r);
}

inline void validate(const WorldConfig& c) {
  if (c.trajectory.empty()) throw std::invalid_argument("empty trajectory");
  for (const auto& s : c.trajectory) {
    if (s.kind == TrajectorySegment::Kind::straight && !(s.length > 0.0)) {
      throw std::invalid_argument("straight segment needs positive length");
    }
    if (s.kind == TrajectorySegment::Kind::arc && (!(s.radius > 0.0) || s.angle == 0.0)) {
      throw std::invalid_argument("arc segment needs positive radius and nonzero angle");
    }
  }
  if (!(c.speed > 0.0)) throw std::invalid_argument("speed must be positive");
  const auto& r = c.rates;
  if (!(r.imu > 0 && r.camera > 0 && r.lidar > 0 && r.gps > 0)) {
    throw std::invalid_argument("rates must be positive");
  }
  if (r.imu < r.camera) throw std::invalid_argument("imu rate below camera rate");
  samples_per(r.imu, r.camera);
  samples_per(r.imu, r.lidar);
  samples_per(r.imu, r.gps);
}

/// Planar path geometry evaluated by arc length.
class PathProfile {
 public:
  PathProfile(const std::vector<TrajectorySegment>& segs, double start_yaw) {
    Vec2 p = Vec2::Zero();
    double yaw = start_yaw, s = 0.0;
    for (const auto& seg : segs) {
      starts_.push_back({s, p, yaw, seg});
      const double len = seg.path_length();
      if (seg.kind == TrajectorySegment::Kind::straight) {
        p += len * Vec2(std::cos(yaw), std::sin(yaw));
      } else {
        const double sign = seg.angle > 0 ? 1.0 : -1.0;
        const Vec2 left(-std::sin(yaw), std::cos(yaw));
        const Vec2 center = p + sign * seg.radius * left;
        const double yaw1 = yaw + seg.angle;
        p = center - sign * seg.radius * Vec2(-std::sin(yaw1), std::cos(yaw1));
        yaw = yaw1;
      }
      s += len;
    }
    total_ = s;
    end_ = {s, p, yaw, segs.back()};
  }

  double length() const { return total_; }

  struct Sample {
    Vec2 position;
    double yaw;
    double curvature;  // d yaw / ds
    int segment;
  };

  /// Beyond either end the path continues straight.
  Sample at(double s) const {
    if (s <= 0.0) {
      const auto& a = starts_.front();
      return {a.p + s * Vec2(std::cos(a.yaw), std::sin(a.yaw)), a.yaw, 0.0, 0};
    }
    if (s >= total_) {
      return {end_.p + (s - total_) * Vec2(std::cos(end_.yaw), std::sin(end_.yaw)), end_.yaw, 0.0,
              static_cast<int>(starts_.size()) - 1};
    }
    int i = static_cast<int>(starts_.size()) - 1;
    while (i > 0 && starts_[i].s > s) --i;
    const auto& a = starts_[i];
    const double ds = s - a.s;
    if (a.seg.kind == TrajectorySegment::Kind::straight) {
      return {a.p + ds * Vec2(std::cos(a.yaw), std::sin(a.yaw)), a.yaw, 0.0, i};
    }
    const double sign = a.seg.angle > 0 ? 1.0 : -1.0;
    const double k = sign / a.seg.radius;
    const Vec2 left(-std::sin(a.yaw), std::cos(a.yaw));
    const Vec2 center = a.p + sign * a.seg.radius * left;
    const double yaw = a.yaw + k * ds;
    return {center - sign * a.seg.radius * Vec2(-std::sin(yaw), std::cos(yaw)), yaw, k, i};
  }

  struct Anchor {
    double s;
    Vec2 p;
    double yaw;
    TrajectorySegment seg;
  };
  const std::vector<Anchor>& anchors() const { return starts_; }

 private:
  std::vector<Anchor> starts_;
  Anchor end_;
  double total_ = 0.0;
};

// --- world -----------------------------------------------------------------

/// Orientation, velocity (analytic) at time t.
struct Kinematics {
  Rotation rotation;
  Vec3 velocity;
  double heave;
};

inline Kinematics kinematics_at(const WorldConfig& c, const PathProfile& path, double t) {
  const auto smp = path.at(c.speed * t);
  Vec3 vel(c.speed * std::cos(smp.yaw), c.speed * std::sin(smp.yaw), 0.0);
  double roll = 0.0, pitch = 0.0, heave = 0.0;
  if (c.excitation) {
    const double w1 = 2.0 * M_PI * 0.5, w2 = 2.0 * M_PI * 0.3, w3 = 2.0 * M_PI * 0.7;
    roll = c.excitation_angle * std::sin(w1 * t);
    pitch = c.excitation_angle * std::sin(w2 * t + 0.4);
    heave = c.excitation_heave * std::sin(w3 * t);
    vel.z() = c.excitation_heave * w3 * std::cos(w3 * t);
  }
  return {rotation_from_rpy(roll, pitch, smp.yaw), vel, heave};
}

/// Integral over [0,1] of exp(s*phi) ds, i.e. the left Jacobian.
inline Mat3 integrated_rotation(const Vec3& phi) { return left_jacobian(phi); }

/// Integral over [0,1] of (1-s) exp(s*phi) ds.
inline Mat3 double_integrated_rotation(const Vec3& phi) {
  const double t2 = phi.squaredNorm();
  const Mat3 W = skew(phi);
  if (t2 < 1e-10) return 0.5 * Mat3::Identity() + W / 6.0 + W * W / 24.0;
  const double t = std::sqrt(t2);
  const double a = (t - std::sin(t)) / (t2 * t);
  const double b = (t2 / 2.0 + std::cos(t) - 1.0) / (t2 * t2);
  return 0.5 * Mat3::Identity() + a * W + b * W * W;
}

/// Dense ground truth at IMU rate plus landmarks and planes.
inline World generate_world(const WorldConfig& c) {
  validate(c);
  World w;
  const PathProfile path(c.driven_trajectory(), c.start_yaw);
  const double dt = 1.0 / c.rates.imu;
  const size_t n = static_cast<size_t>(std::llround(c.duration() * c.rates.imu));

  std::vector<Kinematics> kin(n + 1);
  for (size_t k = 0; k <= n; ++k) kin[k] = kinematics_at(c, path, k / c.rates.imu);

  auto rng = make_rng(c.seed, kRngImu);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 bg = c.noise.initial_gyro_bias, ba = c.noise.initial_accel_bias;

  w.ground_truth.resize(n + 1);
  const auto p0 = path.at(0.0).position;
  Vec3 pos(p0.x(), p0.y(), c.height + kin[0].heave);
  for (size_t k = 0; k <= n; ++k) {
    State& s = w.ground_truth[k];
    s.timestamp = k / c.rates.imu;
    s.rotation = kin[k].rotation;
    s.velocity = kin[k].velocity;
    s.position = pos;
    s.bias_gyro = bg;
    s.bias_accel = ba;
    if (k == n) break;
    // Position recurrence shared with the IMU model (see header comment).
    const Vec3 phi = log_so3(kin[k].rotation.inverse() * kin[k + 1].rotation);
    const Vec3 dv = kin[k + 1].velocity - kin[k].velocity - kGravity * dt;
    const Vec3 f = (kin[k].rotation.matrix() * integrated_rotation(phi) * dt).inverse() * dv;
    pos += kin[k].velocity * dt + 0.5 * kGravity * dt * dt +
           kin[k].rotation.matrix() * double_integrated_rotation(phi) * f * dt * dt;
    const double sq = std::sqrt(dt);
    for (int i = 0; i < 3; ++i) {
      bg[i] += c.noise.gyro_bias_walk * sq * gauss(rng);
      ba[i] += c.noise.accel_bias_walk * sq * gauss(rng);
    }
  }

  // Geometry: ground, facades along walled straights, extra planes.
  if (c.ground_plane) w.planes.push_back(PlaneSpec::ground(0.0));
  auto wall_rng = make_rng(c.seed, kRngWalls);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  if (c.auto_walls) {
    for (const auto& a : path.anchors()) {
      if (a.seg.kind != TrajectorySegment::Kind::straight || !a.seg.walls) continue;
      const Vec3 dir(std::cos(a.yaw), std::sin(a.yaw), 0.0);
      const Vec3 left(-std::sin(a.yaw), std::cos(a.yaw), 0.0);
      for (double side : {1.0, -1.0}) {
        double s = 0.0;
        while (s < a.seg.length - 1.0) {
          const double len = std::min(12.0 + 10.0 * uni(wall_rng), a.seg.length - s);
          const Vec3 o = Vec3(a.p.x(), a.p.y(), 0.0) + s * dir + side * c.wall_offset * left;
          w.planes.push_back({o, dir, Vec3::UnitZ(), len, c.wall_height, false});
          s += len + 2.0 + 3.0 * uni(wall_rng);
        }
      }
    }
  }
  for (const auto& p : c.planes) w.planes.push_back(p);

  // Landmarks: on facades where a straight has walls, free-standing otherwise.
  auto lm_rng = make_rng(c.seed, kRngLandmarks);
  const double margin = 30.0;
  w.landmarks.reserve(c.landmark_count);
  for (int i = 0; i < c.landmark_count; ++i) {
    const double s = -5.0 + (path.length() + margin + 5.0) * uni(lm_rng);
    const auto smp = path.at(s);
    const double side = uni(lm_rng) < 0.5 ? 1.0 : -1.0;
    const Vec3 base(smp.position.x(), smp.position.y(), 0.0);
    const Vec3 left(-std::sin(smp.yaw), std::cos(smp.yaw), 0.0);
    const int seg = std::clamp(smp.segment, 0, static_cast<int>(c.trajectory.size()) - 1);
    const bool on_wall = c.auto_walls && s >= 0.0 && s <= path.length() &&
                         c.trajectory[seg].kind == TrajectorySegment::Kind::straight &&
                         c.trajectory[seg].walls;
    double lateral, h;
    if (on_wall) {
      lateral = c.wall_offset;
      h = 0.3 + (c.wall_height - 0.3) * uni(lm_rng);
    } else {
      lateral = 4.0 + 12.0 * uni(lm_rng);
      h = 0.3 + 6.0 * uni(lm_rng);
    }
    w.landmarks.push_back(base + side * lateral * left + Vec3(0, 0, h));
  }
  return w;
}

// --- sensors ---------------------------------------------------------------

inline std::vector<ImuSample> synthesize_imu(const GroundTruth& gt, const WorldConfig& c) {
  std::vector<ImuSample> out;
  if (gt.size() < 2) return out;
  auto rng = make_rng(c.seed, kRngImu + 100);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double dt = 1.0 / c.rates.imu;
  const double sg = c.noise.gyro_density / std::sqrt(dt);
  const double sa = c.noise.accel_density / std::sqrt(dt);
  out.reserve(gt.size());
  for (size_t k = 0; k < gt.size(); ++k) {
    ImuSample m;
    m.timestamp = gt[k].timestamp;
    const size_t j = std::min(k, gt.size() - 2);  // last sample repeats the final interval
    const Vec3 phi = log_so3(gt[j].rotation.inverse() * gt[j + 1].rotation);
    const Vec3 dv = gt[j + 1].velocity - gt[j].velocity - kGravity * dt;
    const Vec3 f = (gt[j].rotation.matrix() * integrated_rotation(phi) * dt).inverse() * dv;
    Vec3 ng, na;
    for (int i = 0; i < 3; ++i) ng[i] = sg * gauss(rng);
    for (int i = 0; i < 3; ++i) na[i] = sa * gauss(rng);
    m.gyro = phi / dt + gt[k].bias_gyro + ng;
    m.accel = f + gt[k].bias_accel + na;
    bool dropped = false;
    for (const auto& d : c.imu_dropouts) dropped = dropped || d.contains(m.timestamp);
    if (!dropped) out.push_back(m);
  }
  return out;
}

inline Vec2 project(const CameraIntrinsics& k, const Vec3& pc) {
  return {k.focal * pc.x() / pc.z() + k.cx, k.focal * pc.y() / pc.z() + k.cy};
}

inline std::vector<StereoObservation> synthesize_stereo(const GroundTruth& gt,
                                                        const std::vector<Vec3>& landmarks,
                                                        const WorldConfig& c) {
  std::vector<StereoObservation> out;
  const size_t step = samples_per(c.rates.imu, c.rates.camera);
  auto rng = make_rng(c.seed, kRngStereo);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const auto& cam = c.camera;
  for (size_t k = 0; k < gt.size(); k += step) {
    StereoObservation obs;
    obs.timestamp = gt[k].timestamp;
    double sigma = c.noise.pixel_sigma, dropout = c.camera_dropout;
    for (const auto& b : c.visual_bursts) {
      if (b.interval.contains(obs.timestamp)) {
        sigma = b.pixel_sigma;
        dropout = b.dropout;
      }
    }
    const Pose left = camera_from_world(gt[k].pose(), 0, cam.baseline);
    const Pose right = camera_from_world(gt[k].pose(), 1, cam.baseline);
    for (size_t id = 0; id < landmarks.size(); ++id) {
      const Vec3 pl = transform(left, landmarks[id]);
      if (pl.z() < cam.min_depth || pl.z() > cam.max_depth) continue;
      const Vec3 pr = transform(right, landmarks[id]);
      Vec2 ul = project(cam, pl), ur = project(cam, pr);
      if (!cam.inside(ul) || !cam.inside(ur)) continue;
      // Draw noise unconditionally so dropout does not shift the stream.
      const Vec2 nl(gauss(rng), gauss(rng)), nr(gauss(rng), gauss(rng));
      const bool drop = uni(rng) < dropout;
      ul += sigma * nl;
      ur += sigma * nr;
      if (drop || !cam.inside(ul) || !cam.inside(ur)) continue;
      obs.measurements.push_back({static_cast<int>(id), ul, ur});
    }
    out.push_back(std::move(obs));
  }
  return out;
}

/// Distance along the ray to the plane patch, or +inf.
inline double intersect(const PlaneSpec& p, const Vec3& origin, const Vec3& dir) {
  const Vec3 n = p.normal();
  const double denom = n.dot(dir);
  if (std::abs(denom) < 1e-12) return std::numeric_limits<double>::infinity();
  const double t = n.dot(p.origin - origin) / denom;
  if (t <= 0.0) return std::numeric_limits<double>::infinity();
  if (!p.infinite) {
    const Vec3 q = origin + t * dir - p.origin;
    const double s = q.dot(p.u_axis) / p.u_axis.squaredNorm();
    const double r = q.dot(p.v_axis) / p.v_axis.squaredNorm();
    if (s < 0.0 || s > p.u_extent || r < 0.0 || r > p.v_extent) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return t;
}

inline LidarScanRaw scan_at(const State& s, const std::vector<PlaneSpec>& planes,
                            const WorldConfig& c, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  LidarScanRaw scan;
  scan.timestamp = s.timestamp;
  const auto elevations = c.lidar.ring_elevations();
  for (double el : elevations) {
    LidarRing ring;
    ring.elevation = el;
    for (int col = 0; col < c.lidar.azimuth_steps; ++col) {
      const double az = 2.0 * M_PI * col / c.lidar.azimuth_steps;
      const Vec3 d_body(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      const Vec3 d_world = s.rotation * d_body;
      double best = std::numeric_limits<double>::infinity();
      int best_id = -1;
      for (size_t i = 0; i < planes.size(); ++i) {
        const double t = intersect(planes[i], s.position, d_world);
        if (t < best) {
          best = t;
          best_id = static_cast<int>(i);
        }
      }
      const double noise = c.noise.lidar_range_sigma * gauss(rng);
      if (best_id < 0 || best < c.lidar.min_range || best > c.lidar.max_range) continue;
      const double range = best + noise;
      ring.returns.push_back({col, az, range, range * d_body, best_id});
    }
    scan.rings.push_back(std::move(ring));
  }
  return scan;
}

/// Instantaneous scans (no intra-scan motion).
inline std::vector<LidarScanRaw> synthesize_lidar(const GroundTruth& gt,
                                                  const std::vector<PlaneSpec>& planes,
                                                  const WorldConfig& c) {
  std::vector<LidarScanRaw> out;
  const size_t step = samples_per(c.rates.imu, c.rates.lidar);
  auto rng = make_rng(c.seed, kRngLidar);
  for (size_t k = 0; k < gt.size(); k += step) out.push_back(scan_at(gt[k], planes, c, rng));
  return out;
}

inline std::vector<GpsFix> synthesize_gps(const GroundTruth& gt, const WorldConfig& c) {
  std::vector<GpsFix> out;
  const size_t step = samples_per(c.rates.imu, c.rates.gps);
  auto rng = make_rng(c.seed, kRngGps);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (size_t k = 0; k < gt.size(); k += step) {
    GpsFix f;
    f.timestamp = gt[k].timestamp;
    const Vec3 n(gauss(rng), gauss(rng), gauss(rng));
    const double u = uni(rng), heading = 2.0 * M_PI * uni(rng);
    f.position = gt[k].position + c.noise.gps_sigma * n;
    if (u < c.gps_outlier_rate) {
      f.outlier = true;
      f.position += c.gps_outlier_magnitude * Vec3(std::cos(heading), std::sin(heading), 0.0);
    }
    for (const auto& d : c.gps_dropouts) {
      if (d.contains(f.timestamp)) f.valid = false;
    }
    out.push_back(f);
  }
  return out;
}

inline Dataset simulate(const WorldConfig& c) {
  Dataset d;
  d.config = c;
  d.world = generate_world(c);
  d.imu = synthesize_imu(d.world.ground_truth, c);
  d.stereo = synthesize_stereo(d.world.ground_truth, d.world.landmarks, c);
  d.lidar = synthesize_lidar(d.world.ground_truth, d.world.planes, c);
  d.gps = synthesize_gps(d.world.ground_truth, c);
  return d;
}

/// Ground-truth state at a timestamp that lies on the IMU grid.
inline const State& truth_at(const GroundTruth& gt, double t, double imu_rate) {
  const auto k = static_cast<size_t>(std::llround(t * imu_rate));
  if (gt.empty() || k >= gt.size()) throw std::out_of_range("truth_at: time outside ground truth");
  return gt[k];
}

}  // namespace msf
