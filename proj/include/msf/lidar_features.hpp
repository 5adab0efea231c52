#pragma once

// Planar lidar features: range-normalized curvature along each ring, ground
// segmentation (inter-ring angle gate + sample consensus), a three-scan local
// map with a voxel index, point-to-plane association and the two-step
// (ground, then surface) scan alignment.

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "msf/optimizer.hpp"

namespace msf {

struct CurvatureParams {
  double a = 1.0;
  int n = 5;
  double plane_threshold = 0.01;

  void validate() const {
    if (n < 1 || !(a > 0.0) || !(plane_threshold > 0.0)) {
      throw std::invalid_argument("curvature params need n >= 1, a > 0, threshold > 0");
    }
  }
};

/// Range-normalized curvature of the center of 2n+1 consecutive ranges:
///   dr = (r[2n] - r[0]) / 2n
///   c  = a / ((2n-1) r[n]) * sum_{k=1}^{2n-1} (r[k] - r[0] - k dr)^2
/// Zero on any linear range profile.
inline double curvature(std::span<const double> r, const CurvatureParams& p) {
  const int n = p.n;
  if (static_cast<int>(r.size()) != 2 * n + 1) throw std::invalid_argument("curvature: need 2n+1 ranges");
  for (double v : r) {
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("curvature: ranges must be positive");
  }
  const double dr = (r[2 * n] - r[0]) / (2.0 * n);
  double sum = 0.0;
  for (int k = 1; k <= 2 * n - 1; ++k) {
    const double e = r[k] - r[0] - k * dr;
    sum += e * e;
  }
  return p.a / ((2 * n - 1) * r[n]) * sum;
}

/// Unnormalized smoothness used by ground-optimized LOAM variants:
/// (sum_j r_j - 2n r_i)^2 over the same window.
inline double unnormalized_curvature(std::span<const double> r) {
  const int n = static_cast<int>(r.size()) / 2;
  if (static_cast<int>(r.size()) != 2 * n + 1 || n < 1) {
    throw std::invalid_argument("unnormalized_curvature: need 2n+1 ranges");
  }
  double d = -2.0 * n * r[n];
  for (int k = 0; k <= 2 * n; ++k) {
    if (k != n) d += r[k];
  }
  return d * d;
}

struct PlanarPoint {
  Vec3 point = Vec3::Zero();  // body frame
  int ring = 0;
  int column = 0;
  double range = 0.0;
  double curvature = 0.0;
};

/// Range windows of every return that has n contiguous neighbors on both
/// sides (azimuth wraps around). Returns nothing for points with gaps.
template <class Fn>
void for_each_window(const LidarScanRaw& scan, int n, int azimuth_steps, Fn&& fn) {
  std::vector<double> window(2 * n + 1);
  for (size_t ri = 0; ri < scan.rings.size(); ++ri) {
    const auto& ring = scan.rings[ri];
    std::vector<int> at(azimuth_steps, -1);
    for (size_t i = 0; i < ring.returns.size(); ++i) {
      const int c = ring.returns[i].column;
      if (c >= 0 && c < azimuth_steps) at[c] = static_cast<int>(i);
    }
    for (size_t i = 0; i < ring.returns.size(); ++i) {
      const int c = ring.returns[i].column;
      bool complete = true;
      for (int k = -n; k <= n && complete; ++k) {
        const int idx = at[((c + k) % azimuth_steps + azimuth_steps) % azimuth_steps];
        if (idx < 0) {
          complete = false;
        } else {
          window[k + n] = ring.returns[idx].range;
        }
      }
      if (complete) fn(static_cast<int>(ri), ring.returns[i], std::span<const double>(window));
    }
  }
}

/// Low-curvature points of a scan. With max_per_sector > 0 each ring is cut
/// into `sectors` azimuth sectors and the planar points of a sector are
/// thinned by a uniform stride to at most max_per_sector.
inline std::vector<PlanarPoint> extract_planar(const LidarScanRaw& scan, const CurvatureParams& p,
                                               int azimuth_steps = 360, int sectors = 12,
                                               int max_per_sector = 0) {
  p.validate();
  std::vector<std::vector<std::vector<PlanarPoint>>> bins(
      scan.rings.size(), std::vector<std::vector<PlanarPoint>>(std::max(1, sectors)));
  for_each_window(scan, p.n, azimuth_steps, [&](int ring, const LidarReturn& ret, std::span<const double> w) {
    const double c = curvature(w, p);
    if (c > p.plane_threshold) return;
    const int s = std::min(std::max(1, sectors) - 1, ret.column * std::max(1, sectors) / azimuth_steps);
    bins[ring][s].push_back({ret.point, ring, ret.column, ret.range, c});
  });
  std::vector<PlanarPoint> out;
  for (auto& ring : bins) {
    for (auto& bin : ring) {
      if (max_per_sector <= 0 || static_cast<int>(bin.size()) <= max_per_sector) {
        out.insert(out.end(), bin.begin(), bin.end());
        continue;
      }
      const double stride = static_cast<double>(bin.size()) / max_per_sector;
      for (int k = 0; k < max_per_sector; ++k) out.push_back(bin[static_cast<size_t>(k * stride)]);
    }
  }
  return out;
}

struct PlanarFeatureSet {
  double timestamp = 0.0;
  std::vector<Vec3> ground_points;   // body frame
  std::vector<Vec3> surface_points;  // body frame

  bool empty() const { return ground_points.empty() && surface_points.empty(); }
};

struct GroundParams {
  double max_ring_angle = 10.0 * M_PI / 180.0;  // slope between vertically adjacent returns
  double sac_tol = 0.05;
  int sac_iterations = 100;
  double max_tilt = 20.0 * M_PI / 180.0;  // plane hypotheses steeper than this are discarded
};

struct GroundSegmentation {
  std::vector<PlanarPoint> ground;
  std::vector<PlanarPoint> surface;
  std::vector<PlanarPoint> ambiguous;  // on the ground plane but next to a steep neighbor
  Eigen::Vector4d plane = Eigen::Vector4d::Zero();  // n, d with n.x + d = 0, when ground was found
};

/// Splits planar candidates into ground and surface. Candidates below the
/// horizon whose slopes to the same column of both adjacent rings are gentle
/// are ground hypotheses for a seeded sample-consensus plane fit. Gated
/// inliers are ground; candidates on the plane that failed the gate sit at a
/// crease (wall base) and are set aside as ambiguous.
inline GroundSegmentation segment_ground(const LidarScanRaw& scan,
                                         const std::vector<PlanarPoint>& candidates,
                                         double scanner_height, const GroundParams& gp,
                                         std::mt19937_64& rng) {
  if (!(scanner_height > 0.0)) throw std::invalid_argument("segment_ground: scanner height must be > 0");
  auto neighbor = [&](int ring, int column) -> const LidarReturn* {
    if (ring < 0 || ring >= static_cast<int>(scan.rings.size())) return nullptr;
    for (const auto& r : scan.rings[ring].returns) {
      if (r.column == column) return &r;
    }
    return nullptr;
  };
  std::vector<int> gated;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (c.point.z() >= 0.0) continue;
    bool ok = true;
    for (int dr : {-1, 1}) {
      const LidarReturn* nb = neighbor(c.ring + dr, c.column);
      if (!nb) continue;
      const Vec3 d = nb->point - c.point;
      if (std::atan2(std::abs(d.z()), d.head<2>().norm()) > gp.max_ring_angle) ok = false;
    }
    if (ok) gated.push_back(static_cast<int>(i));
  }

  GroundSegmentation out;
  std::vector<bool> on_plane(candidates.size(), false), is_gated(candidates.size(), false);
  for (int g : gated) is_gated[g] = true;
  if (gated.size() >= 3) {
    std::uniform_int_distribution<size_t> pick(0, gated.size() - 1);
    size_t best_count = 0;
    Eigen::Vector4d best = Eigen::Vector4d::Zero();
    for (int it = 0; it < gp.sac_iterations; ++it) {
      const Vec3& a = candidates[gated[pick(rng)]].point;
      const Vec3& b = candidates[gated[pick(rng)]].point;
      const Vec3& c = candidates[gated[pick(rng)]].point;
      Vec3 n = (b - a).cross(c - a);
      if (n.norm() < 1e-6) continue;
      n.normalize();
      if (n.z() < 0.0) n = -n;
      if (std::acos(std::min(1.0, n.z())) > gp.max_tilt) continue;
      const double d = -n.dot(a);
      size_t count = 0;
      for (int g : gated) count += std::abs(n.dot(candidates[g].point) + d) < gp.sac_tol;
      if (count > best_count) {
        best_count = count;
        best << n, d;
      }
    }
    if (best_count >= 3) {
      out.plane = best;
      for (size_t i = 0; i < candidates.size(); ++i) {
        const Vec3& q = candidates[i].point;
        if (q.z() < 0.0 && std::abs(best.head<3>().dot(q) + best(3)) < gp.sac_tol) on_plane[i] = true;
      }
    }
  }
  for (size_t i = 0; i < candidates.size(); ++i) {
    auto& bin = !on_plane[i] ? out.surface : is_gated[i] ? out.ground : out.ambiguous;
    bin.push_back(candidates[i]);
  }
  return out;
}

/// Uniform stride thinning to at most `count` points.
inline std::vector<Vec3> thin(const std::vector<PlanarPoint>& pts, size_t count) {
  std::vector<Vec3> out;
  if (pts.size() <= count) {
    for (const auto& p : pts) out.push_back(p.point);
    return out;
  }
  const double stride = static_cast<double>(pts.size()) / count;
  for (size_t k = 0; k < count; ++k) out.push_back(pts[static_cast<size_t>(k * stride)].point);
  return out;
}

struct LidarFeatureParams {
  CurvatureParams curvature;
  GroundParams ground;
  int azimuth_steps = 360;
  int sectors = 12;
  size_t max_ground_features = 150;
  size_t max_surface_features = 250;
  double scanner_height = 1.5;
};

/// Dense planar sets (for the map) and thinned sets (for factors) of one scan.
struct ScanFeatures {
  PlanarFeatureSet dense;
  PlanarFeatureSet features;
};

inline ScanFeatures extract_features(const LidarScanRaw& scan, const LidarFeatureParams& p,
                                     std::mt19937_64& rng) {
  const auto cand = extract_planar(scan, p.curvature, p.azimuth_steps, p.sectors);
  const auto seg = segment_ground(scan, cand, p.scanner_height, p.ground, rng);
  ScanFeatures out;
  out.dense.timestamp = out.features.timestamp = scan.timestamp;
  for (const auto& g : seg.ground) out.dense.ground_points.push_back(g.point);
  for (const auto& s : seg.surface) out.dense.surface_points.push_back(s.point);
  out.features.ground_points = thin(seg.ground, p.max_ground_features);
  out.features.surface_points = thin(seg.surface, p.max_surface_features);
  return out;
}

// --- local map ------------------------------------------------------------

/// Hash grid over points for radius queries.
class VoxelIndex {
 public:
  explicit VoxelIndex(double cell = 1.0) : cell_(cell) {}

  void clear() {
    points_.clear();
    cells_.clear();
  }
  void insert(const Vec3& p) {
    cells_[key(cell_of(p))].push_back(static_cast<int>(points_.size()));
    points_.push_back(p);
  }
  size_t size() const { return points_.size(); }
  const Vec3& point(int i) const { return points_[i]; }

  /// Up to k nearest points within radius, nearest first.
  std::vector<int> nearest(const Vec3& q, size_t k, double radius) const {
    std::vector<std::pair<double, int>> found;
    const Eigen::Vector3i c = cell_of(q);
    const int reach = static_cast<int>(std::ceil(radius / cell_));
    std::vector<int64_t> keys;
    for (int dx = -reach; dx <= reach; ++dx) {
      for (int dy = -reach; dy <= reach; ++dy) {
        for (int dz = -reach; dz <= reach; ++dz) keys.push_back(key(c + Eigen::Vector3i(dx, dy, dz)));
      }
    }
    // Distinct cells can share a hash bucket.
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    for (int64_t k : keys) {
      auto it = cells_.find(k);
      if (it == cells_.end()) continue;
      for (int i : it->second) {
        const double d2 = (points_[i] - q).squaredNorm();
        if (d2 <= radius * radius) found.emplace_back(d2, i);
      }
    }
    const size_t m = std::min(k, found.size());
    std::partial_sort(found.begin(), found.begin() + m, found.end());
    std::vector<int> out(m);
    for (size_t i = 0; i < m; ++i) out[i] = found[i].second;
    return out;
  }

 private:
  Eigen::Vector3i cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x() / cell_)), static_cast<int>(std::floor(p.y() / cell_)),
            static_cast<int>(std::floor(p.z() / cell_))};
  }
  static int64_t key(const Eigen::Vector3i& c) {
    return (static_cast<int64_t>(c.x()) * 73856093) ^ (static_cast<int64_t>(c.y()) * 19349663) ^
           (static_cast<int64_t>(c.z()) * 83492791);
  }

  double cell_;
  std::vector<Vec3> points_;
  std::unordered_map<int64_t, std::vector<int>> cells_;
};

/// The latest three scans' planar points in the world frame.
class LidarLocalMap {
 public:
  static constexpr size_t kScans = 3;

  explicit LidarLocalMap(double cell = 1.0) : ground_(cell), surface_(cell) {}

  /// Adds a scan's dense feature set at its world pose; drops the oldest
  /// scan beyond three.
  void insert(int keyframe_id, const PlanarFeatureSet& set, const Pose& world_from_body) {
    Entry e{keyframe_id, {}, {}};
    for (const auto& p : set.ground_points) e.ground.push_back(transform(world_from_body, p));
    for (const auto& p : set.surface_points) e.surface.push_back(transform(world_from_body, p));
    scans_.push_back(std::move(e));
    if (scans_.size() > kScans) scans_.erase(scans_.begin());
    rebuild();
  }

  void clear() {
    scans_.clear();
    rebuild();
  }

  size_t scan_count() const { return scans_.size(); }
  bool empty() const { return ground_.size() == 0 && surface_.size() == 0; }
  std::vector<int> keyframe_ids() const {
    std::vector<int> ids;
    for (const auto& s : scans_) ids.push_back(s.id);
    return ids;
  }
  const VoxelIndex& ground() const { return ground_; }
  const VoxelIndex& surface() const { return surface_; }

 private:
  struct Entry {
    int id;
    std::vector<Vec3> ground;
    std::vector<Vec3> surface;
  };

  void rebuild() {
    ground_.clear();
    surface_.clear();
    for (const auto& s : scans_) {
      for (const auto& p : s.ground) ground_.insert(p);
      for (const auto& p : s.surface) surface_.insert(p);
    }
  }

  std::vector<Entry> scans_;
  VoxelIndex ground_;
  VoxelIndex surface_;
};

struct AssociationParams {
  double radius = 1.0;
  size_t candidates = 8;
  double min_sine = 0.2;    // of the angle spanned at the nearest point
  double max_spread = 0.2;  // m, every neighbor must lie this close to the fitted plane
};

using PlaneTriple = std::array<Vec3, 3>;

/// Three nearest map points that span a plane around a world-frame query:
/// the two nearest, then the nearest further point that is not collinear
/// with them. Rejected when any neighbor strays from the least-squares plane
/// of the neighborhood (corners, plane edges). Ground queries search ground points only.
inline std::optional<PlaneTriple> associate_plane(const Vec3& query, const LidarLocalMap& map,
                                                  bool ground, const AssociationParams& ap = {}) {
  const VoxelIndex& idx = ground ? map.ground() : map.surface();
  if (idx.size() < 3) return std::nullopt;
  const auto nn = idx.nearest(query, ap.candidates, ap.radius);
  if (nn.size() < 3) return std::nullopt;
  Vec3 mean = Vec3::Zero();
  for (int m : nn) mean += idx.point(m);
  mean /= static_cast<double>(nn.size());
  Mat3 cov = Mat3::Zero();
  for (int m : nn) cov += (idx.point(m) - mean) * (idx.point(m) - mean).transpose();
  const Vec3 fit_normal = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvectors().col(0);
  for (int m : nn) {
    if (std::abs(fit_normal.dot(idx.point(m) - mean)) > ap.max_spread) return std::nullopt;
  }
  const Vec3& a = idx.point(nn[0]);
  for (size_t j = 1; j + 1 < nn.size(); ++j) {
    const Vec3& b = idx.point(nn[j]);
    const Vec3 ab = b - a;
    if (ab.norm() < 1e-6) continue;
    for (size_t k = j + 1; k < nn.size(); ++k) {
      const Vec3& c = idx.point(nn[k]);
      const Vec3 ac = c - a;
      if (ac.norm() < 1e-6) continue;
      const Vec3 n = ab.cross(ac);
      if (n.norm() / (ab.norm() * ac.norm()) <= ap.min_sine) continue;
      return PlaneTriple{a, b, c};
    }
    break;  // keep the nearest pair; only the third point is substituted
  }
  return std::nullopt;
}

// --- two-step alignment ------------------------------------------------------

struct AlignmentParams {
  AssociationParams association;
  int max_iterations = 10;
  double tolerance = 1e-5;
  size_t min_correspondences = 10;
  HuberParams huber{0.5};
};

struct AlignmentResult {
  Pose pose;
  bool ground_step = false;   // false: skipped for lack of ground correspondences
  bool surface_step = false;  // false: skipped for lack of surface correspondences
  int iterations = 0;
  size_t ground_matches = 0;
  size_t surface_matches = 0;
};

/// Point-to-plane correspondences of a body-frame set at a pose.
struct PlaneMatch {
  Vec3 point_body;
  PlaneTriple triple;
};

inline std::vector<PlaneMatch> associate_set(const std::vector<Vec3>& pts, const Pose& pose,
                                             const LidarLocalMap& map, bool ground,
                                             const AssociationParams& ap) {
  std::vector<PlaneMatch> out;
  for (const auto& p : pts) {
    if (auto t = associate_plane(transform(pose, p), map, ground, ap)) out.push_back({p, *t});
  }
  return out;
}

namespace detail {

/// Re-associates and solves the pose over the free tangent dimensions until
/// the update is below tolerance. Returns false when correspondences ran out.
inline bool align_step(const std::vector<Vec3>& pts, const LidarLocalMap& map, bool ground,
                       const std::vector<int>& fixed_dims, const AlignmentParams& ap, Pose& pose,
                       int& iterations, size_t& matches) {
  bool any = false;
  for (int it = 0; it < ap.max_iterations; ++it) {
    const auto m = associate_set(pts, pose, map, ground, ap.association);
    matches = m.size();
    if (m.size() < ap.min_correspondences) return any;
    Problem prob;
    const VarId x = prob.add_variable(pose);
    prob.fix_dims(x, fixed_dims);
    const FactorKind kind = ground ? FactorKind::lidar_ground : FactorKind::lidar_surface;
    for (const auto& c : m) {
      prob.add_factor(std::make_shared<LidarPlaneFactor>(kind, x, c.point_body, c.triple[0], c.triple[1],
                                                         c.triple[2], 1.0, ap.huber));
    }
    SolverOptions so;
    so.max_iter = 5;
    prob.solve(so);
    const Pose next = prob.variables.poses[0];
    const double delta = log_so3(next.rotation * pose.rotation.inverse()).norm() +
                         (next.translation - pose.translation).norm();
    pose = next;
    any = true;
    ++iterations;
    if (delta < ap.tolerance) break;
  }
  return any;
}

}  // namespace detail

/// Step 1 refines (z, roll, pitch) against ground planes, step 2 refines
/// (x, y, yaw) against surface planes. A step without enough
/// correspondences is skipped and leaves its dimensions untouched.
inline AlignmentResult two_step_alignment(const PlanarFeatureSet& set, const LidarLocalMap& map,
                                          const Pose& initial, const AlignmentParams& ap = {}) {
  AlignmentResult r;
  r.pose = initial;
  if (map.empty()) return r;
  // Tangent order (rx, ry, rz, x, y, z); rotation perturbed in the world frame.
  r.ground_step = detail::align_step(set.ground_points, map, true, {2, 3, 4}, ap, r.pose, r.iterations,
                                     r.ground_matches);
  // World-frame roll/pitch increments leak into yaw at second order.
  const Vec3 rpy = rpy_from_rotation(r.pose.rotation);
  r.pose.rotation = rotation_from_rpy(rpy.x(), rpy.y(), rpy_from_rotation(initial.rotation).z());
  r.surface_step = detail::align_step(set.surface_points, map, false, {0, 1, 5}, ap, r.pose,
                                      r.iterations, r.surface_matches);
  return r;
}

// --- serialization ---------------------------------------------------------

/// One point per line: "g x y z" for ground, "s x y z" for surface.
inline void write_points(std::ostream& out, const PlanarFeatureSet& set) {
  const auto flags = out.flags();
  const auto prec = out.precision(9);
  out << "# t " << set.timestamp << '\n';
  for (const auto& p : set.ground_points) out << "g " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& p : set.surface_points) out << "s " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  out.flags(flags);
  out.precision(prec);
}

inline PlanarFeatureSet read_points(std::istream& in) {
  PlanarFeatureSet set;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# t ", 0) == 0) {
      set.timestamp = std::stod(line.substr(4));
      continue;
    }
    if (line[0] == '#') continue;
    char tag = 0;
    Vec3 p;
    if (std::sscanf(line.c_str(), " %c %lf %lf %lf", &tag, &p.x(), &p.y(), &p.z()) != 4 ||
        (tag != 'g' && tag != 's')) {
      throw std::runtime_error("point file: malformed line " + std::to_string(lineno));
    }
    (tag == 'g' ? set.ground_points : set.surface_points).push_back(p);
  }
  return set;
}

}  // namespace msf
