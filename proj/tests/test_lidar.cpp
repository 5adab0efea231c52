#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "msf/lidar_features.hpp"
#include "test_util.hpp"

using namespace msf;

namespace {

WorldConfig scene(std::vector<double> elevations, double range_sigma = 0.0) {
  WorldConfig c;
  if (!elevations.empty()) {
    c.lidar.elevations = std::move(elevations);
    c.lidar.rings = static_cast<int>(c.lidar.elevations.size());
  }
  c.noise = NoiseConfig::zero();
  c.noise.lidar_range_sigma = range_sigma;
  return c;
}

LidarScanRaw scan_from(const Pose& pose, const std::vector<PlaneSpec>& planes, const WorldConfig& c,
                       uint64_t seed = 5) {
  State s;
  s.set_pose(pose);
  std::mt19937_64 rng(seed);
  return scan_at(s, planes, c, rng);
}

PlaneSpec wall(const Vec3& origin, const Vec3& along, double length, double height) {
  return {origin, along.normalized(), Vec3::UnitZ(), length, height, false};
}

std::vector<double> degrees(std::initializer_list<double> d) {
  std::vector<double> out;
  for (double v : d) out.push_back(v * M_PI / 180.0);
  return out;
}

}  // namespace

TEST(Curvature, ConstantAndLinearProfilesVanish) {
  const CurvatureParams p;
  const std::vector<double> flat(11, 5.0);
  EXPECT_EQ(curvature(flat, p), 0.0);
  for (double slope : {0.01, -0.3, 1.7}) {
    std::vector<double> ramp;
    for (int k = 0; k < 11; ++k) ramp.push_back(7.0 + slope * k);
    EXPECT_LE(curvature(ramp, p), 1e-10 * p.a);
  }
}

TEST(Curvature, MatchesDirectSum) {
  // n = 1: one interior term (r1 - r0 - (r2 - r0)/2)^2 / r1.
  CurvatureParams p;
  p.n = 1;
  p.a = 2.0;
  const std::vector<double> r{4.0, 5.0, 4.5};
  const double e = 5.0 - 4.0 - 0.5 * (4.5 - 4.0);
  EXPECT_NEAR(curvature(r, p), 2.0 * e * e / 5.0, 1e-15);
}

TEST(Curvature, RejectsBadWindows) {
  const CurvatureParams p;
  EXPECT_THROW(curvature(std::vector<double>(10, 1.0), p), std::invalid_argument);
  std::vector<double> r(11, 3.0);
  r[4] = 0.0;
  EXPECT_THROW(curvature(r, p), std::invalid_argument);
}

TEST(Curvature, CornerExceedsObliqueWall) {
  const auto c = scene(degrees({0.0}));
  // Oblique wall x = 10 and a right-angle corner at (10, 10).
  const std::vector<PlaneSpec> oblique{wall(Vec3(10, -20, -5), Vec3::UnitY(), 40, 10)};
  const std::vector<PlaneSpec> corner{wall(Vec3(10, -20, -5), Vec3::UnitY(), 30, 10),
                                      wall(Vec3(10, 10, -5), -Vec3::UnitX(), 30, 10)};
  auto center_curvature = [&](const std::vector<PlaneSpec>& planes, int column) {
    const auto scan = scan_from(Pose(), planes, c);
    double out = -1.0;
    for_each_window(scan, 5, 360, [&](int, const LidarReturn& r, std::span<const double> w) {
      if (r.column == column) out = curvature(w, CurvatureParams{});
    });
    return out;
  };
  const double at_corner = center_curvature(corner, 45);
  const double on_wall = center_curvature(oblique, 45);
  ASSERT_GE(on_wall, 0.0);
  ASSERT_GE(at_corner, 0.0);
  EXPECT_GE(at_corner, 10.0 * on_wall);
}

TEST(ExtractPlanar, ObliquePlaneMostlySelected) {
  const auto c = scene(degrees({-4, -2, 0, 2, 4}), 0.02);
  const std::vector<PlaneSpec> planes{wall(Vec3(10, -10, -20), Vec3::UnitY(), 20, 40)};
  const auto scan = scan_from(Pose(), planes, c);
  int interior = 0;
  for_each_window(scan, 5, 360, [&](int, const LidarReturn&, std::span<const double>) { ++interior; });
  const auto sel = extract_planar(scan, CurvatureParams{});
  ASSERT_GT(interior, 50);
  EXPECT_GE(static_cast<double>(sel.size()), 0.9 * interior);
}

TEST(ExtractPlanar, PoleRejected) {
  const auto c = scene(degrees({-2, 0, 2}));
  const std::vector<PlaneSpec> planes{wall(Vec3(20, -15, -10), Vec3::UnitY(), 30, 20),
                                      wall(Vec3(5, -0.05, -10), Vec3::UnitY(), 0.1, 20)};
  const auto scan = scan_from(Pose(), planes, c);
  size_t pole_returns = 0;
  for (const auto& ring : scan.rings) {
    for (const auto& r : ring.returns) pole_returns += r.plane_id == 1;
  }
  ASSERT_GT(pole_returns, 0u);
  const auto sel = extract_planar(scan, CurvatureParams{});
  EXPECT_FALSE(sel.empty());
  for (const auto& p : sel) EXPECT_GT(p.point.x(), 10.0) << "pole point selected";
}

TEST(ExtractPlanar, EmptyScan) {
  LidarScanRaw empty;
  EXPECT_TRUE(extract_planar(empty, CurvatureParams{}).empty());
  empty.rings.resize(4);
  EXPECT_TRUE(extract_planar(empty, CurvatureParams{}).empty());
}

TEST(ExtractPlanar, SectorThinningBoundsDensity) {
  const auto c = scene(degrees({-4, 0, 4}));
  const std::vector<PlaneSpec> planes{wall(Vec3(10, -10, -20), Vec3::UnitY(), 20, 40)};
  const auto scan = scan_from(Pose(), planes, c);
  const auto all = extract_planar(scan, CurvatureParams{}, 360, 12, 0);
  const auto few = extract_planar(scan, CurvatureParams{}, 360, 12, 3);
  EXPECT_LT(few.size(), all.size());
  EXPECT_LE(few.size(), 3u * 12u * 3u);
}

namespace {

struct GroundScene {
  WorldConfig config;
  std::vector<PlaneSpec> planes;
  LidarScanRaw scan;
  std::vector<PlanarPoint> candidates;
};

GroundScene ground_and_wall() {
  GroundScene g;
  g.config = scene({}, 0.01);
  g.planes = {PlaneSpec::ground(0.0), wall(Vec3(-30, 8, 0), Vec3::UnitX(), 60, 8)};
  g.scan = scan_from(Pose(Rotation(), Vec3(0, 0, 1.5)), g.planes, g.config);
  g.candidates = extract_planar(g.scan, CurvatureParams{});
  return g;
}

/// Simulator label of a candidate, recovered from the scan.
int label_of(const LidarScanRaw& scan, const PlanarPoint& p) {
  for (const auto& r : scan.rings[p.ring].returns) {
    if (r.column == p.column) return r.plane_id;
  }
  return -1;
}

}  // namespace

TEST(SegmentGround, FlatGroundAndWall) {
  const auto g = ground_and_wall();
  std::mt19937_64 rng(11);
  const auto seg = segment_ground(g.scan, g.candidates, 1.5, GroundParams{}, rng);
  ASSERT_GT(seg.ground.size(), 100u);
  EXPECT_EQ(seg.ground.size() + seg.surface.size() + seg.ambiguous.size(), g.candidates.size());
  EXPECT_LT(seg.ambiguous.size(), seg.ground.size() / 10);
  for (const auto& p : seg.ground) EXPECT_NEAR(p.point.z(), -1.5, GroundParams{}.sac_tol);
  size_t wall_in_surface = 0, wall_total = 0;
  for (const auto& p : seg.ground) EXPECT_EQ(label_of(g.scan, p), 0);
  for (const auto& p : g.candidates) wall_total += label_of(g.scan, p) == 1;
  for (const auto& p : seg.surface) wall_in_surface += label_of(g.scan, p) == 1;
  // Wall-base returns sit on the ground plane and are set aside.
  for (const auto& p : seg.ambiguous) {
    EXPECT_NEAR(p.point.z(), -1.5, 2.0 * GroundParams{}.sac_tol);
    wall_in_surface += label_of(g.scan, p) == 1;
  }
  EXPECT_GT(wall_total, 0u);
  EXPECT_EQ(wall_in_surface, wall_total);
}

TEST(SegmentGround, RaisedOutliersExcluded) {
  auto g = ground_and_wall();
  std::vector<bool> raised(g.candidates.size(), false);
  int k = 0;
  for (size_t i = 0; i < g.candidates.size(); ++i) {
    if (label_of(g.scan, g.candidates[i]) != 0) continue;
    if (k++ % 10 == 0) {
      g.candidates[i].point.z() += 0.5;
      raised[i] = true;
    }
  }
  std::mt19937_64 rng(3);
  const auto seg = segment_ground(g.scan, g.candidates, 1.5, GroundParams{}, rng);
  ASSERT_GT(seg.ground.size(), 100u);
  for (const auto& p : seg.ground) EXPECT_NEAR(p.point.z(), -1.5, 0.05);
}

TEST(SegmentGround, NothingBelowHorizon) {
  auto c = scene(degrees({1, 3, 5}));
  const std::vector<PlaneSpec> planes{PlaneSpec::ground(0.0), wall(Vec3(-30, 8, 0), Vec3::UnitX(), 60, 8)};
  const auto scan = scan_from(Pose(Rotation(), Vec3(0, 0, 1.5)), planes, c);
  const auto cand = extract_planar(scan, CurvatureParams{});
  std::mt19937_64 rng(1);
  const auto seg = segment_ground(scan, cand, 1.5, GroundParams{}, rng);
  EXPECT_TRUE(seg.ground.empty());
  EXPECT_EQ(seg.surface.size(), cand.size());
  EXPECT_THROW(segment_ground(scan, cand, 0.0, GroundParams{}, rng), std::invalid_argument);
}

TEST(SegmentGround, SeededAndDeterministic) {
  const auto g = ground_and_wall();
  std::mt19937_64 r1(42), r2(42);
  const auto a = segment_ground(g.scan, g.candidates, 1.5, GroundParams{}, r1);
  const auto b = segment_ground(g.scan, g.candidates, 1.5, GroundParams{}, r2);
  EXPECT_EQ(a.ground.size(), b.ground.size());
  EXPECT_EQ(a.plane, b.plane);
}

TEST(VoxelIndex, NearestMatchesBruteForce) {
  std::mt19937_64 rng(9);
  VoxelIndex idx(1.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 2000; ++i) {
    pts.push_back(msf::testing::random_vec(rng, 5.0));
    idx.insert(pts.back());
  }
  for (int q = 0; q < 50; ++q) {
    const Vec3 query = msf::testing::random_vec(rng, 5.0);
    const auto got = idx.nearest(query, 5, 1.3);
    std::vector<std::pair<double, int>> all;
    for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
      const double d = (pts[i] - query).norm();
      if (d <= 1.3) all.emplace_back(d, i);
    }
    std::sort(all.begin(), all.end());
    ASSERT_EQ(got.size(), std::min<size_t>(5, all.size()));
    for (size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], all[i].second);
  }
}

TEST(AssociatePlane, QueryOnDensePlane) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> gauss(0.0, 0.005);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  PlanarFeatureSet set;
  const Vec3 n = Vec3(0.2, -0.1, 1.0).normalized();
  const Vec3 e1 = n.unitOrthogonal(), e2 = n.cross(e1);
  for (int i = 0; i < 3000; ++i) set.ground_points.push_back(u(rng) * e1 + u(rng) * e2 + gauss(rng) * n);
  LidarLocalMap map;
  map.insert(0, set, Pose());
  for (int q = 0; q < 100; ++q) {
    const Vec3 query = 0.8 * (u(rng) * e1 + u(rng) * e2);
    const auto t = associate_plane(query, map, true);
    ASSERT_TRUE(t.has_value());
    for (const auto& p : *t) EXPECT_LE((p - query).norm(), 1.0);
    // The triple's plane height at the query is a barycentric blend of three
    // noisy heights: std = sigma * |lambda|.
    Eigen::Matrix3d A;
    for (int k = 0; k < 3; ++k) A.col(k) << (*t)[k].dot(e1), (*t)[k].dot(e2), 1.0;
    const Vec3 lambda = A.inverse() * Vec3(query.dot(e1), query.dot(e2), 1.0);
    EXPECT_LT(lidar_residual(query, (*t)[0], (*t)[1], (*t)[2]), 4.0 * 0.005 * lambda.norm() + 1e-9);
  }
  EXPECT_FALSE(associate_plane(Vec3::Zero(), map, false).has_value());
}

TEST(AssociatePlane, CollinearGuard) {
  PlanarFeatureSet line;
  for (int i = 0; i < 5; ++i) line.surface_points.push_back(Vec3(0.1 * i, 0, 0));
  LidarLocalMap map;
  map.insert(0, line, Pose());
  EXPECT_FALSE(associate_plane(Vec3(0.05, 0.01, 0), map, false).has_value());

  line.surface_points.push_back(Vec3(0.2, 0.5, 0.0));
  LidarLocalMap map2;
  map2.insert(0, line, Pose());
  const auto t = associate_plane(Vec3(0.05, 0.01, 0), map2, false);
  ASSERT_TRUE(t.has_value());
  EXPECT_EQ((*t)[2], Vec3(0.2, 0.5, 0.0));

  EXPECT_FALSE(associate_plane(Vec3::Zero(), LidarLocalMap{}, false).has_value());
}

TEST(LidarLocalMap, KeepsLatestThree) {
  LidarLocalMap map;
  PlanarFeatureSet s;
  s.surface_points = {Vec3(1, 0, 0)};
  for (int id = 0; id < 5; ++id) {
    map.insert(id, s, Pose());
    EXPECT_EQ(map.scan_count(), std::min<size_t>(id + 1, 3));
  }
  EXPECT_EQ(map.keyframe_ids(), (std::vector<int>{2, 3, 4}));
  EXPECT_EQ(map.surface().size(), 3u);
}

namespace {

/// Street canyon: ground, two facades and a cross wall ahead.
struct Canyon {
  WorldConfig config;
  std::vector<PlaneSpec> planes;
  LidarFeatureParams params;
  LidarLocalMap map;

  explicit Canyon(bool walls) {
    config = scene({}, 0.0);
    planes.push_back(PlaneSpec::ground(0.0));
    if (walls) {
      planes.push_back(wall(Vec3(-40, 8, 0), Vec3::UnitX(), 80, 8));
      planes.push_back(wall(Vec3(-40, -8, 0), Vec3::UnitX(), 80, 8));
      planes.push_back(wall(Vec3(30, -8, 0), Vec3::UnitY(), 16, 8));
    }
    std::mt19937_64 rng(2);
    for (int k = 0; k < 3; ++k) {
      const Pose p(Rotation(), Vec3(-1.0 + k * 1.0, 0.2 * k, 1.5));
      const auto f = extract_features(scan_from(p, planes, config, k), params, rng);
      map.insert(k, f.dense, p);
    }
  }

  PlanarFeatureSet features_at(const Pose& p) {
    std::mt19937_64 rng(7);
    return extract_features(scan_from(p, planes, config, 99), params, rng).features;
  }
};

}  // namespace

TEST(TwoStepAlignment, RecoversHeight) {
  Canyon c(true);
  const Pose truth(rotation_from_rpy(0, 0, 0.02), Vec3(2.5, 0.3, 1.5));
  const auto f = c.features_at(truth);
  Pose init = truth;
  init.translation.z() += 0.2;
  const auto r = two_step_alignment(f, c.map, init);
  EXPECT_TRUE(r.ground_step);
  EXPECT_NEAR(r.pose.translation.z(), truth.translation.z(), 0.02);
}

TEST(TwoStepAlignment, RecoversYaw) {
  Canyon c(true);
  const Pose truth(rotation_from_rpy(0, 0, 0.0), Vec3(2.5, 0.3, 1.5));
  const auto f = c.features_at(truth);
  const Pose init(rotation_from_rpy(0, 0, 0.1), truth.translation);
  const auto r = two_step_alignment(f, c.map, init);
  EXPECT_TRUE(r.surface_step);
  EXPECT_NEAR(rpy_from_rotation(r.pose.rotation).z(), 0.0, 0.01);
}

TEST(TwoStepAlignment, NoWallsSkipsSecondStep) {
  Canyon c(false);
  const Pose truth(Rotation(), Vec3(2.5, 0.3, 1.5));
  const auto f = c.features_at(truth);
  const Pose init(rotation_from_rpy(0.01, -0.01, 0.05), truth.translation + Vec3(0.3, -0.2, 0.1));
  const auto r = two_step_alignment(f, c.map, init);
  EXPECT_TRUE(r.ground_step);
  EXPECT_FALSE(r.surface_step);
  EXPECT_EQ(r.pose.translation.x(), init.translation.x());
  EXPECT_EQ(r.pose.translation.y(), init.translation.y());
  EXPECT_NEAR(rpy_from_rotation(r.pose.rotation).z(), 0.05, 1e-9);
  EXPECT_NEAR(r.pose.translation.z(), 1.5, 0.02);
}

TEST(PointFile, RoundTrip) {
  PlanarFeatureSet s;
  s.timestamp = 1.25;
  s.ground_points = {Vec3(1, 2, -1.5)};
  s.surface_points = {Vec3(0.125, 8, 3), Vec3(-4, 2.5, 1)};
  std::stringstream ss;
  write_points(ss, s);
  const auto back = read_points(ss);
  EXPECT_EQ(back.timestamp, 1.25);
  EXPECT_EQ(back.ground_points, s.ground_points);
  EXPECT_EQ(back.surface_points, s.surface_points);
  std::stringstream bad("g 1 2\n");
  EXPECT_THROW(read_points(bad), std::runtime_error);
}
