#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "msf/dataset_io.hpp"

using namespace msf;
namespace fs = std::filesystem;

TEST(Config, IniRoundTripCoversEveryKey) {
  Config a;
  a.set("general.seed=42");
  a.set("world.trajectory", "straight 12.5, arc -1.25 7, straight 3 nowalls");
  a.set("world.gps_dropouts", "5 10, 20 25.5");
  a.set("world.visual_bursts", "1 2 5 0.5");
  a.set("world.planes", "0 10 0 1 0 0 0 0 1 20 5, 0 -10 0 1 0 0 0 0 1 0 0 infinite");
  a.set("noise.initial_gyro_bias", "0.001 -0.002 0.0003");
  a.set("agent.hidden", "32 16 8");
  a.set("backend.weight_lidar", "0.1");
  std::stringstream ss;
  a.write_ini(ss);
  Config b;
  b.read_ini(ss);
  for (auto& [key, binding] : a.bindings()) EXPECT_EQ(b.get(key), binding.get()) << key;
  EXPECT_EQ(b.world.trajectory.size(), 3u);
  EXPECT_FALSE(b.world.trajectory[2].walls);
  EXPECT_EQ(b.world.trajectory[1].angle, -1.25);
  EXPECT_EQ(b.world.gps_dropouts[1].end, 25.5);
  EXPECT_TRUE(b.world.planes[1].infinite);
  EXPECT_EQ(b.agent.hidden, (std::vector<int>{32, 16, 8}));
  EXPECT_EQ(b.pipeline.backend.weights.lidar, 0.1);
}

TEST(Config, DoublesSurviveExactly) {
  Config a;
  a.world.speed = 0.1 + 0.2;
  std::stringstream ss;
  a.write_ini(ss);
  Config b;
  b.read_ini(ss);
  EXPECT_EQ(b.world.speed, a.world.speed);
}

TEST(Config, Errors) {
  Config c;
  EXPECT_THROW(c.set("nosuch.key=1"), ConfigError);
  EXPECT_THROW(c.set("world.speed=fast"), ConfigError);
  EXPECT_THROW(c.set("world.speed"), ConfigError);
  EXPECT_THROW(c.set("sensors.gps=maybe"), ConfigError);
  EXPECT_THROW(c.set("world.trajectory=arc 1 0"), ConfigError);
  EXPECT_THROW(c.set("world.trajectory=loop 3"), ConfigError);
  EXPECT_THROW(c.set("world.gps_dropouts=10 5"), ConfigError);
  std::istringstream stray("speed = 3\n");
  EXPECT_THROW(c.read_ini(stray), ConfigError);
  std::istringstream dup("[world]\nspeed = 3\nspeed = 4\n");
  EXPECT_THROW(c.read_ini(dup), ConfigError);
  try {
    c.set("rates.imu=abc");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rates.imu"), std::string::npos);
  }
}

TEST(Config, FinalizePropagatesSeedAndSensors) {
  Config c;
  c.set("general.seed=9");
  c.set("sensors.lidar=off");
  c.set("camera.width=800");
  c.finalize();
  EXPECT_EQ(c.world.seed, 9u);
  EXPECT_EQ(c.pipeline.seed, 9u);
  EXPECT_EQ(c.agent.seed, 9u);
  EXPECT_FALSE(c.pipeline.use_lidar);
  EXPECT_EQ(c.pipeline.backend.camera.width, 800);
  c.set("sensors.camera=false");
  EXPECT_THROW(c.finalize(), ConfigError);
  Config r;
  r.set("rates.camera=500");
  EXPECT_THROW(r.finalize(), ConfigError);
}

TEST(DatasetIo, RoundTrip) {
  Config cfg;
  cfg.set("world.trajectory=straight 10, arc 0.5 10");
  cfg.set("world.gps_dropouts=0.5 1");
  cfg.finalize();
  const Dataset d = simulate(cfg.world);
  const fs::path dir = fs::temp_directory_path() / ("msf_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::remove_all(dir);
  write_dataset(dir, d, cfg);
  const Dataset e = read_dataset(dir);
  fs::remove_all(dir);

  auto rel = [](double a, double b) { return std::abs(a - b) <= 1e-8 * std::max(1.0, std::abs(b)); };
  ASSERT_EQ(e.imu.size(), d.imu.size());
  for (size_t i = 0; i < d.imu.size(); ++i) {
    EXPECT_TRUE(rel(e.imu[i].timestamp, d.imu[i].timestamp));
    EXPECT_LT((e.imu[i].accel - d.imu[i].accel).norm(), 1e-7);
  }
  ASSERT_EQ(e.stereo.size(), d.stereo.size());
  for (size_t i = 0; i < d.stereo.size(); ++i) {
    ASSERT_EQ(e.stereo[i].measurements.size(), d.stereo[i].measurements.size());
    for (size_t k = 0; k < d.stereo[i].measurements.size(); ++k) {
      EXPECT_EQ(e.stereo[i].measurements[k].landmark_id, d.stereo[i].measurements[k].landmark_id);
      EXPECT_LT((e.stereo[i].measurements[k].left - d.stereo[i].measurements[k].left).norm(), 1e-5);
    }
  }
  ASSERT_EQ(e.lidar.size(), d.lidar.size());
  for (size_t i = 0; i < d.lidar.size(); ++i) {
    ASSERT_EQ(e.lidar[i].rings.size(), d.lidar[i].rings.size());
    for (size_t r = 0; r < d.lidar[i].rings.size(); ++r) {
      EXPECT_EQ(e.lidar[i].rings[r].elevation, d.lidar[i].rings[r].elevation);
      ASSERT_EQ(e.lidar[i].rings[r].returns.size(), d.lidar[i].rings[r].returns.size());
    }
  }
  ASSERT_EQ(e.gps.size(), d.gps.size());
  for (size_t i = 0; i < d.gps.size(); ++i) EXPECT_EQ(e.gps[i].valid, d.gps[i].valid);
  ASSERT_EQ(e.world.ground_truth.size(), d.world.ground_truth.size());
  EXPECT_LT((e.world.ground_truth.back().velocity - d.world.ground_truth.back().velocity).norm(), 1e-7);
  EXPECT_EQ(e.world.landmarks.size(), d.world.landmarks.size());
  EXPECT_EQ(e.world.planes.size(), d.world.planes.size());
  EXPECT_EQ(e.config.seed, d.config.seed);
}

TEST(DatasetIo, MalformedLineIsReported) {
  Config cfg;
  cfg.set("world.trajectory=straight 5");
  cfg.finalize();
  const fs::path dir = fs::temp_directory_path() / "msf_io_bad";
  fs::remove_all(dir);
  write_dataset(dir, simulate(cfg.world), cfg);
  {
    std::ofstream f(dir / "gps.txt", std::ios::app);
    f << "99 1 2\n";
  }
  const auto lines = [&] {
    std::ifstream f(dir / "gps.txt");
    int n = 0;
    for (std::string l; std::getline(f, l);) ++n;
    return n;
  }();
  try {
    read_dataset(dir);
    FAIL() << "expected a parse error";
  } catch (const std::runtime_error& e) {
    EXPECT_EQ(std::string(e.what()), "gps.txt: parse error at line " + std::to_string(lines));
  }
  fs::remove_all(dir);
  EXPECT_THROW(read_dataset(dir), std::runtime_error);
}
