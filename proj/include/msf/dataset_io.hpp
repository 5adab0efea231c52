#pragma once

// Dataset directory layout, one line-oriented text file per stream
// (timestamp first, space separated, 9 significant digits):
//   config.ini            configuration that generated the data
//   imu.txt               t gx gy gz ax ay az
//   stereo.txt            t n {id ul vl ur vr}*n        one frame per line
//   lidar_scans.txt       t n                          one scan per line
//   lidar.txt             t ring column azimuth range x y z plane
//   gps.txt               t x y z valid outlier
//   ground_truth.tum      t tx ty tz qx qy qz qw
//   ground_truth_state.txt t tx ty tz qx qy qz qw vx vy vz bax bay baz bgx bgy bgz
//   landmarks.txt         id x y z

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

#include "msf/config.hpp"
#include "msf/evaluation.hpp"
#include "msf/simulator.hpp"

namespace msf {

namespace io_detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << std::setprecision(9);
  return f;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  return f;
}

inline void put(std::ostream& o, const Vec3& v) { o << ' ' << v.x() << ' ' << v.y() << ' ' << v.z(); }

inline void put(std::ostream& o, const Rotation& r) {
  const Eigen::Quaterniond q = r.quaternion();
  o << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << q.w();
}

/// Reads every data line of a file; `parse` consumes one line's stream.
template <class F>
void for_each_line(const std::filesystem::path& p, F&& parse) {
  auto f = open_in(p);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    bool ok = false;
    try {
      ok = parse(ss);
    } catch (const std::exception&) {
      ok = false;
    }
    std::string extra;
    if (!ok || !ss || (ss >> extra)) {
      throw std::runtime_error(p.filename().string() + ": parse error at line " + std::to_string(lineno));
    }
  }
}

inline bool get(std::istream& in, Vec3& v) { return static_cast<bool>(in >> v.x() >> v.y() >> v.z()); }

inline bool get(std::istream& in, Rotation& r) {
  double x, y, z, w;
  if (!(in >> x >> y >> z >> w)) return false;
  const Eigen::Quaterniond q(w, x, y, z);
  if (std::abs(q.norm() - 1.0) > 1e-3) return false;
  r = Rotation(q);
  return true;
}

}  // namespace io_detail

/// Writes the dataset and its configuration into `dir` (created if missing).
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d, Config cfg) {
  using namespace io_detail;
  std::filesystem::create_directories(dir);
  cfg.write_ini((dir / "config.ini").string());

  auto imu = open_out(dir / "imu.txt");
  for (const auto& s : d.imu) {
    imu << s.timestamp;
    put(imu, s.gyro);
    put(imu, s.accel);
    imu << '\n';
  }

  auto stereo = open_out(dir / "stereo.txt");
  for (const auto& f : d.stereo) {
    stereo << f.timestamp << ' ' << f.measurements.size();
    for (const auto& m : f.measurements) {
      stereo << ' ' << m.landmark_id << ' ' << m.left.x() << ' ' << m.left.y() << ' ' << m.right.x() << ' ' << m.right.y();
    }
    stereo << '\n';
  }

  auto scans = open_out(dir / "lidar_scans.txt");
  auto lidar = open_out(dir / "lidar.txt");
  for (const auto& s : d.lidar) {
    scans << s.timestamp << ' ' << s.size() << '\n';
    for (size_t r = 0; r < s.rings.size(); ++r) {
      for (const auto& p : s.rings[r].returns) {
        lidar << s.timestamp << ' ' << r << ' ' << p.column << ' ' << p.azimuth << ' ' << p.range;
        put(lidar, p.point);
        lidar << ' ' << p.plane_id << '\n';
      }
    }
  }

  auto gps = open_out(dir / "gps.txt");
  for (const auto& g : d.gps) {
    gps << g.timestamp;
    put(gps, g.position);
    gps << ' ' << int(g.valid) << ' ' << int(g.outlier) << '\n';
  }

  auto tum = open_out(dir / "ground_truth.tum");
  auto full = open_out(dir / "ground_truth_state.txt");
  for (const auto& s : d.world.ground_truth) {
    for (std::ostream* o : {static_cast<std::ostream*>(&tum), static_cast<std::ostream*>(&full)}) {
      *o << s.timestamp;
      put(*o, s.position);
      put(*o, s.rotation);
    }
    tum << '\n';
    put(full, s.velocity);
    put(full, s.bias_accel);
    put(full, s.bias_gyro);
    full << '\n';
  }

  auto lm = open_out(dir / "landmarks.txt");
  for (size_t i = 0; i < d.world.landmarks.size(); ++i) {
    lm << i;
    put(lm, d.world.landmarks[i]);
    lm << '\n';
  }
}

/// Configuration stored with a dataset.
inline Config read_dataset_config(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  Config cfg;
  cfg.read_ini((dir / "config.ini").string());
  return cfg;
}

/// Loads the streams written by write_dataset. Planes are regenerated from
/// the stored world configuration.
inline Dataset read_dataset(const std::filesystem::path& dir) {
  using namespace io_detail;
  Dataset d;
  Config cfg = read_dataset_config(dir);
  cfg.finalize();
  d.config = cfg.world;
  d.world.planes = generate_world(d.config).planes;

  for_each_line(dir / "imu.txt", [&](std::istream& in) {
    ImuSample s;
    const bool ok = (in >> s.timestamp) && get(in, s.gyro) && get(in, s.accel);
    d.imu.push_back(s);
    return ok;
  });

  for_each_line(dir / "stereo.txt", [&](std::istream& in) {
    StereoObservation f;
    size_t n = 0;
    if (!(in >> f.timestamp >> n)) return false;
    f.measurements.resize(n);
    for (auto& m : f.measurements) {
      if (!(in >> m.landmark_id >> m.left.x() >> m.left.y() >> m.right.x() >> m.right.y())) return false;
    }
    d.stereo.push_back(std::move(f));
    return true;
  });

  const auto elevations = d.config.lidar.ring_elevations();
  std::vector<size_t> expected;
  for_each_line(dir / "lidar_scans.txt", [&](std::istream& in) {
    LidarScanRaw s;
    size_t n = 0;
    if (!(in >> s.timestamp >> n)) return false;
    for (double el : elevations) s.rings.push_back(LidarRing{el, {}});
    d.lidar.push_back(std::move(s));
    expected.push_back(n);
    return true;
  });
  size_t scan = 0;
  for_each_line(dir / "lidar.txt", [&](std::istream& in) {
    double t;
    size_t ring;
    LidarReturn p;
    if (!(in >> t >> ring >> p.column >> p.azimuth >> p.range) || !get(in, p.point) || !(in >> p.plane_id)) return false;
    while (scan < d.lidar.size() && d.lidar[scan].timestamp != t) ++scan;
    if (scan == d.lidar.size() || ring >= d.lidar[scan].rings.size()) return false;
    d.lidar[scan].rings[ring].returns.push_back(p);
    return true;
  });
  for (size_t i = 0; i < d.lidar.size(); ++i) {
    if (d.lidar[i].size() != expected[i]) {
      throw std::runtime_error("lidar.txt: scan " + std::to_string(i) + " has " + std::to_string(d.lidar[i].size()) +
                               " returns, lidar_scans.txt lists " + std::to_string(expected[i]));
    }
  }

  for_each_line(dir / "gps.txt", [&](std::istream& in) {
    GpsFix g;
    int valid = 0, outlier = 0;
    const bool ok = (in >> g.timestamp) && get(in, g.position) && (in >> valid >> outlier);
    g.valid = valid != 0;
    g.outlier = outlier != 0;
    d.gps.push_back(g);
    return ok;
  });

  for_each_line(dir / "ground_truth_state.txt", [&](std::istream& in) {
    State s;
    const bool ok = (in >> s.timestamp) && get(in, s.position) && get(in, s.rotation) && get(in, s.velocity) &&
                    get(in, s.bias_accel) && get(in, s.bias_gyro);
    d.world.ground_truth.push_back(s);
    return ok;
  });

  for_each_line(dir / "landmarks.txt", [&](std::istream& in) {
    size_t id;
    Vec3 p;
    if (!(in >> id) || !get(in, p) || id != d.world.landmarks.size()) return false;
    d.world.landmarks.push_back(p);
    return true;
  });
  return d;
}

}  // namespace msf
