#pragma once

// Trajectory metrics: nearest-timestamp association, closed-form SE(3)
// alignment, absolute trajectory error and relative pose error. Trajectories
// are exchanged in TUM format: `timestamp tx ty tz qx qy qz qw`.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "msf/geometry.hpp"

namespace msf {

struct StampedPose {
  double timestamp = 0.0;
  Pose pose;
};

using Trajectory = std::vector<StampedPose>;

struct MetricReport {
  double mean = 0.0;
  double rmse = 0.0;
  double max = 0.0;
  std::vector<double> errors;
};

struct PosePair {
  Pose estimate;
  Pose reference;
  double timestamp = 0.0;
};

inline MetricReport summarize(std::vector<double> errors) {
  MetricReport r;
  r.errors = std::move(errors);
  if (r.errors.empty()) return r;
  double sum = 0.0, sq = 0.0;
  for (double e : r.errors) {
    sum += e;
    sq += e * e;
    r.max = std::max(r.max, e);
  }
  const double n = static_cast<double>(r.errors.size());
  r.mean = sum / n;
  r.rmse = std::sqrt(sq / n);
  return r;
}

inline void check_increasing(const Trajectory& t, const char* what) {
  for (size_t i = 1; i < t.size(); ++i) {
    if (!(t[i].timestamp > t[i - 1].timestamp)) {
      throw std::invalid_argument(std::string(what) + ": timestamps not strictly increasing at row " +
                                  std::to_string(i));
    }
  }
}

/// Pairs each estimate with the nearest reference timestamp within max_dt.
inline std::vector<PosePair> associate(const Trajectory& est, const Trajectory& ref,
                                       double max_dt = 0.02) {
  if (est.empty() || ref.empty()) throw std::invalid_argument("associate: empty trajectory");
  std::vector<PosePair> pairs;
  for (const auto& e : est) {
    auto it = std::lower_bound(ref.begin(), ref.end(), e.timestamp,
                               [](const StampedPose& s, double t) { return s.timestamp < t; });
    const StampedPose* best = nullptr;
    double best_dt = max_dt;
    for (auto c : {it, it == ref.begin() ? it : std::prev(it)}) {
      if (c == ref.end()) continue;
      const double dt = std::abs(c->timestamp - e.timestamp);
      if (dt <= best_dt) {
        best_dt = dt;
        best = &*c;
      }
    }
    if (best) pairs.push_back({e.pose, best->pose, e.timestamp});
  }
  if (pairs.empty()) throw std::runtime_error("associate: no timestamp pairs within max_dt");
  return pairs;
}

/// Rigid transform T minimizing sum |T * est_i - ref_i|^2 (Umeyama, no scale).
inline Pose align(const std::vector<PosePair>& pairs) {
  if (pairs.size() < 3) throw std::runtime_error("align: need at least 3 pairs");
  const double n = static_cast<double>(pairs.size());
  Vec3 mu_e = Vec3::Zero(), mu_r = Vec3::Zero();
  for (const auto& p : pairs) {
    mu_e += p.estimate.translation;
    mu_r += p.reference.translation;
  }
  mu_e /= n;
  mu_r /= n;
  Mat3 cov = Mat3::Zero();
  double spread = 0.0;
  for (const auto& p : pairs) {
    const Vec3 de = p.estimate.translation - mu_e;
    cov += (p.reference.translation - mu_r) * de.transpose();
    spread += de.squaredNorm();
  }
  cov /= n;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  // Collinear or coincident points leave the rotation about the line undetermined.
  if (spread / n < 1e-18 || sv(1) < 1e-12 * std::max(sv(0), 1e-300)) {
    throw std::runtime_error("align: degenerate (collinear) geometry");
  }
  Mat3 s = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) s(2, 2) = -1.0;
  const Mat3 r = svd.matrixU() * s * svd.matrixV().transpose();
  return Pose(Rotation(r), mu_r - r * mu_e);
}

inline MetricReport ate(const std::vector<PosePair>& pairs) {
  const Pose t = align(pairs);
  std::vector<double> errors;
  errors.reserve(pairs.size());
  for (const auto& p : pairs) {
    errors.push_back((transform(t, p.estimate.translation) - p.reference.translation).norm());
  }
  return summarize(std::move(errors));
}

inline MetricReport ate(const Trajectory& est, const Trajectory& ref, double max_dt = 0.02) {
  return ate(associate(est, ref, max_dt));
}

/// Translational error of the relative motion over `delta` pairs.
inline MetricReport rpe(const std::vector<PosePair>& pairs, int delta = 1) {
  if (delta < 1) throw std::invalid_argument("rpe: delta must be >= 1");
  if (pairs.size() < static_cast<size_t>(delta) + 1) {
    throw std::runtime_error("rpe: need at least delta+1 pairs");
  }
  std::vector<double> errors;
  for (size_t i = 0; i + delta < pairs.size(); ++i) {
    const Pose rel_ref = between(pairs[i].reference, pairs[i + delta].reference);
    const Pose rel_est = between(pairs[i].estimate, pairs[i + delta].estimate);
    errors.push_back(between(rel_ref, rel_est).translation.norm());
  }
  return summarize(std::move(errors));
}

inline MetricReport rpe(const Trajectory& est, const Trajectory& ref, int delta = 1,
                        double max_dt = 0.02) {
  return rpe(associate(est, ref, max_dt), delta);
}

/// Rotational counterpart of rpe, in radians.
inline MetricReport rpe_rotation(const std::vector<PosePair>& pairs, int delta = 1) {
  std::vector<double> errors;
  for (size_t i = 0; i + delta < pairs.size(); ++i) {
    const Pose rel_ref = between(pairs[i].reference, pairs[i + delta].reference);
    const Pose rel_est = between(pairs[i].estimate, pairs[i + delta].estimate);
    errors.push_back(log_so3(between(rel_ref, rel_est).rotation).norm());
  }
  return summarize(std::move(errors));
}

// --- TUM I/O ---------------------------------------------------------------

inline Trajectory read_tum(std::istream& in) {
  Trajectory out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    for (double& x : v) {
      if (!(ss >> x)) throw std::runtime_error("TUM parse error at line " + std::to_string(lineno));
    }
    std::string extra;
    if (ss >> extra) throw std::runtime_error("TUM parse error at line " + std::to_string(lineno));
    const Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (!(std::abs(q.norm() - 1.0) < 1e-3)) {
      throw std::runtime_error("TUM non-unit quaternion at line " + std::to_string(lineno));
    }
    out.push_back({v[0], Pose(Rotation(q), Vec3(v[1], v[2], v[3]))});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const StampedPose& a, const StampedPose& b) { return a.timestamp < b.timestamp; });
  check_increasing(out, "TUM");
  return out;
}

inline Trajectory read_tum(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_tum(f);
}

inline void write_tum(std::ostream& out, const Trajectory& t) {
  out << std::setprecision(9);
  for (const auto& s : t) {
    const Eigen::Quaterniond q = s.pose.rotation.quaternion();
    const Vec3& p = s.pose.translation;
    out << s.timestamp << ' ' << p.x() << ' ' << p.y() << ' ' << p.z() << ' ' << q.x() << ' '
        << q.y() << ' ' << q.z() << ' ' << q.w() << '\n';
  }
}

inline void write_tum(const std::string& path, const Trajectory& t) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  write_tum(f, t);
}

inline std::string to_key_value(const std::string& metric, const MetricReport& r) {
  std::ostringstream ss;
  ss << std::setprecision(9) << "metric=" << metric << " n=" << r.errors.size()
     << " mean=" << r.mean << " rmse=" << r.rmse << " max=" << r.max;
  return ss.str();
}

}  // namespace msf
