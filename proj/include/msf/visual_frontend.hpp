#pragma once

// Visual frontend over synthetic correspondences: frame-to-frame tracks,
// keyframe selection by tracked count, stereo triangulation and the
// sliding-window local map that re-associates landmarks at keyframes.
//
// Image processing is abstracted behind CorrespondenceProvider; the
// simulated provider hands out ground-truth landmark ids with configurable
// per-frame track loss.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include "msf/simulator.hpp"

namespace msf {

struct FrameMatches {
  size_t frame = 0;
  double timestamp = 0.0;
  std::vector<StereoMeasurement> matches;
};

class CorrespondenceProvider {
 public:
  virtual ~CorrespondenceProvider() = default;
  virtual size_t frame_count() const = 0;
  virtual FrameMatches frame(size_t index) const = 0;
};

/// Simulator stereo stream; each id is independently lost with probability
/// `loss` per frame (seeded per frame so access order does not matter).
class SimulatedProvider final : public CorrespondenceProvider {
 public:
  SimulatedProvider(const std::vector<StereoObservation>& stream, double loss, uint64_t seed)
      : stream_(&stream), loss_(loss), seed_(seed) {
    if (!(loss >= 0.0 && loss < 1.0)) throw std::invalid_argument("provider loss must be in [0, 1)");
  }

  size_t frame_count() const override { return stream_->size(); }

  FrameMatches frame(size_t index) const override {
    const auto& obs = stream_->at(index);
    FrameMatches m;
    m.frame = index;
    m.timestamp = obs.timestamp;
    auto rng = make_rng(seed_, 1000 + index);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (const auto& s : obs.measurements) {
      if (u(rng) >= loss_) m.matches.push_back(s);
    }
    return m;
  }

 private:
  const std::vector<StereoObservation>* stream_;
  double loss_;
  uint64_t seed_;
};

struct TrackObservation {
  size_t frame = 0;
  double timestamp = 0.0;
  Vec2 left = Vec2::Zero();
  std::optional<Vec2> right;  // kept at keyframes
};

struct FeatureTrack {
  int landmark_id = -1;  // identity reported by the provider
  int map_id = -1;       // landmark the backend attaches observations to
  bool false_match = false;
  bool alive = true;
  std::vector<TrackObservation> observations;
};

/// Per-feature tracking statistics at a keyframe (observation-matrix input).
struct FeatureMotion {
  Vec2 pixel = Vec2::Zero();
  Vec2 displacement = Vec2::Zero();  // since the previous frame
};

struct KeyframeObservation {
  int landmark_id = -1;
  int map_id = -1;
  Vec2 left = Vec2::Zero();
  Vec2 right = Vec2::Zero();
  bool false_match = false;
};

struct KeyframeMeasurements {
  int id = 0;
  size_t frame = 0;
  double timestamp = 0.0;
  std::vector<KeyframeObservation> observations;
  std::vector<FeatureMotion> motions;
  size_t tracked = 0;
};

struct FrontendParams {
  int keyframe_threshold = 50;
  int window = 10;
  int max_features = 120;
  double track_loss = 0.1;
  double false_match_rate = 0.0;
  double min_disparity = 1.0;
  int grid_rows = 4;  // feature spreading at detection
  int grid_cols = 6;
};

/// Strict: a frame with exactly `threshold` tracked features is not a keyframe.
inline bool decide_keyframe(size_t tracked_count, int threshold) {
  if (threshold <= 0) throw std::invalid_argument("keyframe threshold must be > 0");
  return tracked_count < static_cast<size_t>(threshold);
}

struct TrackResult {
  size_t tracked = 0;
  bool skipped = false;  // provider returned nothing for this frame
};

/// Extends live tracks with this frame's matches; tracks without a match die.
/// The predicted pose is accepted for interface parity with appearance-based
/// trackers, where it gates the search window; id matching does not need it.
inline TrackResult track_frame(std::vector<FeatureTrack>& tracks, const FrameMatches& m,
                               const std::optional<Pose>& predicted = std::nullopt) {
  (void)predicted;
  TrackResult r;
  if (m.matches.empty()) {
    r.skipped = true;
    return r;
  }
  std::map<int, const StereoMeasurement*> by_id;
  for (const auto& s : m.matches) by_id[s.landmark_id] = &s;
  for (auto& t : tracks) {
    if (!t.alive) continue;
    auto it = by_id.find(t.landmark_id);
    if (it == by_id.end()) {
      t.alive = false;
      continue;
    }
    t.observations.push_back({m.frame, m.timestamp, it->second->left, it->second->right});
    ++r.tracked;
  }
  return r;
}

/// Stereo triangulation of a rectified pair, returned in the world frame.
inline Vec3 triangulate(const Vec2& left, const Vec2& right, const CameraIntrinsics& k,
                        const Pose& world_from_body, double min_disparity = 1.0) {
  const double disparity = left.x() - right.x();
  if (!(disparity >= min_disparity)) throw std::invalid_argument("triangulate: disparity below minimum");
  const double z = k.focal * k.baseline / disparity;
  const double v = 0.5 * (left.y() + right.y());
  const Vec3 pc((left.x() - k.cx) * z / k.focal, (v - k.cy) * z / k.focal, z);
  return transform(world_from_body, body_from_camera() * pc);
}

/// Keyframes of the sliding window and the landmarks they reference.
class LocalMap {
 public:
  explicit LocalMap(int window = 10) : window_(window) {
    if (window < 1) throw std::invalid_argument("local map window must be >= 1");
  }

  struct Landmark {
    std::optional<Vec3> position;  // world frame, once triangulated
    int last_keyframe = -1;
  };

  /// Records a keyframe and the landmarks it observes; evicts keyframes
  /// beyond the window and landmarks no remaining keyframe references.
  void add_keyframe(int id, const std::vector<int>& landmark_ids) {
    keyframes_.push_back(id);
    for (int l : landmark_ids) landmarks_[l].last_keyframe = id;
    while (static_cast<int>(keyframes_.size()) > window_) keyframes_.pop_front();
    const int oldest = keyframes_.front();
    for (auto it = landmarks_.begin(); it != landmarks_.end();) {
      it = it->second.last_keyframe < oldest ? landmarks_.erase(it) : std::next(it);
    }
  }

  void set_position(int landmark_id, const Vec3& p) {
    auto it = landmarks_.find(landmark_id);
    if (it != landmarks_.end()) it->second.position = p;
  }

  bool contains(int landmark_id) const { return landmarks_.count(landmark_id) > 0; }
  bool empty() const { return landmarks_.empty(); }
  size_t size() const { return landmarks_.size(); }
  const std::deque<int>& keyframes() const { return keyframes_; }
  const std::map<int, Landmark>& landmarks() const { return landmarks_; }
  int window() const { return window_; }

 private:
  int window_;
  std::deque<int> keyframes_;
  std::map<int, Landmark> landmarks_;
};

struct MapMatch {
  int landmark_id = -1;  // detected feature
  int map_id = -1;       // map landmark it was matched to
  bool false_match = false;
};

/// Re-associates freshly detected features with map landmarks. Matching is
/// by id; a fraction `false_rate` of matches is redirected to a random other
/// map landmark and flagged.
inline std::vector<MapMatch> match_local_map(const std::vector<int>& detected, const LocalMap& map,
                                             double false_rate, std::mt19937_64& rng) {
  std::vector<MapMatch> out;
  if (map.empty()) return out;
  std::vector<int> ids;
  for (const auto& [id, lm] : map.landmarks()) ids.push_back(id);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<size_t> pick(0, ids.size() - 1);
  for (int d : detected) {
    if (!map.contains(d)) continue;
    MapMatch m{d, d, false};
    const double draw = u(rng);
    if (draw < false_rate && ids.size() > 1) {
      int other = d;
      while (other == d) other = ids[pick(rng)];
      m.map_id = other;
      m.false_match = true;
    }
    out.push_back(m);
  }
  return out;
}

/// Tracks features frame to frame and emits keyframe measurement sets.
class Frontend {
 public:
  Frontend(const FrontendParams& p, const CameraIntrinsics& camera, uint64_t seed)
      : p_(p), camera_(camera), map_(p.window), rng_(make_rng(seed, 77)) {}

  /// Processes one frame; returns the keyframe measurements when the frame
  /// became a keyframe.
  std::optional<KeyframeMeasurements> process(const FrameMatches& m,
                                              const std::optional<Pose>& predicted = std::nullopt) {
    ++frames_;
    const TrackResult tr = track_frame(tracks_, m, predicted);
    if (tr.skipped) {
      ++skipped_;
      return std::nullopt;
    }
    const bool first = keyframes_ == 0;
    if (!first && !decide_keyframe(tr.tracked, p_.keyframe_threshold)) return std::nullopt;
    return make_keyframe(m, tr.tracked);
  }

  const std::vector<FeatureTrack>& tracks() const { return tracks_; }
  const LocalMap& local_map() const { return map_; }
  size_t frames() const { return frames_; }
  size_t skipped() const { return skipped_; }
  int keyframes() const { return keyframes_; }

 private:
  KeyframeMeasurements make_keyframe(const FrameMatches& m, size_t tracked) {
    KeyframeMeasurements kf;
    kf.id = keyframes_++;
    kf.frame = m.frame;
    kf.timestamp = m.timestamp;
    kf.tracked = tracked;

    // Live tracks keep their landmark association; motion statistics come
    // from their last two observations.
    std::vector<FeatureTrack> live;
    std::set<int> live_ids;
    for (auto& t : tracks_) {
      if (!t.alive) continue;
      const auto& last = t.observations.back();
      if (t.observations.size() >= 2) {
        const auto& prev = t.observations[t.observations.size() - 2];
        if (prev.frame + 1 == last.frame) kf.motions.push_back({last.left, last.left - prev.left});
      }
      live_ids.insert(t.landmark_id);
      live.push_back(std::move(t));
    }

    // New detections fill the budget, spread over an image grid.
    std::vector<const StereoMeasurement*> fresh;
    for (const auto& s : m.matches) {
      if (!live_ids.count(s.landmark_id)) fresh.push_back(&s);
    }
    const int budget = std::max(0, p_.max_features - static_cast<int>(live.size()));
    const auto chosen = spread(fresh, budget);
    std::vector<int> detected;
    for (const auto* s : chosen) detected.push_back(s->landmark_id);
    std::map<int, MapMatch> matched;
    for (const auto& mm : match_local_map(detected, map_, p_.false_match_rate, rng_)) matched[mm.landmark_id] = mm;
    for (const auto* s : chosen) {
      FeatureTrack t;
      t.landmark_id = s->landmark_id;
      t.map_id = s->landmark_id;
      if (auto it = matched.find(s->landmark_id); it != matched.end()) {
        t.map_id = it->second.map_id;
        t.false_match = it->second.false_match;
      }
      t.observations.push_back({m.frame, m.timestamp, s->left, s->right});
      live.push_back(std::move(t));
    }
    tracks_ = std::move(live);

    std::vector<int> referenced;
    for (const auto& t : tracks_) {
      const auto& o = t.observations.back();
      if (o.frame != m.frame || !o.right) continue;
      kf.observations.push_back({t.landmark_id, t.map_id, o.left, *o.right, t.false_match});
      referenced.push_back(t.map_id);
    }
    map_.add_keyframe(kf.id, referenced);
    return kf;
  }

  /// Round-robin over grid cells so detections cover the image.
  std::vector<const StereoMeasurement*> spread(const std::vector<const StereoMeasurement*>& in,
                                               int budget) const {
    std::vector<std::vector<const StereoMeasurement*>> cells(p_.grid_rows * p_.grid_cols);
    for (const auto* s : in) {
      const int c = std::clamp(static_cast<int>(s->left.x() * p_.grid_cols / camera_.width), 0, p_.grid_cols - 1);
      const int r = std::clamp(static_cast<int>(s->left.y() * p_.grid_rows / camera_.height), 0, p_.grid_rows - 1);
      cells[r * p_.grid_cols + c].push_back(s);
    }
    std::vector<const StereoMeasurement*> out;
    for (size_t round = 0; static_cast<int>(out.size()) < budget; ++round) {
      bool any = false;
      for (auto& cell : cells) {
        if (round < cell.size() && static_cast<int>(out.size()) < budget) {
          out.push_back(cell[round]);
          any = true;
        }
      }
      if (!any) break;
    }
    return out;
  }

  FrontendParams p_;
  CameraIntrinsics camera_;
  LocalMap map_;
  std::mt19937_64 rng_;
  std::vector<FeatureTrack> tracks_;
  size_t frames_ = 0;
  size_t skipped_ = 0;
  int keyframes_ = 0;
};

/// Runs the frontend over every frame of a provider.
inline std::vector<KeyframeMeasurements> run_frontend(const CorrespondenceProvider& provider,
                                                      const FrontendParams& p,
                                                      const CameraIntrinsics& camera, uint64_t seed) {
  Frontend fe(p, camera, seed);
  std::vector<KeyframeMeasurements> out;
  for (size_t i = 0; i < provider.frame_count(); ++i) {
    if (auto kf = fe.process(provider.frame(i))) out.push_back(std::move(*kf));
  }
  return out;
}

}  // namespace msf
