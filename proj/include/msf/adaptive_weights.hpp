#pragma once

// Learned per-keyframe factor weights. A TD3 actor-critic reads a grid
// summary of the frontend's feature tracks and emits multipliers for the
// visual and lidar families; the reward is the reciprocal translational RPE
// of each new keyframe over a ten-keyframe episode.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msf/pipeline.hpp"

namespace msf {

// --- observation -----------------------------------------------------------------

/// m x n grid over the image; each cell holds (N, mean dx, mean dy).
struct ObservationMatrix {
  int rows = 4;
  int cols = 6;
  std::vector<double> cells = std::vector<double>(3 * 4 * 6, 0.0);

  double count(int r, int c) const { return cells[3 * (r * cols + c)]; }
  double dx(int r, int c) const { return cells[3 * (r * cols + c) + 1]; }
  double dy(int r, int c) const { return cells[3 * (r * cols + c) + 2]; }
  size_t size() const { return cells.size(); }
};

inline ObservationMatrix build_observation(const std::vector<FeatureMotion>& motions, int rows, int cols,
                                           int width, int height) {
  if (rows < 1 || cols < 1 || width < 1 || height < 1) throw std::invalid_argument("build_observation: bad grid");
  ObservationMatrix o;
  o.rows = rows;
  o.cols = cols;
  o.cells.assign(3 * rows * cols, 0.0);
  for (const auto& m : motions) {
    const int c = std::clamp(static_cast<int>(m.pixel.x() * cols / width), 0, cols - 1);
    const int r = std::clamp(static_cast<int>(m.pixel.y() * rows / height), 0, rows - 1);
    double* cell = &o.cells[3 * (r * cols + c)];
    cell[0] += 1.0;
    cell[1] += m.displacement.x();
    cell[2] += m.displacement.y();
  }
  for (int i = 0; i < rows * cols; ++i) {
    if (o.cells[3 * i] > 0.0) {
      o.cells[3 * i + 1] /= o.cells[3 * i];
      o.cells[3 * i + 2] /= o.cells[3 * i];
    }
  }
  return o;
}

inline ObservationMatrix build_observation(const KeyframeMeasurements& m, int rows, int cols,
                                           const CameraIntrinsics& k) {
  return build_observation(m.motions, rows, cols, k.width, k.height);
}

/// Network input: counts and displacements brought to order one.
inline VecX network_input(const ObservationMatrix& o, double count_scale = 10.0, double pixel_scale = 10.0) {
  VecX x(o.size());
  for (size_t i = 0; i < o.size(); ++i) x[i] = o.cells[i] / (i % 3 == 0 ? count_scale : pixel_scale);
  return x;
}

// --- reward ----------------------------------------------------------------------

/// Reciprocal translational RPE of one step, clamped to [0, r_max].
inline double reward(const Pose& est_i, const Pose& est_j, const Pose& truth_i, const Pose& truth_j,
                     double r_max = 100.0) {
  const double e = between(between(truth_i, truth_j), between(est_i, est_j)).translation.norm();
  if (!std::isfinite(e)) return 0.0;
  if (e * r_max <= 1.0) return r_max;
  return 1.0 / e;
}

// --- networks --------------------------------------------------------------------

/// Fully connected network: ReLU hidden layers, identity or tanh output.
/// Batches are column-major (one sample per column).
class Mlp {
 public:
  enum class Output { linear, tanh };

  Mlp() = default;
  Mlp(std::vector<int> sizes, Output out, std::mt19937_64& rng) : sizes_(std::move(sizes)), out_(out) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need input and output sizes");
    for (size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      MatX w(sizes_[l + 1], sizes_[l]);
      VecX b(sizes_[l + 1]);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = u(rng);
      w_.push_back(w);
      b_.push_back(b);
    }
  }

  struct Tape {
    std::vector<MatX> inputs;  // input of each layer
    std::vector<MatX> pre;     // pre-activation of each layer
    MatX output;
  };

  MatX forward(const MatX& x) const {
    Tape t;
    return forward(x, t);
  }

  MatX forward(const MatX& x, Tape& t) const {
    if (x.rows() != sizes_.front()) throw std::invalid_argument("Mlp: input size mismatch");
    t.inputs.clear();
    t.pre.clear();
    MatX a = x;
    for (size_t l = 0; l < w_.size(); ++l) {
      t.inputs.push_back(a);
      MatX z = w_[l] * a;
      z.colwise() += b_[l];
      t.pre.push_back(z);
      if (l + 1 < w_.size()) {
        a = z.cwiseMax(0.0);
      } else {
        a = out_ == Output::tanh ? MatX(z.array().tanh()) : z;
      }
    }
    t.output = a;
    return a;
  }

  /// Back-propagates dL/d(output); returns dL/d(input) and, if asked,
  /// dL/d(parameters) in `parameters()` order summed over the batch.
  MatX backward(const Tape& t, const MatX& d_out, VecX* d_params) const {
    MatX g = d_out;
    if (out_ == Output::tanh) g = g.cwiseProduct(MatX((1.0 - t.output.array().square())));
    std::vector<MatX> dw(w_.size());
    std::vector<VecX> db(w_.size());
    for (int l = static_cast<int>(w_.size()) - 1; l >= 0; --l) {
      if (l + 1 < static_cast<int>(w_.size())) g = g.cwiseProduct(MatX((t.pre[l].array() > 0.0).cast<double>()));
      dw[l] = g * t.inputs[l].transpose();
      db[l] = g.rowwise().sum();
      g = w_[l].transpose() * g;
    }
    if (d_params) {
      d_params->resize(parameter_count());
      Eigen::Index o = 0;
      for (size_t l = 0; l < w_.size(); ++l) {
        d_params->segment(o, dw[l].size()) = Eigen::Map<const VecX>(dw[l].data(), dw[l].size());
        o += dw[l].size();
        d_params->segment(o, db[l].size()) = db[l];
        o += db[l].size();
      }
    }
    return g;
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (size_t l = 0; l < w_.size(); ++l) n += w_[l].size() + b_[l].size();
    return n;
  }

  /// Flat parameters: per layer the weight matrix (column-major) then the bias.
  VecX parameters() const {
    VecX p(parameter_count());
    Eigen::Index o = 0;
    for (size_t l = 0; l < w_.size(); ++l) {
      p.segment(o, w_[l].size()) = Eigen::Map<const VecX>(w_[l].data(), w_[l].size());
      o += w_[l].size();
      p.segment(o, b_[l].size()) = b_[l];
      o += b_[l].size();
    }
    return p;
  }

  void set_parameters(const VecX& p) {
    if (p.size() != parameter_count()) throw std::invalid_argument("Mlp: parameter count mismatch");
    Eigen::Index o = 0;
    for (size_t l = 0; l < w_.size(); ++l) {
      Eigen::Map<VecX>(w_[l].data(), w_[l].size()) = p.segment(o, w_[l].size());
      o += w_[l].size();
      b_[l] = p.segment(o, b_[l].size());
      o += b_[l].size();
    }
  }

  const std::vector<int>& sizes() const { return sizes_; }
  Output output() const { return out_; }

  /// Binary layout: layer count, sizes, output kind, then for each layer the
  /// weights row-major and the bias, all little-endian doubles.
  void write(std::ostream& out) const {
    const uint32_t n = static_cast<uint32_t>(sizes_.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    for (int s : sizes_) {
      const uint32_t v = static_cast<uint32_t>(s);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    const uint32_t kind = out_ == Output::tanh ? 1 : 0;
    out.write(reinterpret_cast<const char*>(&kind), sizeof kind);
    for (size_t l = 0; l < w_.size(); ++l) {
      for (Eigen::Index r = 0; r < w_[l].rows(); ++r) {
        for (Eigen::Index c = 0; c < w_[l].cols(); ++c) {
          const double v = w_[l](r, c);
          out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
      }
      out.write(reinterpret_cast<const char*>(b_[l].data()), sizeof(double) * b_[l].size());
    }
  }

  static Mlp read(std::istream& in) {
    uint32_t n = 0;
    if (!in.read(reinterpret_cast<char*>(&n), sizeof n) || n < 2 || n > 64) {
      throw std::runtime_error("Mlp: bad checkpoint header");
    }
    Mlp m;
    for (uint32_t i = 0; i < n; ++i) {
      uint32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      if (v == 0 || v > (1u << 20)) throw std::runtime_error("Mlp: bad layer size in checkpoint");
      m.sizes_.push_back(static_cast<int>(v));
    }
    uint32_t kind = 0;
    in.read(reinterpret_cast<char*>(&kind), sizeof kind);
    m.out_ = kind ? Output::tanh : Output::linear;
    for (uint32_t l = 0; l + 1 < n; ++l) {
      MatX w(m.sizes_[l + 1], m.sizes_[l]);
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index c = 0; c < w.cols(); ++c) in.read(reinterpret_cast<char*>(&w(r, c)), sizeof(double));
      }
      VecX b(m.sizes_[l + 1]);
      in.read(reinterpret_cast<char*>(b.data()), sizeof(double) * b.size());
      m.w_.push_back(w);
      m.b_.push_back(b);
    }
    if (!in) throw std::runtime_error("Mlp: truncated checkpoint");
    return m;
  }

 private:
  std::vector<int> sizes_;
  Output out_ = Output::linear;
  std::vector<MatX> w_;
  std::vector<VecX> b_;
};

class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(Mlp& net, const VecX& grad) {
    if (m_.size() != grad.size()) {
      m_ = VecX::Zero(grad.size());
      v_ = VecX::Zero(grad.size());
      t_ = 0;
    }
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    VecX p = net.parameters();
    p.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    net.set_parameters(p);
  }

 private:
  double lr_, b1_, b2_, eps_;
  VecX m_, v_;
  int t_ = 0;
};

// --- replay ----------------------------------------------------------------------

struct Transition {
  VecX obs;
  Vec2 action = Vec2::Zero();  // normalized, in [-1, 1]
  double reward = 0.0;
  VecX next_obs;
  bool done = false;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity = 100000) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: zero capacity");
  }

  void push(Transition t) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[next_] = std::move(t);
    }
    next_ = (next_ + 1) % capacity_;
  }

  size_t size() const { return data_.size(); }
  size_t capacity() const { return capacity_; }
  const Transition& operator[](size_t i) const { return data_[i]; }

  /// Indices drawn uniformly without replacement.
  std::vector<size_t> sample_indices(size_t n, std::mt19937_64& rng) const {
    if (n > data_.size()) throw std::invalid_argument("ReplayBuffer: batch larger than buffer");
    std::vector<size_t> idx(data_.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(n);
    return idx;
  }

 private:
  size_t capacity_;
  size_t next_ = 0;
  std::vector<Transition> data_;
};

// --- agent -----------------------------------------------------------------------

struct Td3Params {
  int grid_rows = 4;
  int grid_cols = 6;
  std::vector<int> hidden{64, 64};
  double gamma = 0.99;
  double tau = 0.005;
  int policy_delay = 2;
  double target_noise = 0.2;   // normalized action units
  double noise_clip = 0.5;
  double explore_sigma = 0.2;  // normalized action units
  size_t batch = 64;
  double actor_lr = 1e-4;
  double critic_lr = 1e-3;
  double w_min = 0.1;
  double w_max = 10.0;
  double reward_scale = 0.01;  // critic regresses on scaled rewards
  size_t buffer_capacity = 100000;
  uint64_t seed = 1;
};

struct TrainStats {
  double critic1_loss = 0.0;
  double critic2_loss = 0.0;
  std::optional<double> actor_loss;
  VecX target;           // y per batch column
  VecX target_q1, target_q2;
};

class Td3Agent {
 public:
  explicit Td3Agent(const Td3Params& p = {}) : p_(p), rng_(p.seed) {
    if (!(p.w_min > 0.0) || !(p.w_max > p.w_min)) throw std::invalid_argument("Td3Agent: bad weight bounds");
    const int obs = 3 * p.grid_rows * p.grid_cols;
    std::vector<int> a{obs}, c{obs + 2};
    for (int h : p.hidden) {
      a.push_back(h);
      c.push_back(h);
    }
    a.push_back(2);
    c.push_back(1);
    actor_ = Mlp(a, Mlp::Output::tanh, rng_);
    critic1_ = Mlp(c, Mlp::Output::linear, rng_);
    critic2_ = Mlp(c, Mlp::Output::linear, rng_);
    actor_target_ = actor_;
    critic1_target_ = critic1_;
    critic2_target_ = critic2_;
    actor_opt_ = Adam(p.actor_lr);
    critic1_opt_ = Adam(p.critic_lr);
    critic2_opt_ = Adam(p.critic_lr);
  }

  const Td3Params& params() const { return p_; }
  int observation_size() const { return 3 * p_.grid_rows * p_.grid_cols; }

  /// Normalized action in [-1, 1]^2.
  Vec2 act_normalized(const VecX& obs, bool explore) {
    if (obs.size() != observation_size()) throw std::invalid_argument("Td3Agent: observation size mismatch");
    Vec2 a = actor_.forward(obs).col(0);
    if (explore) {
      std::normal_distribution<double> g(0.0, p_.explore_sigma);
      for (int i = 0; i < 2; ++i) a[i] = std::clamp(a[i] + g(rng_), -1.0, 1.0);
    }
    return a;
  }

  /// Log-linear map from [-1, 1] onto [w_min, w_max]; 0 lands on the
  /// geometric midpoint.
  WeightAction to_weights(const Vec2& a) const {
    auto w = [&](double x) {
      const double u = (std::clamp(x, -1.0, 1.0) + 1.0) / 2.0;
      return p_.w_min * std::pow(p_.w_max / p_.w_min, u);
    };
    return {w(a[0]), w(a[1])};
  }

  Vec2 from_weights(const WeightAction& w) const {
    auto a = [&](double x) {
      return 2.0 * std::log(std::clamp(x, p_.w_min, p_.w_max) / p_.w_min) / std::log(p_.w_max / p_.w_min) - 1.0;
    };
    return {a(w.visual), a(w.lidar)};
  }

  WeightAction act(const VecX& obs, bool explore) { return to_weights(act_normalized(obs, explore)); }

  /// Clipped double-Q critic update; actor and soft target updates every
  /// policy_delay calls.
  TrainStats train_step(const ReplayBuffer& buffer) {
    if (buffer.size() < p_.batch) throw std::invalid_argument("train_step: buffer smaller than batch");
    const auto idx = buffer.sample_indices(p_.batch, rng_);
    const int n = static_cast<int>(idx.size()), d = observation_size();
    MatX s(d, n), s2(d, n), sa(d + 2, n);
    VecX r(n), done(n);
    for (int i = 0; i < n; ++i) {
      const Transition& t = buffer[idx[i]];
      s.col(i) = t.obs;
      s2.col(i) = t.next_obs;
      sa.col(i) << t.obs, t.action;
      r[i] = t.reward;
      done[i] = t.done ? 1.0 : 0.0;
    }

    TrainStats st;
    MatX a2 = actor_target_.forward(s2);
    std::normal_distribution<double> g(0.0, p_.target_noise);
    for (Eigen::Index i = 0; i < a2.size(); ++i) {
      a2.data()[i] = std::clamp(a2.data()[i] + std::clamp(g(rng_), -p_.noise_clip, p_.noise_clip), -1.0, 1.0);
    }
    MatX s2a(d + 2, n);
    s2a << s2, a2;
    st.target_q1 = critic1_target_.forward(s2a).row(0).transpose();
    st.target_q2 = critic2_target_.forward(s2a).row(0).transpose();
    st.target = p_.reward_scale * r +
                (p_.gamma * (VecX::Ones(n) - done)).cwiseProduct(st.target_q1.cwiseMin(st.target_q2));

    auto fit = [&](Mlp& critic, Adam& opt) {
      Mlp::Tape t;
      const VecX q = critic.forward(sa, t).row(0).transpose();
      const VecX diff = q - st.target;
      VecX grad;
      critic.backward(t, (2.0 / n) * diff.transpose(), &grad);
      opt.step(critic, grad);
      return diff.squaredNorm() / n;
    };
    st.critic1_loss = fit(critic1_, critic1_opt_);
    st.critic2_loss = fit(critic2_, critic2_opt_);

    if (++updates_ % p_.policy_delay == 0) {
      Mlp::Tape ta, tc;
      const MatX a = actor_.forward(s, ta);
      MatX sa_pi(d + 2, n);
      sa_pi << s, a;
      const MatX q = critic1_.forward(sa_pi, tc);
      st.actor_loss = -q.mean();
      const MatX dq_dsa = critic1_.backward(tc, MatX::Constant(1, n, -1.0 / n), nullptr);
      VecX grad;
      actor_.backward(ta, dq_dsa.bottomRows(2), &grad);
      actor_opt_.step(actor_, grad);
      soft_update(actor_target_, actor_);
      soft_update(critic1_target_, critic1_);
      soft_update(critic2_target_, critic2_);
    }
    return st;
  }

  const Mlp& actor() const { return actor_; }
  const Mlp& actor_target() const { return actor_target_; }
  const Mlp& critic1() const { return critic1_; }
  const Mlp& critic2() const { return critic2_; }
  const Mlp& critic1_target() const { return critic1_target_; }
  const Mlp& critic2_target() const { return critic2_target_; }
  Mlp& mutable_actor() { return actor_; }
  std::mt19937_64& rng() { return rng_; }

  /// Versioned binary checkpoint of all six networks.
  void save(std::ostream& out) const {
    out.write(kMagic, sizeof kMagic);
    const uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    for (const Mlp* m : {&actor_, &actor_target_, &critic1_, &critic2_, &critic1_target_, &critic2_target_}) m->write(out);
  }

  void load(std::istream& in) {
    char magic[sizeof kMagic];
    uint32_t version = 0;
    if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic)) {
      throw std::runtime_error("checkpoint: not an agent checkpoint");
    }
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Mlp nets[6];
    for (auto& m : nets) m = Mlp::read(in);
    if (nets[0].sizes().front() != observation_size() || nets[0].sizes().back() != 2) {
      throw std::runtime_error("checkpoint: network sizes do not match the observation grid");
    }
    actor_ = nets[0];
    actor_target_ = nets[1];
    critic1_ = nets[2];
    critic2_ = nets[3];
    critic1_target_ = nets[4];
    critic2_target_ = nets[5];
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    save(f);
  }
  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    load(f);
  }

 private:
  static constexpr char kMagic[8] = {'M', 'S', 'F', 'T', 'D', '3', '\0', '\0'};

  void soft_update(Mlp& target, const Mlp& source) const {
    target.set_parameters(p_.tau * source.parameters() + (1.0 - p_.tau) * target.parameters());
  }

  Td3Params p_;
  std::mt19937_64 rng_;
  Mlp actor_, actor_target_, critic1_, critic2_, critic1_target_, critic2_target_;
  Adam actor_opt_, critic1_opt_, critic2_opt_;
  int updates_ = 0;
};

// --- episodes --------------------------------------------------------------------

/// Eleven consecutive keyframes: the first is the known start, the other ten
/// are the agent's steps.
struct EpisodeSegment {
  std::vector<KeyframeInput> inputs;
  State start;
  std::vector<Pose> truth;
};

/// Non-overlapping segments of `steps` + 1 keyframes.
inline std::vector<EpisodeSegment> make_segments(const std::vector<KeyframeInput>& inputs, const GroundTruth& gt,
                                                 double imu_rate, int steps = 10) {
  std::vector<EpisodeSegment> out;
  for (size_t a = 0; a + steps < inputs.size(); a += steps) {
    EpisodeSegment s;
    s.inputs.assign(inputs.begin() + a, inputs.begin() + a + steps + 1);
    s.start = truth_at(gt, s.inputs.front().visual.timestamp, imu_rate);
    for (const auto& in : s.inputs) s.truth.push_back(truth_at(gt, in.visual.timestamp, imu_rate).pose());
    out.push_back(std::move(s));
  }
  return out;
}

struct EpisodeResult {
  std::vector<Transition> transitions;
  std::vector<double> rewards;
  std::vector<double> errors;  // translational relative error behind each reward
  std::vector<WeightAction> actions;
  std::vector<State> states;
  double total_reward = 0.0;
  bool aborted = false;
};

/// Decides the weights for one keyframe from its observation.
using ActionSource = std::function<Vec2(const VecX& obs)>;

/// One pass over a segment with the backend started from the known first
/// state (IMU already initialized). Without an action source the family
/// defaults are used.
inline EpisodeResult run_episode(const EpisodeSegment& seg, const BackendParams& bp, const Td3Agent& mapping,
                                 const ActionSource& source, double r_max = 100.0) {
  EpisodeResult res;
  BackendParams p = bp;
  p.assume_imu_initialized = true;
  const auto& tp = mapping.params();
  auto obs_of = [&](size_t i) {
    return network_input(build_observation(seg.inputs[i].visual, tp.grid_rows, tp.grid_cols, p.camera));
  };
  try {
    Backend backend(p, seg.start);
    backend.add_keyframe(seg.inputs[0]);
    VecX obs = obs_of(1);
    for (size_t i = 1; i < seg.inputs.size(); ++i) {
      Vec2 a = source ? source(obs) : mapping.from_weights(WeightAction{});
      const WeightAction w = source ? mapping.to_weights(a) : WeightAction{};
      const auto rep = backend.add_keyframe(seg.inputs[i], w);
      if (rep.vio && !std::isfinite(rep.vio->final_cost)) throw std::runtime_error("non-finite cost");
      const auto& ks = backend.keyframes();
      const double r = reward(ks[i - 1].state.pose(), ks[i].state.pose(), seg.truth[i - 1], seg.truth[i], r_max);
      res.errors.push_back(
          between(between(seg.truth[i - 1], seg.truth[i]), between(ks[i - 1].state.pose(), ks[i].state.pose()))
              .translation.norm());
      const bool done = i + 1 == seg.inputs.size();
      VecX next = done ? obs : obs_of(i + 1);
      res.transitions.push_back({obs, a, r, next, done});
      res.rewards.push_back(r);
      res.actions.push_back(w);
      res.total_reward += r;
      obs = next;
    }
    for (const auto& s : backend.keyframes()) res.states.push_back(s.state);
  } catch (const std::exception&) {
    res = EpisodeResult{};
    res.aborted = true;
  }
  return res;
}

// --- training --------------------------------------------------------------------

struct TrainingParams {
  int epochs = 3;
  int episodes_per_epoch = 25;
  int warmup_episodes = 10;  // uniformly random actions before the actor is used
  int updates_per_step = 2;
  int test_episodes = 8;     // 0: all test segments
};

struct EpochRecord {
  int epoch = 0;
  double mean_test_reward = 0.0;
  double best_so_far = 0.0;
};

struct TrainingOutcome {
  std::vector<EpochRecord> epochs;
  std::string best_checkpoint;  // serialized agent at the best epoch
  int best_epoch = 0;
};

/// Mean per-step reward of the deterministic policy over test segments.
inline double evaluate_policy(Td3Agent& agent, const std::vector<EpisodeSegment>& test, const BackendParams& bp,
                              int limit = 0, bool use_agent = true) {
  double sum = 0.0;
  int steps = 0;
  const size_t n = limit > 0 ? std::min<size_t>(limit, test.size()) : test.size();
  for (size_t i = 0; i < n; ++i) {
    ActionSource src;
    if (use_agent) src = [&](const VecX& o) { return agent.act_normalized(o, false); };
    const auto r = run_episode(test[i], bp, agent, src);
    if (r.aborted) continue;
    sum += r.total_reward;
    steps += static_cast<int>(r.rewards.size());
  }
  return steps ? sum / steps : 0.0;
}

/// RMSE of the per-step translational relative error over the test segments,
/// using the same estimates the rewards are computed from.
inline double episode_rpe_rmse(Td3Agent& agent, const std::vector<EpisodeSegment>& test, const BackendParams& bp,
                               bool use_agent = true) {
  double sq = 0.0;
  size_t n = 0;
  for (const auto& seg : test) {
    ActionSource src;
    if (use_agent) src = [&](const VecX& o) { return agent.act_normalized(o, false); };
    const auto r = run_episode(seg, bp, agent, src);
    if (r.aborted) continue;
    for (double e : r.errors) sq += e * e;
    n += r.errors.size();
  }
  if (n == 0) throw std::runtime_error("episode_rpe_rmse: every test episode aborted");
  return std::sqrt(sq / n);
}

/// Episodic training on randomly drawn segments; after each epoch the
/// deterministic policy is scored on the test segments. `first_epoch`
/// continues numbering after a resume.
inline TrainingOutcome train_agent(Td3Agent& agent, ReplayBuffer& buffer, const std::vector<EpisodeSegment>& train,
                                   const std::vector<EpisodeSegment>& test, const BackendParams& bp,
                                   const TrainingParams& tp, int first_epoch = 1,
                                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (train.empty()) throw std::invalid_argument("train_agent: no training segments");
  TrainingOutcome out;
  double best = -1.0;
  int episode = 0;
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int e = 0; e < tp.epochs; ++e) {
    for (int k = 0; k < tp.episodes_per_epoch; ++k, ++episode) {
      std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
      const auto& seg = train[pick(agent.rng())];
      const bool warm = episode < tp.warmup_episodes;
      ActionSource src = [&](const VecX& o) -> Vec2 {
        if (warm) return Vec2(uni(agent.rng()), uni(agent.rng()));
        return agent.act_normalized(o, true);
      };
      const auto r = run_episode(seg, bp, agent, src);
      if (r.aborted) continue;
      for (const auto& t : r.transitions) {
        buffer.push(t);
        if (buffer.size() < agent.params().batch) continue;
        for (int u = 0; u < tp.updates_per_step; ++u) {
          const auto st = agent.train_step(buffer);
          if (!std::isfinite(st.critic1_loss) || !std::isfinite(st.critic2_loss) ||
              (st.actor_loss && !std::isfinite(*st.actor_loss))) {
            throw std::runtime_error("train_agent: non-finite loss at epoch " + std::to_string(first_epoch + e));
          }
        }
      }
    }
    EpochRecord rec;
    rec.epoch = first_epoch + e;
    rec.mean_test_reward = evaluate_policy(agent, test, bp, tp.test_episodes);
    if (rec.mean_test_reward > best) {
      best = rec.mean_test_reward;
      std::ostringstream ss;
      agent.save(ss);
      out.best_checkpoint = ss.str();
      out.best_epoch = rec.epoch;
    }
    rec.best_so_far = best;
    out.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return out;
}

inline void write_reward_csv(std::ostream& out, const std::vector<EpochRecord>& rows, bool header = true) {
  if (header) out << "epoch,mean_test_reward,best_so_far\n";
  out << std::setprecision(9);
  for (const auto& r : rows) out << r.epoch << ',' << r.mean_test_reward << ',' << r.best_so_far << '\n';
}

/// Backend weight policy driven by the deterministic actor.
inline WeightPolicy agent_policy(Td3Agent& agent, const CameraIntrinsics& camera) {
  return [&agent, camera](const KeyframeMeasurements& m) {
    const auto& p = agent.params();
    return agent.act(network_input(build_observation(m, p.grid_rows, p.grid_cols, camera)), false);
  };
}

}  // namespace msf
