#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "msf/adaptive_weights.hpp"
#include "scenarios.hpp"

using namespace msf;

namespace {

Transition random_transition(std::mt19937_64& rng, int obs) {
  std::normal_distribution<double> g(0.0, 1.0);
  Transition t;
  t.obs = VecX(obs);
  t.next_obs = VecX(obs);
  for (int i = 0; i < obs; ++i) {
    t.obs[i] = g(rng);
    t.next_obs[i] = g(rng);
  }
  t.action = Vec2(std::tanh(g(rng)), std::tanh(g(rng)));
  t.reward = 10.0 + 5.0 * g(rng);
  t.done = g(rng) > 1.0;
  return t;
}

Td3Params small_params() {
  Td3Params p;
  p.grid_rows = 2;
  p.grid_cols = 2;
  p.hidden = {16, 16};
  p.batch = 8;
  return p;
}

/// Central differences of a scalar loss sum(c .* f(x)) with respect to the
/// flat parameters.
VecX numeric_parameter_gradient(Mlp net, const MatX& x, const MatX& c) {
  const VecX p0 = net.parameters();
  VecX g(p0.size());
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < p0.size(); ++i) {
    VecX p = p0;
    p[i] += h;
    net.set_parameters(p);
    const double up = net.forward(x).cwiseProduct(c).sum();
    p[i] -= 2 * h;
    net.set_parameters(p);
    const double down = net.forward(x).cwiseProduct(c).sum();
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(BuildObservation, Empty) {
  const auto o = build_observation(std::vector<FeatureMotion>{}, 4, 6, 640, 480);
  ASSERT_EQ(o.size(), 72u);
  for (double v : o.cells) EXPECT_EQ(v, 0.0);
}

TEST(BuildObservation, SingleFeatureAtCenter) {
  const auto o = build_observation({FeatureMotion{Vec2(320, 240), Vec2(2, -1)}}, 4, 6, 640, 480);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 6; ++c) {
      if (r == 2 && c == 3) {
        EXPECT_EQ(o.count(r, c), 1.0);
        EXPECT_EQ(o.dx(r, c), 2.0);
        EXPECT_EQ(o.dy(r, c), -1.0);
      } else {
        EXPECT_EQ(o.count(r, c), 0.0);
        EXPECT_EQ(o.dx(r, c), 0.0);
        EXPECT_EQ(o.dy(r, c), 0.0);
      }
    }
  }
}

TEST(BuildObservation, UniformMotion) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ux(0, 640), uy(0, 480);
  std::vector<FeatureMotion> m;
  const Vec2 motion(3.7, -1.3);
  for (int i = 0; i < 100; ++i) m.push_back({Vec2(ux(rng), uy(rng)), motion});
  const auto o = build_observation(m, 4, 6, 640, 480);
  double total = 0.0;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 6; ++c) {
      total += o.count(r, c);
      if (o.count(r, c) == 0.0) continue;
      EXPECT_NEAR(o.dx(r, c), motion.x(), 1e-9);
      EXPECT_NEAR(o.dy(r, c), motion.y(), 1e-9);
    }
  }
  EXPECT_EQ(total, 100.0);
  EXPECT_THROW(build_observation(m, 0, 6, 640, 480), std::invalid_argument);
}

TEST(Reward, ReciprocalOfTranslationError) {
  const Pose a(exp_so3(Vec3(0, 0, 0.3)), Vec3(1, 2, 0));
  const Pose b(exp_so3(Vec3(0, 0, 0.5)), Vec3(4, 3, 0));
  EXPECT_EQ(reward(a, b, a, b), 100.0);
  // Offsets expressed in the first frame show up unchanged in the relative motion.
  Pose b_half = b;
  b_half.translation += a.rotation * Vec3(0.5, 0, 0);
  EXPECT_NEAR(reward(a, b_half, a, b), 2.0, 1e-12);
  Pose b_quarter = b;
  b_quarter.translation += a.rotation * Vec3(0, 0.25, 0);
  EXPECT_NEAR(reward(a, b_quarter, a, b), 4.0, 1e-12);
  double last = 1e9;
  for (double e : {0.011, 0.05, 0.1, 0.5, 2.0}) {
    Pose bb = b;
    bb.translation += a.rotation * Vec3(e, 0, 0);
    const double r = reward(a, bb, a, b);
    EXPECT_LT(r, last);
    last = r;
  }
}

TEST(Mlp, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (auto out : {Mlp::Output::linear, Mlp::Output::tanh}) {
    Mlp net({5, 7, 6, 3}, out, rng);
    MatX x = MatX::Random(5, 4), c = MatX::Random(3, 4);
    Mlp::Tape t;
    net.forward(x, t);
    VecX analytic;
    net.backward(t, c, &analytic);
    const VecX numeric = numeric_parameter_gradient(net, x, c);
    for (Eigen::Index i = 0; i < numeric.size(); ++i) {
      EXPECT_NEAR(analytic[i], numeric[i], 1e-4 * std::max(1.0, std::abs(numeric[i]))) << "parameter " << i;
    }
  }
}

TEST(Mlp, InputGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  Mlp net({4, 8, 8, 1}, Mlp::Output::linear, rng);
  MatX x = MatX::Random(4, 1);
  Mlp::Tape t;
  net.forward(x, t);
  const MatX analytic = net.backward(t, MatX::Ones(1, 1), nullptr);
  for (int i = 0; i < 4; ++i) {
    MatX up = x, down = x;
    up(i, 0) += 1e-6;
    down(i, 0) -= 1e-6;
    const double numeric = (net.forward(up)(0, 0) - net.forward(down)(0, 0)) / 2e-6;
    EXPECT_NEAR(analytic(i, 0), numeric, 1e-4 * std::max(1.0, std::abs(numeric)));
  }
}

TEST(Mlp, CheckpointRoundTrip) {
  std::mt19937_64 rng(9);
  const Mlp net({3, 4, 2}, Mlp::Output::tanh, rng);
  std::stringstream ss;
  net.write(ss);
  const Mlp back = Mlp::read(ss);
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.output(), net.output());
  EXPECT_EQ(back.parameters(), net.parameters());
  std::stringstream bad("garbage");
  EXPECT_THROW(Mlp::read(bad), std::runtime_error);
}

TEST(ReplayBuffer, FifoAndSampling) {
  ReplayBuffer b(5);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 8; ++i) {
    Transition t;
    t.reward = i;
    b.push(t);
  }
  ASSERT_EQ(b.size(), 5u);
  std::multiset<double> kept;
  for (size_t i = 0; i < b.size(); ++i) kept.insert(b[i].reward);
  EXPECT_EQ(kept, (std::multiset<double>{3, 4, 5, 6, 7}));
  for (int trial = 0; trial < 20; ++trial) {
    const auto idx = b.sample_indices(4, rng);
    EXPECT_EQ(std::set<size_t>(idx.begin(), idx.end()).size(), 4u);
  }
  EXPECT_THROW(b.sample_indices(6, rng), std::invalid_argument);
  EXPECT_THROW(ReplayBuffer(0), std::invalid_argument);
}

TEST(Td3Agent, TargetsStartAsCopies) {
  Td3Agent a(small_params());
  EXPECT_EQ(a.actor_target().parameters(), a.actor().parameters());
  EXPECT_EQ(a.critic1_target().parameters(), a.critic1().parameters());
  EXPECT_EQ(a.critic2_target().parameters(), a.critic2().parameters());
  EXPECT_NE(a.critic1().parameters(), a.critic2().parameters());
}

TEST(Td3Agent, ZeroActorGivesMidpointAndIsDeterministic) {
  Td3Agent a(small_params());
  a.mutable_actor().set_parameters(VecX::Zero(a.actor().parameter_count()));
  const VecX obs = VecX::Random(a.observation_size());
  const WeightAction w = a.act(obs, false);
  EXPECT_NEAR(w.visual, std::sqrt(0.1 * 10.0), 1e-12);
  EXPECT_NEAR(w.lidar, std::sqrt(0.1 * 10.0), 1e-12);
  const Vec2 n = a.act_normalized(obs, false);
  EXPECT_EQ(n, Vec2::Zero());

  Td3Agent b(small_params());
  const Vec2 x = b.act_normalized(obs, false), y = b.act_normalized(obs, false);
  EXPECT_EQ(x, y);
  const auto back = b.from_weights(b.to_weights(x));
  EXPECT_NEAR(back[0], x[0], 1e-12);
  EXPECT_NEAR(back[1], x[1], 1e-12);
  for (double v : {-1.0, 1.0}) {
    const auto wb = b.to_weights(Vec2(v, v));
    EXPECT_NEAR(wb.visual, v < 0 ? 0.1 : 10.0, 1e-12);
  }
}

TEST(Td3Agent, ExplorationNoiseHasConfiguredSigma) {
  auto p = small_params();
  p.explore_sigma = 0.1;
  Td3Agent a(p);
  a.mutable_actor().set_parameters(VecX::Zero(a.actor().parameter_count()));
  const VecX obs = VecX::Zero(a.observation_size());
  double sq = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) sq += a.act_normalized(obs, true).squaredNorm();
  const double sigma = std::sqrt(sq / (2.0 * n));
  EXPECT_NEAR(sigma, 0.1, 0.01);
}

TEST(Td3Agent, ZeroDiscountTargetIsReward) {
  auto p = small_params();
  p.gamma = 0.0;
  p.reward_scale = 1.0;
  Td3Agent a(p);
  ReplayBuffer b;
  std::mt19937_64 rng(2);
  std::set<double> rewards;
  for (int i = 0; i < 8; ++i) {
    auto t = random_transition(rng, a.observation_size());
    rewards.insert(t.reward);
    b.push(t);
  }
  for (int step = 0; step < 5; ++step) {
    const auto st = a.train_step(b);
    for (Eigen::Index i = 0; i < st.target.size(); ++i) EXPECT_EQ(rewards.count(st.target[i]), 1u);
  }
}

TEST(Td3Agent, TargetUsesSmallerCritic) {
  auto p = small_params();
  Td3Agent a(p);
  ReplayBuffer b;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 32; ++i) {
    auto t = random_transition(rng, a.observation_size());
    t.reward = 5.0;
    t.done = false;
    b.push(t);
  }
  for (int step = 0; step < 10; ++step) {
    const auto st = a.train_step(b);
    ASSERT_EQ(st.target.size(), static_cast<Eigen::Index>(p.batch));
    for (Eigen::Index i = 0; i < st.target.size(); ++i) {
      const double expected = p.reward_scale * 5.0 + p.gamma * std::min(st.target_q1[i], st.target_q2[i]);
      EXPECT_NEAR(st.target[i], expected, 1e-12);
    }
  }
}

TEST(Td3Agent, SingleTransitionFixedPoint) {
  auto p = small_params();
  p.batch = 1;
  p.reward_scale = 1.0;
  Td3Agent a(p);
  ReplayBuffer b;
  Transition t;
  t.obs = VecX::Constant(a.observation_size(), 0.5);
  t.next_obs = t.obs;
  t.action = Vec2(0.2, -0.3);
  t.reward = 1.0;
  t.done = true;
  b.push(t);
  for (int i = 0; i < 2000; ++i) a.train_step(b);
  VecX sa(a.observation_size() + 2);
  sa << t.obs, t.action;
  EXPECT_NEAR(a.critic1().forward(sa)(0, 0), 1.0, 1e-2);
  EXPECT_NEAR(a.critic2().forward(sa)(0, 0), 1.0, 1e-2);
}

TEST(Td3Agent, SoftUpdatesAreConvexCombinations) {
  auto p = small_params();
  p.policy_delay = 1;
  p.tau = 0.05;
  Td3Agent a(p);
  ReplayBuffer b;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 16; ++i) b.push(random_transition(rng, a.observation_size()));
  VecX expected_actor = a.actor_target().parameters(), expected_c1 = a.critic1_target().parameters();
  for (int k = 0; k < 20; ++k) {
    a.train_step(b);
    expected_actor = p.tau * a.actor().parameters() + (1 - p.tau) * expected_actor;
    expected_c1 = p.tau * a.critic1().parameters() + (1 - p.tau) * expected_c1;
  }
  EXPECT_LT((a.actor_target().parameters() - expected_actor).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.critic1_target().parameters() - expected_c1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Td3Agent, PolicyDelay) {
  auto p = small_params();
  p.policy_delay = 3;
  Td3Agent a(p);
  ReplayBuffer b;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 16; ++i) b.push(random_transition(rng, a.observation_size()));
  for (int k = 1; k <= 6; ++k) EXPECT_EQ(a.train_step(b).actor_loss.has_value(), k % 3 == 0);
}

TEST(Td3Agent, FixedSeedIsBitReproducible) {
  auto train = [] {
    Td3Agent a(small_params());
    ReplayBuffer b;
    std::mt19937_64 rng(11);
    for (int i = 0; i < 40; ++i) {
      b.push(random_transition(rng, a.observation_size()));
      if (b.size() >= 8) a.train_step(b);
    }
    std::ostringstream ss;
    a.save(ss);
    return ss.str();
  };
  EXPECT_EQ(train(), train());
}

TEST(Td3Agent, CheckpointRoundTrip) {
  Td3Agent a(small_params());
  std::stringstream ss;
  a.save(ss);
  auto p = small_params();
  p.seed = 99;
  Td3Agent b(p);
  EXPECT_NE(b.actor().parameters(), a.actor().parameters());
  b.load(ss);
  EXPECT_EQ(b.actor().parameters(), a.actor().parameters());
  EXPECT_EQ(b.critic2_target().parameters(), a.critic2_target().parameters());
  std::stringstream bad("not a checkpoint at all");
  EXPECT_THROW(b.load(bad), std::runtime_error);
  std::stringstream other;
  Td3Agent(Td3Params{}).save(other);
  EXPECT_THROW(b.load(other), std::runtime_error);
}

namespace {

struct EpisodeFixture {
  std::vector<EpisodeSegment> segments;
  BackendParams backend;
};

const EpisodeFixture& episode_fixture() {
  static const EpisodeFixture f = [] {
    auto c = scenarios::short_drive();
    const Dataset d = simulate(c);
    const auto cfg = scenarios::pipeline_for(c);
    EpisodeFixture out;
    out.backend = cfg.backend;
    out.segments = make_segments(prepare_inputs(d, cfg), d.world.ground_truth, c.rates.imu);
    return out;
  }();
  return f;
}

}  // namespace

TEST(RunEpisode, DefaultsReproduceBackend) {
  const auto& f = episode_fixture();
  ASSERT_GE(f.segments.size(), 2u);
  const auto& seg = f.segments[1];
  Td3Agent agent;
  const auto r = run_episode(seg, f.backend, agent, {});
  ASSERT_FALSE(r.aborted);
  EXPECT_EQ(r.transitions.size(), 10u);
  EXPECT_TRUE(r.transitions.back().done);
  for (size_t i = 0; i + 1 < r.transitions.size(); ++i) EXPECT_FALSE(r.transitions[i].done);

  // Each step is scored on the estimate available right after it.
  auto bp = f.backend;
  bp.assume_imu_initialized = true;
  Backend backend(bp, seg.start);
  backend.add_keyframe(seg.inputs[0]);
  double total = 0.0;
  for (size_t i = 1; i < seg.inputs.size(); ++i) {
    backend.add_keyframe(seg.inputs[i]);
    const auto& ks = backend.keyframes();
    const double expected = reward(ks[i - 1].state.pose(), ks[i].state.pose(), seg.truth[i - 1], seg.truth[i]);
    EXPECT_EQ(r.rewards[i - 1], expected) << "step " << i;
    total += expected;
  }
  ASSERT_EQ(r.states.size(), backend.keyframes().size());
  for (size_t i = 0; i < r.states.size(); ++i) {
    EXPECT_EQ(r.states[i].position, backend.keyframes()[i].state.position);
  }
  EXPECT_DOUBLE_EQ(total, r.total_reward);
}

TEST(RunEpisode, AgentActionsAreApplied) {
  const auto& f = episode_fixture();
  Td3Agent agent;
  const auto r = run_episode(f.segments[0], f.backend, agent,
                             [&](const VecX& o) { return agent.act_normalized(o, false); });
  ASSERT_EQ(r.actions.size(), 10u);
  for (size_t i = 0; i < r.actions.size(); ++i) {
    const auto w = agent.to_weights(r.transitions[i].action);
    EXPECT_EQ(w.visual, r.actions[i].visual);
    EXPECT_EQ(w.lidar, r.actions[i].lidar);
    EXPECT_GE(w.visual, 0.1);
    EXPECT_LE(w.lidar, 10.0);
  }
}

TEST(TrainAgent, CsvRowsAndBestSoFar) {
  const auto& f = episode_fixture();
  auto p = small_params();
  p.grid_rows = 4;
  p.grid_cols = 6;
  Td3Agent agent(p);
  ReplayBuffer buffer;
  TrainingParams tp;
  tp.epochs = 3;
  tp.episodes_per_epoch = 1;
  tp.warmup_episodes = 1;
  tp.updates_per_step = 1;
  tp.test_episodes = 1;
  std::vector<EpisodeSegment> train(f.segments.begin(), f.segments.begin() + 1);
  std::vector<EpisodeSegment> test(f.segments.begin() + 1, f.segments.begin() + 2);
  const auto out = train_agent(agent, buffer, train, test, f.backend, tp, 4);
  ASSERT_EQ(out.epochs.size(), 3u);
  for (size_t i = 0; i < out.epochs.size(); ++i) {
    EXPECT_EQ(out.epochs[i].epoch, static_cast<int>(4 + i));
    if (i > 0) EXPECT_GE(out.epochs[i].best_so_far, out.epochs[i - 1].best_so_far);
  }
  EXPECT_FALSE(out.best_checkpoint.empty());
  std::ostringstream csv;
  write_reward_csv(csv, out.epochs);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,mean_test_reward,best_so_far");
}
