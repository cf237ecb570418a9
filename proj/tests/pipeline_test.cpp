#include "latentpilot/envs.hpp"
#include "latentpilot/pipeline.hpp"
#include "latentpilot/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

lp::ChannelLimits random_limits(lp::Rng& rng, int n) {
  lp::ChannelLimits lim{VectorXd(n), VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    lim.lo[i] = rng.uniform(-10.0, 5.0);
    lim.hi[i] = lim.lo[i] + rng.uniform(0.1, 20.0);
  }
  return lim;
}

TEST(Normalize, EndpointsAndMidpoint) {
  lp::Rng rng(1);
  const lp::ChannelLimits lim = random_limits(rng, 4);
  EXPECT_TRUE(lp::normalize(lim.hi, lim).isApprox(VectorXd::Ones(4), 1e-15));
  EXPECT_TRUE(lp::normalize(lim.lo, lim).isApprox(-VectorXd::Ones(4), 1e-15));
  EXPECT_LT(lp::normalize(0.5 * (lim.lo + lim.hi), lim).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Normalize, RoundTripIsExactToMachinePrecision) {
  lp::Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const lp::ChannelLimits lim = random_limits(rng, 5);
    const VectorXd x = rng.normal_vector(5) * 10.0;
    EXPECT_LT((lp::denormalize(lp::normalize(x, lim), lim) - x).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Normalize, RejectsInvalidLimits) {
  const lp::ChannelLimits flat{VectorXd::Ones(2), VectorXd::Ones(2)};
  EXPECT_THROW(lp::normalize(VectorXd::Zero(2), flat), std::invalid_argument);
  const lp::ChannelLimits ok{VectorXd::Zero(2), VectorXd::Ones(2)};
  EXPECT_THROW(lp::normalize(VectorXd::Zero(3), ok), std::invalid_argument);
}

TEST(Normalize, ClippedVariantCountsOutliers) {
  const lp::ChannelLimits lim{VectorXd::Zero(2), VectorXd::Ones(2)};
  MatrixXd x(2, 2);
  x << 0.5, 2.0, -1.0, 0.25;
  EXPECT_EQ(lp::normalize_rows_clipped(x, lim), 2);
  EXPECT_EQ(x(0, 1), 1.0);
  EXPECT_EQ(x(1, 0), -1.0);
  EXPECT_EQ(x(0, 0), 0.0);
}

TEST(SmoothActions, Examples) {
  const VectorXd c = (VectorXd(2) << 0.3, -0.7).finished();
  const std::vector<VectorXd> constant(6, c);
  EXPECT_TRUE(lp::smooth_actions(constant).isApprox(c, 1e-15));

  std::vector<VectorXd> ramp(6, VectorXd::Zero(1));
  ramp.back()[0] = 6.0;
  EXPECT_DOUBLE_EQ(lp::smooth_actions(ramp)[0], 1.0);

  const std::vector<VectorXd> short_history{VectorXd::Constant(1, 2.0), VectorXd::Constant(1, 8.0)};
  EXPECT_DOUBLE_EQ(lp::smooth_actions(short_history)[0], (5 * 2.0 + 8.0) / 6.0);
  EXPECT_THROW(lp::smooth_actions(std::vector<VectorXd>{}), std::invalid_argument);
}

TEST(SmoothActions, OutputInsideConvexHull) {
  lp::Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<VectorXd> h;
    for (int k = 0; k < 9; ++k) h.push_back(rng.normal_vector(3).array().tanh().matrix());
    const VectorXd out = lp::smooth_actions(h);
    for (int d = 0; d < 3; ++d) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t k = h.size() - 6; k < h.size(); ++k) {
        lo = std::min(lo, h[k][d]);
        hi = std::max(hi, h[k][d]);
      }
      EXPECT_GE(out[d], lo - 1e-15);
      EXPECT_LE(out[d], hi + 1e-15);
    }
  }
}

TEST(ActionSmoother, MatchesFunctionalForm) {
  lp::Rng rng(4);
  lp::ActionSmoother smoother(2);
  std::vector<VectorXd> all(6, VectorXd::Zero(2));
  for (int t = 0; t < 20; ++t) {
    const VectorXd cmd = rng.normal_vector(2);
    all.push_back(cmd);
    EXPECT_TRUE(smoother.push(cmd).isApprox(lp::smooth_actions(all), 1e-15));
  }
}

TEST(FiniteDiffVelocity, ConstantAndLinearMotion) {
  const double dt = 0.072;
  MatrixXd still = MatrixXd::Constant(10, 3, 0.7);
  EXPECT_TRUE(lp::finite_diff_velocity(still, dt).isZero(0.0));

  const Eigen::RowVector3d c(0.5, -1.0, 2.0);
  MatrixXd linear(10, 3);
  for (int t = 0; t < 10; ++t) linear.row(t) = t * dt * c;
  const MatrixXd v = lp::finite_diff_velocity(linear, dt);
  for (int t = 0; t < 10; ++t) EXPECT_LT((v.row(t) - c).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(lp::finite_diff_velocity(MatrixXd::Zero(1, 3), dt), std::invalid_argument);
}

TEST(FiniteDiffVelocity, QuadraticMotionErrorIsFirstOrder) {
  const double accel = 1.7;
  auto max_error = [&](double dt) {
    MatrixXd p(50, 1);
    for (int t = 0; t < 50; ++t) p(t, 0) = 0.5 * accel * (t * dt) * (t * dt);
    const MatrixXd v = lp::finite_diff_velocity(p, dt);
    double worst = 0.0;
    for (int t = 1; t < 50; ++t) worst = std::max(worst, std::abs(v(t, 0) - accel * t * dt));
    return worst;
  };
  const double e1 = max_error(0.072), e2 = max_error(0.036);
  EXPECT_NEAR(e1, 0.5 * accel * 0.072, 1e-12);
  EXPECT_NEAR(e1 / e2, 2.0, 1e-9);
}

Eigen::Matrix3d random_rotation(lp::Rng& rng) {
  const Eigen::Vector4d q = rng.normal_vector(4).normalized();
  return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
}

TEST(Rotation6d, IdentityEncoding) {
  Eigen::Matrix<double, 6, 1> expect;
  expect << 1, 0, 0, 0, 1, 0;
  EXPECT_EQ(lp::rot_to_6d(Eigen::Matrix3d::Identity()), expect);
}

TEST(Rotation6d, RoundTripOverRandomRotations) {
  lp::Rng rng(5);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Eigen::Matrix3d r = random_rotation(rng);
    worst = std::max(worst, (lp::six_d_to_rot(lp::rot_to_6d(r)) - r).norm());
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Rotation6d, InverseAlwaysYieldsRotation) {
  lp::Rng rng(6);
  for (int i = 0; i < 2000; ++i) {
    const Eigen::Matrix<double, 6, 1> v = rng.normal_vector(6);
    const Eigen::Matrix3d r = lp::six_d_to_rot(v);
    EXPECT_LT((r.transpose() * r - Eigen::Matrix3d::Identity()).norm(), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
  }
}

TEST(Rotation6d, RejectsDegenerateColumns) {
  Eigen::Matrix<double, 6, 1> zero_first;
  zero_first << 0, 0, 0, 0, 1, 0;
  EXPECT_THROW(lp::six_d_to_rot(zero_first), std::invalid_argument);
  Eigen::Matrix<double, 6, 1> parallel;
  parallel << 1, 2, 3, 2, 4, 6;
  EXPECT_THROW(lp::six_d_to_rot(parallel), std::invalid_argument);
}

TEST(Rotation6d, YawHelpersAndWrap) {
  for (double yaw : {-3.0, -1.0, 0.0, 0.5, 3.1}) EXPECT_NEAR(lp::six_d_to_yaw(lp::yaw_to_6d(yaw)), yaw, 1e-12);
  EXPECT_NEAR(lp::wrap_angle(3 * std::numbers::pi), std::numbers::pi, 1e-12);
  EXPECT_NEAR(lp::wrap_angle(-std::numbers::pi), std::numbers::pi, 1e-12);
  EXPECT_NEAR(lp::wrap_angle(7.0), 7.0 - 2 * std::numbers::pi, 1e-12);
}

TEST(LidarFilter, ConstantAndRamp) {
  const std::vector<double> constant(5, 2.5);
  const lp::RangeEstimate c = lp::lidar_filter(constant);
  EXPECT_DOUBLE_EQ(c.range, 2.5);
  EXPECT_DOUBLE_EQ(c.rate, 0.0);

  const std::vector<double> ramp{10, 11, 12, 13, 14, 15, 16};
  const lp::RangeEstimate r = lp::lidar_filter(ramp);
  EXPECT_NEAR(r.rate, 1.0, 1e-12);
  EXPECT_NEAR(r.range, (1 * 12 + 2 * 13 + 3 * 14 + 4 * 15 + 5 * 16) / 15.0, 1e-12);

  const std::vector<double> single{3.0};
  EXPECT_DOUBLE_EQ(lp::lidar_filter(single).range, 3.0);
  EXPECT_DOUBLE_EQ(lp::lidar_filter(single).rate, 0.0);
}

TEST(LidarFilter, OutputWithinWindowRange) {
  lp::Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> w(5);
    for (double& x : w) x = rng.uniform(0.0, 4.0);
    const double out = lp::lidar_filter(w).range;
    EXPECT_GE(out, *std::min_element(w.begin(), w.end()));
    EXPECT_LE(out, *std::max_element(w.begin(), w.end()));
  }
}

lp::Episode simulated_episode(lp::Rng& rng, int steps, bool yaw_enabled = true) {
  lp::CageConfig cage;
  cage.yaw_enabled = yaw_enabled;
  lp::CageState s = lp::cage_reset(cage, rng);
  lp::Observer observer(lp::ObsConfig{}, cage);
  lp::ActionSmoother smoother(cage.action_dim());
  lp::Episode e;
  e.id = "ep" + std::to_string(rng.uniform_int(0, 1 << 30));
  e.dt = cage.dt;
  e.obs_channels = lp::observation_channels(lp::ObsMode::FullState);
  e.goal = s.goal;
  e.obs.resize(steps, static_cast<Eigen::Index>(e.obs_channels.size()));
  e.actions.resize(steps, cage.action_dim());
  e.commands.resize(steps, cage.action_dim());
  e.rewards.resize(steps);
  e.state.resize(steps, lp::kStateColumns);
  for (int t = 0; t < steps; ++t) {
    const VectorXd cmd = rng.normal_vector(cage.action_dim()).array().tanh().matrix();
    const VectorXd u = smoother.push(cmd);
    e.obs.row(t) = observer.observe(s, rng).transpose();
    e.state.row(t) = s.state_row().transpose();
    e.commands.row(t) = cmd.transpose();
    e.actions.row(t) = u.transpose();
    const lp::CageStep step = lp::cage_step(s, u, cage);
    e.rewards[t] = step.reward;
    s = step.state;
  }
  return e;
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("latentpilot_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

using EpisodeStore = TempDir;

TEST_F(EpisodeStore, QuantizedEpisodeRoundTripsBitExact) {
  lp::Rng rng(8);
  lp::Episode e = simulated_episode(rng, 30);
  lp::quantize(e);
  lp::write_episode(dir_ / "one.bin", e);
  const lp::Episode back = lp::read_episode(dir_ / "one.bin");
  EXPECT_EQ(back.obs_channels, e.obs_channels);
  EXPECT_EQ(back.obs, e.obs);
  EXPECT_EQ(back.actions, e.actions);
  EXPECT_EQ(back.commands, e.commands);
  EXPECT_EQ(back.rewards, e.rewards);
  EXPECT_EQ(back.state, e.state);
}

TEST_F(EpisodeStore, DatasetAppendLoadAndLimits) {
  lp::Rng rng(9);
  lp::Dataset data(dir_);
  EXPECT_EQ(data.size(), 0u);
  std::vector<lp::Episode> written;
  for (int i = 0; i < 3; ++i) {
    lp::Episode e = simulated_episode(rng, 20 + i);
    e.id = "episode_" + std::to_string(i);
    e.metadata = {{"seed", i}};
    lp::quantize(e);
    data.append(e);
    written.push_back(e);
  }
  EXPECT_EQ(data.size(), 3u);
  EXPECT_EQ(data.total_steps(), 20u + 21u + 22u);
  const std::vector<lp::Episode> loaded = lp::Dataset(dir_).load();
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].id, written[i].id);
    EXPECT_EQ(loaded[i].obs, written[i].obs);
    EXPECT_EQ(loaded[i].goal.position, written[i].goal.position);
    EXPECT_EQ(loaded[i].metadata, written[i].metadata);
  }

  const std::vector<std::string> channels{"a", "b"};
  const lp::ChannelLimits lim{(VectorXd(2) << -1.0, 0.0).finished(), (VectorXd(2) << 2.0, 0.5).finished()};
  data.write_limits(channels, lim);
  const lp::ChannelLimits back = data.read_limits(channels);
  EXPECT_EQ(back.lo, lim.lo);
  EXPECT_EQ(back.hi, lim.hi);
  EXPECT_THROW(data.read_limits({"a", "missing"}), std::runtime_error);
}

TEST_F(EpisodeStore, RejectsCorruptFiles) {
  std::filesystem::create_directories(dir_);
  std::ofstream(dir_ / "bad.bin") << "NOPE";
  EXPECT_THROW(lp::read_episode(dir_ / "bad.bin"), std::runtime_error);
}

TEST(Episode, ValidateCatchesShapeErrors) {
  lp::Rng rng(10);
  lp::Episode e = simulated_episode(rng, 10);
  EXPECT_NO_THROW(e.validate());
  e.rewards.conservativeResize(9);
  EXPECT_THROW(e.validate(), std::invalid_argument);
}

TEST(WindowEpisodes, LengthCoverageAndSkipping) {
  lp::Rng rng(11);
  std::vector<lp::Episode> eps;
  for (int i = 0; i < 6; ++i) eps.push_back(simulated_episode(rng, rng.uniform_int(90, 200)));
  eps.push_back(simulated_episode(rng, 30));

  const auto whole = lp::window_episodes({eps[0]}, eps[0].steps(), 10);
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_EQ(whole[0].start, 0);
  EXPECT_EQ(whole[0].length, eps[0].steps());

  const Eigen::Index length = lp::draw_window_length(rng);
  EXPECT_GE(length, 40);
  EXPECT_LE(length, 80);
  const auto windows = lp::window_episodes(eps, length, length / 2);
  std::vector<std::vector<bool>> covered;
  for (const auto& e : eps) covered.emplace_back(static_cast<std::size_t>(e.steps()), false);
  std::size_t total = 0, hit = 0;
  for (const lp::WindowRef& w : windows) {
    EXPECT_EQ(w.length, length);
    EXPECT_NE(w.episode, eps.size() - 1);
    EXPECT_LE(w.start + w.length, eps[w.episode].steps());
    for (Eigen::Index t = w.start; t < w.start + w.length; ++t) covered[w.episode][static_cast<std::size_t>(t)] = true;
  }
  for (std::size_t i = 0; i + 1 < eps.size(); ++i) {
    for (bool c : covered[i]) {
      ++total;
      hit += c;
    }
  }
  EXPECT_GE(static_cast<double>(hit) / static_cast<double>(total), 0.95);
}

// Second, independent evaluation of the cage reward.
double reference_reward(const VectorXd& s, const VectorXd& u, const lp::Goal& g, bool yaw) {
  const double dx = s[0] - g.position[0], dy = s[1] - g.position[1], dz = s[2] - g.position[2];
  double r = -(dx * dx + dy * dy + dz * dz);
  r -= 0.1 * (s[4] * s[4] + s[5] * s[5] + s[6] * s[6]);
  double uu = 0.0;
  for (Eigen::Index k = 0; k < u.size(); ++k) uu += u[k] * u[k];
  r -= 0.001 * uu;
  if (yaw) {
    double e = s[3] - g.yaw;
    if (e <= -std::numbers::pi || e > std::numbers::pi) {
      e = std::fmod(e + std::numbers::pi, 2.0 * std::numbers::pi);
      if (e <= 0.0) e += 2.0 * std::numbers::pi;
      e -= std::numbers::pi;
    }
    r -= 0.1 * e * e;
  }
  return r;
}

TEST(RelabelGoal, IdentityRelabelKeepsRewards) {
  lp::Rng rng(12);
  const lp::Episode e = simulated_episode(rng, 60);
  lp::Episode w = lp::slice(e, 10, 40);
  const VectorXd before = w.rewards;
  lp::relabel_goal(w, w.goal, lp::cage_reward_fn(true));
  EXPECT_EQ(w.rewards, before);
}

TEST(RelabelGoal, MatchesIndependentRewardEvaluation) {
  lp::Rng rng(13);
  for (const bool yaw : {true, false}) {
    const lp::Episode e = simulated_episode(rng, 80, yaw);
    lp::CageConfig cage;
    cage.yaw_enabled = yaw;
    for (int trial = 0; trial < 20; ++trial) {
      lp::Episode w = lp::slice(e, rng.uniform_int(0, 30), 50);
      const lp::Goal g = lp::draw_goal(rng, cage.goal_box(0.0));
      lp::relabel_goal(w, g, lp::cage_reward_fn(yaw));
      for (Eigen::Index t = 0; t < w.steps(); ++t) {
        EXPECT_EQ(w.rewards[t], reference_reward(w.state.row(t).transpose(), w.actions.row(t).transpose(), g, yaw));
        EXPECT_LE(w.rewards[t], 0.0);
      }
      EXPECT_EQ(w.obs(0, w.channel("goal_x")), g.position.x());
      EXPECT_EQ(w.obs(w.steps() - 1, w.channel("goal_z")), g.position.z());
      EXPECT_EQ(w.obs(0, w.channel("goal_yaw_1")), std::sin(g.yaw));
    }
  }
}

TEST(RelabelGoal, ZeroAtGoalWithRestAndRequiresState) {
  lp::Rng rng(14);
  lp::Episode w = simulated_episode(rng, 5);
  w.state.row(2) << 0.3, -0.2, 1.1, 0.4, 0.0, 0.0, 0.0;
  w.actions.row(2).setZero();
  lp::Goal g;
  g.position = Eigen::Vector3d(0.3, -0.2, 1.1);
  g.yaw = 0.4;
  lp::relabel_goal(w, g, lp::cage_reward_fn(true));
  EXPECT_EQ(w.rewards[2], 0.0);

  w.state.resize(0, 0);
  EXPECT_THROW(lp::relabel_goal(w, g, lp::cage_reward_fn(true)), std::invalid_argument);
}

}  // namespace
