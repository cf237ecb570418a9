// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--criteria 1,2,3] [--config desk.json] [--work dir]
//
// Exit status is non-zero when any selected criterion fails.

#include "latentpilot/harness.hpp"

#include "CLI11.hpp"
#include "finite_diff.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using lp::ad::Matrix;
using lp::ad::Tape;
using lp::ad::Var;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

lp::DiagGaussian random_gaussian(lp::Rng& rng, int d) {
  VectorXd std(d);
  for (int k = 0; k < d; ++k) std[k] = std::exp(rng.uniform(-2.0, 1.5));
  return lp::DiagGaussian(rng.normal_vector(d) * 2.0, std);
}

// ------------------------------------------------------------ 1: gradients

double gaussian_gradient_error(lp::Rng& rng, int which) {
  const int d = 3;
  const lp::DiagGaussian a = random_gaussian(rng, d), b = random_gaussian(rng, d);
  auto value = [&](const VectorXd& v) {
    const lp::DiagGaussian x(v.segment(0, d), v.segment(d, d)), y(v.segment(2 * d, d), v.segment(3 * d, d));
    if (which == 0) return lp::log_prob(x, y.mean());
    if (which == 1) return lp::kl_diag(x, y);
    const lp::DiagGaussian f = lp::fuse(x, y);
    return f.mean().sum() + 0.7 * f.variance().sum();
  };
  Tape tape;
  const lp::GaussianVar ga{tape.leaf(a.mean().transpose()), tape.leaf(a.std().transpose())};
  const lp::GaussianVar gb{tape.leaf(b.mean().transpose()), tape.leaf(b.std().transpose())};
  Var out;
  if (which == 0) {
    out = lp::ad::sum(lp::log_prob(ga, gb.mean)) + 0.0 * lp::ad::sum(gb.std);
  } else if (which == 1) {
    out = lp::ad::sum(lp::kl_diag(ga, gb));
  } else {
    const lp::GaussianVar f = lp::fuse(ga, gb);
    out = lp::ad::sum(f.mean) + 0.7 * lp::ad::sum(lp::ad::square(f.std));
  }
  tape.backward(out);
  VectorXd analytic(4 * d), x(4 * d);
  analytic << tape.grad(ga.mean).transpose(), tape.grad(ga.std).transpose(), tape.grad(gb.mean).transpose(),
      tape.grad(gb.std).transpose();
  x << a.mean(), a.std(), b.mean(), b.std();
  return lp::testing::relative_error(analytic, lp::testing::numeric_gradient(value, x));
}

Outcome gradients() {
  Clock clock;
  lp::Rng rng(101);
  const char* names[] = {"log_prob", "kl_diag", "fuse"};
  double worst = 0.0;
  std::string detail;
  for (int which = 0; which < 3; ++which) {
    double e = 0.0;
    for (int trial = 0; trial < 5; ++trial) e = std::max(e, gaussian_gradient_error(rng, which));
    worst = std::max(worst, e);
    detail += std::string(names[which]) + " " + fmt(e) + ", ";
  }
  for (const lp::GradientCheck& g : lp::gradient_diagnostics(101)) {
    worst = std::max(worst, g.relative_error);
    detail += g.name + " " + fmt(g.relative_error) + ", ";
  }
  const double t = clock.seconds();
  return {worst < 1e-4 && t < 60.0, detail + "max " + fmt(worst) + " (< 1e-4), " + fmt(t) + " s"};
}

// ------------------------------------------------------------ 2: Gaussian algebra

Outcome gaussian_algebra() {
  lp::Rng rng(202);
  int kl_negative = 0, dominance = 0, asymmetric = 0, limits = 0;
  for (int i = 0; i < 10000; ++i) {
    const lp::DiagGaussian q = random_gaussian(rng, 4), p = random_gaussian(rng, 4);
    if (!(lp::kl_diag(q, p) >= 0.0)) ++kl_negative;
    const lp::DiagGaussian qp = lp::fuse(q, p), pq = lp::fuse(p, q);
    for (int k = 0; k < 4; ++k) {
      if (qp.variance()[k] > std::min(q.variance()[k], p.variance()[k])) ++dominance;
      if (std::abs(qp.mean()[k] - pq.mean()[k]) > 1e-5 * (1.0 + std::abs(qp.mean()[k])) ||
          std::abs(qp.std()[k] - pq.std()[k]) > 1e-5 * qp.std()[k]) {
        ++asymmetric;
      }
    }
    // A measurement with enormous spread leaves the transition unchanged and vice versa.
    const lp::DiagGaussian wide(rng.normal_vector(4), VectorXd::Constant(4, 1e7));
    for (const auto& [informative, fused] :
         {std::pair{p, lp::fuse(wide, p)}, std::pair{q, lp::fuse(q, wide)}}) {
      const double mean_err = ((fused.mean() - informative.mean()).array().abs() /
                               (1.0 + informative.mean().array().abs()))
                                  .maxCoeff();
      const double std_err = ((fused.std() - informative.std()).array().abs() / informative.std().array()).maxCoeff();
      if (mean_err > 1e-5 || std_err > 1e-5) ++limits;
    }
    if (std::abs(lp::kl_diag(q, q)) > 1e-12) ++kl_negative;
  }
  const bool ok = kl_negative == 0 && dominance == 0 && asymmetric == 0 && limits == 0;
  return {ok, "violations over 1e4 pairs: KL " + std::to_string(kl_negative) + ", variance dominance " +
                  std::to_string(dominance) + ", symmetry " + std::to_string(asymmetric) + ", uninformative limits " +
                  std::to_string(limits)};
}

// ------------------------------------------------------------ 3: gradient stops

lp::LssmConfig small_model() {
  lp::LssmConfig c;
  c.obs_dim = 3;
  c.action_dim = 2;
  c.z_dim = 3;
  c.s_dim = 2;
  c.num_base = 3;
  c.h_dim = 2;
  c.hidden = 8;
  c.encoder_hidden = 4;
  c.init_window = 2;
  c.goal_dim = 2;
  return c;
}

lp::ActorCriticConfig small_agent() {
  lp::ActorCriticConfig c;
  c.latent_dim = 5;
  c.action_dim = 2;
  c.goal_dim = 2;
  c.hidden = 8;
  c.horizon = 3;
  c.smoothing_window = 2;
  c.actor_every = 1;
  return c;
}

lp::RolloutStart random_start(lp::Rng& rng, int batch, const lp::LssmConfig& m, const lp::ActorCriticConfig& c) {
  lp::RolloutStart s;
  s.z = rng.normal_matrix(batch, m.z_dim);
  s.s = rng.normal_matrix(batch, m.s_dim);
  s.goal = rng.normal_matrix(batch, c.goal_dim);
  for (int k = 0; k < c.smoothing_window; ++k) {
    s.commands.push_back(rng.normal_matrix(batch, c.action_dim).array().tanh().matrix());
  }
  s.executed_prev = rng.normal_matrix(batch, c.action_dim) * 0.3;
  s.executed_prev2 = rng.normal_matrix(batch, c.action_dim) * 0.3;
  return s;
}

bool all_zero(const std::vector<Matrix>& grads) {
  return std::all_of(grads.begin(), grads.end(), [](const Matrix& g) { return (g.array() == 0.0).all(); });
}

bool same_values(const lp::ParamSet& a, const lp::ParamSet& b) {
  for (int i = 0; i < a.size(); ++i) {
    if (a.value(i) != b.value(i)) return false;
  }
  return true;
}

Outcome gradient_stops() {
  lp::Rng rng(303);
  const lp::Lssm model(small_model(), rng);
  lp::Agent agent(small_agent(), rng);
  std::string detail;
  bool ok = true;

  // Reward loss reaches only the reward head.
  {
    lp::SequenceBatch batch;
    for (int t = 0; t < 5; ++t) {
      batch.obs.push_back(rng.normal_matrix(4, 3));
      batch.actions.push_back(rng.normal_matrix(4, 2).array().tanh().matrix());
      batch.rewards.push_back(rng.normal_matrix(4, 1));
    }
    batch.goal = rng.normal_matrix(4, 2);
    Tape tape;
    lp::Binding b(tape, model.params(), true);
    lp::NoiseSource noise(1);
    const lp::SequenceForward fwd = model.forward_sequence(b, batch, noise);
    tape.backward(model.reward_nll(b, fwd.latents, batch));
    const std::vector<Matrix> g = b.grads();
    const std::set<int> head(model.reward_head_ids().begin(), model.reward_head_ids().end());
    bool outside_zero = true;
    double inside = 0.0;
    for (int i = 0; i < model.params().size(); ++i) {
      if (head.count(i)) {
        inside += g[i].norm();
      } else {
        outside_zero = outside_zero && (g[i].array() == 0.0).all();
      }
    }
    ok = ok && outside_zero && inside > 0.0;
    detail += std::string("reward loss outside head ") + (outside_zero ? "zero" : "NONZERO") + "; ";
  }

  const lp::RolloutStart start = random_start(rng, 6, model.config(), agent.config());
  // Value targets never pass gradient into the target network.
  {
    Tape tape;
    lp::Binding mb(tape, model.params(), false), pb(tape, agent.policy_params(), false);
    lp::NoiseSource noise(2);
    const lp::ImaginedRollout r = lp::imagine_rollout(model, mb, agent, pb, start, 3, noise);
    Tape vtape;
    lp::Binding target(vtape, agent.target_params(), true), value(vtape, agent.value_params(), true);
    const Matrix y = lp::value_target(r, agent, target, 0.95, 3);
    vtape.backward(lp::value_loss(agent, value, r.latents[0].value(), start.goal, y));
    const bool target_zero = all_zero(target.grads());
    ok = ok && target_zero && !all_zero(value.grads());
    detail += std::string("target network ") + (target_zero ? "zero" : "NONZERO") + "; ";
  }

  // The policy objective is applied to the policy parameters only.
  {
    Tape tape;
    lp::Binding mb(tape, model.params(), false), pb(tape, agent.policy_params(), true),
        vb(tape, agent.value_params(), false);
    lp::NoiseSource noise(3);
    const lp::ImaginedRollout r = lp::imagine_rollout(model, mb, agent, pb, start, 3, noise);
    tape.backward(lp::policy_objective(r, agent, vb, 0.95, 3));
    const bool frozen_zero = all_zero(mb.grads()) && all_zero(vb.grads());
    const bool policy_moves = !all_zero(pb.grads());

    const lp::Lssm model_before = model;
    const lp::ParamSet value_before = agent.value_params();
    const lp::ParamSet policy_before = agent.policy_params();
    // Critic-only replica of the controller step on a copy of the agent.
    lp::Agent shadow = agent;
    {
      const lp::ActorCriticConfig& c = shadow.config();
      Tape rtape;
      lp::Binding rm(rtape, model.params(), false), rp(rtape, shadow.policy_params(), false);
      lp::NoiseSource n(4);
      const lp::ImaginedRollout r = lp::imagine_rollout(model, rm, shadow, rp, start, c.horizon, n);
      Tape vtape;
      lp::Binding tb(vtape, shadow.target_params(), false), vb2(vtape, shadow.value_params(), true);
      const Matrix y = lp::value_target(r, shadow, tb, c.gamma, c.horizon);
      vtape.backward(lp::value_loss(shadow, vb2, r.latents[0].value(), start.goal, y));
      lp::Adam opt(shadow.value_params(), lp::AdamConfig{c.value_lr, 0.9, 0.999, 1e-8, c.clip_norm});
      opt.step(shadow.value_params(), vb2.grads());
    }
    lp::ControllerTrainer trainer(agent);
    lp::NoiseSource n1(4);
    trainer.step(model, start, n1);
    const bool model_untouched = same_values(model_before.params(), model.params());
    const bool value_matches_critic = same_values(agent.value_params(), shadow.value_params());
    const bool policy_changed = !same_values(policy_before, agent.policy_params());
    ok = ok && frozen_zero && policy_moves && model_untouched && value_matches_critic && policy_changed &&
         !same_values(value_before, agent.value_params());
    detail += std::string("policy objective outside policy ") + (frozen_zero ? "zero" : "NONZERO") +
              ", model after controller step " + (model_untouched ? "unchanged" : "CHANGED");
  }
  return {ok, detail};
}

// ------------------------------------------------------------ 4: Kalman oracle

Outcome kalman_oracle() {
  Clock clock;
  const lp::LgssmSpec spec = lp::LgssmSpec::oscillator();
  lp::Rng rng(404);
  auto make = [&](int n) {
    std::vector<lp::LgssmEpisode> out;
    for (int i = 0; i < n; ++i) out.push_back(lp::lgssm_rollout(spec, rng.normal_matrix(200, 1), rng));
    return out;
  };
  const std::vector<lp::LgssmEpisode> train = make(50), held_out = make(10);

  lp::LssmConfig c;
  c.obs_dim = 1;
  c.action_dim = 1;
  c.z_dim = 4;
  c.s_dim = 4;
  c.num_base = 8;
  c.h_dim = 8;
  c.hidden = 32;
  c.encoder_hidden = 32;
  c.init_window = 4;
  lp::Lssm model(c, rng);
  lp::Adam opt(model.params(), lp::AdamConfig{1e-3, 0.9, 0.999, 1e-8, 100.0});
  lp::NoiseSource noise(rng.next_u64());
  const int batch = 32, length = 50, iterations = 3000, warmup = 500;
  for (int i = 1; i <= iterations; ++i) {
    std::vector<int> ep(batch), at(batch);
    for (int b = 0; b < batch; ++b) {
      ep[b] = rng.uniform_int(0, 49);
      at[b] = rng.uniform_int(0, 200 - length);
    }
    lp::SequenceBatch sb;
    for (int t = 0; t < length; ++t) {
      Matrix o(batch, 1), u(batch, 1);
      for (int b = 0; b < batch; ++b) {
        o(b, 0) = train[ep[b]].obs(at[b] + t, 0);
        u(b, 0) = train[ep[b]].controls(at[b] + t, 0);
      }
      sb.obs.push_back(o);
      sb.actions.push_back(u);
    }
    const lp::ElboResult r = lp::elbo(model, sb, noise, std::min(1.0, static_cast<double>(i) / warmup));
    opt.step(model.params(), r.grads);
  }

  lp::NoiseSource zero = lp::NoiseSource::zeros(), ensemble(rng.next_u64());
  double model1 = 0.0, kalman1 = 0.0, model10 = 0.0, kalman10 = 0.0;
  int n = 0;
  for (const lp::LgssmEpisode& e : held_out) {
    const lp::KalmanResult kf = lp::kalman_filter(spec, e.obs, e.controls);
    const int k = c.init_window;
    lp::FilterState f{lp::initial_state(model, e.obs.topRows(k), e.controls.topRows(k), zero), VectorXd::Zero(1), 0};
    for (int t = k - 1; t + 10 < 200; ++t) {
      if (t >= k) f = lp::filter_step(model, f, e.controls.row(t - 1).transpose(), e.obs.row(t).transpose(), zero);
      const std::vector<MatrixXd> paths = lp::predict_ensemble(model, f.latent, e.controls.middleRows(t, 10), 20, ensemble);
      MatrixXd mean = MatrixXd::Zero(10, 1);
      for (const MatrixXd& p : paths) mean += p / static_cast<double>(paths.size());
      const MatrixXd exact = lp::kalman_predict(spec, kf, e.controls, t, 10);
      model1 += std::pow(mean(0, 0) - e.obs(t + 1, 0), 2);
      kalman1 += std::pow(kf.predicted_obs_mean(t + 1, 0) - e.obs(t + 1, 0), 2);
      model10 += std::pow(mean(9, 0) - e.obs(t + 10, 0), 2);
      kalman10 += std::pow(exact(9, 0) - e.obs(t + 10, 0), 2);
      ++n;
    }
  }
  const double m1 = std::sqrt(model1 / n), k1 = std::sqrt(kalman1 / n);
  const double m10 = std::sqrt(model10 / n), k10 = std::sqrt(kalman10 / n);
  const double t = clock.seconds();
  const bool ok = m1 <= 1.2 * k1 && m10 <= 1.3 * k10 && t < 600.0;
  return {ok, "one-step RMSE " + fmt(m1) + " vs Kalman " + fmt(k1) + " (ratio " + fmt(m1 / k1) +
                  " <= 1.2); 10-step RMSE " + fmt(m10) + " vs " + fmt(k10) + " (ratio " + fmt(m10 / k10) +
                  " <= 1.3); " + fmt(t) + " s"};
}

// ------------------------------------------------------------ 5-7, 9: control runs

struct RunResult {
  lp::EvalReport report;
  double seconds = 0.0;
  std::int64_t env_steps = 0;
};

RunResult train_and_eval(const lp::RunConfig& config, const fs::path& dir) {
  Clock clock;
  fs::remove_all(dir);
  std::int64_t steps = 0;
  {
    lp::Trainer trainer(config, dir);
    trainer.run(nullptr);
  }
  for (const lp::Episode& e : lp::Dataset(dir / "dataset").load()) steps += e.steps();
  RunResult r;
  r.report = lp::evaluate_run(config, dir, config.eval.pairs);
  r.seconds = clock.seconds();
  r.env_steps = steps;
  return r;
}

std::string describe(const std::string& name, const RunResult& r) {
  return name + " " + fmt(r.report.success_rate) + " (" + std::to_string(r.env_steps) + " steps, " +
         fmt(r.seconds / 60.0) + " min)";
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism(lp::RunConfig config, const fs::path& work) {
  config.schedule.total_env_steps = 2500;
  config.schedule.rounds = 2;
  config.schedule.iterations_per_round = 150;
  config.eval.pairs = 3;
  train_and_eval(config, work / "determinism_a");
  train_and_eval(config, work / "determinism_b");
  bool ok = true;
  std::string detail;
  for (const char* file : {"metrics.csv", "eval_report.json", "eval_trajectories.csv"}) {
    const std::string a = read_file(work / "determinism_a" / file), b = read_file(work / "determinism_b" / file);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : "; ") + file + (same ? " identical" : " DIFFERENT");
  }
  return {ok, detail};
}

// ------------------------------------------------------------ 8: pipeline

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

lp::Episode flown_episode(lp::Rng& rng, int steps, bool yaw) {
  lp::CageConfig cage;
  cage.yaw_enabled = yaw;
  lp::CageState s = lp::cage_reset(cage, rng);
  lp::Observer observer(lp::ObsConfig{}, cage);
  lp::ActionSmoother smoother(cage.action_dim());
  lp::Episode e;
  e.id = "acceptance";
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
    const lp::CageStep next = lp::cage_step(s, u, cage);
    e.rewards[t] = next.reward;
    s = next.state;
  }
  return e;
}

Outcome pipeline_exactness() {
  lp::Rng rng(808);
  double norm_err = 0.0;
  for (int i = 0; i < 10000; ++i) {
    lp::ChannelLimits lim{VectorXd(6), VectorXd(6)};
    for (int k = 0; k < 6; ++k) {
      lim.lo[k] = rng.uniform(-10.0, 5.0);
      lim.hi[k] = lim.lo[k] + rng.uniform(0.1, 20.0);
    }
    const VectorXd x = rng.normal_vector(6) * 10.0;
    norm_err = std::max(norm_err, (lp::denormalize(lp::normalize(x, lim), lim) - x).cwiseAbs().maxCoeff());
  }
  double rot_err = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Eigen::Vector4d q = rng.normal_vector(4).normalized();
    const Eigen::Matrix3d r = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
    rot_err = std::max(rot_err, (lp::six_d_to_rot(lp::rot_to_6d(r)) - r).norm());
  }
  std::int64_t mismatches = 0, checked = 0;
  for (const bool yaw : {true, false}) {
    const lp::Episode e = flown_episode(rng, 200, yaw);
    lp::CageConfig cage;
    cage.yaw_enabled = yaw;
    for (int trial = 0; trial < 50; ++trial) {
      lp::Episode w = lp::slice(e, rng.uniform_int(0, 120), 80);
      const lp::Goal g = lp::draw_goal(rng, cage.goal_box(0.0));
      lp::relabel_goal(w, g, lp::cage_reward_fn(yaw));
      for (Eigen::Index t = 0; t < w.steps(); ++t, ++checked) {
        if (w.rewards[t] != reference_reward(w.state.row(t).transpose(), w.actions.row(t).transpose(), g, yaw)) {
          ++mismatches;
        }
      }
    }
  }
  const bool ok = norm_err < 1e-12 && rot_err < 1e-10 && mismatches == 0;
  return {ok, "normalisation round trip " + fmt(norm_err) + " (< 1e-12); rotation round trip " + fmt(rot_err) +
                  " (< 1e-10); relabeled rewards " + std::to_string(mismatches) + " of " + std::to_string(checked) +
                  " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected{1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::string config_path = std::string(LATENTPILOT_SOURCE_DIR) + "/configs/desk.json";
  std::string work = "acceptance_runs";
  app.add_option("--criteria", selected, "Criteria to run")->delimiter(',');
  app.add_option("--config", config_path, "Control-run configuration")->capture_default_str();
  app.add_option("--work", work, "Directory for run outputs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const std::set<int> want(selected.begin(), selected.end());
  bool all_ok = true;
  auto report = [&](int id, const Outcome& o) {
    std::cout << "criterion " << id << ": " << (o.passed ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    all_ok = all_ok && o.passed;
  };
  auto guarded = [&](int id, const std::function<Outcome()>& f) {
    if (!want.count(id)) return;
    try {
      report(id, f());
    } catch (const std::exception& e) {
      report(id, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, gradients);
  guarded(2, gaussian_algebra);
  guarded(3, gradient_stops);
  guarded(4, kalman_oracle);

  const bool control = want.count(5) || want.count(6) || want.count(7);
  if (control || want.count(9)) {
    lp::RunConfig base;
    try {
      base = lp::load_run_config(config_path);
      base.env.cage.yaw_enabled = false;
      base.env.obs.mode = lp::ObsMode::FullState;
      base.agent.model_gradients = true;
      base.validate();
    } catch (const std::exception& e) {
      for (int id : {5, 6, 7, 9}) {
        if (want.count(id)) report(id, {false, std::string("config error: ") + e.what()});
      }
      return 1;
    }
    if (control) {
      const fs::path dir(work);
      std::optional<RunResult> full, partial, ablation;
      auto attempt = [&](std::optional<RunResult>& slot, lp::RunConfig c, const char* name) {
        try {
          slot = train_and_eval(c, dir / name);
        } catch (const std::exception& e) {
          std::cerr << name << " run failed: " << e.what() << "\n";
        }
      };
      attempt(full, base, "full_state");
      if (want.count(6)) {
        lp::RunConfig c = base;
        c.env.obs.mode = lp::ObsMode::PositionOnly;
        attempt(partial, c, "position_only");
      }
      if (want.count(7)) {
        lp::RunConfig c = base;
        c.agent.model_gradients = false;
        attempt(ablation, c, "no_model_gradients");
      }
      const std::int64_t budget = 25000;
      if (want.count(5)) {
        if (!full) {
          report(5, {false, "full-state run failed"});
        } else {
          report(5, {full->report.success_rate >= 0.8 && full->env_steps <= budget && full->seconds <= 3600.0,
                     describe("success", *full) + "; need >= 0.8, <= 25000 steps, <= 60 min"});
        }
      }
      if (want.count(6)) {
        if (!full || !partial) {
          report(6, {false, "a control run failed"});
        } else {
          const double fs_rate = full->report.success_rate, po_rate = partial->report.success_rate;
          report(6, {fs_rate >= po_rate && po_rate >= 0.4 && full->seconds + partial->seconds <= 5400.0,
                     describe("FullState", *full) + ", " + describe("PositionOnly", *partial) +
                         "; need FullState >= PositionOnly >= 0.4, <= 90 min"});
        }
      }
      if (want.count(7)) {
        if (!full || !ablation) {
          report(7, {false, "a control run failed"});
        } else {
          report(7, {ablation->report.success_rate < full->report.success_rate,
                     describe("without model gradients", *ablation) + " vs " + describe("full method", *full) +
                         "; need strictly lower"});
        }
      }
    }
    guarded(9, [&] { return determinism(base, fs::path(work)); });
  }
  guarded(8, pipeline_exactness);
  return all_ok ? 0 : 1;
}
