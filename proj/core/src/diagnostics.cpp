#include "latentpilot/harness.hpp"

#include <algorithm>
#include <cmath>

namespace lp {

namespace {

Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                   double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + h;
    const double up = f(x);
    x(i) = keep - h;
    const double down = f(x);
    x(i) = keep;
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

Eigen::VectorXd flat(const std::vector<Matrix>& parts) {
  Eigen::Index n = 0;
  for (const Matrix& m : parts) n += m.size();
  Eigen::VectorXd out(n);
  Eigen::Index at = 0;
  for (const Matrix& m : parts) {
    out.segment(at, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    at += m.size();
  }
  return out;
}

GradientCheck compare(const std::string& name, const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                      double tolerance) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  const double err = scale == 0.0 ? 0.0 : (analytic - numeric).norm() / scale;
  return GradientCheck{name, err, std::isfinite(err) && err < tolerance};
}

}  // namespace

std::vector<GradientCheck> gradient_diagnostics(std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  LssmConfig mc;
  mc.obs_dim = 3;
  mc.action_dim = 2;
  mc.z_dim = 2;
  mc.s_dim = 2;
  mc.num_base = 2;
  mc.h_dim = 2;
  mc.hidden = 5;
  mc.encoder_hidden = 3;
  mc.init_window = 2;
  mc.goal_dim = 2;
  ActorCriticConfig ac;
  ac.latent_dim = 4;
  ac.action_dim = 2;
  ac.goal_dim = 2;
  ac.hidden = 5;
  ac.horizon = 3;
  ac.smoothing_window = 2;
  Lssm model(mc, rng);
  Agent agent(ac, rng);
  // Zero-initialised biases can put pre-activations exactly on a ReLU kink.
  for (ParamSet* p : {&model.params(), &agent.policy_params(), &agent.value_params()}) {
    p->assign_flat(p->flatten() + 0.1 * rng.normal_vector(p->flatten().size()));
  }

  const int B = 3, T = 4;
  SequenceBatch batch;
  for (int t = 0; t < T; ++t) {
    batch.obs.push_back(rng.normal_matrix(B, mc.obs_dim));
    batch.actions.push_back(rng.normal_matrix(B, mc.action_dim).array().tanh().matrix());
  }
  batch.goal = rng.normal_matrix(B, mc.goal_dim);
  const std::uint64_t noise_seed = rng.next_u64();

  std::vector<GradientCheck> out;
  {
    NoiseSource noise(noise_seed);
    const ElboResult r = elbo(model, batch, noise);
    Lssm probe = model;
    const Eigen::VectorXd numeric = central_difference(
        [&](const Eigen::VectorXd& x) {
          probe.params().assign_flat(x);
          NoiseSource n(noise_seed);
          return elbo(probe, batch, n).loss;
        },
        model.params().flatten());
    out.push_back(compare("elbo", flat(r.grads), numeric, tolerance));
  }

  const Matrix latent = rng.normal_matrix(B, ac.latent_dim);
  const Matrix goal = rng.normal_matrix(B, ac.goal_dim);
  const Matrix targets = rng.normal_matrix(B, 1);
  {
    ad::Tape tape;
    Binding b(tape, agent.value_params(), true);
    tape.backward(value_loss(agent, b, latent, goal, targets));
    ParamSet probe = agent.value_params();
    const Eigen::VectorXd numeric = central_difference(
        [&](const Eigen::VectorXd& x) {
          probe.assign_flat(x);
          ad::Tape t;
          Binding pb(t, probe, false);
          return value_loss(agent, pb, latent, goal, targets).scalar();
        },
        probe.flatten());
    out.push_back(compare("value_loss", flat(b.grads()), numeric, tolerance));
  }

  RolloutStart start;
  start.z = rng.normal_matrix(B, mc.z_dim);
  start.s = rng.normal_matrix(B, mc.s_dim);
  start.goal = goal;
  for (int k = 0; k < ac.smoothing_window; ++k) {
    start.commands.push_back(rng.normal_matrix(B, ac.action_dim).array().tanh().matrix());
  }
  start.executed_prev = rng.normal_matrix(B, ac.action_dim) * 0.3;
  start.executed_prev2 = rng.normal_matrix(B, ac.action_dim) * 0.3;
  auto objective = [&](ad::Tape& tape, const ParamSet& p, bool train, std::vector<Matrix>* grads) {
    Binding mb(tape, model.params(), false), pb(tape, p, train), vb(tape, agent.value_params(), false);
    NoiseSource noise(noise_seed);
    const ImaginedRollout r = imagine_rollout(model, mb, agent, pb, start, ac.horizon, noise);
    const ad::Var obj = policy_objective(r, agent, vb, ac.gamma, ac.horizon);
    if (grads) {
      tape.backward(obj);
      *grads = pb.grads();
    }
    return obj.scalar();
  };
  {
    ad::Tape tape;
    std::vector<Matrix> grads;
    objective(tape, agent.policy_params(), true, &grads);
    ParamSet probe = agent.policy_params();
    const Eigen::VectorXd numeric = central_difference(
        [&](const Eigen::VectorXd& x) {
          probe.assign_flat(x);
          ad::Tape t;
          return objective(t, probe, false, nullptr);
        },
        probe.flatten());
    out.push_back(compare("policy_objective", flat(grads), numeric, tolerance));
  }
  return out;
}

}  // namespace lp
