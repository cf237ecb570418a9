#include "latentpilot/actor_critic.hpp"

#include <cmath>
#include <stdexcept>

namespace lp {

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.begin(), v.end()}; }

Eigen::VectorXd from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void check_limits(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  if (lo.size() != hi.size() || !(lo.array() < hi.array()).all()) {
    throw std::invalid_argument("squash_scale: limits must satisfy lo < hi per dimension");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const ActorCriticConfig& c) {
  j = nlohmann::json{{"latent_dim", c.latent_dim},
                     {"action_dim", c.action_dim},
                     {"goal_dim", c.goal_dim},
                     {"hidden", c.hidden},
                     {"hidden_layers", c.hidden_layers},
                     {"action_lo", to_vec(c.action_lo)},
                     {"action_hi", to_vec(c.action_hi)},
                     {"horizon", c.horizon},
                     {"gamma", c.gamma},
                     {"smoothing_window", c.smoothing_window},
                     {"action_delay", c.action_delay},
                     {"model_gradients", c.model_gradients},
                     {"strict_horizon", c.strict_horizon},
                     {"policy_lr", c.policy_lr},
                     {"value_lr", c.value_lr},
                     {"target_rate", c.target_rate},
                     {"actor_every", c.actor_every},
                     {"batch", c.batch},
                     {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, ActorCriticConfig& c) {
  const ActorCriticConfig d;
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.action_dim = j.value("action_dim", d.action_dim);
  c.goal_dim = j.value("goal_dim", d.goal_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.hidden_layers = j.value("hidden_layers", d.hidden_layers);
  c.action_lo = from_vec(j.value("action_lo", std::vector<double>{}));
  c.action_hi = from_vec(j.value("action_hi", std::vector<double>{}));
  c.horizon = j.value("horizon", d.horizon);
  c.gamma = j.value("gamma", d.gamma);
  c.smoothing_window = j.value("smoothing_window", d.smoothing_window);
  c.action_delay = j.value("action_delay", d.action_delay);
  c.model_gradients = j.value("model_gradients", d.model_gradients);
  c.strict_horizon = j.value("strict_horizon", d.strict_horizon);
  c.policy_lr = j.value("policy_lr", d.policy_lr);
  c.value_lr = j.value("value_lr", d.value_lr);
  c.target_rate = j.value("target_rate", d.target_rate);
  c.actor_every = j.value("actor_every", d.actor_every);
  c.batch = j.value("batch", d.batch);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
}

Eigen::VectorXd squash_scale(const Eigen::VectorXd& raw, const Eigen::VectorXd& lo,
                             const Eigen::VectorXd& hi) {
  check_limits(lo, hi);
  if (raw.size() != lo.size()) throw std::invalid_argument("squash_scale: dimension mismatch");
  return (lo.array() + (hi - lo).array() * (raw.array().tanh() + 1.0) * 0.5).matrix();
}

ad::Var squash_scale(ad::Var raw, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  check_limits(lo, hi);
  if (raw.cols() != lo.size()) throw std::invalid_argument("squash_scale: dimension mismatch");
  ad::Tape& tape = *raw.tape();
  const Eigen::Index rows = raw.rows();
  const Matrix half_range = (0.5 * (hi - lo)).transpose().replicate(rows, 1);
  const Matrix mid = (0.5 * (hi + lo)).transpose().replicate(rows, 1);
  return ad::tanh(raw) * tape.constant(half_range) + tape.constant(mid);
}

// ---- agent --------------------------------------------------------------------

Agent::Agent(const ActorCriticConfig& config, Rng& rng) : config_(config) {
  ActorCriticConfig& c = config_;
  if (c.action_lo.size() == 0) c.action_lo = Eigen::VectorXd::Constant(c.action_dim, -1.0);
  if (c.action_hi.size() == 0) c.action_hi = Eigen::VectorXd::Constant(c.action_dim, 1.0);
  if (c.action_lo.size() != c.action_dim || c.action_hi.size() != c.action_dim) {
    throw std::invalid_argument("ActorCriticConfig: limits do not match action_dim");
  }
  check_limits(c.action_lo, c.action_hi);
  if (c.latent_dim <= 0 || c.action_dim <= 0 || c.goal_dim < 0 || c.hidden <= 0 ||
      c.hidden_layers < 1 || c.hidden_layers > 2 || c.smoothing_window < 1 || c.actor_every < 1 ||
      c.horizon < 1 || c.batch < 1) {
    throw std::invalid_argument("ActorCriticConfig: invalid sizes");
  }
  if (!(c.gamma >= 0.0 && c.gamma <= 1.0) || !(c.target_rate >= 0.0 && c.target_rate <= 1.0) ||
      !(c.policy_lr > 0.0) || !(c.value_lr > 0.0)) {
    throw std::invalid_argument("ActorCriticConfig: invalid rates");
  }
  const std::vector<int> hidden(c.hidden_layers, c.hidden);
  const int policy_in = c.latent_dim + 2 * c.action_dim + c.goal_dim;
  policy_ = GaussianHead::create(policy_params_, "policy", policy_in, hidden, c.action_dim,
                                 Activation::Tanh, rng);
  std::vector<int> widths{c.latent_dim + c.goal_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  value_ = DenseNet::create(value_params_, "value", widths, Activation::Relu, rng);
  target_params_ = value_params_;
}

GaussianVar Agent::policy_distribution(const Binding& b, ad::Var latent, ad::Var e1, ad::Var e2,
                                       ad::Var goal) const {
  if (config_.goal_dim == 0) return policy_.forward(b, ad::concat_cols({latent, e1, e2}));
  return policy_.forward(b, ad::concat_cols({latent, e1, e2, goal}));
}

std::pair<ad::Var, ad::Var> Agent::policy_sample(const Binding& b, ad::Var latent, ad::Var e1,
                                                 ad::Var e2, ad::Var goal, ad::Var eps) const {
  const ad::Var raw = sample_reparam(policy_distribution(b, latent, e1, e2, goal), eps);
  return {raw, squash_scale(raw, config_.action_lo, config_.action_hi)};
}

ad::Var Agent::state_value(const Binding& b, ad::Var latent, ad::Var goal) const {
  if (config_.goal_dim == 0) return value_.forward(b, latent);
  return value_.forward(b, ad::concat_cols({latent, goal}));
}

Eigen::VectorXd Agent::act(const Eigen::VectorXd& latent, const Eigen::VectorXd& e1,
                           const Eigen::VectorXd& e2, const Eigen::VectorXd& goal,
                           NoiseSource& noise) const {
  ad::Tape tape;
  Binding b(tape, policy_params_, false);
  auto row = [&](const Eigen::VectorXd& v) { return tape.constant(v.transpose()); };
  const auto [raw, cmd] = policy_sample(b, row(latent), row(e1), row(e2), row(goal),
                                        tape.constant(noise.next(1, config_.action_dim)));
  return cmd.value().row(0).transpose();
}

// ---- imagination ----------------------------------------------------------------

ImaginedRollout imagine_rollout(const Lssm& model, const Binding& model_binding,
                                const Agent& agent, const Binding& policy_binding,
                                const RolloutStart& start, int horizon, NoiseSource& noise) {
  const ActorCriticConfig& c = agent.config();
  if (horizon < 1) throw std::invalid_argument("imagine_rollout: horizon must be >= 1");
  if (c.strict_horizon && (horizon < 3 || horizon > 10)) {
    throw std::invalid_argument("imagine_rollout: horizon outside [3, 10]");
  }
  const Eigen::Index B = start.batch();
  const int W = c.smoothing_window;
  if (static_cast<int>(start.commands.size()) < W) {
    throw std::invalid_argument("imagine_rollout: command history shorter than smoothing window");
  }
  if (start.s.rows() != B || start.goal.rows() != B || start.executed_prev.rows() != B ||
      start.executed_prev2.rows() != B || start.goal.cols() != c.goal_dim) {
    throw std::invalid_argument("imagine_rollout: start batch shapes disagree");
  }
  ad::Tape& tape = model_binding.tape();
  ImaginedRollout out;
  noise.record_into(&out.noise);

  ad::Var z = tape.constant(start.z);
  ad::Var s = tape.constant(start.s);
  out.goal = tape.constant(start.goal);
  const ad::Var model_goal = model.config().goal_dim > 0 ? out.goal : ad::Var{};
  std::vector<ad::Var> history;
  for (std::size_t k = start.commands.size() - W; k < start.commands.size(); ++k) {
    history.push_back(tape.constant(start.commands[k]));
  }
  ad::Var e1 = tape.constant(start.executed_prev);
  ad::Var e2 = tape.constant(start.executed_prev2);
  auto smoothed = [&]() {
    ad::Var acc = history[history.size() - W];
    for (std::size_t k = history.size() - W + 1; k < history.size(); ++k) acc = acc + history[k];
    return W == 1 ? acc : acc * (1.0 / W);
  };

  out.latents.push_back(ad::concat_cols({z, s}));
  for (int i = 0; i < horizon; ++i) {
    const ad::Var eps = tape.constant(noise.next(B, c.action_dim));
    ad::Var executed;
    ad::Var raw;
    ad::Var cmd;
    if (c.action_delay) {
      executed = smoothed();
      std::tie(raw, cmd) = agent.policy_sample(policy_binding, out.latents.back(), executed, e1, out.goal, eps);
      history.push_back(cmd);
    } else {
      std::tie(raw, cmd) = agent.policy_sample(policy_binding, out.latents.back(), e1, e2, out.goal, eps);
      history.push_back(cmd);
      executed = smoothed();
    }
    out.raw.push_back(raw);
    out.commands.push_back(cmd);
    out.executed.push_back(executed);
    out.rewards.push_back(model.reward(model_binding, z, executed, model_goal).mean);

    LatentVar next = model.generate_step(model_binding, z, s, executed, noise);
    z = c.model_gradients ? next.z : ad::stop_gradient(next.z);
    s = c.model_gradients ? next.s : ad::stop_gradient(next.s);
    out.latents.push_back(ad::concat_cols({z, s}));
    e2 = e1;
    e1 = executed;
  }
  noise.record_into(nullptr);
  return out;
}

Eigen::VectorXd nstep_target(const Eigen::MatrixXd& rewards, const Eigen::VectorXd& terminal,
                             double gamma) {
  if (rewards.rows() != terminal.size()) throw std::invalid_argument("nstep_target: batch mismatch");
  Eigen::VectorXd y = Eigen::VectorXd::Zero(rewards.rows());
  double discount = 1.0;
  for (Eigen::Index i = 0; i < rewards.cols(); ++i) {
    y += discount * rewards.col(i);
    discount *= gamma;
  }
  return y + discount * terminal;
}

Matrix value_target(const ImaginedRollout& rollout, const Agent& agent, const Binding& target,
                    double gamma, int horizon) {
  if (horizon < 1 || rollout.horizon() < horizon) {
    throw std::invalid_argument("value_target: rollout shorter than the target horizon");
  }
  ad::Tape& tape = target.tape();
  const ad::Var terminal = ad::stop_gradient(
      agent.state_value(target, tape.constant(rollout.latents[horizon].value()),
                        tape.constant(rollout.goal.value())));
  Eigen::MatrixXd rewards(terminal.rows(), horizon);
  for (int i = 0; i < horizon; ++i) rewards.col(i) = rollout.rewards[i].value().col(0);
  return nstep_target(rewards, terminal.value().col(0), gamma);
}

ad::Var value_loss(const Agent& agent, const Binding& value_binding, const Matrix& latent,
                   const Matrix& goal, const Matrix& targets) {
  ad::Tape& tape = value_binding.tape();
  const ad::Var v = agent.state_value(value_binding, tape.constant(latent), tape.constant(goal));
  if (targets.rows() != v.rows() || targets.cols() != 1) {
    throw std::invalid_argument("value_loss: target shape mismatch");
  }
  return ad::mean(ad::square(v - tape.constant(targets)));
}

ad::Var policy_objective(const ImaginedRollout& rollout, const Agent& agent,
                         const Binding& value_binding, double gamma, int horizon) {
  if (horizon < 1 || rollout.horizon() < horizon) {
    throw std::invalid_argument("policy_objective: rollout shorter than the horizon");
  }
  ad::Var total = rollout.rewards[0];
  double discount = 1.0;
  for (int i = 1; i < horizon; ++i) {
    discount *= gamma;
    total = total + rollout.rewards[i] * discount;
  }
  discount *= gamma;
  const ad::Var terminal = agent.state_value(value_binding, rollout.latents[horizon], rollout.goal);
  return ad::mean(total + terminal * discount);
}

void update_target(Agent& agent, double alpha) {
  soft_update(agent.target_params(), agent.value_params(), alpha);
}

// ---- trainer ----------------------------------------------------------------------

ControllerTrainer::ControllerTrainer(Agent& agent) : agent_(&agent) {
  const ActorCriticConfig& c = agent.config();
  AdamConfig pc;
  pc.learning_rate = c.policy_lr;
  pc.clip_norm = c.clip_norm;
  AdamConfig vc = pc;
  vc.learning_rate = c.value_lr;
  policy_opt_ = Adam(agent.policy_params(), pc);
  value_opt_ = Adam(agent.value_params(), vc);
}

ControllerStepReport ControllerTrainer::step(const Lssm& model, const RolloutStart& start,
                                             NoiseSource& noise) {
  Agent& agent = *agent_;
  const ActorCriticConfig& c = agent.config();
  ControllerStepReport report;
  report.actor_updated = iterations_ % c.actor_every == 0;
  ++iterations_;

  ad::Tape tape;
  const Binding model_b(tape, model.params(), false);
  const Binding policy_b(tape, agent.policy_params(), report.actor_updated);
  const Binding value_const(tape, agent.value_params(), false);
  const ImaginedRollout rollout = imagine_rollout(model, model_b, agent, policy_b, start, c.horizon, noise);
  double reward_sum = 0.0;
  for (const ad::Var& r : rollout.rewards) reward_sum += r.value().mean();
  report.imagined_reward = reward_sum / c.horizon;

  if (report.actor_updated) {
    const ad::Var objective = policy_objective(rollout, agent, value_const, c.gamma, c.horizon);
    report.policy_objective = objective.scalar();
    if (!std::isfinite(report.policy_objective)) {
      throw std::runtime_error("controller: non-finite policy objective");
    }
    tape.backward(-objective);
    const StepReport sr = policy_opt_.step(agent.policy_params(), policy_b.grads());
    report.policy_grad_norm = sr.grad_norm;
  }

  ad::Tape vtape;
  const Binding target_b(vtape, agent.target_params(), false);
  const Binding value_b(vtape, agent.value_params(), true);
  const Matrix targets = value_target(rollout, agent, target_b, c.gamma, c.horizon);
  const ad::Var loss = value_loss(agent, value_b, rollout.latents[0].value(), start.goal, targets);
  report.value_loss = loss.scalar();
  if (!std::isfinite(report.value_loss)) throw std::runtime_error("controller: non-finite value loss");
  vtape.backward(loss);
  const StepReport vr = value_opt_.step(agent.value_params(), value_b.grads());
  report.value_grad_norm = vr.grad_norm;
  update_target(agent, c.target_rate);
  return report;
}

}  // namespace lp
