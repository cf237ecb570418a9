#pragma once

// Controller learned purely inside the latent model.
//
// The policy is a tanh-hidden Gaussian head over (latent, two most recent
// executed actions, goal). Its samples are squashed into the control limits,
// become commands, and pass through the same moving-average smoother as on
// the real system before entering the model. The critic V(latent, goal) is
// regressed onto n-step targets bootstrapped from a slowly tracking copy.
//
// "latent" is the concatenation (z, s).

#include "latentpilot/lssm.hpp"
#include "latentpilot/nn.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace lp {

struct ActorCriticConfig {
  int latent_dim = 64;
  int action_dim = 4;
  int goal_dim = 3;
  int hidden = 128;
  int hidden_layers = 2;
  Eigen::VectorXd action_lo;  // defaults to -1
  Eigen::VectorXd action_hi;  // defaults to +1
  int horizon = 5;
  double gamma = 0.95;
  /// Number of commands averaged into each executed action (1 disables).
  int smoothing_window = 6;
  /// Commands take effect one step after they are computed.
  bool action_delay = false;
  /// Ablation switch: when false the model is only a sample source and
  /// gradients do not propagate through imagined transitions.
  bool model_gradients = true;
  /// Reject horizons outside [3, 10].
  bool strict_horizon = false;
  double policy_lr = 1e-4;
  double value_lr = 3e-4;
  double target_rate = 1e-3;
  int actor_every = 2;
  int batch = 128;
  double clip_norm = 100.0;
};

void to_json(nlohmann::json& j, const ActorCriticConfig& c);
void from_json(const nlohmann::json& j, ActorCriticConfig& c);

/// out = lo + (hi - lo) (tanh(raw) + 1) / 2, per dimension.
Eigen::VectorXd squash_scale(const Eigen::VectorXd& raw, const Eigen::VectorXd& lo,
                             const Eigen::VectorXd& hi);
ad::Var squash_scale(ad::Var raw, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);

/// Batched controller context at the root of an imagined rollout.
struct RolloutStart {
  Matrix z;                       // B x n_z
  Matrix s;                       // B x n_s
  Matrix goal;                    // B x goal_dim, also the reward-head condition
  std::vector<Matrix> commands;   // last `smoothing_window` commands, oldest first
  Matrix executed_prev;           // e_{t-1}
  Matrix executed_prev2;          // e_{t-2}

  Eigen::Index batch() const { return z.rows(); }
};

struct ImaginedRollout {
  std::vector<ad::Var> latents;   // H + 1 entries, (z, s) concatenated
  std::vector<ad::Var> raw;       // H policy samples before squashing
  std::vector<ad::Var> commands;  // H squashed commands
  std::vector<ad::Var> executed;  // H smoothed actions fed to the model
  std::vector<ad::Var> rewards;   // H predicted rewards (reward-head mean), B x 1
  std::vector<Matrix> noise;      // every standard-normal draw, in order
  ad::Var goal;                   // B x goal_dim
  int horizon() const { return static_cast<int>(rewards.size()); }
};

class Agent {
 public:
  Agent() = default;
  Agent(const ActorCriticConfig& config, Rng& rng);

  const ActorCriticConfig& config() const { return config_; }
  const GaussianHead& policy() const { return policy_; }
  const DenseNet& value() const { return value_; }
  ParamSet& policy_params() { return policy_params_; }
  const ParamSet& policy_params() const { return policy_params_; }
  ParamSet& value_params() { return value_params_; }
  const ParamSet& value_params() const { return value_params_; }
  ParamSet& target_params() { return target_params_; }
  const ParamSet& target_params() const { return target_params_; }

  /// Raw Gaussian policy over the next command.
  GaussianVar policy_distribution(const Binding& b, ad::Var latent, ad::Var e1, ad::Var e2,
                                  ad::Var goal) const;
  /// Returns (raw sample, squashed command).
  std::pair<ad::Var, ad::Var> policy_sample(const Binding& b, ad::Var latent, ad::Var e1,
                                            ad::Var e2, ad::Var goal, ad::Var eps) const;
  /// B x 1 state value.
  ad::Var state_value(const Binding& b, ad::Var latent, ad::Var goal) const;

  /// Single-instance command: squashed policy mean when `noise` is zero.
  Eigen::VectorXd act(const Eigen::VectorXd& latent, const Eigen::VectorXd& e1,
                      const Eigen::VectorXd& e2, const Eigen::VectorXd& goal,
                      NoiseSource& noise) const;

 private:
  ActorCriticConfig config_;
  GaussianHead policy_;
  DenseNet value_;
  ParamSet policy_params_;
  ParamSet value_params_;
  ParamSet target_params_;
};

/// Alternates policy samples and model transitions for `horizon` steps.
/// `model_binding` and `policy_binding` decide which parameters are tracked.
ImaginedRollout imagine_rollout(const Lssm& model, const Binding& model_binding,
                                const Agent& agent, const Binding& policy_binding,
                                const RolloutStart& start, int horizon, NoiseSource& noise);

/// y = sum_{i<H} gamma^i r_i + gamma^H V_target(latent_H); always detached.
Matrix value_target(const ImaginedRollout& rollout, const Agent& agent, const Binding& target,
                    double gamma, int horizon);
/// Value-level variant over a reward matrix (B x H) and terminal values (B x 1).
Eigen::VectorXd nstep_target(const Eigen::MatrixXd& rewards, const Eigen::VectorXd& terminal,
                             double gamma);

/// Mean squared error between V(latent, goal) and `targets` (all B x .).
ad::Var value_loss(const Agent& agent, const Binding& value_binding, const Matrix& latent,
                   const Matrix& goal, const Matrix& targets);
/// Batch mean of sum_{i<H} gamma^i r_i + gamma^H V(latent_H), to maximise.
ad::Var policy_objective(const ImaginedRollout& rollout, const Agent& agent,
                         const Binding& value_binding, double gamma, int horizon);

/// phi' <- alpha phi + (1 - alpha) phi'.
void update_target(Agent& agent, double alpha);

struct ControllerStepReport {
  double value_loss = 0.0;
  double policy_objective = 0.0;
  double value_grad_norm = 0.0;
  double policy_grad_norm = 0.0;
  double imagined_reward = 0.0;
  bool actor_updated = false;
};

/// Owns the optimisers and the critic/actor update cadence.
class ControllerTrainer {
 public:
  explicit ControllerTrainer(Agent& agent);

  /// One critic step (and an actor step every `actor_every` calls) from the
  /// given starts. Model parameters are read, never written.
  ControllerStepReport step(const Lssm& model, const RolloutStart& start, NoiseSource& noise);

  std::int64_t iterations() const { return iterations_; }

 private:
  Agent* agent_;
  Adam policy_opt_;
  Adam value_opt_;
  std::int64_t iterations_ = 0;
};

}  // namespace lp
