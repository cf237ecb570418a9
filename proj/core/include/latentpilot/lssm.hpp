#pragma once

// Hierarchical latent state-space model.
//
// Generative side: p(s_t | s_{t-1}, z_{t-1}, u_{t-1}) is a Gaussian network
// head; p(z_t | z_{t-1}, s_t, u_{t-1}) is locally linear, built from a bank
// of m base matrices mixed by logistic weights of s_t; p(x_t | z_t) and the
// reward head p(r_t | z_t, u_t) are Gaussian network heads.
//
// Inference reuses the generative transitions as priors and fuses them with
// inverse measurement heads q_meas(. | x_t). The first state comes from a
// recurrent encoder over a short window: h ~ q(h | x_{1:k}, u_{1:k}),
// z_1 = t(h), s_1 ~ p(s_1 | h).
//
// Alignment convention used everywhere: at index t the batch holds the
// observation x_t, the action u_t executed after observing it, and the
// reward r_t = r(state_t, u_t).

#include "latentpilot/gaussian.hpp"
#include "latentpilot/nn.hpp"
#include "latentpilot/rng.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <vector>

namespace lp {

struct LssmConfig {
  int obs_dim = 1;
  int action_dim = 1;
  int z_dim = 32;
  int s_dim = 32;
  int num_base = 32;
  /// Width of the auxiliary initial-state variable h.
  int h_dim = 32;
  int hidden = 128;
  int encoder_hidden = 128;
  /// Window length k consumed by the initial-state encoder.
  int init_window = 8;
  double base_init_std = 0.05;
  /// Width of the goal condition fed to the reward head (0 = unconditioned).
  int goal_dim = 0;
};

void to_json(nlohmann::json& j, const LssmConfig& c);
void from_json(const nlohmann::json& j, LssmConfig& c);

/// Source of standard-normal noise. Zero mode yields posterior means, which
/// is what online filtering and deterministic evaluation use.
class NoiseSource {
 public:
  static NoiseSource zeros() { return NoiseSource(); }
  explicit NoiseSource(std::uint64_t seed) : rng_(Rng(seed)) {}
  explicit NoiseSource(Rng rng) : rng_(std::move(rng)) {}

  Matrix next(Eigen::Index rows, Eigen::Index cols);
  bool is_zero() const { return !rng_.has_value(); }
  /// Appends every subsequent draw to `log` (nullptr stops recording).
  void record_into(std::vector<Matrix>* log) { log_ = log; }

 private:
  NoiseSource() = default;
  std::optional<Rng> rng_;
  std::vector<Matrix>* log_ = nullptr;
};

/// Sequences of B aligned windows of length T.
struct SequenceBatch {
  std::vector<Matrix> obs;      // T entries of B x obs_dim
  std::vector<Matrix> actions;  // T entries of B x action_dim
  std::vector<Matrix> rewards;  // T entries of B x 1 (may be empty)
  Matrix goal;                  // B x goal_dim, constant over the window

  Eigen::Index batch() const { return obs.empty() ? 0 : obs.front().rows(); }
  int length() const { return static_cast<int>(obs.size()); }
  void validate(int obs_dim, int action_dim, int goal_dim = 0) const;
};

/// Batched latent state on a tape.
struct LatentVar {
  ad::Var z;
  ad::Var s;
  GaussianVar q_z;
  GaussianVar q_s;
};

/// One filtered step with the priors the posterior was fused against.
struct FilterVarStep {
  LatentVar post;
  GaussianVar prior_s;
  GaussianVar prior_z;
};

struct MixedMatrices {
  Eigen::MatrixXd A;  // n_z x n_z
  Eigen::MatrixXd B;  // n_z x n_u
  Eigen::VectorXd C;  // n_z, pre-softplus scale
  Eigen::VectorXd alpha;
};

/// Single-instance latent state (value type).
struct LatentState {
  Eigen::VectorXd z;
  Eigen::VectorXd s;
  DiagGaussian q_z;
  DiagGaussian q_s;
};

struct FilterState {
  LatentState latent;
  Eigen::VectorXd last_action;
  int step = 0;
};

void to_json(nlohmann::json& j, const FilterState& f);

struct SequenceForward {
  ad::Var neg_elbo;     // 1x1, batch mean of -sum_t(...)
  ad::Var recon;        // 1x1, batch mean of sum_t log p(x_t | z_t)
  ad::Var kl_s;         // 1x1
  ad::Var kl_z;         // 1x1
  ad::Var kl_h;         // 1x1
  std::vector<LatentVar> latents;  // T entries
};

struct ElboResult {
  double loss = 0.0;  // -ELBO + reward NLL (the optimised quantity)
  double neg_elbo = 0.0;
  double recon = 0.0;
  double kl_s = 0.0;
  double kl_z = 0.0;
  double kl_h = 0.0;
  double reward_nll = 0.0;
  std::vector<Matrix> grads;
  /// Posterior samples per time step, detached (T entries of B x n).
  std::vector<Matrix> z;
  std::vector<Matrix> s;
};

struct PredictionStep {
  DiagGaussian observation;  // p(x_{t+i+1} | z_{t+i+1})
  DiagGaussian reward;       // p(r_{t+i} | z_{t+i}, u_{t+i})
};

class Lssm {
 public:
  Lssm(const LssmConfig& config, Rng& rng);

  const LssmConfig& config() const { return config_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  // Parameter index groups.
  const std::vector<int>& reward_head_ids() const { return reward_ids_; }
  std::vector<int> inverse_measurement_ids() const;
  int base_a_id() const { return a_id_; }
  int base_b_id() const { return b_id_; }
  int base_c_id() const { return c_id_; }
  int mix_w_id() const { return w_id_; }
  int mix_b_id() const { return bias_id_; }

  // Network heads, exposed for tests.
  const GaussianHead& likelihood_head() const { return likelihood_; }
  const GaussianHead& s_transition_head() const { return s_transition_; }
  const GaussianHead& meas_z_head() const { return meas_z_; }
  const GaussianHead& meas_s_head() const { return meas_s_; }
  const GaussianHead& reward_head() const { return reward_; }
  const RecurrentEncoder& encoder() const { return encoder_; }

  // ---- differentiable building blocks (batched) ----
  ad::Var mixing_weights(const Binding& b, ad::Var s) const;
  GaussianVar transition_z(const Binding& b, ad::Var z_prev, ad::Var s_t, ad::Var u_prev) const;
  GaussianVar transition_s(const Binding& b, ad::Var s_prev, ad::Var z_prev,
                           ad::Var u_prev) const;
  GaussianVar measure_z(const Binding& b, ad::Var x) const;
  GaussianVar measure_s(const Binding& b, ad::Var x) const;
  GaussianVar likelihood(const Binding& b, ad::Var z) const;
  /// Reward head on (z, u, goal); `goal` is ignored when goal_dim is 0.
  /// Callers stop the gradient on z for the loss.
  GaussianVar reward(const Binding& b, ad::Var z, ad::Var u, ad::Var goal = {}) const;

  LatentVar initial_state(const Binding& b, std::span<const ad::Var> window_inputs,
                          NoiseSource& noise, GaussianVar* q_h = nullptr) const;
  FilterVarStep filter_step(const Binding& b, const LatentVar& prev, ad::Var u_prev, ad::Var x,
                            NoiseSource& noise) const;
  /// One generative step: s' ~ p(s'|s,z,u), z' ~ p(z'|z,s',u).
  LatentVar generate_step(const Binding& b, ad::Var z, ad::Var s, ad::Var u,
                          NoiseSource& noise) const;

  /// Initial inference + filtering over a batch; builds the ELBO terms.
  SequenceForward forward_sequence(const Binding& b, const SequenceBatch& batch,
                                   NoiseSource& noise) const;
  /// Reward negative log-likelihood (batch mean of the sum over t) with the
  /// gradient into every z_t stopped.
  ad::Var reward_nll(const Binding& b, std::span<const LatentVar> latents,
                     const SequenceBatch& batch) const;

 private:
  LssmConfig config_;
  ParamSet params_;
  GaussianHead likelihood_;
  GaussianHead s_transition_;
  GaussianHead meas_z_;
  GaussianHead meas_s_;
  GaussianHead reward_;
  GaussianHead s_init_;
  RecurrentEncoder encoder_;
  DenseNet z_init_;
  int a_id_ = -1;
  int b_id_ = -1;
  int c_id_ = -1;
  int w_id_ = -1;
  int bias_id_ = -1;
  std::vector<int> reward_ids_;
};

// ---- value-level operations ---------------------------------------------------

MixedMatrices mix_matrices(const Lssm& model, const Eigen::VectorXd& s);
DiagGaussian transition_z(const Lssm& model, const Eigen::VectorXd& z_prev,
                          const Eigen::VectorXd& s_t, const Eigen::VectorXd& u_prev);
DiagGaussian transition_s(const Lssm& model, const Eigen::VectorXd& s_prev,
                          const Eigen::VectorXd& z_prev, const Eigen::VectorXd& u_prev);

/// Initial state from a k x obs_dim window and its k x action_dim actions.
LatentState initial_state(const Lssm& model, const Eigen::MatrixXd& obs_window,
                          const Eigen::MatrixXd& action_window, NoiseSource& noise);
/// Fused filter update. Throws std::invalid_argument on non-finite input.
FilterState filter_step(const Lssm& model, const FilterState& prev,
                        const Eigen::VectorXd& u_prev, const Eigen::VectorXd& x,
                        NoiseSource& noise);

/// Negative ELBO plus reward NLL and the gradient with respect to every
/// model parameter. `kl_weight` scales the KL terms of the optimised loss
/// (warm-up); `neg_elbo` is always the unweighted value. Throws
/// std::runtime_error naming the offending term if any term is non-finite.
ElboResult elbo(const Lssm& model, const SequenceBatch& batch, NoiseSource& noise, double kl_weight = 1.0);

/// Reward NLL given latent samples from an inference pass (values only).
double reward_loss(const Lssm& model, const SequenceBatch& batch,
                   std::span<const Matrix> z_samples);

/// Ancestral prediction from `start` under controls (H x action_dim).
std::vector<PredictionStep> predict_rollout(const Lssm& model, const LatentState& start,
                                            const Eigen::MatrixXd& controls, NoiseSource& noise,
                                            const Eigen::VectorXd& goal = {});

/// Ensemble of observation-mean trajectories: returns `samples` matrices of
/// H x obs_dim (the likelihood mean at each future step).
std::vector<Eigen::MatrixXd> predict_ensemble(const Lssm& model, const LatentState& start,
                                              const Eigen::MatrixXd& controls, int samples,
                                              NoiseSource& noise);

}  // namespace lp
