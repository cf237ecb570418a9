#pragma once

// End-to-end loop: collect episodes, fit the latent model, train the
// controller inside it, evaluate on the fixed start/goal grid, export plots.
//
// Run directory layout:
//   config.json             the exact RunConfig used
//   dataset/                episode store (see pipeline.hpp)
//   metrics.csv             one row per training iteration
//   checkpoint/             model, policy, value and target parameters
//   eval_report.json        EvalReport
//   eval_trajectories.csv   per-step errors of every evaluation episode
//   export/                 plot data written by `export`

#include "latentpilot/actor_critic.hpp"
#include "latentpilot/envs.hpp"
#include "latentpilot/lssm.hpp"
#include "latentpilot/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace lp {

struct EnvSection {
  CageConfig cage;
  ObsConfig obs;
  PidGains pid;
  double explore_interval = 1.0;  // mean seconds between exploration-target switches
  double explore_noise = 0.1;     // std of Gaussian noise added to PID commands
};

struct ModelSection {
  LssmConfig lssm;  // obs/action/goal widths are derived from the env
  double lr = 3e-4;
  int batch = 64;
  int window_min = 40;
  int window_max = 80;
  double clip_norm = 100.0;
  double reward_scale = 1.0;
  int kl_warmup = 0;  // iterations over which the KL weight ramps linearly to 1
};

struct ScheduleSection {
  int rounds = 4;
  std::int64_t total_env_steps = 25000;
  double initial_fraction = 1.0 / 3.0;
  double episode_seconds = 60.0;
  int iterations_per_round = 2000;
  double keep_original_goal = 0.2;       // fraction of windows left unrelabeled
  int min_start_index = 4;               // earliest window step used as an imagination start
};

struct EvalSection {
  int pairs = 9;
  double episode_seconds = 30.0;
  double success_radius = 0.30;
  double success_yaw_deg = 15.0;
  double success_seconds = 3.0;
  double final_seconds = 1.0;
};

struct ExportSection {
  int ensemble_samples = 20;
  int ensemble_horizon = 40;
};

struct RunConfig {
  std::uint64_t seed = 1;
  EnvSection env;
  ModelSection model;
  ActorCriticConfig agent;
  ScheduleSection schedule;
  EvalSection eval;
  ExportSection export_;

  /// Throws std::invalid_argument on inconsistent or out-of-range values.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& file);

// ---------------------------------------------------------------- derived layout

/// Observation channels kept for the model and the goal features fed to
/// reward head, policy and value. Goal and battery channels are never model
/// inputs; yaw channels are dropped when yaw actuation is disabled.
struct Layout {
  std::vector<std::string> obs_channels;     // full observation
  std::vector<int> model_columns;            // indices into obs_channels
  ChannelLimits model_limits;
  int action_dim = 0;
  int goal_dim = 0;

  static Layout from(const RunConfig& config);
  Eigen::VectorXd model_obs(const Eigen::VectorXd& observation) const;
  Eigen::MatrixXd model_obs_rows(const Eigen::MatrixXd& observations) const;
};

/// Goal position normalised to the box, plus (cos, sin) of yaw when enabled.
Eigen::VectorXd goal_features(const Goal& goal, const CageConfig& cage);

LssmConfig model_config(const RunConfig& config, const Layout& layout);
ActorCriticConfig agent_config(const RunConfig& config, const Layout& layout);

// ---------------------------------------------------------------- evaluation

struct EpisodeOutcome {
  bool success = false;
  double time_to_success = 0.0;   // seconds
  double final_position_error = 0.0;  // m, successful episodes only
  double final_yaw_error_deg = 0.0;
};

struct EvalReport {
  std::vector<EpisodeOutcome> episodes;
  double success_rate = 0.0;
  double time_mean = 0.0, time_std = 0.0;
  double position_mean = 0.0, position_std = 0.0;
  double yaw_mean = 0.0, yaw_std = 0.0;

  void aggregate();
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Success iff some window of `success_seconds` keeps the position error
/// strictly below the radius (and the yaw error below the angle when
/// `yaw`); final errors average the `final_seconds` after that window.
EpisodeOutcome evaluate_success(const Eigen::VectorXd& position_error, const Eigen::VectorXd& yaw_error_rad,
                                double dt, bool yaw, const EvalSection& criteria);

// ---------------------------------------------------------------- controllers

/// Online controller: hovers while the first `init_window` observations
/// arrive, infers the initial state from them, then filters every new
/// observation and returns policy commands.
class OnlinePilot {
 public:
  OnlinePilot(const Lssm& model, const Agent& agent, const Layout& layout, const RunConfig& config);

  void reset(const Goal& goal);
  /// Command for the current observation (before smoothing). `noise` is
  /// zero for evaluation.
  Eigen::VectorXd act(const Eigen::VectorXd& observation, NoiseSource& noise);
  /// Records the executed action that followed the last observation.
  void executed(const Eigen::VectorXd& action);

 private:
  const Lssm* model_;
  const Agent* agent_;
  const Layout* layout_;
  const RunConfig* config_;
  Eigen::VectorXd goal_;
  Eigen::MatrixXd warm_obs_, warm_act_;
  int seen_ = 0;
  std::optional<FilterState> filter_;
  Eigen::VectorXd e1_, e2_;
};

struct Rollout {
  Episode episode;
  Eigen::VectorXd position_error;
  Eigen::VectorXd yaw_error;
};

using CommandFn = std::function<Eigen::VectorXd(const CageState&, const Eigen::VectorXd& observation, int step)>;

/// Runs one episode; `command` returns raw commands which are smoothed
/// before the env step. The observer noise and env share `rng`.
Rollout run_episode(const CageState& start, int steps, const RunConfig& config, const Layout& layout,
                    const CommandFn& command, const std::function<void(const Eigen::VectorXd&)>& on_executed,
                    Rng& rng);

// ---------------------------------------------------------------- training

struct IterationMetrics {
  std::int64_t iteration = 0;
  int round = 0;
  double model_loss = 0.0;
  double neg_elbo = 0.0;
  double recon = 0.0;
  double kl_s = 0.0;
  double kl_z = 0.0;
  double kl_h = 0.0;
  double reward_nll = 0.0;
  double model_grad_norm = 0.0;
  double value_loss = 0.0;
  double policy_objective = 0.0;
  double value_grad_norm = 0.0;
  double policy_grad_norm = 0.0;
  double imagined_reward = 0.0;
  std::int64_t env_steps = 0;
};

/// Buffered CSV writer flushing every `flush_every` rows.
class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& file, int flush_every = 100);
  ~MetricsLog();
  void append(const IterationMetrics& m);
  void flush();
  static std::string header();

 private:
  std::filesystem::path file_;
  int flush_every_;
  std::vector<IterationMetrics> buffer_;
};

/// Owns model, agent, optimisers and dataset for one run directory.
class Trainer {
 public:
  Trainer(RunConfig config, std::filesystem::path run_dir);

  const RunConfig& config() const { return config_; }
  const Layout& layout() const { return layout_; }
  Lssm& model() { return model_; }
  Agent& agent() { return agent_; }
  Dataset& dataset() { return dataset_; }

  /// Appends `episodes` PID episodes (or policy episodes once trained).
  std::int64_t collect_pid(int episodes, int steps_per_episode);
  std::int64_t collect_policy(int episodes, int steps_per_episode);

  /// One model step plus one controller step.
  IterationMetrics iterate();

  /// Full alternation of collection and training; writes metrics, checkpoint.
  void run(std::ostream* progress = nullptr);

  void save_checkpoint() const;
  /// Loads the checkpoint in the run directory if present.
  bool load_checkpoint();

  std::int64_t iterations() const { return iterations_; }

 private:
  void refresh_data();
  RolloutStart imagination_starts(const ElboResult& elbo, const std::vector<WindowRef>& refs,
                                  const std::vector<Goal>& goals, Eigen::Index window_length);

  RunConfig config_;
  std::filesystem::path dir_;
  Layout layout_;
  Rng rng_;
  Rng data_rng_;
  Rng batch_rng_;
  NoiseSource model_noise_;
  NoiseSource imagine_noise_;
  NoiseSource policy_noise_;
  Lssm model_;
  Agent agent_;
  Adam model_opt_;
  ControllerTrainer controller_;
  Dataset dataset_;
  std::vector<Episode> episodes_;
  std::vector<Eigen::MatrixXd> model_obs_;  // normalised per episode
  std::int64_t env_steps_ = 0;
  std::int64_t iterations_ = 0;
  int round_ = 0;
  std::unique_ptr<MetricsLog> log_;
};

/// Evaluates the checkpointed controller of `run_dir` on the first `pairs`
/// grid entries; writes eval_report.json and eval_trajectories.csv.
EvalReport evaluate_run(const RunConfig& config, const std::filesystem::path& run_dir, int pairs);

/// Writes export/{loss_curves,error_over_time,prediction_ensemble}.csv.
void export_run(const std::filesystem::path& run_dir);

// ---------------------------------------------------------------- diagnostics

struct GradientCheck {
  std::string name;
  double relative_error = 0.0;
  bool passed = false;
};

/// Central finite-difference checks of the ELBO, value loss and policy
/// objective gradients on a tiny random configuration.
std::vector<GradientCheck> gradient_diagnostics(std::uint64_t seed, double tolerance = 1e-4);

}  // namespace lp
