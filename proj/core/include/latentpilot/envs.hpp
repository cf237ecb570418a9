#pragma once

// Surrogate environments.
//
// The cage env is a stabilized point mass inside a 3.0 x 3.0 x 2.4 m box.
// Actions are (pitch, roll, throttle, yaw) in [-1, 1]: pitch and roll map to
// horizontal acceleration in the yaw frame, throttle to vertical
// acceleration (zero hovers), yaw to yaw rate. Velocity integrates first
// (semi-implicit Euler); leaving the box clips the position and zeroes that
// velocity component.
//
// The linear-Gaussian env is x_{t+1} = A x_t + B u_t + q, y_t = C x_t + r
// with diagonal noise, together with its exact Kalman filter.

#include "latentpilot/pipeline.hpp"
#include "latentpilot/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <string>
#include <vector>

namespace lp {

struct CageConfig {
  Eigen::Vector3d box_lo{-1.5, -1.5, 0.0};
  Eigen::Vector3d box_hi{1.5, 1.5, 2.4};
  double dt = 0.072;
  double horizontal_accel = 3.0;  // m/s^2 at full pitch/roll
  double vertical_accel = 2.0;    // m/s^2 at full throttle
  double yaw_rate = 1.5;          // rad/s at full yaw input
  double drag = 0.5;              // 1/s
  bool yaw_enabled = true;
  bool battery_enabled = true;
  double battery_decay = 2e-4;     // charge lost per step
  double battery_thrust_gain = 0.1;  // thrust scale = 1 - gain * (1 - charge)

  int action_dim() const { return yaw_enabled ? 4 : 3; }
  GoalBox goal_box(double margin = 0.2) const;
};

void to_json(nlohmann::json& j, const CageConfig& c);
void from_json(const nlohmann::json& j, CageConfig& c);

struct CageState {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();
  double yaw = 0.0;
  double yaw_rate = 0.0;
  Goal goal;
  double battery = 1.0;

  /// Row laid out as Episode::state.
  Eigen::Matrix<double, kStateColumns, 1> state_row() const;
};

/// -|p - g|^2 - 0.1 wrap(yaw - yaw_g)^2 - 0.1 |v|^2 - 0.001 |u|^2; the yaw
/// term is dropped when `yaw_enabled` is false.
double cage_reward(const Eigen::Vector3d& position, double yaw, const Eigen::Vector3d& velocity,
                   const Goal& goal, const Eigen::Ref<const Eigen::VectorXd>& action, bool yaw_enabled);
/// Same reward over an Episode::state row.
double cage_reward(const Eigen::Ref<const Eigen::VectorXd>& state_row,
                   const Eigen::Ref<const Eigen::VectorXd>& action, const Goal& goal, bool yaw_enabled);
RewardFn cage_reward_fn(bool yaw_enabled);

struct CageStep {
  CageState state;
  double reward = 0.0;  // evaluated at the pre-step state and the executed action
};

/// One step under executed action `u` (length config.action_dim()).
/// Throws std::invalid_argument on non-finite or out-of-limit actions.
CageStep cage_step(const CageState& state, const Eigen::Ref<const Eigen::VectorXd>& u, const CageConfig& config);

/// Random hovering start with a random goal, both inside the box margin.
CageState cage_reset(const CageConfig& config, Rng& rng);

struct EvalPair {
  Eigen::Vector3d start;
  double start_yaw = 0.0;
  Goal goal;
};

/// Nine fixed start/goal pairs; starts rest on the floor.
std::vector<EvalPair> eval_grid(const CageConfig& config);
CageState state_from_pair(const EvalPair& pair, const CageConfig& config);

// ---------------------------------------------------------------- observations

enum class ObsMode { FullState, PositionOnly, RangeVel };

ObsMode obs_mode_from_string(const std::string& name);
std::string to_string(ObsMode mode);

struct ObsConfig {
  ObsMode mode = ObsMode::FullState;
  double position_noise = 0.005;
  double velocity_noise = 0.02;
  double yaw_noise = 0.01;
  double range_noise = 0.03;
};

void to_json(nlohmann::json& j, const ObsConfig& c);
void from_json(const nlohmann::json& j, ObsConfig& c);

inline constexpr int kPlanarRays = 8;

/// Range from `position` to the box walls along planar heading `angle`.
double ray_range(const Eigen::Vector3d& position, double angle, const CageConfig& config);
/// kPlanarRays ranges at yaw + k pi/4, counter-clockwise from the heading.
std::array<double, kPlanarRays> planar_ranges(const Eigen::Vector3d& position, double yaw, const CageConfig& config);

/// Channel names of an observation vector for the given mode.
std::vector<std::string> observation_channels(ObsMode mode);
/// Sensor limits per observation channel.
ChannelLimits observation_limits(ObsMode mode, const CageConfig& config);

/// Produces observations for one episode. RangeVel keeps short histories
/// (filtered ranges, differenced velocity), hence the state.
class Observer {
 public:
  Observer(const ObsConfig& obs, const CageConfig& cage);

  void reset();
  Eigen::VectorXd observe(const CageState& state, Rng& rng);
  const ObsConfig& config() const { return obs_; }
  int dim() const { return static_cast<int>(observation_channels(obs_.mode).size()); }

 private:
  ObsConfig obs_;
  CageConfig cage_;
  std::vector<std::vector<double>> range_history_;
  Eigen::Vector3d last_position_ = Eigen::Vector3d::Zero();
  bool has_last_ = false;
};

// ---------------------------------------------------------------- exploration

struct PidGains {
  double kp_xy = 0.5, kd_xy = 0.5, ki_xy = 0.0;
  double kp_z = 0.5, kd_z = 0.5, ki_z = 0.0;
  double kp_yaw = 1.0;
  double integral_limit = 1.0;
};

void to_json(nlohmann::json& j, const PidGains& g);
void from_json(const nlohmann::json& j, PidGains& g);

struct PidMemory {
  Eigen::Vector3d integral = Eigen::Vector3d::Zero();
};

/// Per-axis PID toward `target` (derivative on measured velocity), rotated
/// into the yaw frame and clipped to [-1, 1]. Returns config.action_dim() values.
Eigen::VectorXd pid_explore(const CageState& state, const Goal& target, const PidGains& gains,
                            PidMemory& memory, const CageConfig& config);

/// Exploration target whose components (x, y, z, yaw) switch independently
/// after exponentially distributed intervals.
struct ExplorationTarget {
  Goal goal;
  std::array<double, 4> next_switch{};  // absolute simulated time
};

ExplorationTarget start_exploration(Rng& rng, const CageConfig& config, double mean_interval, double now = 0.0);

/// Resamples every component whose clock expired by `now`, uniformly inside
/// the goal box; returns the number of switches. An infinite mean never switches.
int resample_goal_components(ExplorationTarget& target, double now, double mean_interval,
                             const CageConfig& config, Rng& rng);

// ---------------------------------------------------------------- linear-Gaussian oracle

struct LgssmSpec {
  Eigen::MatrixXd a;                // n x n
  Eigen::MatrixXd b;                // n x k
  Eigen::MatrixXd c;                // d x n
  Eigen::VectorXd process_std;      // n
  Eigen::VectorXd measurement_std;  // d
  Eigen::VectorXd initial_mean;     // n
  Eigen::VectorXd initial_std;      // n

  int state_dim() const { return static_cast<int>(a.rows()); }
  int control_dim() const { return static_cast<int>(b.cols()); }
  int obs_dim() const { return static_cast<int>(c.rows()); }
  void validate() const;

  /// Lightly damped 2-state oscillator observed through its first coordinate.
  static LgssmSpec oscillator();
  /// Constant-velocity model with position measurements.
  static LgssmSpec constant_velocity(double dt = 0.1);
};

struct LgssmEpisode {
  Eigen::MatrixXd states;    // T x n
  Eigen::MatrixXd obs;       // T x d
  Eigen::MatrixXd controls;  // T x k; u_t acts between x_t and x_{t+1}
};

LgssmEpisode lgssm_rollout(const LgssmSpec& spec, const Eigen::MatrixXd& controls, Rng& rng);

struct KalmanResult {
  Eigen::MatrixXd filtered_mean;               // T x n, E[x_t | y_1..t]
  std::vector<Eigen::MatrixXd> filtered_cov;   // T of n x n
  Eigen::MatrixXd predicted_obs_mean;          // T x d, E[y_t | y_1..t-1]
  std::vector<Eigen::MatrixXd> predicted_obs_cov;
  double log_likelihood = 0.0;                 // sum of one-step predictive log densities
};

/// Exact filtering recursion. Throws std::runtime_error on a non-positive-definite
/// innovation covariance.
KalmanResult kalman_filter(const LgssmSpec& spec, const Eigen::MatrixXd& obs, const Eigen::MatrixXd& controls);

/// Observation means for k = 1..horizon steps after the filtered state at
/// time `t`, applying controls[t], controls[t+1], ...
Eigen::MatrixXd kalman_predict(const LgssmSpec& spec, const KalmanResult& filtered, const Eigen::MatrixXd& controls,
                               Eigen::Index t, int horizon);

}  // namespace lp
