#pragma once

// Episode storage and preprocessing.
//
// Dataset directory layout:
//   manifest.jsonl         one JSON object per episode (id, file, steps, dt, goal, metadata)
//   episodes/<id>.bin      "LPEP" magic, uint32 channel count, per channel a uint16
//                          name length and the name bytes, uint32 T, then T x channels
//                          little-endian float32, row-major
//   limits.json            {"channel": [lo, hi], ...}

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace lp {

class Rng;

// ---------------------------------------------------------------- normalization

struct ChannelLimits {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  Eigen::Index size() const { return lo.size(); }
  /// Throws std::invalid_argument unless sizes match and lo < hi everywhere.
  void validate() const;
};

/// 2 (x - lo) / (hi - lo) - 1, per channel. Rows of a matrix are samples.
Eigen::VectorXd normalize(const Eigen::VectorXd& x, const ChannelLimits& limits);
Eigen::VectorXd denormalize(const Eigen::VectorXd& x, const ChannelLimits& limits);
Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& x, const ChannelLimits& limits);
Eigen::MatrixXd denormalize_rows(const Eigen::MatrixXd& x, const ChannelLimits& limits);
/// Clips into [lo, hi] before normalizing; returns the number of clipped entries.
int normalize_rows_clipped(Eigen::MatrixXd& x, const ChannelLimits& limits);

// ---------------------------------------------------------------- smoothing

inline constexpr int kSmoothingWindow = 6;

/// Mean of the last `window` entries; shorter histories are front-padded
/// with their first entry.
Eigen::VectorXd smooth_actions(std::span<const Eigen::VectorXd> history, int window = kSmoothingWindow);

/// Fixed-length command history feeding smooth_actions.
class ActionSmoother {
 public:
  ActionSmoother(int action_dim, int window = kSmoothingWindow);
  void reset(const Eigen::VectorXd& fill);
  /// Appends a command and returns the executed action.
  Eigen::VectorXd push(const Eigen::VectorXd& command);
  /// Executed action without appending.
  Eigen::VectorXd current() const;
  const std::vector<Eigen::VectorXd>& history() const { return history_; }
  int window() const { return window_; }

 private:
  int window_;
  std::vector<Eigen::VectorXd> history_;  // oldest first, always `window_` long
};

// ---------------------------------------------------------------- kinematics

/// Backward differences of T x d positions; the first row copies the second.
Eigen::MatrixXd finite_diff_velocity(const Eigen::MatrixXd& positions, double dt);

/// First two columns of R, column-major: (R00, R10, R20, R01, R11, R21).
Eigen::Matrix<double, 6, 1> rot_to_6d(const Eigen::Matrix3d& r);
/// Gram-Schmidt inverse. Throws std::invalid_argument on degenerate columns.
Eigen::Matrix3d six_d_to_rot(const Eigen::Matrix<double, 6, 1>& v);
Eigen::Matrix<double, 6, 1> yaw_to_6d(double yaw);
double six_d_to_yaw(const Eigen::Matrix<double, 6, 1>& v);
/// Wraps into (-pi, pi].
double wrap_angle(double a);

struct RangeEstimate {
  double range = 0.0;
  double rate = 0.0;  // per step
};

inline constexpr int kRangeWindow = 5;

/// Linearly weighted mean (weights 1..n, newest heaviest) and least-squares
/// slope over the last `kRangeWindow` readings, oldest first. Short histories
/// are front-padded with their first reading.
RangeEstimate lidar_filter(std::span<const double> readings);

// ---------------------------------------------------------------- episodes

struct Goal {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  double yaw = 0.0;
};

/// Ground-truth state columns carried by every episode.
inline constexpr int kStateColumns = 7;  // p_x p_y p_z yaw v_x v_y v_z

struct Episode {
  std::string id;
  double dt = 0.072;
  std::vector<std::string> obs_channels;
  Eigen::MatrixXd obs;       // T x obs_channels
  Eigen::MatrixXd actions;   // T x n_u, executed
  Eigen::MatrixXd commands;  // T x n_u, raw commands before smoothing
  Eigen::VectorXd rewards;   // T, r_t = r(state_t, executed_t)
  Eigen::MatrixXd state;     // T x kStateColumns
  Goal goal;
  nlohmann::json metadata = nlohmann::json::object();

  Eigen::Index steps() const { return obs.rows(); }
  /// Throws std::invalid_argument on inconsistent shapes or dt <= 0.
  void validate() const;
  int channel(const std::string& name) const;  // -1 when absent
};

/// Rounds every numeric field to float32 precision, as stored on disk.
void quantize(Episode& episode);

/// Copy of steps [start, start + length).
Episode slice(const Episode& episode, Eigen::Index start, Eigen::Index length);

void write_episode(const std::filesystem::path& file, const Episode& episode);
/// Reads the numeric block; id, dt, goal and metadata come from the manifest.
Episode read_episode(const std::filesystem::path& file);

class Dataset {
 public:
  explicit Dataset(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  /// Writes episodes/<id>.bin and appends a manifest line.
  void append(const Episode& episode);
  std::vector<Episode> load() const;
  std::size_t size() const;
  std::size_t total_steps() const;

  void write_limits(const std::vector<std::string>& channels, const ChannelLimits& limits) const;
  ChannelLimits read_limits(const std::vector<std::string>& channels) const;

 private:
  std::filesystem::path root_;
};

// ---------------------------------------------------------------- windows

struct WindowRef {
  std::size_t episode = 0;
  Eigen::Index start = 0;
  Eigen::Index length = 0;
};

/// Windows of exactly `length` steps every `stride` steps, plus one flush
/// with each episode's end. Episodes shorter than `length` are skipped with a
/// warning on stderr.
std::vector<WindowRef> window_episodes(const std::vector<Episode>& episodes, Eigen::Index length,
                                       Eigen::Index stride);
Eigen::Index draw_window_length(Rng& rng, Eigen::Index lo = 40, Eigen::Index hi = 80);

// ---------------------------------------------------------------- relabeling

using RewardFn = std::function<double(const Eigen::Ref<const Eigen::VectorXd>& state,
                                      const Eigen::Ref<const Eigen::VectorXd>& action,
                                      const Goal& goal)>;

/// Overwrites the goal, its observation channels (goal_x, goal_y, goal_z,
/// goal_yaw_0..5 when present) and every reward from the stored state and
/// executed actions. Throws std::invalid_argument without state columns.
void relabel_goal(Episode& window, const Goal& goal, const RewardFn& reward);

struct GoalBox {
  Eigen::Vector3d lo;
  Eigen::Vector3d hi;
  bool yaw = true;  // draw yaw uniformly in (-pi, pi], else 0
};

Goal draw_goal(Rng& rng, const GoalBox& box);

}  // namespace lp
