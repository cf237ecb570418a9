#include "latentpilot/pipeline.hpp"

#include "latentpilot/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numbers>
#include <stdexcept>

namespace lp {

static_assert(std::endian::native == std::endian::little,
              "episode I/O assumes a little-endian host");

namespace {

void require_size(Eigen::Index got, const ChannelLimits& limits, const char* what) {
  limits.validate();
  if (got != limits.size()) throw std::invalid_argument(std::string(what) + ": channel count mismatch");
}

}  // namespace

void ChannelLimits::validate() const {
  if (lo.size() != hi.size()) throw std::invalid_argument("ChannelLimits: lo/hi size mismatch");
  for (Eigen::Index i = 0; i < lo.size(); ++i) {
    if (!std::isfinite(lo[i]) || !std::isfinite(hi[i]) || !(lo[i] < hi[i])) {
      throw std::invalid_argument("ChannelLimits: need finite lo < hi on channel " + std::to_string(i));
    }
  }
}

Eigen::VectorXd normalize(const Eigen::VectorXd& x, const ChannelLimits& limits) {
  require_size(x.size(), limits, "normalize");
  return (2.0 * (x - limits.lo).array() / (limits.hi - limits.lo).array() - 1.0).matrix();
}

Eigen::VectorXd denormalize(const Eigen::VectorXd& x, const ChannelLimits& limits) {
  require_size(x.size(), limits, "denormalize");
  return ((x.array() + 1.0) * 0.5 * (limits.hi - limits.lo).array() + limits.lo.array()).matrix();
}

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& x, const ChannelLimits& limits) {
  require_size(x.cols(), limits, "normalize_rows");
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = normalize(x.row(r).transpose(), limits).transpose();
  return out;
}

Eigen::MatrixXd denormalize_rows(const Eigen::MatrixXd& x, const ChannelLimits& limits) {
  require_size(x.cols(), limits, "denormalize_rows");
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = denormalize(x.row(r).transpose(), limits).transpose();
  return out;
}

int normalize_rows_clipped(Eigen::MatrixXd& x, const ChannelLimits& limits) {
  require_size(x.cols(), limits, "normalize_rows_clipped");
  int clipped = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double v = std::clamp(x(r, c), limits.lo[c], limits.hi[c]);
      clipped += v != x(r, c);
      x(r, c) = v;
    }
  }
  x = normalize_rows(x, limits);
  return clipped;
}

// ---------------------------------------------------------------- smoothing

Eigen::VectorXd smooth_actions(std::span<const Eigen::VectorXd> history, int window) {
  if (history.empty()) throw std::invalid_argument("smooth_actions: empty history");
  if (window < 1) throw std::invalid_argument("smooth_actions: window must be >= 1");
  const auto n = static_cast<int>(history.size());
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(history.front().size());
  for (int k = n - window; k < n; ++k) sum += history[static_cast<std::size_t>(std::max(k, 0))];
  return sum / window;
}

ActionSmoother::ActionSmoother(int action_dim, int window) : window_(window) {
  if (window < 1) throw std::invalid_argument("ActionSmoother: window must be >= 1");
  reset(Eigen::VectorXd::Zero(action_dim));
}

void ActionSmoother::reset(const Eigen::VectorXd& fill) {
  history_.assign(static_cast<std::size_t>(window_), fill);
}

Eigen::VectorXd ActionSmoother::push(const Eigen::VectorXd& command) {
  if (command.size() != history_.front().size()) throw std::invalid_argument("ActionSmoother: bad command size");
  history_.erase(history_.begin());
  history_.push_back(command);
  return current();
}

Eigen::VectorXd ActionSmoother::current() const { return smooth_actions(history_, window_); }

// ---------------------------------------------------------------- kinematics

Eigen::MatrixXd finite_diff_velocity(const Eigen::MatrixXd& positions, double dt) {
  if (positions.rows() < 2) throw std::invalid_argument("finite_diff_velocity: need T >= 2");
  if (!(dt > 0.0)) throw std::invalid_argument("finite_diff_velocity: dt must be positive");
  const Eigen::Index t = positions.rows();
  Eigen::MatrixXd v(t, positions.cols());
  v.bottomRows(t - 1) = (positions.bottomRows(t - 1) - positions.topRows(t - 1)) / dt;
  v.row(0) = v.row(1);
  return v;
}

Eigen::Matrix<double, 6, 1> rot_to_6d(const Eigen::Matrix3d& r) {
  Eigen::Matrix<double, 6, 1> v;
  v << r.col(0), r.col(1);
  return v;
}

Eigen::Matrix3d six_d_to_rot(const Eigen::Matrix<double, 6, 1>& v) {
  constexpr double kTol = 1e-9;
  const Eigen::Vector3d a = v.head<3>(), b = v.tail<3>();
  if (a.norm() < kTol) throw std::invalid_argument("six_d_to_rot: degenerate first column");
  const Eigen::Vector3d c0 = a.normalized();
  const Eigen::Vector3d b_perp = b - c0.dot(b) * c0;
  if (b_perp.norm() < kTol * std::max(1.0, b.norm())) {
    throw std::invalid_argument("six_d_to_rot: columns are parallel or second column is zero");
  }
  const Eigen::Vector3d c1 = b_perp.normalized();
  Eigen::Matrix3d r;
  r << c0, c1, c0.cross(c1);
  return r;
}

Eigen::Matrix<double, 6, 1> yaw_to_6d(double yaw) {
  return rot_to_6d(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix());
}

double six_d_to_yaw(const Eigen::Matrix<double, 6, 1>& v) {
  const Eigen::Matrix3d r = six_d_to_rot(v);
  return std::atan2(r(1, 0), r(0, 0));
}

double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  if (a > -std::numbers::pi && a <= std::numbers::pi) return a;
  a = std::fmod(a + std::numbers::pi, kTwoPi);
  if (a <= 0.0) a += kTwoPi;
  return a - std::numbers::pi;
}

RangeEstimate lidar_filter(std::span<const double> readings) {
  if (readings.empty()) throw std::invalid_argument("lidar_filter: empty history");
  constexpr int n = kRangeWindow;
  double window[n];
  const auto size = static_cast<int>(readings.size());
  for (int k = 0; k < n; ++k) window[k] = readings[static_cast<std::size_t>(std::max(size - n + k, 0))];
  double weighted = 0.0, weights = 0.0;
  for (int k = 0; k < n; ++k) {
    weighted += (k + 1) * window[k];
    weights += k + 1;
  }
  // Least-squares slope against x = 0..n-1.
  const double x_mean = (n - 1) / 2.0;
  double y_mean = 0.0;
  for (double y : window) y_mean += y / n;
  double num = 0.0, den = 0.0;
  for (int k = 0; k < n; ++k) {
    num += (k - x_mean) * (window[k] - y_mean);
    den += (k - x_mean) * (k - x_mean);
  }
  return {weighted / weights, num / den};
}

// ---------------------------------------------------------------- episodes

void Episode::validate() const {
  const Eigen::Index t = obs.rows();
  if (!(dt > 0.0)) throw std::invalid_argument("Episode: dt must be positive");
  if (static_cast<Eigen::Index>(obs_channels.size()) != obs.cols()) {
    throw std::invalid_argument("Episode: obs channel names do not match columns");
  }
  if (actions.rows() != t || rewards.size() != t) throw std::invalid_argument("Episode: inconsistent T");
  if (commands.size() > 0 && (commands.rows() != t || commands.cols() != actions.cols())) {
    throw std::invalid_argument("Episode: commands shape mismatch");
  }
  if (state.size() > 0 && (state.rows() != t || state.cols() != kStateColumns)) {
    throw std::invalid_argument("Episode: state shape mismatch");
  }
}

int Episode::channel(const std::string& name) const {
  const auto it = std::find(obs_channels.begin(), obs_channels.end(), name);
  return it == obs_channels.end() ? -1 : static_cast<int>(it - obs_channels.begin());
}

namespace {

template <typename Derived>
void quantize_block(Eigen::MatrixBase<Derived>& m) {
  m = m.template cast<float>().template cast<double>();
}

}  // namespace

void quantize(Episode& e) {
  quantize_block(e.obs);
  quantize_block(e.actions);
  quantize_block(e.commands);
  quantize_block(e.rewards);
  quantize_block(e.state);
}

Episode slice(const Episode& e, Eigen::Index start, Eigen::Index length) {
  if (start < 0 || length < 0 || start + length > e.steps()) throw std::out_of_range("slice: range outside episode");
  Episode out;
  out.id = e.id;
  out.dt = e.dt;
  out.obs_channels = e.obs_channels;
  out.obs = e.obs.middleRows(start, length);
  out.actions = e.actions.middleRows(start, length);
  if (e.commands.size() > 0) out.commands = e.commands.middleRows(start, length);
  out.rewards = e.rewards.segment(start, length);
  if (e.state.size() > 0) out.state = e.state.middleRows(start, length);
  out.goal = e.goal;
  out.metadata = e.metadata;
  return out;
}

namespace {

constexpr char kMagic[4] = {'L', 'P', 'E', 'P'};
const char* const kStateNames[kStateColumns] = {"p_x", "p_y", "p_z", "yaw", "v_x", "v_y", "v_z"};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("read_episode: truncated file");
  return v;
}

}  // namespace

void write_episode(const std::filesystem::path& file, const Episode& e) {
  e.validate();
  std::vector<std::string> names;
  std::vector<const Eigen::MatrixXd*> blocks;
  for (const auto& c : e.obs_channels) names.push_back("obs:" + c);
  for (Eigen::Index i = 0; i < e.actions.cols(); ++i) names.push_back("act:" + std::to_string(i));
  for (Eigen::Index i = 0; i < e.commands.cols(); ++i) names.push_back("cmd:" + std::to_string(i));
  names.emplace_back("reward");
  for (Eigen::Index i = 0; i < e.state.cols(); ++i) names.push_back(std::string("state:") + kStateNames[i]);

  const Eigen::Index t = e.steps();
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> table(t, static_cast<Eigen::Index>(names.size()));
  Eigen::Index col = 0;
  auto append = [&](const Eigen::MatrixXd& m) {
    if (m.size() == 0) return;
    table.middleCols(col, m.cols()) = m.cast<float>();
    col += m.cols();
  };
  append(e.obs);
  append(e.actions);
  append(e.commands);
  append(e.rewards);
  append(e.state);

  std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_episode: cannot open " + file.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(names.size()));
  for (const auto& n : names) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(n.size()));
    out.write(n.data(), static_cast<std::streamsize>(n.size()));
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t));
  out.write(reinterpret_cast<const char*>(table.data()), static_cast<std::streamsize>(table.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write_episode: write failed for " + file.string());
}

Episode read_episode(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("read_episode: cannot open " + file.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kMagic)) throw std::runtime_error("read_episode: bad magic in " + file.string());
  const auto channels = get<std::uint32_t>(in);
  std::vector<std::string> names(channels);
  for (auto& n : names) {
    n.resize(get<std::uint16_t>(in));
    in.read(n.data(), static_cast<std::streamsize>(n.size()));
  }
  const auto t = static_cast<Eigen::Index>(get<std::uint32_t>(in));
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> table(t, static_cast<Eigen::Index>(channels));
  in.read(reinterpret_cast<char*>(table.data()), static_cast<std::streamsize>(table.size() * sizeof(float)));
  if (!in) throw std::runtime_error("read_episode: truncated data in " + file.string());
  const Eigen::MatrixXd data = table.cast<double>();

  Episode e;
  std::vector<Eigen::Index> obs, act, cmd, st;
  Eigen::Index reward = -1;
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(names.size()); ++c) {
    const std::string& n = names[static_cast<std::size_t>(c)];
    if (n.rfind("obs:", 0) == 0) {
      obs.push_back(c);
      e.obs_channels.push_back(n.substr(4));
    } else if (n.rfind("act:", 0) == 0) {
      act.push_back(c);
    } else if (n.rfind("cmd:", 0) == 0) {
      cmd.push_back(c);
    } else if (n.rfind("state:", 0) == 0) {
      st.push_back(c);
    } else if (n == "reward") {
      reward = c;
    }
  }
  if (reward < 0) throw std::runtime_error("read_episode: missing reward channel");
  e.obs = data(Eigen::all, obs);
  e.actions = data(Eigen::all, act);
  if (!cmd.empty()) e.commands = data(Eigen::all, cmd);
  e.rewards = data.col(reward);
  if (!st.empty()) e.state = data(Eigen::all, st);
  return e;
}

Dataset::Dataset(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_ / "episodes");
}

void Dataset::append(const Episode& episode) {
  if (episode.id.empty()) throw std::invalid_argument("Dataset::append: episode needs an id");
  const std::string file = "episodes/" + episode.id + ".bin";
  write_episode(root_ / file, episode);
  nlohmann::json line = {{"id", episode.id},
                         {"file", file},
                         {"steps", episode.steps()},
                         {"dt", episode.dt},
                         {"goal", {episode.goal.position.x(), episode.goal.position.y(),
                                   episode.goal.position.z(), episode.goal.yaw}},
                         {"metadata", episode.metadata}};
  std::ofstream(root_ / "manifest.jsonl", std::ios::app) << line.dump() << '\n';
}

std::vector<Episode> Dataset::load() const {
  std::vector<Episode> out;
  std::ifstream manifest(root_ / "manifest.jsonl");
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    Episode e = read_episode(root_ / j.at("file").get<std::string>());
    e.id = j.at("id").get<std::string>();
    e.dt = j.at("dt").get<double>();
    const auto g = j.at("goal").get<std::vector<double>>();
    e.goal.position = Eigen::Vector3d(g.at(0), g.at(1), g.at(2));
    e.goal.yaw = g.at(3);
    e.metadata = j.value("metadata", nlohmann::json::object());
    e.validate();
    out.push_back(std::move(e));
  }
  return out;
}

std::size_t Dataset::size() const {
  std::ifstream manifest(root_ / "manifest.jsonl");
  std::size_t n = 0;
  std::string line;
  while (std::getline(manifest, line)) n += !line.empty();
  return n;
}

std::size_t Dataset::total_steps() const {
  std::ifstream manifest(root_ / "manifest.jsonl");
  std::size_t n = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    if (!line.empty()) n += nlohmann::json::parse(line).at("steps").get<std::size_t>();
  }
  return n;
}

void Dataset::write_limits(const std::vector<std::string>& channels, const ChannelLimits& limits) const {
  limits.validate();
  if (static_cast<Eigen::Index>(channels.size()) != limits.size()) {
    throw std::invalid_argument("write_limits: channel count mismatch");
  }
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    j[channels[i]] = {limits.lo[k], limits.hi[k]};
  }
  std::ofstream(root_ / "limits.json") << j.dump(2) << '\n';
}

ChannelLimits Dataset::read_limits(const std::vector<std::string>& channels) const {
  std::ifstream in(root_ / "limits.json");
  if (!in) throw std::runtime_error("read_limits: missing " + (root_ / "limits.json").string());
  const nlohmann::json j = nlohmann::json::parse(in);
  ChannelLimits limits{Eigen::VectorXd(static_cast<Eigen::Index>(channels.size())),
                       Eigen::VectorXd(static_cast<Eigen::Index>(channels.size()))};
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (!j.contains(channels[i])) throw std::runtime_error("read_limits: no limits for channel " + channels[i]);
    const auto k = static_cast<Eigen::Index>(i);
    limits.lo[k] = j[channels[i]].at(0).get<double>();
    limits.hi[k] = j[channels[i]].at(1).get<double>();
  }
  limits.validate();
  return limits;
}

// ---------------------------------------------------------------- windows

std::vector<WindowRef> window_episodes(const std::vector<Episode>& episodes, Eigen::Index length,
                                       Eigen::Index stride) {
  if (length < 1 || stride < 1) throw std::invalid_argument("window_episodes: length and stride must be >= 1");
  std::vector<WindowRef> out;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Eigen::Index t = episodes[i].steps();
    if (t < length) {
      std::cerr << "window_episodes: skipping episode '" << episodes[i].id << "' (" << t << " < " << length
                << " steps)\n";
      continue;
    }
    Eigen::Index start = 0;
    for (; start + length <= t; start += stride) out.push_back({i, start, length});
    if (start - stride + length < t) out.push_back({i, t - length, length});
  }
  return out;
}

Eigen::Index draw_window_length(Rng& rng, Eigen::Index lo, Eigen::Index hi) {
  if (lo < 1 || hi < lo) throw std::invalid_argument("draw_window_length: need 1 <= lo <= hi");
  return rng.uniform_int(static_cast<int>(lo), static_cast<int>(hi));
}

// ---------------------------------------------------------------- relabeling

void relabel_goal(Episode& w, const Goal& goal, const RewardFn& reward) {
  if (w.state.rows() != w.steps() || w.state.cols() != kStateColumns) {
    throw std::invalid_argument("relabel_goal: window lacks ground-truth state columns");
  }
  w.goal = goal;
  const char* const axes[3] = {"goal_x", "goal_y", "goal_z"};
  for (int k = 0; k < 3; ++k) {
    if (const int c = w.channel(axes[k]); c >= 0) w.obs.col(c).setConstant(goal.position[k]);
  }
  const Eigen::Matrix<double, 6, 1> yaw6 = yaw_to_6d(goal.yaw);
  for (int k = 0; k < 6; ++k) {
    if (const int c = w.channel("goal_yaw_" + std::to_string(k)); c >= 0) w.obs.col(c).setConstant(yaw6[k]);
  }
  for (Eigen::Index t = 0; t < w.steps(); ++t) {
    w.rewards[t] = reward(w.state.row(t).transpose(), w.actions.row(t).transpose(), goal);
  }
}

Goal draw_goal(Rng& rng, const GoalBox& box) {
  Goal g;
  for (int k = 0; k < 3; ++k) g.position[k] = rng.uniform(box.lo[k], box.hi[k]);
  g.yaw = box.yaw ? wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi)) : 0.0;
  return g;
}

}  // namespace lp
