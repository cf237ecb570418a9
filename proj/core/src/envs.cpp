#include "latentpilot/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace lp {

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::Vector3d to_vec3(const std::vector<double>& v) {
  if (v.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

std::vector<double> from_vec3(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

}  // namespace

GoalBox CageConfig::goal_box(double margin) const {
  const Eigen::Vector3d m = Eigen::Vector3d::Constant(margin);
  return GoalBox{box_lo + m, box_hi - m, yaw_enabled};
}

void to_json(nlohmann::json& j, const CageConfig& c) {
  j = {{"box_lo", from_vec3(c.box_lo)},
       {"box_hi", from_vec3(c.box_hi)},
       {"dt", c.dt},
       {"horizontal_accel", c.horizontal_accel},
       {"vertical_accel", c.vertical_accel},
       {"yaw_rate", c.yaw_rate},
       {"drag", c.drag},
       {"yaw_enabled", c.yaw_enabled},
       {"battery_enabled", c.battery_enabled},
       {"battery_decay", c.battery_decay},
       {"battery_thrust_gain", c.battery_thrust_gain}};
}

void from_json(const nlohmann::json& j, CageConfig& c) {
  const CageConfig d;
  c.box_lo = to_vec3(j.value("box_lo", from_vec3(d.box_lo)));
  c.box_hi = to_vec3(j.value("box_hi", from_vec3(d.box_hi)));
  c.dt = j.value("dt", d.dt);
  c.horizontal_accel = j.value("horizontal_accel", d.horizontal_accel);
  c.vertical_accel = j.value("vertical_accel", d.vertical_accel);
  c.yaw_rate = j.value("yaw_rate", d.yaw_rate);
  c.drag = j.value("drag", d.drag);
  c.yaw_enabled = j.value("yaw_enabled", d.yaw_enabled);
  c.battery_enabled = j.value("battery_enabled", d.battery_enabled);
  c.battery_decay = j.value("battery_decay", d.battery_decay);
  c.battery_thrust_gain = j.value("battery_thrust_gain", d.battery_thrust_gain);
  if (!(c.dt > 0.0) || !(c.box_lo.array() < c.box_hi.array()).all() || c.drag < 0.0) {
    throw std::invalid_argument("CageConfig: need dt > 0, box_lo < box_hi, drag >= 0");
  }
}

Eigen::Matrix<double, kStateColumns, 1> CageState::state_row() const {
  Eigen::Matrix<double, kStateColumns, 1> row;
  row << position, yaw, velocity;
  return row;
}

double cage_reward(const Eigen::Vector3d& position, double yaw, const Eigen::Vector3d& velocity, const Goal& goal,
                   const Eigen::Ref<const Eigen::VectorXd>& action, bool yaw_enabled) {
  double dist = 0.0, speed = 0.0, effort = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double d = position[k] - goal.position[k];
    dist += d * d;
    speed += velocity[k] * velocity[k];
  }
  for (Eigen::Index k = 0; k < action.size(); ++k) effort += action[k] * action[k];
  double r = -dist - 0.1 * speed - 0.001 * effort;
  if (yaw_enabled) {
    const double e = wrap_angle(yaw - goal.yaw);
    r -= 0.1 * e * e;
  }
  return r;
}

double cage_reward(const Eigen::Ref<const Eigen::VectorXd>& s, const Eigen::Ref<const Eigen::VectorXd>& action,
                   const Goal& goal, bool yaw_enabled) {
  if (s.size() != kStateColumns) throw std::invalid_argument("cage_reward: state row needs 7 columns");
  return cage_reward(s.head<3>(), s[3], s.tail<3>(), goal, action, yaw_enabled);
}

RewardFn cage_reward_fn(bool yaw_enabled) {
  return [yaw_enabled](const Eigen::Ref<const Eigen::VectorXd>& s, const Eigen::Ref<const Eigen::VectorXd>& u,
                       const Goal& g) { return cage_reward(s, u, g, yaw_enabled); };
}

CageStep cage_step(const CageState& s, const Eigen::Ref<const Eigen::VectorXd>& u, const CageConfig& c) {
  if (u.size() != c.action_dim()) throw std::invalid_argument("cage_step: action has wrong length");
  if (!u.allFinite()) throw std::invalid_argument("cage_step: non-finite action");
  if ((u.array().abs() > 1.0 + 1e-9).any()) throw std::invalid_argument("cage_step: action outside [-1, 1]");

  const double thrust = c.battery_enabled ? 1.0 - c.battery_thrust_gain * (1.0 - s.battery) : 1.0;
  const double cy = std::cos(s.yaw), sy = std::sin(s.yaw);
  Eigen::Vector3d accel;
  accel.x() = c.horizontal_accel * (cy * u[0] - sy * u[1]);
  accel.y() = c.horizontal_accel * (sy * u[0] + cy * u[1]);
  accel.z() = c.vertical_accel * u[2];
  accel = thrust * accel - c.drag * s.velocity;

  CageStep out{s, cage_reward(s.position, s.yaw, s.velocity, s.goal, u, c.yaw_enabled)};
  CageState& n = out.state;
  n.velocity = s.velocity + c.dt * accel;
  n.position = s.position + c.dt * n.velocity;
  for (int k = 0; k < 3; ++k) {
    if (n.position[k] < c.box_lo[k] || n.position[k] > c.box_hi[k]) {
      n.position[k] = std::clamp(n.position[k], c.box_lo[k], c.box_hi[k]);
      n.velocity[k] = 0.0;
    }
  }
  n.yaw_rate = c.yaw_enabled ? c.yaw_rate * u[3] : 0.0;
  n.yaw = c.yaw_enabled ? wrap_angle(s.yaw + c.dt * n.yaw_rate) : s.yaw;
  if (c.battery_enabled) n.battery = std::max(0.0, s.battery - c.battery_decay);
  return out;
}

CageState cage_reset(const CageConfig& c, Rng& rng) {
  const GoalBox box = c.goal_box();
  CageState s;
  for (int k = 0; k < 3; ++k) s.position[k] = rng.uniform(box.lo[k], box.hi[k]);
  s.yaw = c.yaw_enabled ? rng.uniform(-kPi, kPi) : 0.0;
  s.goal = draw_goal(rng, box);
  s.battery = c.battery_enabled ? rng.uniform(0.85, 1.0) : 1.0;
  return s;
}

std::vector<EvalPair> eval_grid(const CageConfig& c) {
  const Eigen::Vector3d mid = 0.5 * (c.box_lo + c.box_hi);
  const Eigen::Vector3d half = 0.5 * (c.box_hi - c.box_lo);
  std::vector<EvalPair> grid;
  for (int i = 0; i < 9; ++i) {
    const double sx = (i % 3) - 1.0, sy = (i / 3) - 1.0;
    EvalPair p;
    p.start = Eigen::Vector3d(mid.x() + 0.6 * half.x() * sx, mid.y() + 0.6 * half.y() * sy, c.box_lo.z());
    p.goal.position = Eigen::Vector3d(mid.x() - 0.5 * half.x() * (i == 4 ? -1.0 : sx),
                                      mid.y() - 0.5 * half.y() * sy,
                                      c.box_lo.z() + (0.35 + 0.1 * (i % 3)) * (c.box_hi.z() - c.box_lo.z()));
    if (c.yaw_enabled) {
      p.start_yaw = wrap_angle(i * kPi / 4.0);
      p.goal.yaw = wrap_angle(-i * kPi / 3.0 + kPi / 2.0);
    }
    grid.push_back(p);
  }
  return grid;
}

CageState state_from_pair(const EvalPair& pair, const CageConfig& c) {
  CageState s;
  s.position = pair.start;
  s.yaw = c.yaw_enabled ? pair.start_yaw : 0.0;
  s.goal = pair.goal;
  if (!c.yaw_enabled) s.goal.yaw = 0.0;
  return s;
}

// ---------------------------------------------------------------- observations

ObsMode obs_mode_from_string(const std::string& name) {
  if (name == "FullState") return ObsMode::FullState;
  if (name == "PositionOnly") return ObsMode::PositionOnly;
  if (name == "RangeVel") return ObsMode::RangeVel;
  throw std::invalid_argument("unknown observation mode '" + name + "'");
}

std::string to_string(ObsMode mode) {
  switch (mode) {
    case ObsMode::FullState: return "FullState";
    case ObsMode::PositionOnly: return "PositionOnly";
    case ObsMode::RangeVel: return "RangeVel";
  }
  return "?";
}

void to_json(nlohmann::json& j, const ObsConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"position_noise", c.position_noise},
       {"velocity_noise", c.velocity_noise},
       {"yaw_noise", c.yaw_noise},
       {"range_noise", c.range_noise}};
}

void from_json(const nlohmann::json& j, ObsConfig& c) {
  const ObsConfig d;
  c.mode = obs_mode_from_string(j.value("mode", to_string(d.mode)));
  c.position_noise = j.value("position_noise", d.position_noise);
  c.velocity_noise = j.value("velocity_noise", d.velocity_noise);
  c.yaw_noise = j.value("yaw_noise", d.yaw_noise);
  c.range_noise = j.value("range_noise", d.range_noise);
  if (c.position_noise < 0 || c.velocity_noise < 0 || c.yaw_noise < 0 || c.range_noise < 0) {
    throw std::invalid_argument("ObsConfig: noise levels must be >= 0");
  }
}

double ray_range(const Eigen::Vector3d& p, double angle, const CageConfig& c) {
  const double dx = std::cos(angle), dy = std::sin(angle);
  double best = std::numeric_limits<double>::infinity();
  auto hit = [&](double d, double lo, double hi, double from) {
    if (std::abs(d) < 1e-12) return;
    const double t = ((d > 0 ? hi : lo) - from) / d;
    best = std::min(best, t);
  };
  hit(dx, c.box_lo.x(), c.box_hi.x(), p.x());
  hit(dy, c.box_lo.y(), c.box_hi.y(), p.y());
  return std::max(best, 1e-3);
}

std::array<double, kPlanarRays> planar_ranges(const Eigen::Vector3d& p, double yaw, const CageConfig& c) {
  std::array<double, kPlanarRays> out{};
  for (int k = 0; k < kPlanarRays; ++k) out[static_cast<std::size_t>(k)] = ray_range(p, yaw + k * kPi / 4.0, c);
  return out;
}

std::vector<std::string> observation_channels(ObsMode mode) {
  std::vector<std::string> names;
  auto yaw6 = [&](const std::string& prefix) {
    for (int k = 0; k < 6; ++k) names.push_back(prefix + std::to_string(k));
  };
  auto goal = [&] {
    names.insert(names.end(), {"goal_x", "goal_y", "goal_z"});
    yaw6("goal_yaw_");
    names.emplace_back("battery");
  };
  if (mode == ObsMode::RangeVel) {
    for (int k = 0; k < kPlanarRays; ++k) names.push_back("range_" + std::to_string(k));
    names.emplace_back("range_down");
    names.insert(names.end(), {"v_x", "v_y", "v_z"});
    yaw6("yaw_");
    goal();
    return names;
  }
  names.insert(names.end(), {"p_x", "p_y", "p_z"});
  yaw6("yaw_");
  if (mode == ObsMode::FullState) names.insert(names.end(), {"v_x", "v_y", "v_z"});
  goal();
  return names;
}

ChannelLimits observation_limits(ObsMode mode, const CageConfig& c) {
  const std::vector<std::string> names = observation_channels(mode);
  const auto n = static_cast<Eigen::Index>(names.size());
  ChannelLimits lim{Eigen::VectorXd(n), Eigen::VectorXd(n)};
  const double diag = std::hypot(c.box_hi.x() - c.box_lo.x(), c.box_hi.y() - c.box_lo.y());
  const double max_speed = 3.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::string& name = names[static_cast<std::size_t>(i)];
    double lo = -1.0, hi = 1.0;
    const char axis = name.back();
    const int k = axis == 'x' ? 0 : axis == 'y' ? 1 : 2;
    if (name.rfind("p_", 0) == 0 || name.rfind("goal_", 0) == 0) {
      if (name.rfind("goal_yaw_", 0) != 0) {
        lo = c.box_lo[k];
        hi = c.box_hi[k];
      }
    } else if (name.rfind("v_", 0) == 0) {
      lo = -max_speed;
      hi = max_speed;
    } else if (name == "range_down") {
      lo = 0.0;
      hi = c.box_hi.z() - c.box_lo.z();
    } else if (name.rfind("range_", 0) == 0) {
      lo = 0.0;
      hi = diag;
    } else if (name == "battery") {
      lo = 0.0;
      hi = 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    lim.lo[i] = lo - pad;
    lim.hi[i] = hi + pad;
  }
  return lim;
}

Observer::Observer(const ObsConfig& obs, const CageConfig& cage) : obs_(obs), cage_(cage) { reset(); }

void Observer::reset() {
  range_history_.assign(kPlanarRays + 1, {});
  has_last_ = false;
}

Eigen::VectorXd Observer::observe(const CageState& s, Rng& rng) {
  auto noisy = [&](double v, double sd) { return sd > 0.0 ? v + rng.normal(0.0, sd) : v; };
  std::vector<double> out;
  const double yaw = cage_.yaw_enabled ? noisy(s.yaw, obs_.yaw_noise) : s.yaw;
  const Eigen::Matrix<double, 6, 1> yaw6 = yaw_to_6d(yaw);
  const Eigen::Matrix<double, 6, 1> goal6 = yaw_to_6d(s.goal.yaw);

  if (obs_.mode == ObsMode::RangeVel) {
    const auto ranges = planar_ranges(s.position, s.yaw, cage_);
    for (int k = 0; k <= kPlanarRays; ++k) {
      const double truth = k < kPlanarRays ? ranges[static_cast<std::size_t>(k)] : s.position.z() - cage_.box_lo.z();
      auto& h = range_history_[static_cast<std::size_t>(k)];
      h.push_back(std::max(0.0, noisy(truth, obs_.range_noise)));
      if (h.size() > static_cast<std::size_t>(kRangeWindow)) h.erase(h.begin());
      out.push_back(lidar_filter(h).range);
    }
    Eigen::Vector3d p;
    for (int k = 0; k < 3; ++k) p[k] = noisy(s.position[k], obs_.position_noise);
    const Eigen::Vector3d v = has_last_ ? Eigen::Vector3d((p - last_position_) / cage_.dt) : Eigen::Vector3d::Zero();
    last_position_ = p;
    has_last_ = true;
    out.insert(out.end(), v.data(), v.data() + 3);
  } else {
    for (int k = 0; k < 3; ++k) out.push_back(noisy(s.position[k], obs_.position_noise));
  }
  out.insert(out.end(), yaw6.data(), yaw6.data() + 6);
  if (obs_.mode == ObsMode::FullState) {
    for (int k = 0; k < 3; ++k) out.push_back(noisy(s.velocity[k], obs_.velocity_noise));
  }
  out.insert(out.end(), s.goal.position.data(), s.goal.position.data() + 3);
  out.insert(out.end(), goal6.data(), goal6.data() + 6);
  out.push_back(s.battery);
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

// ---------------------------------------------------------------- exploration

void to_json(nlohmann::json& j, const PidGains& g) {
  j = {{"kp_xy", g.kp_xy}, {"kd_xy", g.kd_xy}, {"ki_xy", g.ki_xy}, {"kp_z", g.kp_z},
       {"kd_z", g.kd_z},   {"ki_z", g.ki_z},   {"kp_yaw", g.kp_yaw}, {"integral_limit", g.integral_limit}};
}

void from_json(const nlohmann::json& j, PidGains& g) {
  const PidGains d;
  g.kp_xy = j.value("kp_xy", d.kp_xy);
  g.kd_xy = j.value("kd_xy", d.kd_xy);
  g.ki_xy = j.value("ki_xy", d.ki_xy);
  g.kp_z = j.value("kp_z", d.kp_z);
  g.kd_z = j.value("kd_z", d.kd_z);
  g.ki_z = j.value("ki_z", d.ki_z);
  g.kp_yaw = j.value("kp_yaw", d.kp_yaw);
  g.integral_limit = j.value("integral_limit", d.integral_limit);
}

Eigen::VectorXd pid_explore(const CageState& s, const Goal& target, const PidGains& g, PidMemory& memory,
                            const CageConfig& c) {
  const Eigen::Vector3d e = target.position - s.position;
  memory.integral = (memory.integral + c.dt * e).cwiseMax(-g.integral_limit).cwiseMin(g.integral_limit);
  const double ux = g.kp_xy * e.x() - g.kd_xy * s.velocity.x() + g.ki_xy * memory.integral.x();
  const double uy = g.kp_xy * e.y() - g.kd_xy * s.velocity.y() + g.ki_xy * memory.integral.y();
  const double uz = g.kp_z * e.z() - g.kd_z * s.velocity.z() + g.ki_z * memory.integral.z();
  const double cy = std::cos(s.yaw), sy = std::sin(s.yaw);
  Eigen::VectorXd u(c.action_dim());
  u[0] = cy * ux + sy * uy;
  u[1] = -sy * ux + cy * uy;
  u[2] = uz;
  if (c.yaw_enabled) u[3] = g.kp_yaw * wrap_angle(target.yaw - s.yaw);
  return u.cwiseMax(-1.0).cwiseMin(1.0);
}

namespace {

double next_interval(Rng& rng, double mean) {
  return std::isfinite(mean) ? rng.exponential(mean) : std::numeric_limits<double>::infinity();
}

}  // namespace

ExplorationTarget start_exploration(Rng& rng, const CageConfig& c, double mean_interval, double now) {
  if (!(mean_interval > 0.0)) throw std::invalid_argument("start_exploration: mean interval must be positive");
  ExplorationTarget t;
  t.goal = draw_goal(rng, c.goal_box());
  for (double& when : t.next_switch) when = now + next_interval(rng, mean_interval);
  return t;
}

int resample_goal_components(ExplorationTarget& t, double now, double mean_interval, const CageConfig& c, Rng& rng) {
  const GoalBox box = c.goal_box();
  int switches = 0;
  for (int k = 0; k < 4; ++k) {
    double& when = t.next_switch[static_cast<std::size_t>(k)];
    while (when <= now) {
      if (k < 3) {
        t.goal.position[k] = rng.uniform(box.lo[k], box.hi[k]);
      } else {
        t.goal.yaw = box.yaw ? rng.uniform(-kPi, kPi) : 0.0;
      }
      when += next_interval(rng, mean_interval);
      ++switches;
    }
  }
  return switches;
}

// ---------------------------------------------------------------- linear-Gaussian oracle

void LgssmSpec::validate() const {
  const auto n = a.rows();
  if (a.cols() != n || b.rows() != n || c.cols() != n || process_std.size() != n ||
      measurement_std.size() != c.rows() || initial_mean.size() != n || initial_std.size() != n) {
    throw std::invalid_argument("LgssmSpec: inconsistent dimensions");
  }
  auto positive = [](const Eigen::VectorXd& v) { return v.allFinite() && (v.array() > 0.0).all(); };
  if (!positive(process_std) || !positive(measurement_std) || !positive(initial_std)) {
    throw std::invalid_argument("LgssmSpec: noise stds must be finite and > 0");
  }
}

LgssmSpec LgssmSpec::oscillator() {
  LgssmSpec s;
  const double rho = 0.97, w = 0.25;
  s.a = rho * (Eigen::Matrix2d() << std::cos(w), -std::sin(w), std::sin(w), std::cos(w)).finished();
  s.b = (Eigen::MatrixXd(2, 1) << 0.0, 0.3).finished();
  s.c = (Eigen::MatrixXd(1, 2) << 1.0, 0.0).finished();
  s.process_std = Eigen::Vector2d(0.05, 0.05);
  s.measurement_std = Eigen::VectorXd::Constant(1, 0.2);
  s.initial_mean = Eigen::Vector2d::Zero();
  s.initial_std = Eigen::Vector2d(1.0, 1.0);
  return s;
}

LgssmSpec LgssmSpec::constant_velocity(double dt) {
  LgssmSpec s;
  s.a = (Eigen::Matrix2d() << 1.0, dt, 0.0, 1.0).finished();
  s.b = (Eigen::MatrixXd(2, 1) << 0.0, dt).finished();
  s.c = (Eigen::MatrixXd(1, 2) << 1.0, 0.0).finished();
  s.process_std = Eigen::Vector2d(0.01, 0.05);
  s.measurement_std = Eigen::VectorXd::Constant(1, 0.5);
  s.initial_mean = Eigen::Vector2d::Zero();
  s.initial_std = Eigen::Vector2d(1.0, 0.5);
  return s;
}

LgssmEpisode lgssm_rollout(const LgssmSpec& spec, const Eigen::MatrixXd& controls, Rng& rng) {
  spec.validate();
  if (controls.cols() != spec.control_dim()) throw std::invalid_argument("lgssm_rollout: control width mismatch");
  const Eigen::Index t_max = controls.rows();
  LgssmEpisode ep{Eigen::MatrixXd(t_max, spec.state_dim()), Eigen::MatrixXd(t_max, spec.obs_dim()), controls};
  Eigen::VectorXd x = spec.initial_mean + spec.initial_std.cwiseProduct(rng.normal_vector(spec.state_dim()));
  for (Eigen::Index t = 0; t < t_max; ++t) {
    ep.states.row(t) = x.transpose();
    ep.obs.row(t) = (spec.c * x + spec.measurement_std.cwiseProduct(rng.normal_vector(spec.obs_dim()))).transpose();
    x = spec.a * x + spec.b * controls.row(t).transpose() +
        spec.process_std.cwiseProduct(rng.normal_vector(spec.state_dim()));
  }
  return ep;
}

KalmanResult kalman_filter(const LgssmSpec& spec, const Eigen::MatrixXd& obs, const Eigen::MatrixXd& controls) {
  spec.validate();
  if (obs.cols() != spec.obs_dim() || controls.cols() != spec.control_dim() || controls.rows() != obs.rows()) {
    throw std::invalid_argument("kalman_filter: shape mismatch");
  }
  const Eigen::Index t_max = obs.rows();
  const int n = spec.state_dim(), d = spec.obs_dim();
  const Eigen::MatrixXd q = spec.process_std.array().square().matrix().asDiagonal();
  const Eigen::MatrixXd r = spec.measurement_std.array().square().matrix().asDiagonal();
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);

  KalmanResult out;
  out.filtered_mean.resize(t_max, n);
  out.predicted_obs_mean.resize(t_max, d);
  Eigen::VectorXd m = spec.initial_mean;
  Eigen::MatrixXd p = spec.initial_std.array().square().matrix().asDiagonal();
  for (Eigen::Index t = 0; t < t_max; ++t) {
    const Eigen::VectorXd y_hat = spec.c * m;
    const Eigen::MatrixXd s = spec.c * p * spec.c.transpose() + r;
    const Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (!s.allFinite() || llt.info() != Eigen::Success) throw std::runtime_error("kalman_filter: innovation covariance not positive definite");
    const Eigen::VectorXd innovation = obs.row(t).transpose() - y_hat;
    const Eigen::VectorXd white = llt.matrixL().solve(innovation);
    const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    out.log_likelihood += -0.5 * (white.squaredNorm() + log_det + d * std::log(2.0 * kPi));
    out.predicted_obs_mean.row(t) = y_hat.transpose();
    out.predicted_obs_cov.push_back(s);

    const Eigen::MatrixXd gain = llt.solve(spec.c * p).transpose();
    m += gain * innovation;
    const Eigen::MatrixXd joseph = eye - gain * spec.c;
    p = joseph * p * joseph.transpose() + gain * r * gain.transpose();
    out.filtered_mean.row(t) = m.transpose();
    out.filtered_cov.push_back(p);

    m = spec.a * m + spec.b * controls.row(t).transpose();
    p = spec.a * p * spec.a.transpose() + q;
  }
  return out;
}

Eigen::MatrixXd kalman_predict(const LgssmSpec& spec, const KalmanResult& filtered, const Eigen::MatrixXd& controls,
                               Eigen::Index t, int horizon) {
  if (t < 0 || t >= filtered.filtered_mean.rows() || horizon < 1 || t + horizon > controls.rows()) {
    throw std::out_of_range("kalman_predict: prediction window outside the episode");
  }
  Eigen::VectorXd m = filtered.filtered_mean.row(t).transpose();
  Eigen::MatrixXd out(horizon, spec.obs_dim());
  for (int k = 0; k < horizon; ++k) {
    m = spec.a * m + spec.b * controls.row(t + k).transpose();
    out.row(k) = (spec.c * m).transpose();
  }
  return out;
}

}  // namespace lp
