#include "latentpilot/harness.hpp"

#include "latentpilot/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace lp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + what);
  };
  require(env.cage.dt > 0.0, "env.cage.dt must be positive");
  require((env.cage.box_hi - env.cage.box_lo).minCoeff() > 0.0, "env.cage box is empty");
  require(env.explore_interval > 0.0, "env.explore_interval must be positive");
  require(env.explore_noise >= 0.0, "env.explore_noise must be non-negative");
  require(model.lr > 0.0, "model.lr must be positive");
  require(model.batch >= 1, "model.batch must be >= 1");
  require(model.window_min >= 2 && model.window_min <= model.window_max, "model window range invalid");
  require(model.window_min > model.lssm.init_window, "model.window_min must exceed lssm.init_window");
  require(model.lssm.init_window >= 1, "lssm.init_window must be >= 1");
  require(model.lssm.z_dim >= 1 && model.lssm.s_dim >= 1 && model.lssm.num_base >= 1, "lssm sizes must be >= 1");
  require(model.reward_scale > 0.0, "model.reward_scale must be positive");
  require(model.kl_warmup >= 0, "model.kl_warmup must be >= 0");
  require(agent.horizon >= 1, "agent.horizon must be >= 1");
  require(agent.gamma > 0.0 && agent.gamma <= 1.0, "agent.gamma must be in (0, 1]");
  require(agent.smoothing_window >= 1, "agent.smoothing_window must be >= 1");
  require(agent.batch >= 1, "agent.batch must be >= 1");
  require(agent.actor_every >= 1, "agent.actor_every must be >= 1");
  require(agent.policy_lr > 0.0 && agent.value_lr > 0.0, "agent learning rates must be positive");
  require(agent.target_rate > 0.0 && agent.target_rate <= 1.0, "agent.target_rate must be in (0, 1]");
  require(schedule.rounds >= 1, "schedule.rounds must be >= 1");
  require(schedule.total_env_steps >= 0, "schedule.total_env_steps must be >= 0");
  require(schedule.initial_fraction > 0.0 && schedule.initial_fraction <= 1.0,
          "schedule.initial_fraction must be in (0, 1]");
  require(schedule.episode_seconds > 0.0, "schedule.episode_seconds must be positive");
  require(schedule.iterations_per_round >= 0, "schedule.iterations_per_round must be >= 0");
  require(schedule.keep_original_goal >= 0.0 && schedule.keep_original_goal <= 1.0,
          "schedule.keep_original_goal must be in [0, 1]");
  require(schedule.min_start_index >= 0, "schedule.min_start_index must be >= 0");
  require(eval.pairs >= 0 && eval.pairs <= 9, "eval.pairs must be in [0, 9]");
  require(eval.episode_seconds > 0.0 && eval.success_radius > 0.0 && eval.success_seconds > 0.0,
          "eval durations and radius must be positive");
  require(export_.ensemble_samples >= 1 && export_.ensemble_horizon >= 1, "export sizes must be >= 1");
}

void to_json(json& j, const RunConfig& c) {
  j = json{
      {"seed", c.seed},
      {"env",
       {{"cage", c.env.cage},
        {"obs", c.env.obs},
        {"pid", c.env.pid},
        {"explore_interval", c.env.explore_interval},
        {"explore_noise", c.env.explore_noise}}},
      {"model",
       {{"lssm", c.model.lssm},
        {"lr", c.model.lr},
        {"batch", c.model.batch},
        {"window_min", c.model.window_min},
        {"window_max", c.model.window_max},
        {"clip_norm", c.model.clip_norm},
        {"reward_scale", c.model.reward_scale},
        {"kl_warmup", c.model.kl_warmup}}},
      {"agent", c.agent},
      {"schedule",
       {{"rounds", c.schedule.rounds},
        {"total_env_steps", c.schedule.total_env_steps},
        {"initial_fraction", c.schedule.initial_fraction},
        {"episode_seconds", c.schedule.episode_seconds},
        {"iterations_per_round", c.schedule.iterations_per_round},
        {"keep_original_goal", c.schedule.keep_original_goal},
        {"min_start_index", c.schedule.min_start_index}}},
      {"eval",
       {{"pairs", c.eval.pairs},
        {"episode_seconds", c.eval.episode_seconds},
        {"success_radius", c.eval.success_radius},
        {"success_yaw_deg", c.eval.success_yaw_deg},
        {"success_seconds", c.eval.success_seconds},
        {"final_seconds", c.eval.final_seconds}}},
      {"export", {{"ensemble_samples", c.export_.ensemble_samples}, {"ensemble_horizon", c.export_.ensemble_horizon}}},
  };
  for (const char* derived : {"obs_dim", "action_dim", "goal_dim"}) j["model"]["lssm"].erase(derived);
  for (const char* derived : {"latent_dim", "action_dim", "goal_dim", "action_lo", "action_hi"}) j["agent"].erase(derived);
}

void from_json(const json& j, RunConfig& c) {
  const RunConfig d;
  const json empty = json::object();
  auto section = [&](const char* key) -> const json& { return j.contains(key) ? j.at(key) : empty; };
  c.seed = j.value("seed", d.seed);

  const json& env = section("env");
  c.env.cage = env.contains("cage") ? env.at("cage").get<CageConfig>() : d.env.cage;
  c.env.obs = env.contains("obs") ? env.at("obs").get<ObsConfig>() : d.env.obs;
  c.env.pid = env.contains("pid") ? env.at("pid").get<PidGains>() : d.env.pid;
  c.env.explore_interval = env.value("explore_interval", d.env.explore_interval);
  c.env.explore_noise = env.value("explore_noise", d.env.explore_noise);

  const json& model = section("model");
  c.model.lssm = model.contains("lssm") ? model.at("lssm").get<LssmConfig>() : d.model.lssm;
  c.model.lr = model.value("lr", d.model.lr);
  c.model.batch = model.value("batch", d.model.batch);
  c.model.window_min = model.value("window_min", d.model.window_min);
  c.model.window_max = model.value("window_max", d.model.window_max);
  c.model.clip_norm = model.value("clip_norm", d.model.clip_norm);
  c.model.reward_scale = model.value("reward_scale", d.model.reward_scale);
  c.model.kl_warmup = model.value("kl_warmup", d.model.kl_warmup);

  c.agent = j.contains("agent") ? j.at("agent").get<ActorCriticConfig>() : d.agent;

  const json& s = section("schedule");
  c.schedule.rounds = s.value("rounds", d.schedule.rounds);
  c.schedule.total_env_steps = s.value("total_env_steps", d.schedule.total_env_steps);
  c.schedule.initial_fraction = s.value("initial_fraction", d.schedule.initial_fraction);
  c.schedule.episode_seconds = s.value("episode_seconds", d.schedule.episode_seconds);
  c.schedule.iterations_per_round = s.value("iterations_per_round", d.schedule.iterations_per_round);
  c.schedule.keep_original_goal = s.value("keep_original_goal", d.schedule.keep_original_goal);
  c.schedule.min_start_index = s.value("min_start_index", d.schedule.min_start_index);

  const json& e = section("eval");
  c.eval.pairs = e.value("pairs", d.eval.pairs);
  c.eval.episode_seconds = e.value("episode_seconds", d.eval.episode_seconds);
  c.eval.success_radius = e.value("success_radius", d.eval.success_radius);
  c.eval.success_yaw_deg = e.value("success_yaw_deg", d.eval.success_yaw_deg);
  c.eval.success_seconds = e.value("success_seconds", d.eval.success_seconds);
  c.eval.final_seconds = e.value("final_seconds", d.eval.final_seconds);

  const json& x = section("export");
  c.export_.ensemble_samples = x.value("ensemble_samples", d.export_.ensemble_samples);
  c.export_.ensemble_horizon = x.value("ensemble_horizon", d.export_.ensemble_horizon);
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open config " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + file.string() + ": " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------- layout

Layout Layout::from(const RunConfig& config) {
  Layout l;
  l.obs_channels = observation_channels(config.env.obs.mode);
  const ChannelLimits full = observation_limits(config.env.obs.mode, config.env.cage);
  for (int i = 0; i < static_cast<int>(l.obs_channels.size()); ++i) {
    const std::string& name = l.obs_channels[i];
    if (name.rfind("goal_", 0) == 0 || name == "battery") continue;
    if (!config.env.cage.yaw_enabled && name.rfind("yaw_", 0) == 0) continue;
    l.model_columns.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(l.model_columns.size());
  l.model_limits.lo.resize(n);
  l.model_limits.hi.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    l.model_limits.lo(i) = full.lo(l.model_columns[i]);
    l.model_limits.hi(i) = full.hi(l.model_columns[i]);
  }
  l.action_dim = config.env.cage.action_dim();
  l.goal_dim = config.env.cage.yaw_enabled ? 5 : 3;
  return l;
}

Eigen::VectorXd Layout::model_obs(const Eigen::VectorXd& observation) const {
  Eigen::MatrixXd row = observation.transpose();
  return model_obs_rows(row).row(0).transpose();
}

Eigen::MatrixXd Layout::model_obs_rows(const Eigen::MatrixXd& observations) const {
  if (observations.cols() != static_cast<Eigen::Index>(obs_channels.size())) {
    throw std::invalid_argument("Layout: observation width does not match channels");
  }
  Eigen::MatrixXd out(observations.rows(), static_cast<Eigen::Index>(model_columns.size()));
  for (Eigen::Index i = 0; i < out.cols(); ++i) out.col(i) = observations.col(model_columns[i]);
  normalize_rows_clipped(out, model_limits);
  return out;
}

Eigen::VectorXd goal_features(const Goal& goal, const CageConfig& cage) {
  Eigen::VectorXd f(cage.yaw_enabled ? 5 : 3);
  const Eigen::Vector3d span = cage.box_hi - cage.box_lo;
  f.head<3>() = (2.0 * (goal.position - cage.box_lo).array() / span.array() - 1.0).matrix();
  if (cage.yaw_enabled) {
    f(3) = std::cos(goal.yaw);
    f(4) = std::sin(goal.yaw);
  }
  return f;
}

LssmConfig model_config(const RunConfig& config, const Layout& layout) {
  LssmConfig c = config.model.lssm;
  c.obs_dim = static_cast<int>(layout.model_columns.size());
  c.action_dim = layout.action_dim;
  c.goal_dim = layout.goal_dim;
  return c;
}

ActorCriticConfig agent_config(const RunConfig& config, const Layout& layout) {
  ActorCriticConfig c = config.agent;
  c.latent_dim = config.model.lssm.z_dim + config.model.lssm.s_dim;
  c.action_dim = layout.action_dim;
  c.goal_dim = layout.goal_dim;
  c.action_lo = Eigen::VectorXd::Constant(layout.action_dim, -1.0);
  c.action_hi = Eigen::VectorXd::Constant(layout.action_dim, 1.0);
  return c;
}

// ---------------------------------------------------------------- evaluation

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

int steps_for(double seconds, double dt) { return static_cast<int>(std::ceil(seconds / dt - 1e-9)); }

double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }

}  // namespace

void EvalReport::aggregate() {
  std::vector<double> t, p, y;
  for (const EpisodeOutcome& e : episodes) {
    if (!e.success) continue;
    t.push_back(e.time_to_success);
    p.push_back(e.final_position_error);
    y.push_back(e.final_yaw_error_deg);
  }
  success_rate = episodes.empty() ? 0.0 : static_cast<double>(t.size()) / static_cast<double>(episodes.size());
  std::tie(time_mean, time_std) = mean_std(t);
  std::tie(position_mean, position_std) = mean_std(p);
  std::tie(yaw_mean, yaw_std) = mean_std(y);
}

void to_json(json& j, const EvalReport& r) {
  json eps = json::array();
  for (const EpisodeOutcome& e : r.episodes) {
    eps.push_back({{"success", e.success},
                   {"time_to_success", e.time_to_success},
                   {"final_position_error", e.final_position_error},
                   {"final_yaw_error_deg", e.final_yaw_error_deg}});
  }
  j = json{{"episodes", eps},
           {"count", r.episodes.size()},
           {"success_rate", r.success_rate},
           {"time_to_success", {{"mean", r.time_mean}, {"std", r.time_std}}},
           {"final_position_error", {{"mean", r.position_mean}, {"std", r.position_std}}},
           {"final_yaw_error_deg", {{"mean", r.yaw_mean}, {"std", r.yaw_std}}}};
}

EpisodeOutcome evaluate_success(const Eigen::VectorXd& position_error, const Eigen::VectorXd& yaw_error_rad, double dt,
                                bool yaw, const EvalSection& criteria) {
  if (yaw && yaw_error_rad.size() != position_error.size()) {
    throw std::invalid_argument("evaluate_success: error series lengths differ");
  }
  const int need = steps_for(criteria.success_seconds, dt);
  const int tail = steps_for(criteria.final_seconds, dt);
  const double yaw_limit = criteria.success_yaw_deg * std::numbers::pi / 180.0;
  const auto T = static_cast<int>(position_error.size());
  EpisodeOutcome out;
  int run = 0;
  for (int t = 0; t < T; ++t) {
    const bool ok = position_error(t) < criteria.success_radius && (!yaw || std::abs(yaw_error_rad(t)) < yaw_limit);
    run = ok ? run + 1 : 0;
    if (run < need) continue;
    const int start = t - need + 1;
    out.success = true;
    out.time_to_success = start * dt;
    int lo = t + 1;
    int hi = std::min(T, lo + tail);
    if (lo >= hi) {
      hi = t + 1;
      lo = std::max(start, hi - tail);
    }
    double p = 0.0, y = 0.0;
    for (int i = lo; i < hi; ++i) {
      p += position_error(i);
      if (yaw) y += std::abs(yaw_error_rad(i));
    }
    out.final_position_error = p / (hi - lo);
    out.final_yaw_error_deg = rad_to_deg(y / (hi - lo));
    return out;
  }
  return out;
}

// ---------------------------------------------------------------- controllers

OnlinePilot::OnlinePilot(const Lssm& model, const Agent& agent, const Layout& layout, const RunConfig& config)
    : model_(&model), agent_(&agent), layout_(&layout), config_(&config) {
  reset(Goal{});
}

void OnlinePilot::reset(const Goal& goal) {
  const LssmConfig& c = model_->config();
  goal_ = goal_features(goal, config_->env.cage);
  warm_obs_ = Eigen::MatrixXd::Zero(c.init_window, c.obs_dim);
  warm_act_ = Eigen::MatrixXd::Zero(c.init_window, c.action_dim);
  seen_ = 0;
  filter_.reset();
  e1_ = Eigen::VectorXd::Zero(c.action_dim);
  e2_ = Eigen::VectorXd::Zero(c.action_dim);
}

Eigen::VectorXd OnlinePilot::act(const Eigen::VectorXd& observation, NoiseSource& noise) {
  const LssmConfig& c = model_->config();
  const Eigen::VectorXd x = layout_->model_obs(observation);
  NoiseSource mean = NoiseSource::zeros();
  const int t = seen_++;
  if (t < c.init_window) {
    warm_obs_.row(t) = x.transpose();
    return Eigen::VectorXd::Zero(c.action_dim);
  }
  if (!filter_) {
    FilterState f{initial_state(*model_, warm_obs_, warm_act_, mean), Eigen::VectorXd::Zero(c.action_dim), 0};
    for (int i = 1; i < c.init_window; ++i) {
      f = filter_step(*model_, f, warm_act_.row(i - 1).transpose(), warm_obs_.row(i).transpose(), mean);
    }
    filter_ = std::move(f);
  }
  filter_ = filter_step(*model_, *filter_, e1_, x, mean);
  Eigen::VectorXd latent(c.z_dim + c.s_dim);
  latent << filter_->latent.z, filter_->latent.s;
  return agent_->act(latent, e1_, e2_, goal_, noise);
}

void OnlinePilot::executed(const Eigen::VectorXd& action) {
  const int t = seen_ - 1;
  if (t >= 0 && t < warm_act_.rows()) warm_act_.row(t) = action.transpose();
  e2_ = e1_;
  e1_ = action;
}

Rollout run_episode(const CageState& start, int steps, const RunConfig& config, const Layout& layout,
                    const CommandFn& command, const std::function<void(const Eigen::VectorXd&)>& on_executed,
                    Rng& rng) {
  const CageConfig& cage = config.env.cage;
  const int n_u = layout.action_dim;
  Observer observer(config.env.obs, cage);
  ActionSmoother smoother(n_u, config.agent.smoothing_window);
  Rollout out;
  Episode& ep = out.episode;
  ep.dt = cage.dt;
  ep.obs_channels = layout.obs_channels;
  ep.goal = start.goal;
  ep.obs.resize(steps, static_cast<Eigen::Index>(layout.obs_channels.size()));
  ep.actions.resize(steps, n_u);
  ep.commands.resize(steps, n_u);
  ep.rewards.resize(steps);
  ep.state.resize(steps, kStateColumns);
  out.position_error.resize(steps);
  out.yaw_error.resize(steps);

  CageState state = start;
  for (int t = 0; t < steps; ++t) {
    const Eigen::VectorXd obs = observer.observe(state, rng);
    Eigen::VectorXd cmd = command(state, obs, t);
    if (cmd.size() != n_u || !cmd.allFinite()) throw std::runtime_error("run_episode: invalid command");
    cmd = cmd.cwiseMax(-1.0).cwiseMin(1.0);
    const Eigen::VectorXd u = smoother.push(cmd);
    if (on_executed) on_executed(u);
    const CageStep next = cage_step(state, u, cage);
    ep.obs.row(t) = obs.transpose();
    ep.commands.row(t) = cmd.transpose();
    ep.actions.row(t) = u.transpose();
    ep.rewards(t) = next.reward;
    ep.state.row(t) = state.state_row().transpose();
    out.position_error(t) = (state.position - state.goal.position).norm();
    out.yaw_error(t) = cage.yaw_enabled ? std::abs(wrap_angle(state.yaw - state.goal.yaw)) : 0.0;
    state = next.state;
  }
  return out;
}

// ---------------------------------------------------------------- metrics log

MetricsLog::MetricsLog(const fs::path& file, int flush_every) : file_(file), flush_every_(std::max(1, flush_every)) {
  std::ofstream out(file_, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file_.string());
  out << header() << '\n';
}

MetricsLog::~MetricsLog() {
  try {
    flush();
  } catch (...) {
  }
}

std::string MetricsLog::header() {
  return "iteration,round,model_loss,neg_elbo,recon,kl_s,kl_z,kl_h,reward_nll,model_grad_norm,"
         "value_loss,policy_objective,value_grad_norm,policy_grad_norm,imagined_reward,env_steps";
}

void MetricsLog::append(const IterationMetrics& m) {
  buffer_.push_back(m);
  if (static_cast<int>(buffer_.size()) >= flush_every_) flush();
}

void MetricsLog::flush() {
  if (buffer_.empty()) return;
  std::ofstream out(file_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + file_.string());
  out << std::setprecision(10);
  for (const IterationMetrics& m : buffer_) {
    out << m.iteration << ',' << m.round << ',' << m.model_loss << ',' << m.neg_elbo << ',' << m.recon << ','
        << m.kl_s << ',' << m.kl_z << ',' << m.kl_h << ',' << m.reward_nll << ',' << m.model_grad_norm << ','
        << m.value_loss << ',' << m.policy_objective << ',' << m.value_grad_norm << ',' << m.policy_grad_norm << ','
        << m.imagined_reward << ',' << m.env_steps << '\n';
  }
  buffer_.clear();
}

// ---------------------------------------------------------------- trainer

namespace {

AdamConfig model_adam(const RunConfig& c) {
  AdamConfig a;
  a.learning_rate = c.model.lr;
  a.clip_norm = c.model.clip_norm;
  return a;
}

void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

Matrix row_or_zero(const Eigen::MatrixXd& m, Eigen::Index t) {
  if (t < 0) return Matrix::Zero(1, m.cols());
  return m.row(t);
}

}  // namespace

Trainer::Trainer(RunConfig config, fs::path run_dir)
    : config_(std::move(config)),
      dir_(std::move(run_dir)),
      layout_((config_.validate(), Layout::from(config_))),
      rng_(config_.seed),
      data_rng_(rng_.split()),
      batch_rng_(rng_.split()),
      model_noise_(rng_.split()),
      imagine_noise_(rng_.split()),
      policy_noise_(rng_.split()),
      model_(model_config(config_, layout_), rng_),
      agent_(agent_config(config_, layout_), rng_),
      model_opt_(model_.params(), model_adam(config_)),
      controller_(agent_),
      dataset_((fs::create_directories(dir_), dir_ / "dataset")) {
  std::vector<int> groups(model_.params().size(), 0);
  for (int i : model_.reward_head_ids()) groups[i] = 1;
  model_opt_.set_clip_groups(std::move(groups));
  write_json(dir_ / "config.json", config_);
  episodes_ = dataset_.load();
  for (const Episode& e : episodes_) {
    if (e.obs_channels != layout_.obs_channels) {
      throw std::invalid_argument("dataset observation channels do not match the configured observation mode");
    }
    env_steps_ += e.steps();
  }
  model_obs_.clear();
  refresh_data();
}

void Trainer::refresh_data() {
  for (std::size_t i = model_obs_.size(); i < episodes_.size(); ++i) {
    model_obs_.push_back(layout_.model_obs_rows(episodes_[i].obs));
  }
}

std::int64_t Trainer::collect_pid(int episodes, int steps) {
  const CageConfig& cage = config_.env.cage;
  std::int64_t added = 0;
  for (int n = 0; n < episodes && steps > 0; ++n) {
    CageState start = cage_reset(cage, data_rng_);
    ExplorationTarget target = start_exploration(data_rng_, cage, config_.env.explore_interval);
    PidMemory memory;
    auto command = [&](const CageState& s, const Eigen::VectorXd&, int t) {
      resample_goal_components(target, t * cage.dt, config_.env.explore_interval, cage, data_rng_);
      Eigen::VectorXd u = pid_explore(s, target.goal, config_.env.pid, memory, cage);
      for (Eigen::Index i = 0; i < u.size(); ++i) u(i) += data_rng_.normal(0.0, config_.env.explore_noise);
      return Eigen::VectorXd(u.cwiseMax(-1.0).cwiseMin(1.0));
    };
    Rollout r;
    try {
      r = run_episode(start, steps, config_, layout_, command, nullptr, data_rng_);
    } catch (const std::exception& e) {
      std::cerr << "collect: episode discarded: " << e.what() << '\n';
      continue;
    }
    std::ostringstream id;
    id << "ep" << std::setw(5) << std::setfill('0') << episodes_.size();
    r.episode.id = id.str();
    r.episode.metadata = {{"source", "pid"}, {"round", round_}};
    quantize(r.episode);
    dataset_.append(r.episode);
    episodes_.push_back(std::move(r.episode));
    added += steps;
  }
  env_steps_ += added;
  refresh_data();
  return added;
}

std::int64_t Trainer::collect_policy(int episodes, int steps) {
  const CageConfig& cage = config_.env.cage;
  std::int64_t added = 0;
  OnlinePilot pilot(model_, agent_, layout_, config_);
  for (int n = 0; n < episodes && steps > 0; ++n) {
    CageState start = cage_reset(cage, data_rng_);
    pilot.reset(start.goal);
    auto command = [&](const CageState&, const Eigen::VectorXd& obs, int) { return pilot.act(obs, policy_noise_); };
    auto executed = [&](const Eigen::VectorXd& u) { pilot.executed(u); };
    Rollout r;
    try {
      r = run_episode(start, steps, config_, layout_, command, executed, data_rng_);
    } catch (const std::exception& e) {
      std::cerr << "collect: episode discarded: " << e.what() << '\n';
      continue;
    }
    std::ostringstream id;
    id << "ep" << std::setw(5) << std::setfill('0') << episodes_.size();
    r.episode.id = id.str();
    r.episode.metadata = {{"source", "policy"}, {"round", round_}};
    quantize(r.episode);
    dataset_.append(r.episode);
    episodes_.push_back(std::move(r.episode));
    added += steps;
  }
  env_steps_ += added;
  refresh_data();
  return added;
}

RolloutStart Trainer::imagination_starts(const ElboResult& elbo_result, const std::vector<WindowRef>& refs,
                                         const std::vector<Goal>& goals, Eigen::Index window_length) {
  const int B = config_.agent.batch;
  const int W = config_.agent.smoothing_window;
  const int n_u = layout_.action_dim;
  const int first = static_cast<int>(std::min<Eigen::Index>(config_.schedule.min_start_index, window_length - 1));
  RolloutStart start;
  start.z.resize(B, elbo_result.z.front().cols());
  start.s.resize(B, elbo_result.s.front().cols());
  start.goal.resize(B, layout_.goal_dim);
  start.commands.assign(W, Matrix(B, n_u));
  start.executed_prev.resize(B, n_u);
  start.executed_prev2.resize(B, n_u);
  for (int i = 0; i < B; ++i) {
    const int b = batch_rng_.uniform_int(0, static_cast<int>(refs.size()) - 1);
    const int t = batch_rng_.uniform_int(first, static_cast<int>(window_length) - 1);
    const Episode& ep = episodes_[refs[b].episode];
    const Eigen::Index at = refs[b].start + t;
    start.z.row(i) = elbo_result.z[t].row(b);
    start.s.row(i) = elbo_result.s[t].row(b);
    start.goal.row(i) = goal_features(goals[b], config_.env.cage).transpose();
    for (int j = 0; j < W; ++j) start.commands[j].row(i) = row_or_zero(ep.commands, at - W + j);
    start.executed_prev.row(i) = row_or_zero(ep.actions, at - 1);
    start.executed_prev2.row(i) = row_or_zero(ep.actions, at - 2);
  }
  return start;
}

IterationMetrics Trainer::iterate() {
  if (episodes_.empty()) throw std::runtime_error("iterate: dataset is empty");
  if (!log_) log_ = std::make_unique<MetricsLog>(dir_ / "metrics.csv");
  Eigen::Index longest = 0;
  for (const Episode& e : episodes_) longest = std::max(longest, e.steps());
  const Eigen::Index hi = std::min<Eigen::Index>(config_.model.window_max, longest);
  const Eigen::Index lo = std::min<Eigen::Index>(config_.model.window_min, hi);
  if (hi <= config_.model.lssm.init_window) throw std::runtime_error("iterate: episodes shorter than the init window");
  const Eigen::Index L = draw_window_length(batch_rng_, lo, hi);
  const std::vector<WindowRef> all = window_episodes(episodes_, L, std::max<Eigen::Index>(1, L / 2));

  const int B = config_.model.batch;
  const bool yaw = config_.env.cage.yaw_enabled;
  const RewardFn reward = cage_reward_fn(yaw);
  const GoalBox box = config_.env.cage.goal_box(0.0);
  std::vector<WindowRef> refs(B);
  std::vector<Goal> goals(B);
  SequenceBatch batch;
  batch.obs.assign(L, Matrix(B, model_.config().obs_dim));
  batch.actions.assign(L, Matrix(B, layout_.action_dim));
  batch.rewards.assign(L, Matrix(B, 1));
  batch.goal.resize(B, layout_.goal_dim);
  for (int b = 0; b < B; ++b) {
    refs[b] = all[batch_rng_.uniform_int(0, static_cast<int>(all.size()) - 1)];
    const Episode& ep = episodes_[refs[b].episode];
    const bool keep = batch_rng_.uniform() < config_.schedule.keep_original_goal;
    goals[b] = keep ? ep.goal : draw_goal(batch_rng_, box);
    batch.goal.row(b) = goal_features(goals[b], config_.env.cage).transpose();
    const Eigen::MatrixXd& x = model_obs_[refs[b].episode];
    for (Eigen::Index t = 0; t < L; ++t) {
      const Eigen::Index at = refs[b].start + t;
      batch.obs[t].row(b) = x.row(at);
      batch.actions[t].row(b) = ep.actions.row(at);
      batch.rewards[t](b, 0) =
          config_.model.reward_scale * reward(ep.state.row(at).transpose(), ep.actions.row(at).transpose(), goals[b]);
    }
  }

  IterationMetrics m;
  m.iteration = iterations_;
  m.round = round_;
  m.env_steps = env_steps_;
  ElboResult fit;
  ControllerStepReport ctl;
  try {
    const double kl_weight =
        config_.model.kl_warmup > 0
            ? std::min(1.0, static_cast<double>(iterations_ + 1) / static_cast<double>(config_.model.kl_warmup))
            : 1.0;
    fit = elbo(model_, batch, model_noise_, kl_weight);
    m.model_grad_norm = model_opt_.step(model_.params(), fit.grads).grad_norm;
    if (!std::isfinite(m.model_grad_norm)) throw std::runtime_error("non-finite model gradient");
    ctl = controller_.step(model_, imagination_starts(fit, refs, goals, L), imagine_noise_);
  } catch (const std::runtime_error& e) {
    write_json(dir_ / "diagnostic.json", json{{"iteration", iterations_},
                                              {"round", round_},
                                              {"error", e.what()},
                                              {"window_length", L},
                                              {"model_loss", fit.loss},
                                              {"neg_elbo", fit.neg_elbo},
                                              {"reward_nll", fit.reward_nll}});
    if (log_) log_->flush();
    throw;
  }
  m.model_loss = fit.loss;
  m.neg_elbo = fit.neg_elbo;
  m.recon = fit.recon;
  m.kl_s = fit.kl_s;
  m.kl_z = fit.kl_z;
  m.kl_h = fit.kl_h;
  m.reward_nll = fit.reward_nll;
  m.value_loss = ctl.value_loss;
  m.policy_objective = ctl.policy_objective;
  m.value_grad_norm = ctl.value_grad_norm;
  m.policy_grad_norm = ctl.policy_grad_norm;
  m.imagined_reward = ctl.imagined_reward;
  log_->append(m);
  ++iterations_;
  return m;
}

void Trainer::run(std::ostream* progress) {
  const ScheduleSection& s = config_.schedule;
  const int steps = std::max(1, static_cast<int>(std::lround(s.episode_seconds / config_.env.cage.dt)));
  const std::int64_t budget = s.total_env_steps;
  if (!log_) log_ = std::make_unique<MetricsLog>(dir_ / "metrics.csv");
  for (round_ = 0; round_ < s.rounds; ++round_) {
    std::int64_t added = 0;
    if (round_ == 0) {
      const auto initial = static_cast<std::int64_t>(std::floor(s.initial_fraction * static_cast<double>(budget)));
      added = collect_pid(static_cast<int>(initial / steps), steps);
    } else {
      const std::int64_t remaining = std::max<std::int64_t>(0, budget - env_steps_);
      added = collect_policy(static_cast<int>(remaining / (s.rounds - round_) / steps), steps);
    }
    if (progress) {
      *progress << "round " << round_ << ": +" << added << " env steps (" << env_steps_ << " total, "
                << episodes_.size() << " episodes)" << std::endl;
    }
    if (episodes_.empty()) {
      if (s.iterations_per_round > 0) throw std::runtime_error("run: env-step budget produced no episodes");
      continue;
    }
    for (int it = 0; it < s.iterations_per_round; ++it) {
      const IterationMetrics m = iterate();
      if (progress && (it + 1) % 500 == 0) {
        *progress << "  iter " << m.iteration + 1 << " model_loss " << m.model_loss << " value_loss "
                  << m.value_loss << " imagined_reward " << m.imagined_reward << std::endl;
      }
    }
    log_->flush();
    save_checkpoint();
  }
  round_ = s.rounds - 1;
  log_->flush();
  save_checkpoint();
}

void Trainer::save_checkpoint() const {
  Checkpoint c;
  c.components.emplace("model", model_.params());
  c.components.emplace("policy", agent_.policy_params());
  c.components.emplace("value", agent_.value_params());
  c.components.emplace("target", agent_.target_params());
  c.hyperparameters = json{{"config", config_}, {"iterations", iterations_}, {"env_steps", env_steps_}};
  lp::save_checkpoint(dir_ / "checkpoint", c);
}

bool Trainer::load_checkpoint() {
  if (!fs::exists(dir_ / "checkpoint")) return false;
  const Checkpoint c = lp::load_checkpoint(dir_ / "checkpoint");
  restore_component(c, "model", model_.params());
  restore_component(c, "policy", agent_.policy_params());
  restore_component(c, "value", agent_.value_params());
  restore_component(c, "target", agent_.target_params());
  iterations_ = c.hyperparameters.value("iterations", std::int64_t{0});
  return true;
}

// ---------------------------------------------------------------- eval and export

namespace {

struct Restored {
  Layout layout;
  Lssm model;
  Agent agent;
};

Restored restore_run(const RunConfig& config, const fs::path& run_dir) {
  const Layout layout = Layout::from(config);
  Rng rng(config.seed);
  Restored r{layout, Lssm(model_config(config, layout), rng), Agent(agent_config(config, layout), rng)};
  const Checkpoint c = lp::load_checkpoint(run_dir / "checkpoint");
  try {
    restore_component(c, "model", r.model.params());
    restore_component(c, "policy", r.agent.policy_params());
    restore_component(c, "value", r.agent.value_params());
    restore_component(c, "target", r.agent.target_params());
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("checkpoint does not match the config dimensions: ") + e.what());
  }
  return r;
}

std::vector<std::string> read_lines(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("missing log " + file.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace

EvalReport evaluate_run(const RunConfig& config, const fs::path& run_dir, int pairs) {
  const std::vector<EvalPair> grid = eval_grid(config.env.cage);
  if (pairs < 0 || pairs > static_cast<int>(grid.size())) {
    throw std::invalid_argument("evaluate_run: pairs must be in [0, " + std::to_string(grid.size()) + "]");
  }
  EvalReport report;
  std::ofstream traj(run_dir / "eval_trajectories.csv");
  if (!traj) throw std::runtime_error("cannot write eval_trajectories.csv");
  traj << "pair,step,time,x,y,z,yaw,position_error,yaw_error_deg\n" << std::setprecision(8);
  if (pairs > 0) {
    const Restored r = restore_run(config, run_dir);
    OnlinePilot pilot(r.model, r.agent, r.layout, config);
    const int steps = steps_for(config.eval.episode_seconds, config.env.cage.dt);
    for (int i = 0; i < pairs; ++i) {
      const CageState start = state_from_pair(grid[i], config.env.cage);
      pilot.reset(start.goal);
      NoiseSource zero = NoiseSource::zeros();
      Rng rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(i));
      auto command = [&](const CageState&, const Eigen::VectorXd& obs, int) { return pilot.act(obs, zero); };
      auto executed = [&](const Eigen::VectorXd& u) { pilot.executed(u); };
      const Rollout ro = run_episode(start, steps, config, r.layout, command, executed, rng);
      report.episodes.push_back(evaluate_success(ro.position_error, ro.yaw_error, config.env.cage.dt,
                                                 config.env.cage.yaw_enabled, config.eval));
      for (Eigen::Index t = 0; t < ro.episode.steps(); ++t) {
        const auto& st = ro.episode.state;
        traj << i << ',' << t << ',' << t * config.env.cage.dt << ',' << st(t, 0) << ',' << st(t, 1) << ','
             << st(t, 2) << ',' << st(t, 3) << ',' << ro.position_error(t) << ',' << rad_to_deg(ro.yaw_error(t))
             << '\n';
      }
    }
  }
  report.aggregate();
  write_json(run_dir / "eval_report.json", report);
  return report;
}

void export_run(const fs::path& run_dir) {
  const fs::path out = run_dir / "export";
  fs::create_directories(out);
  const RunConfig config = load_run_config(run_dir / "config.json");

  {
    const std::vector<std::string> lines = read_lines(run_dir / "metrics.csv");
    std::ofstream f(out / "loss_curves.csv");
    if (lines.empty()) f << MetricsLog::header() << '\n';
    for (const std::string& l : lines) f << l << '\n';
  }
  {
    std::ofstream f(out / "error_over_time.csv");
    const fs::path src = run_dir / "eval_trajectories.csv";
    if (fs::exists(src)) {
      for (const std::string& l : read_lines(src)) f << l << '\n';
    } else {
      f << "pair,step,time,x,y,z,yaw,position_error,yaw_error_deg\n";
    }
  }
  std::ofstream f(out / "prediction_ensemble.csv");
  f << "episode,step,channel,truth,mean,std\n" << std::setprecision(8);
  const Dataset data(run_dir / "dataset");
  if (data.size() == 0 || !fs::exists(run_dir / "checkpoint")) return;
  const Restored r = restore_run(config, run_dir);
  const Episode ep = data.load().front();
  const LssmConfig& c = r.model.config();
  const int H = config.export_.ensemble_horizon;
  const Eigen::Index k = c.init_window;
  if (ep.steps() < k + H) return;
  const Eigen::MatrixXd x = r.layout.model_obs_rows(ep.obs);
  NoiseSource mean = NoiseSource::zeros();
  FilterState fs_state{initial_state(r.model, x.topRows(k), ep.actions.topRows(k), mean),
                       Eigen::VectorXd::Zero(c.action_dim), 0};
  for (Eigen::Index t = 1; t < k; ++t) {
    fs_state = filter_step(r.model, fs_state, ep.actions.row(t - 1).transpose(), x.row(t).transpose(), mean);
  }
  NoiseSource noise(config.seed ^ 0x5eedULL);
  const std::vector<Eigen::MatrixXd> ens =
      predict_ensemble(r.model, fs_state.latent, ep.actions.middleRows(k - 1, H), config.export_.ensemble_samples, noise);
  std::vector<Eigen::MatrixXd> phys;
  for (const Eigen::MatrixXd& e : ens) phys.push_back(denormalize_rows(e, r.layout.model_limits));
  for (int h = 0; h < H; ++h) {
    for (int j = 0; j < c.obs_dim; ++j) {
      double m = 0.0, sq = 0.0;
      for (const Eigen::MatrixXd& p : phys) m += p(h, j);
      m /= static_cast<double>(phys.size());
      for (const Eigen::MatrixXd& p : phys) sq += (p(h, j) - m) * (p(h, j) - m);
      const double sd = std::sqrt(sq / static_cast<double>(phys.size()));
      const int col = r.layout.model_columns[j];
      f << ep.id << ',' << k + h << ',' << r.layout.obs_channels[col] << ',' << ep.obs(k + h, col) << ',' << m << ','
        << sd << '\n';
    }
  }
}

}  // namespace lp
