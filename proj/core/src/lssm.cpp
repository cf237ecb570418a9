#include "latentpilot/lssm.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lp {

void to_json(nlohmann::json& j, const LssmConfig& c) {
  j = nlohmann::json{{"obs_dim", c.obs_dim},         {"action_dim", c.action_dim},
                     {"z_dim", c.z_dim},             {"s_dim", c.s_dim},
                     {"num_base", c.num_base},       {"h_dim", c.h_dim},
                     {"hidden", c.hidden},           {"encoder_hidden", c.encoder_hidden},
                     {"init_window", c.init_window}, {"base_init_std", c.base_init_std},
                     {"goal_dim", c.goal_dim}};
}

void from_json(const nlohmann::json& j, LssmConfig& c) {
  const LssmConfig d;
  c.obs_dim = j.value("obs_dim", d.obs_dim);
  c.action_dim = j.value("action_dim", d.action_dim);
  c.z_dim = j.value("z_dim", d.z_dim);
  c.s_dim = j.value("s_dim", d.s_dim);
  c.num_base = j.value("num_base", d.num_base);
  c.h_dim = j.value("h_dim", d.h_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.encoder_hidden = j.value("encoder_hidden", d.encoder_hidden);
  c.init_window = j.value("init_window", d.init_window);
  c.base_init_std = j.value("base_init_std", d.base_init_std);
  c.goal_dim = j.value("goal_dim", d.goal_dim);
}

Matrix NoiseSource::next(Eigen::Index rows, Eigen::Index cols) {
  Matrix out = rng_ ? rng_->normal_matrix(rows, cols) : Matrix::Zero(rows, cols);
  if (log_) log_->push_back(out);
  return out;
}

void SequenceBatch::validate(int obs_dim, int action_dim, int goal_dim) const {
  if (obs.size() != actions.size()) {
    throw std::invalid_argument("SequenceBatch: observation/action length mismatch");
  }
  if (!rewards.empty() && rewards.size() != obs.size()) {
    throw std::invalid_argument("SequenceBatch: reward length mismatch");
  }
  const Eigen::Index b = batch();
  if (goal_dim > 0 && (goal.rows() != b || goal.cols() != goal_dim)) {
    throw std::invalid_argument("SequenceBatch: goal shape");
  }
  for (std::size_t t = 0; t < obs.size(); ++t) {
    if (obs[t].rows() != b || obs[t].cols() != obs_dim) {
      throw std::invalid_argument("SequenceBatch: observation shape at t=" + std::to_string(t));
    }
    if (actions[t].rows() != b || actions[t].cols() != action_dim) {
      throw std::invalid_argument("SequenceBatch: action shape at t=" + std::to_string(t));
    }
    if (!rewards.empty() && (rewards[t].rows() != b || rewards[t].cols() != 1)) {
      throw std::invalid_argument("SequenceBatch: reward shape at t=" + std::to_string(t));
    }
  }
}

void to_json(nlohmann::json& j, const FilterState& f) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.begin(), v.end()); };
  j = nlohmann::json{{"step", f.step},
                     {"last_action", vec(f.last_action)},
                     {"z", vec(f.latent.z)},
                     {"s", vec(f.latent.s)},
                     {"q_z", {{"mean", vec(f.latent.q_z.mean())}, {"std", vec(f.latent.q_z.std())}}},
                     {"q_s", {{"mean", vec(f.latent.q_s.mean())}, {"std", vec(f.latent.q_s.std())}}}};
}

// ---- construction -------------------------------------------------------------

Lssm::Lssm(const LssmConfig& config, Rng& rng) : config_(config) {
  const LssmConfig& c = config_;
  if (c.obs_dim <= 0 || c.action_dim <= 0 || c.z_dim <= 0 || c.s_dim <= 0 || c.num_base <= 0 ||
      c.h_dim <= 0 || c.hidden <= 0 || c.encoder_hidden <= 0 || c.init_window <= 0 ||
      c.goal_dim < 0) {
    throw std::invalid_argument("LssmConfig: all dimensions must be positive");
  }
  const auto relu = Activation::Relu;
  likelihood_ = GaussianHead::create(params_, "likelihood", c.z_dim, {c.hidden}, c.obs_dim, relu, rng);
  s_transition_ = GaussianHead::create(params_, "transition_s", c.s_dim + c.z_dim + c.action_dim,
                                       {c.hidden}, c.s_dim, relu, rng);

  // Base matrices are stored transposed and stacked so a whole batch is
  // propagated with two matrix products: block i of "base.A" is A_i^T.
  // Scaled by 2/m so the initial mixture (alpha ~ 0.5) is close to identity.
  const int m = c.num_base;
  const double scale = 2.0 / m;
  Matrix a(c.z_dim, m * c.z_dim);
  Matrix bm(c.action_dim, m * c.z_dim);
  Matrix cm(m, c.z_dim);
  for (int i = 0; i < m; ++i) {
    Matrix block = Matrix::Identity(c.z_dim, c.z_dim) + c.base_init_std * rng.normal_matrix(c.z_dim, c.z_dim);
    a.middleCols(i * c.z_dim, c.z_dim) = scale * block;
    bm.middleCols(i * c.z_dim, c.z_dim) = c.base_init_std * rng.normal_matrix(c.action_dim, c.z_dim);
    cm.row(i) = c.base_init_std * rng.normal_matrix(1, c.z_dim);
  }
  a_id_ = params_.add("base.A", std::move(a));
  b_id_ = params_.add("base.B", std::move(bm));
  c_id_ = params_.add("base.C", std::move(cm));
  const double wb = 1.0 / std::sqrt(static_cast<double>(c.s_dim));
  Matrix w(c.s_dim, m);
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-wb, wb);
  }
  w_id_ = params_.add("mix.W", std::move(w));
  bias_id_ = params_.add("mix.b", Matrix::Zero(1, m));

  meas_z_ = GaussianHead::create(params_, "meas_z", c.obs_dim, {c.hidden}, c.z_dim, relu, rng);
  meas_s_ = GaussianHead::create(params_, "meas_s", c.obs_dim, {c.hidden}, c.s_dim, relu, rng);
  encoder_ = RecurrentEncoder::create(params_, "init_encoder", c.obs_dim + c.action_dim,
                                      c.encoder_hidden, c.h_dim, c.hidden, rng);
  z_init_ = DenseNet::create(params_, "init_z", {c.h_dim, c.hidden, c.z_dim}, relu, rng);
  s_init_ = GaussianHead::create(params_, "init_s", c.h_dim, {c.hidden}, c.s_dim, relu, rng);

  const int first_reward = params_.size();
  reward_ = GaussianHead::create(params_, "reward", c.z_dim + c.action_dim + c.goal_dim,
                                 {c.hidden}, 1, relu, rng);
  for (int i = first_reward; i < params_.size(); ++i) reward_ids_.push_back(i);
}

std::vector<int> Lssm::inverse_measurement_ids() const {
  std::vector<int> ids = meas_z_.body().param_ids();
  const std::vector<int> s = meas_s_.body().param_ids();
  ids.insert(ids.end(), s.begin(), s.end());
  return ids;
}

// ---- building blocks ----------------------------------------------------------

ad::Var Lssm::mixing_weights(const Binding& b, ad::Var s) const {
  return ad::sigmoid(ad::add_row(ad::matmul(s, b[w_id_]), b[bias_id_]));
}

GaussianVar Lssm::transition_z(const Binding& b, ad::Var z_prev, ad::Var s_t,
                               ad::Var u_prev) const {
  if (z_prev.cols() != config_.z_dim || s_t.cols() != config_.s_dim ||
      u_prev.cols() != config_.action_dim) {
    throw std::invalid_argument("transition_z: input shape mismatch");
  }
  const ad::Var alpha = mixing_weights(b, s_t);
  const ad::Var stacked = ad::matmul(z_prev, b[a_id_]) + ad::matmul(u_prev, b[b_id_]);
  const ad::Var mean = ad::mix_blocks(alpha, stacked);
  return gaussian_from_raw(mean, ad::matmul(alpha, b[c_id_]));
}

GaussianVar Lssm::transition_s(const Binding& b, ad::Var s_prev, ad::Var z_prev,
                               ad::Var u_prev) const {
  if (z_prev.cols() != config_.z_dim || s_prev.cols() != config_.s_dim ||
      u_prev.cols() != config_.action_dim) {
    throw std::invalid_argument("transition_s: input shape mismatch");
  }
  return s_transition_.forward(b, ad::concat_cols({s_prev, z_prev, u_prev}));
}

GaussianVar Lssm::measure_z(const Binding& b, ad::Var x) const { return meas_z_.forward(b, x); }
GaussianVar Lssm::measure_s(const Binding& b, ad::Var x) const { return meas_s_.forward(b, x); }
GaussianVar Lssm::likelihood(const Binding& b, ad::Var z) const { return likelihood_.forward(b, z); }

GaussianVar Lssm::reward(const Binding& b, ad::Var z, ad::Var u, ad::Var goal) const {
  if (config_.goal_dim == 0) return reward_.forward(b, ad::concat_cols({z, u}));
  if (!goal.valid() || goal.cols() != config_.goal_dim) {
    throw std::invalid_argument("reward: goal condition missing or misshapen");
  }
  return reward_.forward(b, ad::concat_cols({z, u, goal}));
}

LatentVar Lssm::initial_state(const Binding& b, std::span<const ad::Var> window_inputs,
                              NoiseSource& noise, GaussianVar* q_h_out) const {
  if (window_inputs.empty()) throw std::invalid_argument("initial_state: empty window");
  const GaussianVar q_h = encoder_.encode(b, window_inputs);
  if (q_h_out) *q_h_out = q_h;
  ad::Tape& tape = b.tape();
  const Eigen::Index rows = q_h.batch();
  const ad::Var h = sample_reparam(q_h, tape.constant(noise.next(rows, config_.h_dim)));
  const ad::Var z1 = z_init_.forward(b, h);
  const GaussianVar p_s1 = s_init_.forward(b, h);
  const ad::Var s1 = sample_reparam(p_s1, tape.constant(noise.next(rows, config_.s_dim)));
  // z_1 is a deterministic map of h; its "posterior" scale is the floor.
  const GaussianVar q_z1{z1, tape.constant(Matrix::Constant(rows, config_.z_dim, kStdFloor))};
  return LatentVar{z1, s1, q_z1, p_s1};
}

FilterVarStep Lssm::filter_step(const Binding& b, const LatentVar& prev, ad::Var u_prev,
                                ad::Var x, NoiseSource& noise) const {
  ad::Tape& tape = b.tape();
  const Eigen::Index rows = x.rows();
  const GaussianVar prior_s = transition_s(b, prev.s, prev.z, u_prev);
  const GaussianVar q_s = fuse(measure_s(b, x), prior_s);
  const ad::Var s = sample_reparam(q_s, tape.constant(noise.next(rows, config_.s_dim)));
  const GaussianVar prior_z = transition_z(b, prev.z, s, u_prev);
  const GaussianVar q_z = fuse(measure_z(b, x), prior_z);
  const ad::Var z = sample_reparam(q_z, tape.constant(noise.next(rows, config_.z_dim)));
  return FilterVarStep{LatentVar{z, s, q_z, q_s}, prior_s, prior_z};
}

LatentVar Lssm::generate_step(const Binding& b, ad::Var z, ad::Var s, ad::Var u,
                              NoiseSource& noise) const {
  ad::Tape& tape = b.tape();
  const Eigen::Index rows = z.rows();
  const GaussianVar p_s = transition_s(b, s, z, u);
  const ad::Var s_next = sample_reparam(p_s, tape.constant(noise.next(rows, config_.s_dim)));
  const GaussianVar p_z = transition_z(b, z, s_next, u);
  const ad::Var z_next = sample_reparam(p_z, tape.constant(noise.next(rows, config_.z_dim)));
  return LatentVar{z_next, s_next, p_z, p_s};
}

SequenceForward Lssm::forward_sequence(const Binding& b, const SequenceBatch& batch,
                                       NoiseSource& noise) const {
  batch.validate(config_.obs_dim, config_.action_dim, config_.goal_dim);
  const int T = batch.length();
  if (T < 2) throw std::invalid_argument("forward_sequence: need at least 2 time steps");
  ad::Tape& tape = b.tape();

  std::vector<ad::Var> x(T);
  std::vector<ad::Var> u(T);
  for (int t = 0; t < T; ++t) {
    x[t] = tape.constant(batch.obs[t]);
    u[t] = tape.constant(batch.actions[t]);
  }
  const int k = std::min(config_.init_window, T);
  std::vector<ad::Var> window;
  window.reserve(k);
  for (int t = 0; t < k; ++t) window.push_back(ad::concat_cols({x[t], u[t]}));

  SequenceForward out;
  GaussianVar q_h;
  out.latents.push_back(initial_state(b, window, noise, &q_h));
  const ad::Var kl_h = kl_standard(q_h);
  ad::Var recon = log_prob(likelihood(b, out.latents[0].z), x[0]);
  ad::Var kl_s;
  ad::Var kl_z;
  for (int t = 1; t < T; ++t) {
    const FilterVarStep step = filter_step(b, out.latents.back(), u[t - 1], x[t], noise);
    const ad::Var ks = kl_diag(step.post.q_s, step.prior_s);
    const ad::Var kz = kl_diag(step.post.q_z, step.prior_z);
    kl_s = kl_s.valid() ? kl_s + ks : ks;
    kl_z = kl_z.valid() ? kl_z + kz : kz;
    recon = recon + log_prob(likelihood(b, step.post.z), x[t]);
    out.latents.push_back(step.post);
  }
  out.recon = ad::mean(recon);
  out.kl_s = ad::mean(kl_s);
  out.kl_z = ad::mean(kl_z);
  out.kl_h = ad::mean(kl_h);
  out.neg_elbo = out.kl_s + out.kl_z + out.kl_h - out.recon;
  return out;
}

ad::Var Lssm::reward_nll(const Binding& b, std::span<const LatentVar> latents,
                         const SequenceBatch& batch) const {
  if (batch.rewards.size() != latents.size()) {
    throw std::invalid_argument("reward_nll: latent/reward length mismatch");
  }
  ad::Tape& tape = b.tape();
  const ad::Var goal = config_.goal_dim > 0 ? tape.constant(batch.goal) : ad::Var{};
  ad::Var total;
  for (std::size_t t = 0; t < latents.size(); ++t) {
    const ad::Var z = ad::stop_gradient(latents[t].z);
    const GaussianVar p = reward(b, z, tape.constant(batch.actions[t]), goal);
    const ad::Var nll = -log_prob(p, tape.constant(batch.rewards[t]));
    total = total.valid() ? total + nll : nll;
  }
  return ad::mean(total);
}

// ---- value-level --------------------------------------------------------------

namespace {

ad::Var row_const(ad::Tape& tape, const Eigen::VectorXd& v) { return tape.constant(v.transpose()); }

LatentVar latent_on_tape(ad::Tape& tape, const LatentState& s) {
  return LatentVar{row_const(tape, s.z), row_const(tape, s.s),
                   GaussianVar{row_const(tape, s.q_z.mean()), row_const(tape, s.q_z.std())},
                   GaussianVar{row_const(tape, s.q_s.mean()), row_const(tape, s.q_s.std())}};
}

LatentState latent_value(const LatentVar& v) {
  return LatentState{v.z.value().row(0).transpose(), v.s.value().row(0).transpose(), v.q_z.row(0),
                     v.q_s.row(0)};
}

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

MixedMatrices mix_matrices(const Lssm& model, const Eigen::VectorXd& s) {
  const LssmConfig& c = model.config();
  if (s.size() != c.s_dim) throw std::invalid_argument("mix_matrices: s has wrong dimension");
  require_finite(s, "mix_matrices");
  const ParamSet& p = model.params();
  const Eigen::VectorXd pre =
      (s.transpose() * p.value(model.mix_w_id()) + p.value(model.mix_b_id())).transpose();
  MixedMatrices out;
  out.alpha = pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  out.A = Eigen::MatrixXd::Zero(c.z_dim, c.z_dim);
  out.B = Eigen::MatrixXd::Zero(c.z_dim, c.action_dim);
  out.C = Eigen::VectorXd::Zero(c.z_dim);
  const Matrix& a = p.value(model.base_a_id());
  const Matrix& b = p.value(model.base_b_id());
  const Matrix& cm = p.value(model.base_c_id());
  for (int i = 0; i < c.num_base; ++i) {
    out.A += out.alpha[i] * a.middleCols(i * c.z_dim, c.z_dim).transpose();
    out.B += out.alpha[i] * b.middleCols(i * c.z_dim, c.z_dim).transpose();
    out.C += out.alpha[i] * cm.row(i).transpose();
  }
  return out;
}

DiagGaussian transition_z(const Lssm& model, const Eigen::VectorXd& z_prev,
                          const Eigen::VectorXd& s_t, const Eigen::VectorXd& u_prev) {
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  return model.transition_z(b, row_const(tape, z_prev), row_const(tape, s_t), row_const(tape, u_prev))
      .row(0);
}

DiagGaussian transition_s(const Lssm& model, const Eigen::VectorXd& s_prev,
                          const Eigen::VectorXd& z_prev, const Eigen::VectorXd& u_prev) {
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  return model.transition_s(b, row_const(tape, s_prev), row_const(tape, z_prev), row_const(tape, u_prev))
      .row(0);
}

LatentState initial_state(const Lssm& model, const Eigen::MatrixXd& obs_window,
                          const Eigen::MatrixXd& action_window, NoiseSource& noise) {
  const LssmConfig& c = model.config();
  if (obs_window.rows() < 1) throw std::invalid_argument("initial_state: empty window");
  if (obs_window.rows() != action_window.rows() || obs_window.cols() != c.obs_dim ||
      action_window.cols() != c.action_dim) {
    throw std::invalid_argument("initial_state: window shape mismatch");
  }
  require_finite(obs_window, "initial_state");
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  std::vector<ad::Var> inputs;
  for (Eigen::Index t = 0; t < obs_window.rows(); ++t) {
    Eigen::RowVectorXd row(c.obs_dim + c.action_dim);
    row << obs_window.row(t), action_window.row(t);
    inputs.push_back(tape.constant(row));
  }
  return latent_value(model.initial_state(b, inputs, noise));
}

FilterState filter_step(const Lssm& model, const FilterState& prev, const Eigen::VectorXd& u_prev,
                        const Eigen::VectorXd& x, NoiseSource& noise) {
  const LssmConfig& c = model.config();
  if (x.size() != c.obs_dim || u_prev.size() != c.action_dim) {
    throw std::invalid_argument("filter_step: input dimension mismatch");
  }
  if (!x.allFinite()) {
    throw std::invalid_argument("filter_step: non-finite observation at step " +
                                std::to_string(prev.step + 1));
  }
  require_finite(u_prev, "filter_step");
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  const FilterVarStep step = model.filter_step(b, latent_on_tape(tape, prev.latent),
                                               row_const(tape, u_prev), row_const(tape, x), noise);
  return FilterState{latent_value(step.post), u_prev, prev.step + 1};
}

ElboResult elbo(const Lssm& model, const SequenceBatch& batch, NoiseSource& noise, double kl_weight) {
  ad::Tape tape;
  Binding b(tape, model.params(), true);
  const SequenceForward fwd = model.forward_sequence(b, batch, noise);
  ElboResult r;
  r.neg_elbo = fwd.neg_elbo.scalar();
  r.recon = fwd.recon.scalar();
  r.kl_s = fwd.kl_s.scalar();
  r.kl_z = fwd.kl_z.scalar();
  r.kl_h = fwd.kl_h.scalar();
  ad::Var total = kl_weight == 1.0 ? fwd.neg_elbo : (fwd.kl_s + fwd.kl_z + fwd.kl_h) * kl_weight - fwd.recon;
  if (!batch.rewards.empty()) {
    const ad::Var rn = model.reward_nll(b, fwd.latents, batch);
    r.reward_nll = rn.scalar();
    total = total + rn;
  }
  const std::pair<const char*, double> terms[] = {{"reconstruction", r.recon},
                                                  {"KL(s)", r.kl_s},
                                                  {"KL(z)", r.kl_z},
                                                  {"KL(h)", r.kl_h},
                                                  {"reward NLL", r.reward_nll}};
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) {
      throw std::runtime_error(std::string("elbo: non-finite ") + name + " term");
    }
  }
  r.loss = total.scalar();
  tape.backward(total);
  r.grads = b.grads();
  for (const LatentVar& l : fwd.latents) {
    r.z.push_back(l.z.value());
    r.s.push_back(l.s.value());
  }
  return r;
}

double reward_loss(const Lssm& model, const SequenceBatch& batch,
                   std::span<const Matrix> z_samples) {
  if (z_samples.size() != batch.rewards.size() || batch.actions.size() != batch.rewards.size()) {
    throw std::invalid_argument("reward_loss: length mismatch");
  }
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  std::vector<LatentVar> latents;
  for (const Matrix& z : z_samples) {
    const ad::Var zv = tape.constant(z);
    latents.push_back(LatentVar{zv, zv, GaussianVar{zv, zv}, GaussianVar{zv, zv}});
  }
  return model.reward_nll(b, latents, batch).scalar();
}

std::vector<PredictionStep> predict_rollout(const Lssm& model, const LatentState& start,
                                            const Eigen::MatrixXd& controls, NoiseSource& noise,
                                            const Eigen::VectorXd& goal) {
  if (controls.rows() < 1) throw std::invalid_argument("predict_rollout: horizon must be >= 1");
  if (controls.cols() != model.config().action_dim) {
    throw std::invalid_argument("predict_rollout: control dimension mismatch");
  }
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  ad::Var z = row_const(tape, start.z);
  ad::Var s = row_const(tape, start.s);
  const ad::Var g = model.config().goal_dim > 0 ? row_const(tape, goal) : ad::Var{};
  std::vector<PredictionStep> out;
  for (Eigen::Index i = 0; i < controls.rows(); ++i) {
    const ad::Var u = row_const(tape, controls.row(i).transpose());
    const DiagGaussian r = model.reward(b, z, u, g).row(0);
    const LatentVar next = model.generate_step(b, z, s, u, noise);
    out.push_back(PredictionStep{model.likelihood(b, next.z).row(0), r});
    z = next.z;
    s = next.s;
  }
  return out;
}

std::vector<Eigen::MatrixXd> predict_ensemble(const Lssm& model, const LatentState& start,
                                              const Eigen::MatrixXd& controls, int samples,
                                              NoiseSource& noise) {
  if (samples < 1) throw std::invalid_argument("predict_ensemble: need at least one sample");
  if (controls.rows() < 1 || controls.cols() != model.config().action_dim) {
    throw std::invalid_argument("predict_ensemble: bad control matrix");
  }
  ad::Tape tape;
  Binding b(tape, model.params(), false);
  ad::Var z = tape.constant(start.z.transpose().replicate(samples, 1));
  ad::Var s = tape.constant(start.s.transpose().replicate(samples, 1));
  std::vector<Eigen::MatrixXd> out(samples, Eigen::MatrixXd(controls.rows(), model.config().obs_dim));
  for (Eigen::Index i = 0; i < controls.rows(); ++i) {
    const ad::Var u = tape.constant(controls.row(i).replicate(samples, 1));
    const LatentVar next = model.generate_step(b, z, s, u, noise);
    const Matrix mean = model.likelihood(b, next.z).mean.value();
    for (int k = 0; k < samples; ++k) out[k].row(i) = mean.row(k);
    z = next.z;
    s = next.s;
  }
  return out;
}

}  // namespace lp
