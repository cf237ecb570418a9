#include "latentpilot/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lp {

// ---- ParamSet -----------------------------------------------------------------

int ParamSet::add(std::string name, Matrix value) {
  if (contains(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return size() - 1;
}

int ParamSet::index(std::string_view name) const {
  for (int i = 0; i < size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw std::out_of_range("ParamSet: no parameter named " + std::string(name));
}

bool ParamSet::contains(std::string_view name) const {
  for (const auto& n : names_) {
    if (n == name) return true;
  }
  return false;
}

Eigen::Index ParamSet::total_size() const {
  Eigen::Index n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::vector<Matrix> ParamSet::zeros_like() const {
  std::vector<Matrix> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.push_back(Matrix::Zero(v.rows(), v.cols()));
  return out;
}

Eigen::VectorXd ParamSet::flatten() const {
  Eigen::VectorXd flat(total_size());
  Eigen::Index off = 0;
  for (const auto& v : values_) {
    flat.segment(off, v.size()) = v.reshaped();
    off += v.size();
  }
  return flat;
}

void ParamSet::assign_flat(const Eigen::VectorXd& flat) {
  if (flat.size() != total_size()) throw std::invalid_argument("ParamSet::assign_flat: size");
  Eigen::Index off = 0;
  for (auto& v : values_) {
    v.reshaped() = flat.segment(off, v.size());
    off += v.size();
  }
}

bool ParamSet::all_finite() const {
  for (const auto& v : values_) {
    if (!v.allFinite()) return false;
  }
  return true;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (other.size() != size()) return false;
  for (int i = 0; i < size(); ++i) {
    if (names_[i] != other.names_[i] || values_[i].rows() != other.values_[i].rows() ||
        values_[i].cols() != other.values_[i].cols()) {
      return false;
    }
  }
  return true;
}

// ---- Binding ------------------------------------------------------------------

Binding::Binding(ad::Tape& tape, const ParamSet& params, bool trainable) : tape_(&tape) {
  vars_.reserve(params.size());
  for (int i = 0; i < params.size(); ++i) {
    vars_.push_back(trainable ? tape.leaf(params.value(i)) : tape.constant(params.value(i)));
  }
}

std::vector<Matrix> Binding::grads() const {
  std::vector<Matrix> out;
  out.reserve(vars_.size());
  for (const auto& v : vars_) out.push_back(tape_->grad(v));
  return out;
}

// ---- DenseNet -----------------------------------------------------------------

namespace {

ad::Var activate(ad::Var x, Activation a) {
  switch (a) {
    case Activation::Relu:
      return ad::relu(x);
    case Activation::Tanh:
      return ad::tanh(x);
    case Activation::Identity:
      return x;
  }
  return x;
}

}  // namespace

DenseNet DenseNet::create(ParamSet& params, const std::string& prefix, std::vector<int> widths,
                          Activation hidden, Rng& rng, Activation output_activation) {
  if (widths.size() < 2 || widths.size() > 4) {
    throw std::invalid_argument("DenseNet " + prefix + ": expected 0 to 2 hidden layers");
  }
  for (int w : widths) {
    if (w <= 0) throw std::invalid_argument("DenseNet " + prefix + ": widths must be positive");
  }
  DenseNet net;
  net.widths_ = std::move(widths);
  net.hidden_ = hidden;
  net.output_ = output_activation;
  for (std::size_t l = 0; l + 1 < net.widths_.size(); ++l) {
    const int in = net.widths_[l];
    const int out = net.widths_[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Matrix w(in, out);
    for (Eigen::Index j = 0; j < out; ++j) {
      for (Eigen::Index i = 0; i < in; ++i) w(i, j) = rng.uniform(-bound, bound);
    }
    const std::string layer = prefix + ".l" + std::to_string(l);
    net.weight_ids_.push_back(params.add(layer + ".w", std::move(w)));
    net.bias_ids_.push_back(params.add(layer + ".b", Matrix::Zero(1, out)));
  }
  return net;
}

ad::Var DenseNet::forward(const Binding& b, ad::Var x) const {
  if (x.cols() != input_width()) {
    throw std::invalid_argument("DenseNet::forward: expected input width " +
                                std::to_string(input_width()) + ", got " +
                                std::to_string(x.cols()));
  }
  const std::size_t layers = weight_ids_.size();
  for (std::size_t l = 0; l < layers; ++l) {
    x = ad::add_row(ad::matmul(x, b[weight_ids_[l]]), b[bias_ids_[l]]);
    x = activate(x, l + 1 < layers ? hidden_ : output_);
  }
  return x;
}

Eigen::VectorXd DenseNet::evaluate(const ParamSet& params, const Eigen::VectorXd& x) const {
  ad::Tape tape;
  Binding b(tape, params, false);
  return forward(b, tape.constant(x.transpose())).value().row(0).transpose();
}

std::vector<int> DenseNet::param_ids() const {
  std::vector<int> ids;
  for (std::size_t l = 0; l < weight_ids_.size(); ++l) {
    ids.push_back(weight_ids_[l]);
    ids.push_back(bias_ids_[l]);
  }
  return ids;
}

// ---- GaussianHead -------------------------------------------------------------

GaussianHead GaussianHead::create(ParamSet& params, const std::string& prefix, int input,
                                  std::vector<int> hidden, int output, Activation act,
                                  Rng& rng) {
  std::vector<int> widths{input};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(2 * output);
  GaussianHead head;
  head.body_ = DenseNet::create(params, prefix, std::move(widths), act, rng);
  head.dim_ = output;
  return head;
}

GaussianVar GaussianHead::forward(const Binding& b, ad::Var x) const {
  const ad::Var raw = body_.forward(b, x);
  return gaussian_from_raw(ad::slice_cols(raw, 0, dim_), ad::slice_cols(raw, dim_, dim_));
}

DiagGaussian GaussianHead::evaluate(const ParamSet& params, const Eigen::VectorXd& x) const {
  ad::Tape tape;
  Binding b(tape, params, false);
  return forward(b, tape.constant(x.transpose())).row(0);
}

// ---- RecurrentEncoder ---------------------------------------------------------

RecurrentEncoder RecurrentEncoder::create(ParamSet& params, const std::string& prefix,
                                          int input, int hidden, int output,
                                          int readout_hidden, Rng& rng) {
  RecurrentEncoder enc;
  enc.hidden_ = hidden;
  enc.input_ = input;
  enc.step_ = DenseNet::create(params, prefix + ".step", {hidden + input, hidden},
                               Activation::Tanh, rng, Activation::Tanh);
  std::vector<int> rh;
  if (readout_hidden > 0) rh.push_back(readout_hidden);
  enc.readout_ =
      GaussianHead::create(params, prefix + ".readout", hidden, rh, output, Activation::Relu, rng);
  return enc;
}

GaussianVar RecurrentEncoder::encode(const Binding& b, std::span<const ad::Var> inputs) const {
  if (inputs.empty()) throw std::invalid_argument("RecurrentEncoder::encode: empty window");
  ad::Tape& tape = b.tape();
  ad::Var h = tape.constant(Matrix::Zero(inputs.front().rows(), hidden_));
  for (const ad::Var& x : inputs) {
    h = step_.forward(b, ad::concat_cols({h, x}));
  }
  return readout_.forward(b, h);
}

// ---- Adam ---------------------------------------------------------------------

Adam::Adam(const ParamSet& params, AdamConfig config)
    : config_(config), m_(params.zeros_like()), v_(params.zeros_like()) {}

StepReport Adam::step(ParamSet& params, std::span<const Matrix> grads) {
  if (static_cast<int>(grads.size()) != params.size()) {
    throw std::invalid_argument("Adam::step: gradient count does not match parameters");
  }
  StepReport report;
  const int groups = group_.empty() ? 1 : *std::max_element(group_.begin(), group_.end()) + 1;
  std::vector<double> sq(groups, 0.0);
  for (int i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params.value(i).rows() || grads[i].cols() != params.value(i).cols()) {
      throw std::invalid_argument("Adam::step: gradient shape mismatch for " + params.name(i));
    }
    sq[group_.empty() ? 0 : group_[i]] += grads[i].squaredNorm();
  }
  double total = 0.0;
  for (double v : sq) total += v;
  report.grad_norm = std::sqrt(total);
  if (!std::isfinite(report.grad_norm)) return report;

  std::vector<double> scale(groups, 1.0);
  for (int k = 0; k < groups; ++k) {
    const double norm = std::sqrt(sq[k]);
    if (config_.clip_norm > 0.0 && norm > config_.clip_norm) {
      scale[k] = config_.clip_norm / norm;
      report.clipped = true;
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (int i = 0; i < params.size(); ++i) {
    const Matrix g = grads[i] * scale[group_.empty() ? 0 : group_[i]];
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    params.value(i).array() -= config_.learning_rate * (m_[i].array() / bc1) /
                               ((v_[i].array() / bc2).sqrt() + config_.epsilon);
  }
  report.applied = true;
  return report;
}

void Adam::set_clip_groups(std::vector<int> group) {
  if (!group.empty() && group.size() != m_.size()) {
    throw std::invalid_argument("Adam::set_clip_groups: one label per parameter required");
  }
  for (int g : group) {
    if (g < 0) throw std::invalid_argument("Adam::set_clip_groups: negative group label");
  }
  group_ = std::move(group);
}

void soft_update(ParamSet& target, const ParamSet& source, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("soft_update: alpha must lie in [0, 1]");
  }
  if (!target.same_layout(source)) throw std::invalid_argument("soft_update: layout mismatch");
  for (int i = 0; i < target.size(); ++i) {
    target.value(i) = alpha * source.value(i) + (1.0 - alpha) * target.value(i);
  }
}

}  // namespace lp
