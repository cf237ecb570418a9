#pragma once

// Parametric function approximators and their optimiser.
//
// Parameters live in a ParamSet (ordered, named matrices). Networks only
// hold indices into a ParamSet; a Binding materialises the set on a tape,
// either as trainable leaves or as constants, for one forward/backward pass.

#include "latentpilot/autodiff.hpp"
#include "latentpilot/gaussian.hpp"
#include "latentpilot/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lp {

using ad::Matrix;

class ParamSet {
 public:
  int add(std::string name, Matrix value);

  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_.at(i); }
  const Matrix& value(int i) const { return values_.at(i); }
  Matrix& value(int i) { return values_.at(i); }
  /// Index of a parameter by name; throws std::out_of_range.
  int index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Eigen::Index total_size() const;
  std::vector<Matrix> zeros_like() const;
  Eigen::VectorXd flatten() const;
  void assign_flat(const Eigen::VectorXd& flat);
  bool all_finite() const;

  /// Same names and shapes.
  bool same_layout(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// A ParamSet placed on a tape.
class Binding {
 public:
  Binding(ad::Tape& tape, const ParamSet& params, bool trainable);

  ad::Var operator[](int i) const { return vars_.at(i); }
  ad::Tape& tape() const { return *tape_; }
  /// Gradients after tape.backward(); exact zeros where nothing flowed.
  std::vector<Matrix> grads() const;

 private:
  ad::Tape* tape_;
  std::vector<ad::Var> vars_;
};

enum class Activation { Relu, Tanh, Identity };

/// Fully connected network: x W_1 + b_1 -> act -> ... -> x W_L + b_L.
/// widths = {input, hidden..., output}; the final layer is affine unless
/// `output_activation` says otherwise.
class DenseNet {
 public:
  DenseNet() = default;
  static DenseNet create(ParamSet& params, const std::string& prefix, std::vector<int> widths,
                         Activation hidden, Rng& rng,
                         Activation output_activation = Activation::Identity);

  ad::Var forward(const Binding& b, ad::Var x) const;
  /// Single-vector convenience evaluation without gradients.
  Eigen::VectorXd evaluate(const ParamSet& params, const Eigen::VectorXd& x) const;

  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  int hidden_layers() const { return static_cast<int>(widths_.size()) - 2; }
  const std::vector<int>& widths() const { return widths_; }
  std::span<const int> weight_ids() const { return weight_ids_; }
  std::span<const int> bias_ids() const { return bias_ids_; }
  /// Every parameter index this net owns.
  std::vector<int> param_ids() const;

 private:
  std::vector<int> widths_;
  std::vector<int> weight_ids_;
  std::vector<int> bias_ids_;
  Activation hidden_ = Activation::Relu;
  Activation output_ = Activation::Identity;
};

/// DenseNet whose 2d outputs are split into a mean and a softplus-mapped std.
class GaussianHead {
 public:
  GaussianHead() = default;
  static GaussianHead create(ParamSet& params, const std::string& prefix, int input,
                             std::vector<int> hidden, int output, Activation act, Rng& rng);

  GaussianVar forward(const Binding& b, ad::Var x) const;
  DiagGaussian evaluate(const ParamSet& params, const Eigen::VectorXd& x) const;

  int dimension() const { return dim_; }
  const DenseNet& body() const { return body_; }

 private:
  DenseNet body_;
  int dim_ = 0;
};

/// h_t = tanh([h_{t-1}, x_t, u_t] W + b) from h_0 = 0, followed by a
/// Gaussian read-out of the final hidden state.
class RecurrentEncoder {
 public:
  RecurrentEncoder() = default;
  static RecurrentEncoder create(ParamSet& params, const std::string& prefix, int input,
                                 int hidden, int output, int readout_hidden, Rng& rng);

  /// inputs[t] is B x input (observation and action already concatenated).
  GaussianVar encode(const Binding& b, std::span<const ad::Var> inputs) const;

  int hidden_width() const { return hidden_; }
  int input_width() const { return input_; }
  const DenseNet& step() const { return step_; }
  const GaussianHead& readout() const { return readout_; }

 private:
  DenseNet step_;
  GaussianHead readout_;
  int hidden_ = 0;
  int input_ = 0;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 100.0;
};

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
  bool clipped = false;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParamSet& params, AdamConfig config);

  /// One bias-corrected update. Non-finite gradients are rejected and the
  /// parameters left untouched (reported via StepReport::applied).
  StepReport step(ParamSet& params, std::span<const Matrix> grads);

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  /// Clips each group's gradient norm separately; `group[i]` labels
  /// parameter i. Empty restores a single global group.
  void set_clip_groups(std::vector<int> group);

 private:
  AdamConfig config_;
  std::vector<int> group_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
};

/// target <- alpha * source + (1 - alpha) * target, elementwise.
void soft_update(ParamSet& target, const ParamSet& source, double alpha);

}  // namespace lp
