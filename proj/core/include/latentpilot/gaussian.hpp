#pragma once

// Diagonal Gaussian algebra.
//
// Two layers share the same formulas: DiagGaussian is an immutable value
// type for single vectors, and GaussianVar carries batched mean/std nodes on
// an autodiff tape. Scale is always stored as a standard deviation.

#include "latentpilot/autodiff.hpp"

#include <Eigen/Dense>

namespace lp {

/// Lower bound added to every softplus-mapped standard deviation.
inline constexpr double kStdFloor = 1e-4;

/// softplus(raw) + kStdFloor.
double positive_std(double raw);

class DiagGaussian {
 public:
  /// Throws std::invalid_argument on length mismatch or non-positive std.
  DiagGaussian(Eigen::VectorXd mean, Eigen::VectorXd std);

  static DiagGaussian standard(Eigen::Index dim);

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::VectorXd& std() const { return std_; }
  Eigen::VectorXd variance() const { return std_.array().square(); }
  Eigen::Index dimension() const { return mean_.size(); }

 private:
  Eigen::VectorXd mean_;
  Eigen::VectorXd std_;
};

/// mean + std * eps.
Eigen::VectorXd sample_reparam(const DiagGaussian& g, const Eigen::VectorXd& eps);
double log_prob(const DiagGaussian& g, const Eigen::VectorXd& x);
/// KL(q || p), analytic.
double kl_diag(const DiagGaussian& q, const DiagGaussian& p);
/// Normalised product of two Gaussian densities (precision-weighted fusion).
DiagGaussian fuse(const DiagGaussian& meas, const DiagGaussian& trans);

// ---- differentiable, batched ------------------------------------------------

/// Batched diagonal Gaussian on a tape: mean and std are both B x d.
struct GaussianVar {
  ad::Var mean;
  ad::Var std;

  Eigen::Index batch() const { return mean.rows(); }
  Eigen::Index dimension() const { return mean.cols(); }
  /// Row `row` as a value type.
  DiagGaussian row(Eigen::Index row) const;
};

/// Builds a GaussianVar from an unconstrained raw scale via softplus + floor.
GaussianVar gaussian_from_raw(ad::Var mean, ad::Var raw_scale);

ad::Var sample_reparam(const GaussianVar& g, ad::Var eps);
/// Per-row log density, B x 1.
ad::Var log_prob(const GaussianVar& g, ad::Var x);
/// Per-row KL(q || p), B x 1.
ad::Var kl_diag(const GaussianVar& q, const GaussianVar& p);
GaussianVar fuse(const GaussianVar& meas, const GaussianVar& trans);
/// KL(q || N(0, I)) per row, B x 1.
ad::Var kl_standard(const GaussianVar& q);

}  // namespace lp
