#include "latentpilot/gaussian.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace lp {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 * pi)

void require_dims(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

double positive_std(double raw) {
  const double sp = raw > 0.0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
  return sp + kStdFloor;
}

DiagGaussian::DiagGaussian(Eigen::VectorXd mean, Eigen::VectorXd std)
    : mean_(std::move(mean)), std_(std::move(std)) {
  require_dims(mean_.size(), std_.size(), "DiagGaussian");
  for (Eigen::Index i = 0; i < std_.size(); ++i) {
    if (!(std_[i] > 0.0) || !std::isfinite(std_[i])) {
      throw std::invalid_argument("DiagGaussian: std[" + std::to_string(i) +
                                  "] must be finite and > 0, got " + std::to_string(std_[i]));
    }
  }
}

DiagGaussian DiagGaussian::standard(Eigen::Index dim) {
  return DiagGaussian(Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim));
}

Eigen::VectorXd sample_reparam(const DiagGaussian& g, const Eigen::VectorXd& eps) {
  require_dims(g.dimension(), eps.size(), "sample_reparam");
  return g.mean() + g.std().cwiseProduct(eps);
}

double log_prob(const DiagGaussian& g, const Eigen::VectorXd& x) {
  require_dims(g.dimension(), x.size(), "log_prob");
  const auto z = ((x - g.mean()).array() / g.std().array());
  return (-kHalfLog2Pi - g.std().array().log() - 0.5 * z.square()).sum();
}

double kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  require_dims(q.dimension(), p.dimension(), "kl_diag");
  const auto vq = q.std().array().square();
  const auto vp = p.std().array().square();
  const auto dm = (q.mean() - p.mean()).array();
  return ((p.std().array() / q.std().array()).log() + (vq + dm.square()) / (2.0 * vp) - 0.5)
      .sum();
}

DiagGaussian fuse(const DiagGaussian& meas, const DiagGaussian& trans) {
  require_dims(meas.dimension(), trans.dimension(), "fuse");
  const Eigen::ArrayXd vm = meas.std().array().square();
  const Eigen::ArrayXd vt = trans.std().array().square();
  const Eigen::ArrayXd denom = vm + vt;
  Eigen::VectorXd mean = (trans.mean().array() * vm + meas.mean().array() * vt) / denom;
  Eigen::VectorXd std = (vm * vt / denom).sqrt();
  return DiagGaussian(std::move(mean), std::move(std));
}

// ---- batched ------------------------------------------------------------------

DiagGaussian GaussianVar::row(Eigen::Index r) const {
  return DiagGaussian(mean.value().row(r).transpose(), std.value().row(r).transpose());
}

GaussianVar gaussian_from_raw(ad::Var mean, ad::Var raw_scale) {
  return GaussianVar{mean, ad::softplus(raw_scale) + kStdFloor};
}

ad::Var sample_reparam(const GaussianVar& g, ad::Var eps) {
  return g.mean + g.std * eps;
}

ad::Var log_prob(const GaussianVar& g, ad::Var x) {
  const ad::Var z = (x - g.mean) / g.std;
  const ad::Var per = -kHalfLog2Pi - ad::log(g.std) - 0.5 * ad::square(z);
  return ad::sum_cols(per);
}

ad::Var kl_diag(const GaussianVar& q, const GaussianVar& p) {
  require_dims(q.dimension(), p.dimension(), "kl_diag");
  const ad::Var vq = ad::square(q.std);
  const ad::Var vp = ad::square(p.std);
  const ad::Var per = ad::log(p.std) - ad::log(q.std) +
                      (vq + ad::square(q.mean - p.mean)) / (2.0 * vp) - 0.5;
  return ad::sum_cols(per);
}

GaussianVar fuse(const GaussianVar& meas, const GaussianVar& trans) {
  require_dims(meas.dimension(), trans.dimension(), "fuse");
  const ad::Var vm = ad::square(meas.std);
  const ad::Var vt = ad::square(trans.std);
  const ad::Var denom = vm + vt;
  const ad::Var mean = (trans.mean * vm + meas.mean * vt) / denom;
  const ad::Var var = (vm * vt) / denom;
  return GaussianVar{mean, ad::sqrt(var)};
}

ad::Var kl_standard(const GaussianVar& q) {
  const ad::Var per = -ad::log(q.std) + 0.5 * (ad::square(q.std) + ad::square(q.mean)) - 0.5;
  return ad::sum_cols(per);
}

}  // namespace lp
