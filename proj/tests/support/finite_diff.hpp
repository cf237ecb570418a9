#pragma once

// Test-only central finite-difference oracle. Deliberately independent of
// the autodiff tape: it only evaluates the scalar loss at perturbed points.

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <vector>

namespace lp::testing {

/// Central differences of `loss` at `x`.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& loss,
                                        Eigen::VectorXd x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = loss(x);
    x[i] = orig - h;
    const double fm = loss(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale == 0.0) return 0.0;
  return (a - b).norm() / scale;
}

/// Concatenates column-major reshapes, matching ParamSet::flatten.
inline Eigen::VectorXd flatten(const std::vector<Eigen::MatrixXd>& parts) {
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Eigen::VectorXd out(n);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.size()) = p.reshaped();
    off += p.size();
  }
  return out;
}

}  // namespace lp::testing
