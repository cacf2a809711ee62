#include "preflab/losses.hpp"

#include <cmath>
#include <numbers>

namespace preflab::nn {

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double bce_from_logit_gap(double gap, int label) {
  check_finite(gap, "bce_from_logit_gap gap");
  if (label != 0 && label != 1)
    throw ContractError("bce_from_logit_gap: label must be 0 or 1, got " +
                        std::to_string(label));
  // -log P(label) with P(1) = sigmoid(gap).
  return label == 1 ? softplus(-gap) : softplus(gap);
}

double bce_grad_gap(double gap, int label) {
  check_finite(gap, "bce_grad_gap gap");
  if (label != 0 && label != 1)
    throw ContractError("bce_grad_gap: label must be 0 or 1, got " + std::to_string(label));
  return sigmoid(gap) - static_cast<double>(label);
}

double gaussian_nll(const VectorXd& mean, const VectorXd& log_std, const VectorXd& target) {
  if (mean.size() != log_std.size() || mean.size() != target.size())
    throw ContractError("gaussian_nll: mean/log_std/target dims differ");
  check_finite(mean, "gaussian_nll mean");
  check_finite(log_std, "gaussian_nll log_std");
  check_finite(target, "gaussian_nll target");
  constexpr double half_log_2pi = 0.9189385332046727;  // 0.5*log(2*pi)
  double nll = 0.0;
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double z = (target[i] - mean[i]) * std::exp(-log_std[i]);
    nll += log_std[i] + half_log_2pi + 0.5 * z * z;
  }
  check_finite(nll, "gaussian_nll value");
  return nll;
}

void gaussian_nll_grad(const VectorXd& mean, const VectorXd& log_std, const VectorXd& target,
                       VectorXd* d_mean, VectorXd* d_log_std) {
  if (mean.size() != log_std.size() || mean.size() != target.size())
    throw ContractError("gaussian_nll_grad: mean/log_std/target dims differ");
  d_mean->resize(mean.size());
  d_log_std->resize(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double inv_var = std::exp(-2.0 * log_std[i]);
    const double diff = mean[i] - target[i];
    (*d_mean)[i] = diff * inv_var;
    (*d_log_std)[i] = 1.0 - diff * diff * inv_var;
  }
}

double logsumexp(const VectorXd& v) {
  if (v.size() == 0) throw ContractError("logsumexp: empty input");
  check_finite(v, "logsumexp input");
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

double soft_clamp(double raw, double lo, double hi) {
  if (!(lo < hi)) throw ContractError("soft_clamp: need lo < hi");
  return lo + (hi - lo) * sigmoid(raw);
}

double soft_clamp_grad(double raw, double lo, double hi) {
  const double s = sigmoid(raw);
  return (hi - lo) * s * (1.0 - s);
}

}  // namespace preflab::nn
