// Scalar loss kernels shared by the ensembles and the policy learners.
// All of them are overflow-safe and reject NaN inputs instead of
// propagating them.
#pragma once

#include "preflab/common.hpp"

namespace preflab::nn {

double softplus(double x);
double sigmoid(double x);

// Binary cross-entropy expressed through the score gap g = s1 - s0 where
// label 1 means the second item is preferred. Stable for |g| up to 1e3.
double bce_from_logit_gap(double gap, int label);
// dL/dgap = sigmoid(gap) - label.
double bce_grad_gap(double gap, int label);

// Negative log density of a diagonal Gaussian, summed over dimensions.
double gaussian_nll(const VectorXd& mean, const VectorXd& log_std, const VectorXd& target);
// Gradients with respect to mean and log_std for one sample.
void gaussian_nll_grad(const VectorXd& mean, const VectorXd& log_std, const VectorXd& target,
                       VectorXd* d_mean, VectorXd* d_log_std);

double logsumexp(const VectorXd& v);

// Smooth clamp of a raw net output into (lo, hi) via a scaled sigmoid, and
// its derivative with respect to the raw value. Keeps log-std bounded
// without killing gradients at the boundary the way a hard clamp would.
double soft_clamp(double raw, double lo, double hi);
double soft_clamp_grad(double raw, double lo, double hi);

}  // namespace preflab::nn
