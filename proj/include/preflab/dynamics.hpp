#pragma once

#include <string>
#include <vector>

#include "preflab/common.hpp"
#include "preflab/datasets.hpp"
#include "preflab/envs.hpp"
#include "preflab/net.hpp"

namespace preflab::dynamics {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DynamicsConfig {
  int n_members = 7;
  int n_elites = 5;
  int hidden = 64;
  int depth = 2;  // hidden layers
  double lr = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 10;
  double val_fraction = 0.1;
  double log_std_lo = -5.0;
  double log_std_hi = 2.0;
  uint64_t seed = 0;
};

// Ensemble of Gaussian next-state models. Each member is an MLP mapping a
// normalized [state, encoded action] row to the mean and (soft-clamped)
// log-std of the normalized state delta. Members train on bootstrap
// resamples of a shared train split and stop early on a shared validation
// split; the elite subset is the members with lowest validation NLL.
class DynamicsEnsemble {
 public:
  static DynamicsEnsemble fit(const envs::Env& env, const data::Dataset& d,
                              const DynamicsConfig& cfg);

  // Mean and standard deviation of the next state in raw state units.
  // Rows of `s` / `a_enc` are independent queries.
  void predict_dist(const MatrixXd& s, const MatrixXd& a_enc, int member,
                    MatrixXd* mean, MatrixXd* std) const;
  MatrixXd sample_next(const MatrixXd& s, const MatrixXd& a_enc, int member,
                       Rng& rng) const;

  const std::vector<int>& elites() const { return elites_; }
  const std::vector<double>& val_nlls() const { return val_nll_; }
  int n_members() const { return static_cast<int>(members_.size()); }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return act_dim_; }
  const std::string& env_name() const { return env_name_; }

  // Writes meta.json plus one checkpoint per member into `dir`.
  void save(const std::string& dir) const;
  static DynamicsEnsemble load(const std::string& dir);

 private:
  DynamicsEnsemble() = default;

  std::string env_name_;
  int state_dim_ = 0;
  int act_dim_ = 0;
  double log_std_lo_ = -5.0;
  double log_std_hi_ = 2.0;
  VectorXd mu_in_, sigma_in_, mu_out_, sigma_out_;
  std::vector<nn::Mlp> members_;
  std::vector<double> val_nll_;
  std::vector<int> elites_;
};

// Rolls the model forward under `pi` for `segment_len` steps from start
// states drawn uniformly from the offline dataset, one elite member per
// segment. Segments carry the true (environment) reward of their visited
// state-action rows so downstream consumers can audit generated labels;
// the pairs themselves come back unlabeled (y = -1).
std::vector<data::PreferencePair> rollout_pairs(const envs::Env& env,
                                                const DynamicsEnsemble& dyn,
                                                const data::Dataset& d,
                                                const envs::PolicyFn& pi,
                                                int segment_len, int n_pairs,
                                                uint64_t seed);

}  // namespace preflab::dynamics
