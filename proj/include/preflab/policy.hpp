// Offline policy optimization against relabeled rewards: conservative
// Q-learning and implicit Q-learning, as Q-tables on the discrete envs and
// as dense nets on the point mass. Also the exact dynamic-programming
// oracle and the reference policies used to grade everything else.
// Learner batches carry model rewards only; true rewards never enter here.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "preflab/envs.hpp"
#include "preflab/net.hpp"

namespace preflab::policy {

using envs::Action;
using envs::Env;
using envs::PolicyFn;
using envs::TabularModel;

// Q-values of the optimal policy, by value iteration to a sup-norm Bellman
// residual below tol. Terminal states have value zero.
MatrixXd value_iteration(const TabularModel& m, double gamma, double tol = 1e-10,
                         int max_sweeps = 1000000);

// Asynchronous Q-learning against a generative model: each update draws a
// uniform non-terminal (s, a), samples a batch of next states from the exact
// transition row, and moves Q(s, a) toward r + gamma * mean of max_a'
// Q(s', a') with step size 1/k^0.77 in the pair's visit count k. Terminal
// next states bootstrap zero. Returns the average of the second-half
// iterates, which lands within ~1e-3 sup-norm of value_iteration on the
// chain envs at a few million updates.
MatrixXd q_learning(const TabularModel& m, double gamma, int64_t steps,
                    uint64_t seed);

// Greedy policy over a Q-table; ties break toward the lower index.
PolicyFn make_greedy_policy(const Env& env, MatrixXd q);
// With probability eps acts uniformly, otherwise defers to base.
PolicyFn make_eps_greedy(const Env& env, PolicyFn base, double eps);

// Exact policy evaluation on a tabular model (used as an oracle in tests
// and for registry cross-checks): V^pi for a deterministic policy a(s).
VectorXd exact_policy_value(const TabularModel& m, const std::vector<int>& action_of_state,
                            double gamma, double tol = 1e-12);

// Proportional-derivative controller for the point mass, and the CEM loop
// that tunes its two gains against the true environment.
PolicyFn make_pointmass_pd(double kp, double kd);
std::pair<double, double> tune_pointmass_gains(uint64_t seed);

// Expert-grade policy: value iteration for the discrete envs, a CEM-tuned
// PD controller for the point mass.
PolicyFn make_reference_policy(const std::string& env_name, uint64_t seed);

double bellman_target(double r, double gamma, bool done, double next_value);
double expectile_weight(double residual, double expectile);
double awr_weight(double advantage, double beta, double clip = 100.0);

// One training batch. Rewards are whatever the caller relabeled them with;
// index fields are filled for discrete envs only.
struct Batch {
  MatrixXd s;                    // N x state_dim
  MatrixXd a_enc;                // N x action_enc_dim
  MatrixXd s_next;               // N x state_dim
  VectorXd r;                    // relabeled reward
  std::vector<uint8_t> done;     // terminal flag of the stored transition
  std::vector<int> s_idx, a_idx, s_next_idx;

  int size() const { return static_cast<int>(s.rows()); }
};

struct UpdateStats {
  double loss = 0.0;     // TD or regression loss
  double penalty = 0.0;  // conservatism penalty (CQL only)
};

struct LearnerParams {
  std::string algo = "cql";  // cql | iql
  double lr = 3e-4;
  double cql_alpha = 5.0;
  double cql_temp = 1.0;
  double iql_expectile = 0.7;
  double iql_beta = 3.0;
  int hidden = 64;
  int depth = 2;
  bool diag_mode = true;  // assert penalty sign and finiteness every step
};

// Serialized policy: a Q-table or an actor net.
struct PolicyArtifact {
  std::string kind;  // "tabular_q" | "net_actor"
  std::string env_name;
  MatrixXd q;
  std::optional<nn::Mlp> actor;
  double act_hi = 1.0;
};

void save_policy(const std::string& path, const PolicyArtifact& artifact);
PolicyArtifact load_policy(const std::string& path);
PolicyFn policy_from_artifact(const PolicyArtifact& artifact, const Env& env);

class OfflineLearner {
 public:
  virtual ~OfflineLearner() = default;
  // One gradient (or table) step on the batch.
  virtual UpdateStats update(const Batch& batch) = 0;
  // Deterministic policy for evaluation.
  virtual PolicyFn eval_policy() const = 0;
  // Exploring policy for model rollouts: eps-greedy on discrete actions,
  // Gaussian perturbation on continuous ones.
  virtual PolicyFn rollout_policy(double explore) const = 0;
  virtual PolicyArtifact artifact() const = 0;
};

std::unique_ptr<OfflineLearner> make_learner(const Env& env, const LearnerParams& params,
                                             uint64_t seed);

}  // namespace preflab::policy
