// Three small environments with exactly known dynamics: a 12-state slippery
// chain, an 8x8 gridworld with walls, and a 2D double-integrator point mass.
// Rewards are deterministic functions of (s, a) so preference labels and
// reward-recovery diagnostics have an exact ground truth. Discrete envs
// expose their transition matrices for dynamic-programming oracles.
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "preflab/common.hpp"

namespace preflab::envs {

using Action = std::variant<int, VectorXd>;

struct ActionSpace {
  bool discrete = true;
  int n = 0;             // discrete action count
  int dim = 0;           // encoded dimension (one-hot n, or box dim)
  double lo = 0.0;       // box bounds, shared across dims
  double hi = 0.0;
};

struct EnvSpec {
  std::string name;
  int state_dim = 0;     // encoded state dimension
  ActionSpace action;
  int horizon = 0;       // truncation length; not a terminal signal
  double gamma = 0.99;
  double r_max = 1.0;    // bound on |true reward|, shared with reward models
};

struct StepResult {
  VectorXd state;
  double reward = 0.0;
  bool done = false;
};

// Exact dynamics of a finite MDP. Row s*n_actions+a of `transition` is the
// distribution over next states. Terminal states are absorbing.
struct TabularModel {
  int n_states = 0;
  int n_actions = 0;
  MatrixXd transition;   // (S*A) x S
  MatrixXd reward;       // S x A
  std::vector<uint8_t> terminal;
};

class Env {
 public:
  Env(EnvSpec spec, uint64_t seed);
  virtual ~Env() = default;

  const EnvSpec& spec() const { return spec_; }

  // Starts a new episode and returns the encoded initial state.
  VectorXd reset();
  // Advances one step. Stepping before reset or after done is a contract
  // violation; callers enforce the horizon themselves.
  StepResult step(const Action& a);

  // Deterministic reward for any (possibly off-grid) encoded state.
  virtual double true_reward(const VectorXd& state, const Action& a) const = 0;
  double true_reward_encoded(const VectorXd& state, const VectorXd& enc_action) const;

  VectorXd encode_action(const Action& a) const;
  // Nearest valid action: argmax for one-hot, clamp for boxes.
  Action decode_action(const VectorXd& enc) const;

  virtual const TabularModel* tabular() const { return nullptr; }
  // Exact start-state distribution; defined for discrete envs only.
  virtual VectorXd start_distribution() const;
  // Nearest grid state for an encoded vector; discrete envs only.
  virtual int state_index(const VectorXd& state) const;
  virtual VectorXd encode_state_index(int idx) const;

  // Times the executed action differed from the commanded one.
  long slip_count() const { return slips_; }

 protected:
  virtual VectorXd do_reset(Rng& rng) = 0;
  virtual StepResult do_step(const Action& a, Rng& rng) = 0;
  void validate_action(const Action& a) const;

  EnvSpec spec_;
  Rng rng_;
  long slips_ = 0;
  bool live_ = false;
};

std::unique_ptr<Env> make_env(const std::string& name, uint64_t seed);
std::vector<std::string> env_names();

// Generic finite MDP wrapper used by oracle tests; samples next states
// directly from the transition rows. start_dist must sum to one.
class TabularEnv : public Env {
 public:
  TabularEnv(EnvSpec spec, TabularModel model, VectorXd start_dist, uint64_t seed);
  double true_reward(const VectorXd& state, const Action& a) const override;
  const TabularModel* tabular() const override { return &model_; }
  VectorXd start_distribution() const override { return start_dist_; }
  int state_index(const VectorXd& state) const override;
  VectorXd encode_state_index(int idx) const override;

 protected:
  VectorXd do_reset(Rng& rng) override;
  StepResult do_step(const Action& a, Rng& rng) override;

 private:
  TabularModel model_;
  VectorXd start_dist_;
  int state_ = 0;
};

using PolicyFn = std::function<Action(const VectorXd& state, Rng& rng)>;

struct EvalResult {
  double mean = 0.0;
  double stderr_mean = 0.0;
  int episodes = 0;
};

// One episode's discounted return under true rewards, truncated at the
// horizon. Uses the env's own stream for dynamics and `policy_rng` for the
// policy's randomness.
double discounted_return(Env& env, const PolicyFn& policy, Rng& policy_rng);

// Monte-Carlo estimate of J(pi) = E[sum gamma^t r_t].
EvalResult evaluate_policy(Env& env, const PolicyFn& policy, int episodes,
                           uint64_t policy_seed);

PolicyFn make_uniform_policy(const Env& env);

// Linear score where the random anchor maps to 0 and the expert anchor to
// 100. Degenerate anchors are a contract violation.
double normalized_score(double j, double j_random, double j_expert);

struct EnvAnchors {
  double j_random = 0.0;
  double j_expert = 0.0;
  int episodes = 0;
  uint64_t seed = 0;
};

struct Registry {
  std::map<std::string, EnvAnchors> anchors;
};

void save_registry(const std::string& path, const Registry& reg);
Registry load_registry(const std::string& path);
const EnvAnchors& require_anchors(const Registry& reg, const std::string& env_name);

}  // namespace preflab::envs
