#include "preflab/envs.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace preflab::envs {

using nlohmann::json;

Env::Env(EnvSpec spec, uint64_t seed) : spec_(std::move(spec)), rng_(seed) {}

VectorXd Env::reset() {
  live_ = true;
  return do_reset(rng_);
}

StepResult Env::step(const Action& a) {
  if (!live_)
    throw ContractError(spec_.name + ": step called before reset or after a done flag");
  validate_action(a);
  StepResult res = do_step(a, rng_);
  if (res.done) live_ = false;
  return res;
}

void Env::validate_action(const Action& a) const {
  if (spec_.action.discrete) {
    const int* k = std::get_if<int>(&a);
    if (k == nullptr)
      throw ContractError(spec_.name + ": expected a discrete action index");
    if (*k < 0 || *k >= spec_.action.n)
      throw ContractError(spec_.name + ": action index " + std::to_string(*k) +
                          " outside [0, " + std::to_string(spec_.action.n) + ")");
  } else {
    const VectorXd* v = std::get_if<VectorXd>(&a);
    if (v == nullptr)
      throw ContractError(spec_.name + ": expected a continuous action vector");
    if (v->size() != spec_.action.dim)
      throw ContractError(spec_.name + ": action dim " + std::to_string(v->size()) +
                          ", expected " + std::to_string(spec_.action.dim));
    check_finite(*v, spec_.name + " action");
  }
}

double Env::true_reward_encoded(const VectorXd& state, const VectorXd& enc_action) const {
  return true_reward(state, decode_action(enc_action));
}

VectorXd Env::encode_action(const Action& a) const {
  validate_action(a);
  if (spec_.action.discrete) {
    VectorXd v = VectorXd::Zero(spec_.action.n);
    v[std::get<int>(a)] = 1.0;
    return v;
  }
  return std::get<VectorXd>(a);
}

Action Env::decode_action(const VectorXd& enc) const {
  if (enc.size() != spec_.action.dim)
    throw ContractError(spec_.name + ": encoded action dim " + std::to_string(enc.size()) +
                        ", expected " + std::to_string(spec_.action.dim));
  if (spec_.action.discrete) {
    Eigen::Index best = 0;
    enc.maxCoeff(&best);
    return static_cast<int>(best);
  }
  return VectorXd(enc.cwiseMax(spec_.action.lo).cwiseMin(spec_.action.hi));
}

int Env::state_index(const VectorXd&) const {
  throw ContractError(spec_.name + ": state_index is only defined for discrete envs");
}

VectorXd Env::encode_state_index(int) const {
  throw ContractError(spec_.name + ": encode_state_index is only defined for discrete envs");
}

VectorXd Env::start_distribution() const {
  throw ContractError(spec_.name + ": start_distribution is only defined for discrete envs");
}

namespace {

int clamp_int(int v, int lo, int hi) { return std::max(lo, std::min(hi, v)); }

int sample_categorical(const VectorXd& probs, Rng& rng) {
  const double u = rng.uniform01();
  double cum = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

// 12-state chain. Start at 2, terminal at 11. Commanded moves reverse with
// probability 0.1. Reward is +1 for commanding right from state 10 and a
// -0.1 step cost everywhere else, independent of the slip outcome.
class ChainwalkEnv final : public Env {
 public:
  static constexpr int kStates = 12;
  static constexpr int kStart = 2;
  static constexpr int kTerminal = 11;
  static constexpr double kSlip = 0.1;

  explicit ChainwalkEnv(uint64_t seed) : Env(make_spec(), seed) {
    model_.n_states = kStates;
    model_.n_actions = 2;
    model_.transition = MatrixXd::Zero(kStates * 2, kStates);
    model_.reward = MatrixXd::Zero(kStates, 2);
    model_.terminal.assign(kStates, 0);
    model_.terminal[kTerminal] = 1;
    for (int s = 0; s < kStates; ++s)
      for (int a = 0; a < 2; ++a) {
        model_.reward(s, a) = reward_for(s, a);
        if (model_.terminal[s]) {
          model_.transition(s * 2 + a, s) = 1.0;
          continue;
        }
        model_.transition(s * 2 + a, move(s, a)) += 1.0 - kSlip;
        model_.transition(s * 2 + a, move(s, 1 - a)) += kSlip;
      }
  }

  double true_reward(const VectorXd& state, const Action& a) const override {
    return reward_for(state_index(state), std::get<int>(a));
  }

  const TabularModel* tabular() const override { return &model_; }

  int state_index(const VectorXd& state) const override {
    if (state.size() != 1)
      throw ContractError("chainwalk: encoded state must be 1-dimensional");
    return clamp_int(static_cast<int>(std::lround(state[0] * (kStates - 1))), 0, kStates - 1);
  }

  VectorXd encode_state_index(int idx) const override {
    VectorXd v(1);
    v[0] = static_cast<double>(idx) / (kStates - 1);
    return v;
  }

  VectorXd start_distribution() const override {
    VectorXd d = VectorXd::Zero(kStates);
    d[kStart] = 1.0;
    return d;
  }

 protected:
  VectorXd do_reset(Rng&) override {
    state_ = kStart;
    return encode_state_index(state_);
  }

  StepResult do_step(const Action& a, Rng& rng) override {
    const int commanded = std::get<int>(a);
    int executed = commanded;
    if (rng.uniform01() < kSlip) {
      executed = 1 - commanded;
      ++slips_;
    }
    const double r = reward_for(state_, commanded);
    state_ = move(state_, executed);
    return {encode_state_index(state_), r, state_ == kTerminal};
  }

 private:
  static EnvSpec make_spec() {
    EnvSpec s;
    s.name = "chainwalk";
    s.state_dim = 1;
    s.action = {true, 2, 2, 0.0, 0.0};
    s.horizon = 100;
    s.gamma = 0.99;
    s.r_max = 1.0;
    return s;
  }

  static int move(int s, int executed) {
    return clamp_int(s + (executed == 1 ? 1 : -1), 0, kStates - 1);
  }

  static double reward_for(int s, int a) { return (s == 10 && a == 1) ? 1.0 : -0.1; }

  TabularModel model_;
  int state_ = kStart;
};

// 8x8 gridworld with two partial walls, goal at (7,7). Commanded moves are
// replaced by one of the other three directions with probability 0.05.
// Moving into a wall or off the grid keeps the agent in place and costs
// -0.2; commanding a move whose intended target is the goal pays +1.
class GridnavEnv final : public Env {
 public:
  static constexpr int kSide = 8;
  static constexpr int kStates = kSide * kSide;
  static constexpr int kGoal = 7 * kSide + 7;
  static constexpr double kSlip = 0.05;

  explicit GridnavEnv(uint64_t seed) : Env(make_spec(), seed) {
    wall_.assign(kStates, 0);
    for (int c = 1; c <= 5; ++c) wall_[2 * kSide + c] = 1;
    for (int c = 2; c <= 6; ++c) wall_[5 * kSide + c] = 1;

    model_.n_states = kStates;
    model_.n_actions = 4;
    model_.transition = MatrixXd::Zero(kStates * 4, kStates);
    model_.reward = MatrixXd::Zero(kStates, 4);
    model_.terminal.assign(kStates, 0);
    model_.terminal[kGoal] = 1;
    for (int s = 0; s < kStates; ++s)
      for (int a = 0; a < 4; ++a) {
        model_.reward(s, a) = reward_for(s, a);
        if (model_.terminal[s] || wall_[s]) {
          model_.transition(s * 4 + a, s) = 1.0;
          continue;
        }
        for (int e = 0; e < 4; ++e) {
          const double p = (e == a) ? 1.0 - kSlip : kSlip / 3.0;
          model_.transition(s * 4 + a, move(s, e)) += p;
        }
      }

    start_cells_.clear();
    for (int s = 0; s < kStates; ++s)
      if (!wall_[s] && s != kGoal) start_cells_.push_back(s);
  }

  double true_reward(const VectorXd& state, const Action& a) const override {
    return reward_for(state_index(state), std::get<int>(a));
  }

  const TabularModel* tabular() const override { return &model_; }

  int state_index(const VectorXd& state) const override {
    if (state.size() != 2)
      throw ContractError("gridnav: encoded state must be 2-dimensional");
    const int c = clamp_int(static_cast<int>(std::lround(state[0] * (kSide - 1))), 0, kSide - 1);
    const int r = clamp_int(static_cast<int>(std::lround(state[1] * (kSide - 1))), 0, kSide - 1);
    return r * kSide + c;
  }

  VectorXd encode_state_index(int idx) const override {
    VectorXd v(2);
    v[0] = static_cast<double>(idx % kSide) / (kSide - 1);
    v[1] = static_cast<double>(idx / kSide) / (kSide - 1);
    return v;
  }

  bool is_wall(int idx) const { return wall_[idx] != 0; }

  VectorXd start_distribution() const override {
    VectorXd d = VectorXd::Zero(kSide * kSide);
    for (int s : start_cells_) d[s] = 1.0 / start_cells_.size();
    return d;
  }

 protected:
  VectorXd do_reset(Rng& rng) override {
    state_ = start_cells_[rng.uniform_int(static_cast<int>(start_cells_.size()))];
    return encode_state_index(state_);
  }

  StepResult do_step(const Action& a, Rng& rng) override {
    const int commanded = std::get<int>(a);
    int executed = commanded;
    if (rng.uniform01() < kSlip) {
      const int shift = 1 + rng.uniform_int(3);
      executed = (commanded + shift) % 4;
      ++slips_;
    }
    const double r = reward_for(state_, commanded);
    state_ = move(state_, executed);
    return {encode_state_index(state_), r, state_ == kGoal};
  }

 private:
  static EnvSpec make_spec() {
    EnvSpec s;
    s.name = "gridnav";
    s.state_dim = 2;
    s.action = {true, 4, 4, 0.0, 0.0};
    s.horizon = 100;
    s.gamma = 0.99;
    s.r_max = 1.0;
    return s;
  }

  // 0=up 1=right 2=down 3=left; blocked moves stay in place.
  int move(int s, int dir) const {
    const int r = s / kSide, c = s % kSide;
    int nr = r, nc = c;
    if (dir == 0) nr = r - 1;
    if (dir == 1) nc = c + 1;
    if (dir == 2) nr = r + 1;
    if (dir == 3) nc = c - 1;
    if (nr < 0 || nr >= kSide || nc < 0 || nc >= kSide) return s;
    const int t = nr * kSide + nc;
    return wall_[t] ? s : t;
  }

  bool blocked(int s, int dir) const { return move(s, dir) == s; }

  double reward_for(int s, int a) const {
    if (blocked(s, a)) return -0.2;
    return move(s, a) == kGoal ? 1.0 : 0.0;
  }

  TabularModel model_;
  std::vector<uint8_t> wall_;
  std::vector<int> start_cells_;
  int state_ = 0;
};

// Double integrator on the plane. Velocity and position are clamped, the
// goal sits at (1, 1), and the reward is the negative distance to the goal
// minus a small control cost. Dynamics are deterministic.
class PointmassEnv final : public Env {
 public:
  static constexpr double kDt = 0.1;
  static constexpr double kPosBound = 1.5;
  static constexpr double kVelBound = 1.0;
  static constexpr double kGoalRadius = 0.1;

  explicit PointmassEnv(uint64_t seed) : Env(make_spec(), seed) {
    goal_.resize(2);
    goal_ << 1.0, 1.0;
  }

  double true_reward(const VectorXd& state, const Action& a) const override {
    if (state.size() != 4)
      throw ContractError("pointmass: encoded state must be 4-dimensional");
    const VectorXd act = clamp_action(std::get<VectorXd>(a));
    const double dist = (state.head(2) - goal_).norm();
    return -dist - 0.05 * act.squaredNorm();
  }

 protected:
  VectorXd do_reset(Rng& rng) override {
    state_.resize(4);
    state_ << rng.uniform(-1.2, -0.8), rng.uniform(-1.2, -0.8), 0.0, 0.0;
    return state_;
  }

  StepResult do_step(const Action& a, Rng&) override {
    const VectorXd act = clamp_action(std::get<VectorXd>(a));
    const double r = true_reward(state_, a);
    VectorXd vel = (state_.tail(2) + kDt * act).cwiseMax(-kVelBound).cwiseMin(kVelBound);
    VectorXd pos = (state_.head(2) + kDt * vel).cwiseMax(-kPosBound).cwiseMin(kPosBound);
    state_ << pos, vel;
    const bool done = (pos - goal_).norm() < kGoalRadius;
    return {state_, r, done};
  }

 private:
  static EnvSpec make_spec() {
    EnvSpec s;
    s.name = "pointmass";
    s.state_dim = 4;
    s.action = {false, 0, 2, -1.0, 1.0};
    s.horizon = 60;
    s.gamma = 0.99;
    s.r_max = 3.7;
    return s;
  }

  VectorXd clamp_action(const VectorXd& a) const {
    return a.cwiseMax(spec_.action.lo).cwiseMin(spec_.action.hi);
  }

  VectorXd goal_;
  VectorXd state_;
};

}  // namespace

TabularEnv::TabularEnv(EnvSpec spec, TabularModel model, VectorXd start_dist, uint64_t seed)
    : Env(std::move(spec), seed), model_(std::move(model)), start_dist_(std::move(start_dist)) {
  if (model_.transition.rows() != model_.n_states * model_.n_actions ||
      model_.transition.cols() != model_.n_states)
    throw ContractError("TabularEnv: transition matrix shape mismatch");
  if (start_dist_.size() != model_.n_states)
    throw ContractError("TabularEnv: start distribution size mismatch");
  if (std::abs(start_dist_.sum() - 1.0) > 1e-9)
    throw ContractError("TabularEnv: start distribution must sum to 1");
}

double TabularEnv::true_reward(const VectorXd& state, const Action& a) const {
  return model_.reward(state_index(state), std::get<int>(a));
}

int TabularEnv::state_index(const VectorXd& state) const {
  if (state.size() != 1)
    throw ContractError("TabularEnv: encoded state must be 1-dimensional");
  if (model_.n_states == 1) return 0;
  return clamp_int(static_cast<int>(std::lround(state[0] * (model_.n_states - 1))), 0,
                   model_.n_states - 1);
}

VectorXd TabularEnv::encode_state_index(int idx) const {
  VectorXd v(1);
  v[0] = model_.n_states == 1 ? 0.0 : static_cast<double>(idx) / (model_.n_states - 1);
  return v;
}

VectorXd TabularEnv::do_reset(Rng& rng) {
  state_ = sample_categorical(start_dist_, rng);
  return encode_state_index(state_);
}

StepResult TabularEnv::do_step(const Action& a, Rng& rng) {
  const int act = std::get<int>(a);
  const double r = model_.reward(state_, act);
  state_ = sample_categorical(model_.transition.row(state_ * model_.n_actions + act), rng);
  return {encode_state_index(state_), r, model_.terminal[state_] != 0};
}

std::unique_ptr<Env> make_env(const std::string& name, uint64_t seed) {
  if (name == "chainwalk") return std::make_unique<ChainwalkEnv>(seed);
  if (name == "gridnav") return std::make_unique<GridnavEnv>(seed);
  if (name == "pointmass") return std::make_unique<PointmassEnv>(seed);
  throw ContractError("make_env: unknown env '" + name + "', expected one of chainwalk, " +
                      "gridnav, pointmass");
}

std::vector<std::string> env_names() { return {"chainwalk", "gridnav", "pointmass"}; }

double discounted_return(Env& env, const PolicyFn& policy, Rng& policy_rng) {
  VectorXd s = env.reset();
  double g = 0.0, discount = 1.0;
  for (int t = 0; t < env.spec().horizon; ++t) {
    const StepResult res = env.step(policy(s, policy_rng));
    g += discount * res.reward;
    discount *= env.spec().gamma;
    s = res.state;
    if (res.done) break;
  }
  return g;
}

EvalResult evaluate_policy(Env& env, const PolicyFn& policy, int episodes,
                           uint64_t policy_seed) {
  if (episodes <= 0) throw ContractError("evaluate_policy: episodes must be positive");
  Rng policy_rng(policy_seed);
  double sum = 0.0, sumsq = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const double g = discounted_return(env, policy, policy_rng);
    sum += g;
    sumsq += g * g;
  }
  EvalResult out;
  out.episodes = episodes;
  out.mean = sum / episodes;
  const double var = std::max(0.0, sumsq / episodes - out.mean * out.mean);
  out.stderr_mean = std::sqrt(var / episodes);
  return out;
}

PolicyFn make_uniform_policy(const Env& env) {
  const ActionSpace space = env.spec().action;
  return [space](const VectorXd&, Rng& rng) -> Action {
    if (space.discrete) return rng.uniform_int(space.n);
    VectorXd a(space.dim);
    for (int i = 0; i < space.dim; ++i) a[i] = rng.uniform(space.lo, space.hi);
    return a;
  };
}

double normalized_score(double j, double j_random, double j_expert) {
  if (j_expert == j_random)
    throw ContractError("normalized_score: expert and random anchors coincide");
  return (j - j_random) / (j_expert - j_random) * 100.0;
}

void save_registry(const std::string& path, const Registry& reg) {
  json root;
  root["format"] = "preflab.registry";
  root["version"] = 1;
  json anchors = json::object();
  for (const auto& [name, a] : reg.anchors) {
    anchors[name] = {{"j_random", a.j_random},
                     {"j_expert", a.j_expert},
                     {"episodes", a.episodes},
                     {"seed", a.seed}};
  }
  root["anchors"] = anchors;
  write_file(path, root.dump(2) + "\n");
}

Registry load_registry(const std::string& path) {
  json root;
  try {
    root = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ContractError("load_registry: bad JSON in " + path + ": " + e.what());
  }
  if (root.value("format", "") != "preflab.registry")
    throw ContractError("load_registry: not a registry file: " + path);
  Registry reg;
  for (auto& [name, a] : root.at("anchors").items()) {
    EnvAnchors anchors;
    anchors.j_random = a.at("j_random").get<double>();
    anchors.j_expert = a.at("j_expert").get<double>();
    anchors.episodes = a.at("episodes").get<int>();
    anchors.seed = a.at("seed").get<uint64_t>();
    reg.anchors[name] = anchors;
  }
  return reg;
}

const EnvAnchors& require_anchors(const Registry& reg, const std::string& env_name) {
  const auto it = reg.anchors.find(env_name);
  if (it == reg.anchors.end())
    throw ContractError("registry has no anchors for env '" + env_name + "'");
  return it->second;
}

}  // namespace preflab::envs
