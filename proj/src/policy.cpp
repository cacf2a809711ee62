#include "preflab/policy.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "preflab/losses.hpp"

namespace preflab::policy {

using nn::Adam;
using nn::Mlp;
using nn::Trace;

MatrixXd value_iteration(const TabularModel& m, double gamma, double tol, int max_sweeps) {
  if (gamma < 0.0 || gamma >= 1.0)
    throw ContractError("value_iteration: gamma must be in [0, 1)");
  check_finite(m.reward, "value_iteration rewards");
  const int S = m.n_states, A = m.n_actions;
  MatrixXd q = MatrixXd::Zero(S, A);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    VectorXd v(S);
    for (int s = 0; s < S; ++s) v[s] = m.terminal[s] ? 0.0 : q.row(s).maxCoeff();
    double resid = 0.0;
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) {
        const double next = m.terminal[s]
                                ? 0.0
                                : m.reward(s, a) + gamma * m.transition.row(s * A + a).dot(v);
        resid = std::max(resid, std::abs(next - q(s, a)));
        q(s, a) = next;
      }
    if (resid < tol) return q;
  }
  throw NumericError("value_iteration: no convergence after " + std::to_string(max_sweeps) +
                     " sweeps");
}

MatrixXd q_learning(const TabularModel& m, double gamma, int64_t steps, uint64_t seed) {
  if (gamma < 0.0 || gamma >= 1.0)
    throw ContractError("q_learning: gamma must be in [0, 1)");
  if (steps < 1) throw ContractError("q_learning: steps must be positive");
  check_finite(m.reward, "q_learning rewards");
  const int S = m.n_states, A = m.n_actions;
  std::vector<int> live;
  for (int s = 0; s < S; ++s)
    if (!m.terminal[s]) live.push_back(s);
  if (live.empty()) throw ContractError("q_learning: every state is terminal");

  // Vanilla 1/k step sizes stall near gamma = 1 (measured: sup-norm stuck
  // around 0.4 on the chain after 3e7 updates), so each update averages
  // kBoot next-state draws to shrink the max-operator bias, decays steps as
  // 1/k^0.77, and returns the average of the second-half iterates.
  constexpr int kBoot = 64;
  constexpr double kOmega = 0.77;
  MatrixXd q = MatrixXd::Zero(S, A);
  MatrixXd q_avg = MatrixXd::Zero(S, A);
  MatrixXd visits = MatrixXd::Zero(S, A);
  double n_avg = 0.0;
  Rng rng(seed);
  const int64_t burn = steps / 2;
  for (int64_t i = 0; i < steps; ++i) {
    const int s = live[rng.uniform_int(static_cast<int>(live.size()))];
    const int a = rng.uniform_int(A);
    double boot = 0.0;
    for (int b = 0; b < kBoot; ++b) {
      double u = rng.uniform01();
      int sn = S - 1;
      for (int j = 0; j < S; ++j) {
        u -= m.transition(s * A + a, j);
        if (u < 0.0) {
          sn = j;
          break;
        }
      }
      boot += m.terminal[sn] ? 0.0 : q.row(sn).maxCoeff();
    }
    const double target = m.reward(s, a) + gamma * boot / kBoot;
    visits(s, a) += 1.0;
    q(s, a) += (target - q(s, a)) / std::pow(visits(s, a), kOmega);
    if (i >= burn && (i % 8) == 0) {
      n_avg += 1.0;
      q_avg += (q - q_avg) / n_avg;
    }
  }
  return n_avg > 0.0 ? q_avg : q;
}

namespace {

int argmax_row(const MatrixXd& q, int s) {
  int best = 0;
  for (int a = 1; a < q.cols(); ++a)
    if (q(s, a) > q(s, best)) best = a;
  return best;
}

VectorXd softmax(const VectorXd& z) {
  const VectorXd shifted = z.array() - z.maxCoeff();
  VectorXd e = shifted.array().exp();
  return e / e.sum();
}

}  // namespace

PolicyFn make_greedy_policy(const Env& env, MatrixXd q) {
  if (!env.spec().action.discrete)
    throw ContractError("make_greedy_policy: env must have discrete actions");
  const Env* e = &env;
  return [e, q = std::move(q)](const VectorXd& s, Rng&) -> Action {
    return argmax_row(q, e->state_index(s));
  };
}

PolicyFn make_eps_greedy(const Env& env, PolicyFn base, double eps) {
  if (eps < 0.0 || eps > 1.0) throw ContractError("make_eps_greedy: eps must be in [0, 1]");
  const envs::ActionSpace space = env.spec().action;
  return [space, base = std::move(base), eps](const VectorXd& s, Rng& rng) -> Action {
    if (rng.uniform01() < eps) {
      if (space.discrete) return rng.uniform_int(space.n);
      VectorXd a(space.dim);
      for (int i = 0; i < space.dim; ++i) a[i] = rng.uniform(space.lo, space.hi);
      return a;
    }
    return base(s, rng);
  };
}

VectorXd exact_policy_value(const TabularModel& m, const std::vector<int>& action_of_state,
                            double gamma, double tol) {
  if (static_cast<int>(action_of_state.size()) != m.n_states)
    throw ContractError("exact_policy_value: one action per state required");
  VectorXd v = VectorXd::Zero(m.n_states);
  for (int sweep = 0; sweep < 1000000; ++sweep) {
    double resid = 0.0;
    for (int s = 0; s < m.n_states; ++s) {
      if (m.terminal[s]) continue;
      const int a = action_of_state[s];
      double masked = 0.0;
      const auto row = m.transition.row(s * m.n_actions + a);
      for (int t = 0; t < m.n_states; ++t)
        if (!m.terminal[t]) masked += row[t] * v[t];
      const double next = m.reward(s, a) + gamma * masked;
      resid = std::max(resid, std::abs(next - v[s]));
      v[s] = next;
    }
    if (resid < tol) return v;
  }
  throw NumericError("exact_policy_value: no convergence");
}

PolicyFn make_pointmass_pd(double kp, double kd) {
  return [kp, kd](const VectorXd& s, Rng&) -> Action {
    if (s.size() != 4) throw ContractError("pointmass PD: state must be 4-dimensional");
    VectorXd a(2);
    a[0] = kp * (1.0 - s[0]) - kd * s[2];
    a[1] = kp * (1.0 - s[1]) - kd * s[3];
    return VectorXd(a.cwiseMax(-1.0).cwiseMin(1.0));
  };
}

std::pair<double, double> tune_pointmass_gains(uint64_t seed) {
  const int pop = 32, elites = 8, iters = 12, episodes = 4;
  Rng rng(derive_seed(seed, "cem", 0));
  VectorXd mean(2), stdev(2);
  mean << 1.0, 1.0;
  stdev << 1.0, 1.0;
  for (int it = 0; it < iters; ++it) {
    std::vector<std::pair<double, VectorXd>> scored;
    for (int i = 0; i < pop; ++i) {
      VectorXd g(2);
      for (int d = 0; d < 2; ++d) g[d] = std::max(0.0, mean[d] + stdev[d] * rng.normal());
      auto env = envs::make_env("pointmass", derive_seed(seed, "cem-eval", it * pop + i));
      const auto res =
          envs::evaluate_policy(*env, make_pointmass_pd(g[0], g[1]), episodes, 0);
      scored.emplace_back(res.mean, g);
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    VectorXd new_mean = VectorXd::Zero(2), new_var = VectorXd::Zero(2);
    for (int i = 0; i < elites; ++i) new_mean += scored[i].second;
    new_mean /= elites;
    for (int i = 0; i < elites; ++i)
      new_var += (scored[i].second - new_mean).array().square().matrix();
    mean = new_mean;
    stdev = (new_var / elites).array().sqrt().max(1e-3);
  }
  return {mean[0], mean[1]};
}

PolicyFn make_reference_policy(const std::string& env_name, uint64_t seed) {
  if (env_name == "pointmass") {
    const auto [kp, kd] = tune_pointmass_gains(seed);
    return make_pointmass_pd(kp, kd);
  }
  auto env = envs::make_env(env_name, seed);
  const TabularModel* m = env->tabular();
  if (m == nullptr)
    throw ContractError("make_reference_policy: env '" + env_name + "' is not tabular");
  const MatrixXd q = value_iteration(*m, env->spec().gamma);
  const int side = m->n_states;
  std::vector<int> greedy(side);
  for (int s = 0; s < side; ++s) greedy[s] = argmax_row(q, s);
  // Capture by value; the policy must not borrow the local env.
  const auto spec_states = side;
  std::shared_ptr<Env> holder = std::move(env);
  return [holder, greedy, spec_states](const VectorXd& s, Rng&) -> Action {
    return greedy[holder->state_index(s)];
  };
}

double bellman_target(double r, double gamma, bool done, double next_value) {
  check_finite(r, "bellman_target reward");
  check_finite(next_value, "bellman_target next value");
  return done ? r : r + gamma * next_value;
}

double expectile_weight(double residual, double expectile) {
  if (expectile <= 0.0 || expectile >= 1.0)
    throw ContractError("expectile_weight: expectile must be in (0, 1)");
  return residual < 0.0 ? 1.0 - expectile : expectile;
}

double awr_weight(double advantage, double beta, double clip) {
  check_finite(advantage, "awr_weight advantage");
  return std::min(std::exp(beta * advantage), clip);
}

void save_policy(const std::string& path, const PolicyArtifact& artifact) {
  if (artifact.kind == "tabular_q") {
    std::map<std::string, std::string> fields;
    fields["env"] = artifact.env_name;
    fields["n_states"] = std::to_string(artifact.q.rows());
    fields["n_actions"] = std::to_string(artifact.q.cols());
    std::vector<double> payload;
    payload.reserve(artifact.q.size());
    for (Eigen::Index s = 0; s < artifact.q.rows(); ++s)
      for (Eigen::Index a = 0; a < artifact.q.cols(); ++a) payload.push_back(artifact.q(s, a));
    nn::save_array_checkpoint(path, "tabular_q", fields, payload);
    return;
  }
  if (artifact.kind == "net_actor") {
    if (!artifact.actor.has_value())
      throw ContractError("save_policy: net_actor artifact without an actor net");
    artifact.actor->save(path, {{"role", "net_actor"},
                                {"env", artifact.env_name},
                                {"act_hi", fmt_double(artifact.act_hi)}});
    return;
  }
  throw ContractError("save_policy: unknown artifact kind '" + artifact.kind + "'");
}

PolicyArtifact load_policy(const std::string& path) {
  const std::string raw = read_file(path);
  const size_t nl = raw.find('\n');
  if (nl == std::string::npos) throw ContractError("load_policy: missing header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("load_policy: bad header in " + path + ": " + e.what());
  }
  const std::string kind = header.value("kind", "");
  PolicyArtifact artifact;
  if (kind == "tabular_q") {
    std::map<std::string, std::string> fields;
    const std::vector<double> payload = nn::load_array_checkpoint(path, "tabular_q", &fields);
    const long S = parse_long(fields.at("n_states"));
    const long A = parse_long(fields.at("n_actions"));
    if (static_cast<long>(payload.size()) != S * A)
      throw ContractError("load_policy: payload does not match table shape in " + path);
    artifact.kind = "tabular_q";
    artifact.env_name = fields.at("env");
    artifact.q = MatrixXd(S, A);
    for (long s = 0; s < S; ++s)
      for (long a = 0; a < A; ++a) artifact.q(s, a) = payload[s * A + a];
    return artifact;
  }
  if (kind == "net") {
    std::map<std::string, std::string> tags;
    Mlp actor = Mlp::load(path, &tags);
    if (tags.count("role") == 0 || tags.at("role") != "net_actor")
      throw ContractError("load_policy: net checkpoint is not an actor: " + path);
    artifact.kind = "net_actor";
    artifact.env_name = tags.at("env");
    artifact.act_hi = parse_double(tags.at("act_hi"));
    artifact.actor.emplace(std::move(actor));
    return artifact;
  }
  throw ContractError("load_policy: unrecognized checkpoint kind '" + kind + "' in " + path);
}

PolicyFn policy_from_artifact(const PolicyArtifact& artifact, const Env& env) {
  if (artifact.env_name != env.spec().name)
    throw ContractError("policy_from_artifact: artifact for env '" + artifact.env_name +
                        "' used with env '" + env.spec().name + "'");
  if (artifact.kind == "tabular_q") return make_greedy_policy(env, artifact.q);
  if (artifact.kind == "net_actor") {
    const Mlp actor = *artifact.actor;
    const double hi = artifact.act_hi;
    return [actor, hi](const VectorXd& s, Rng&) -> Action {
      return VectorXd(hi * actor.forward(s).array().tanh());
    };
  }
  throw ContractError("policy_from_artifact: unknown kind '" + artifact.kind + "'");
}

namespace {

void require_discrete_batch(const Batch& batch) {
  const size_t n = static_cast<size_t>(batch.size());
  if (batch.s_idx.size() != n || batch.a_idx.size() != n || batch.s_next_idx.size() != n)
    throw ContractError("discrete learner: batch must carry state/action index fields");
  if (batch.done.size() != n || batch.r.size() != batch.size())
    throw ContractError("learner: reward/done fields must match the batch size");
}

class TabularCql final : public OfflineLearner {
 public:
  TabularCql(const Env& env, const LearnerParams& p)
      : env_(&env),
        p_(p),
        q_(MatrixXd::Zero(env.tabular()->n_states, env.tabular()->n_actions)) {}

  UpdateStats update(const Batch& batch) override {
    require_discrete_batch(batch);
    const int n = batch.size();
    const double gamma = env_->spec().gamma;
    MatrixXd grad = MatrixXd::Zero(q_.rows(), q_.cols());
    double loss = 0.0, pen = 0.0;
    for (int i = 0; i < n; ++i) {
      const int s = batch.s_idx[i], a = batch.a_idx[i], sn = batch.s_next_idx[i];
      const double target =
          bellman_target(batch.r[i], gamma, batch.done[i] != 0, q_.row(sn).maxCoeff());
      const double diff = q_(s, a) - target;
      loss += 0.5 * diff * diff;
      grad(s, a) += diff;

      const VectorXd scaled = q_.row(s).transpose() / p_.cql_temp;
      const double lse = nn::logsumexp(scaled);
      pen += p_.cql_temp * lse - q_(s, a);
      grad.row(s) += p_.cql_alpha * (scaled.array() - lse).exp().matrix().transpose();
      grad(s, a) -= p_.cql_alpha;
    }
    loss /= n;
    pen /= n;
    if (p_.diag_mode) {
      check_finite(loss, "cql loss");
      if (pen < -1e-9)
        throw NumericError("cql penalty negative: " + std::to_string(pen));
    }
    q_ -= (p_.lr / n) * grad;
    return {loss, pen};
  }

  PolicyFn eval_policy() const override { return make_greedy_policy(*env_, q_); }

  PolicyFn rollout_policy(double explore) const override {
    return make_eps_greedy(*env_, eval_policy(), explore);
  }

  PolicyArtifact artifact() const override {
    return {"tabular_q", env_->spec().name, q_, std::nullopt, 1.0};
  }

 private:
  const Env* env_;
  LearnerParams p_;
  MatrixXd q_;
};

class TabularIql final : public OfflineLearner {
 public:
  TabularIql(const Env& env, const LearnerParams& p)
      : env_(&env),
        p_(p),
        q_(MatrixXd::Zero(env.tabular()->n_states, env.tabular()->n_actions)),
        v_(VectorXd::Zero(env.tabular()->n_states)),
        logits_(MatrixXd::Zero(env.tabular()->n_states, env.tabular()->n_actions)) {}

  UpdateStats update(const Batch& batch) override {
    require_discrete_batch(batch);
    const int n = batch.size();
    const double gamma = env_->spec().gamma;
    MatrixXd gq = MatrixXd::Zero(q_.rows(), q_.cols());
    MatrixXd gl = MatrixXd::Zero(q_.rows(), q_.cols());
    VectorXd gv = VectorXd::Zero(v_.size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const int s = batch.s_idx[i], a = batch.a_idx[i], sn = batch.s_next_idx[i];
      const double u = q_(s, a) - v_[s];
      gv[s] -= 2.0 * expectile_weight(u, p_.iql_expectile) * u;

      const double target = bellman_target(batch.r[i], gamma, batch.done[i] != 0, v_[sn]);
      const double diff = q_(s, a) - target;
      loss += 0.5 * diff * diff;
      gq(s, a) += diff;

      const double w = awr_weight(u, p_.iql_beta);
      gl.row(s) += w * softmax(logits_.row(s).transpose()).transpose();
      gl(s, a) -= w;
    }
    loss /= n;
    if (p_.diag_mode) check_finite(loss, "iql loss");
    q_ -= (p_.lr / n) * gq;
    v_ -= (p_.lr / n) * gv;
    logits_ -= (p_.lr / n) * gl;
    return {loss, 0.0};
  }

  PolicyFn eval_policy() const override { return make_greedy_policy(*env_, logits_); }

  PolicyFn rollout_policy(double explore) const override {
    return make_eps_greedy(*env_, eval_policy(), explore);
  }

  PolicyArtifact artifact() const override {
    return {"tabular_q", env_->spec().name, logits_, std::nullopt, 1.0};
  }

 private:
  const Env* env_;
  LearnerParams p_;
  MatrixXd q_;
  VectorXd v_;
  MatrixXd logits_;
};

std::vector<int> hidden_stack(int hidden, int depth) {
  return std::vector<int>(static_cast<size_t>(depth), hidden);
}

std::vector<int> layer_spec(int in, int hidden, int depth, int out) {
  std::vector<int> sizes{in};
  for (int h : hidden_stack(hidden, depth)) sizes.push_back(h);
  sizes.push_back(out);
  return sizes;
}

MatrixXd hstack(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

void validate_continuous_batch(const Batch& batch, const Env& env) {
  if (batch.a_enc.cols() != env.spec().action.dim || batch.a_enc.rows() != batch.s.rows())
    throw ContractError("continuous learner: encoded action shape mismatch");
  if (batch.done.size() != static_cast<size_t>(batch.size()) || batch.r.size() != batch.size())
    throw ContractError("learner: reward/done fields must match the batch size");
}

class NetIql final : public OfflineLearner {
 public:
  NetIql(const Env& env, const LearnerParams& p, uint64_t seed)
      : env_(&env), p_(p), hi_(env.spec().action.hi) {
    const int sd = env.spec().state_dim, ad = env.spec().action.dim;
    Rng rq(derive_seed(seed, "iql-q", 0)), rv(derive_seed(seed, "iql-v", 0)),
        ra(derive_seed(seed, "iql-actor", 0));
    q_.emplace(Mlp::xavier_init(layer_spec(sd + ad, p.hidden, p.depth, 1),
                                nn::Activation::kTanh, rq));
    v_.emplace(Mlp::xavier_init(layer_spec(sd, p.hidden, p.depth, 1),
                                nn::Activation::kTanh, rv));
    actor_.emplace(Mlp::xavier_init(layer_spec(sd, p.hidden, p.depth, ad),
                                    nn::Activation::kTanh, ra));
    opt_q_.emplace(p.lr);
    opt_v_.emplace(p.lr);
    opt_actor_.emplace(p.lr);
  }

  UpdateStats update(const Batch& batch) override {
    validate_continuous_batch(batch, *env_);
    const int n = batch.size();
    const double gamma = env_->spec().gamma;

    const VectorXd qa = q_->forward_batch(hstack(batch.s, batch.a_enc)).col(0);
    const VectorXd vnext = v_->forward_batch(batch.s_next).col(0);

    Trace v_tr;
    const VectorXd vs = v_->forward_batch(batch.s, &v_tr).col(0);
    MatrixXd dv(n, 1);
    for (int i = 0; i < n; ++i) {
      const double u = qa[i] - vs[i];
      dv(i, 0) = -2.0 * expectile_weight(u, p_.iql_expectile) * u / n;
    }
    opt_v_->update(*v_, v_->backprop(v_tr, dv));

    Trace q_tr;
    const VectorXd qa2 = q_->forward_batch(hstack(batch.s, batch.a_enc), &q_tr).col(0);
    MatrixXd dq(n, 1);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double target = bellman_target(batch.r[i], gamma, batch.done[i] != 0, vnext[i]);
      const double diff = qa2[i] - target;
      loss += 0.5 * diff * diff;
      dq(i, 0) = diff / n;
    }
    loss /= n;
    opt_q_->update(*q_, q_->backprop(q_tr, dq));

    Trace a_tr;
    const MatrixXd raw = actor_->forward_batch(batch.s, &a_tr);
    const MatrixXd squashed = hi_ * raw.array().tanh();
    MatrixXd draw(n, raw.cols());
    for (int i = 0; i < n; ++i) {
      const double w = awr_weight(qa[i] - vs[i], p_.iql_beta);
      for (Eigen::Index j = 0; j < raw.cols(); ++j) {
        const double t = std::tanh(raw(i, j));
        draw(i, j) = w * 2.0 * (squashed(i, j) - batch.a_enc(i, j)) * hi_ * (1.0 - t * t) / n;
      }
    }
    opt_actor_->update(*actor_, actor_->backprop(a_tr, draw));

    if (p_.diag_mode) check_finite(loss, "iql net loss");
    return {loss, 0.0};
  }

  PolicyFn eval_policy() const override {
    const Mlp actor = *actor_;
    const double hi = hi_;
    return [actor, hi](const VectorXd& s, Rng&) -> Action {
      return VectorXd(hi * actor.forward(s).array().tanh());
    };
  }

  PolicyFn rollout_policy(double explore) const override {
    const Mlp actor = *actor_;
    const double hi = hi_, lo = env_->spec().action.lo;
    return [actor, hi, lo, explore](const VectorXd& s, Rng& rng) -> Action {
      VectorXd a = hi * actor.forward(s).array().tanh();
      for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += explore * rng.normal();
      return VectorXd(a.cwiseMax(lo).cwiseMin(hi));
    };
  }

  PolicyArtifact artifact() const override {
    return {"net_actor", env_->spec().name, MatrixXd(), *actor_, hi_};
  }

 private:
  const Env* env_;
  LearnerParams p_;
  double hi_;
  std::optional<Mlp> q_, v_, actor_;
  std::optional<Adam> opt_q_, opt_v_, opt_actor_;
};

class NetCql final : public OfflineLearner {
 public:
  static constexpr int kPenaltySamples = 4;  // uniform draws per state

  NetCql(const Env& env, const LearnerParams& p, uint64_t seed)
      : env_(&env), p_(p), hi_(env.spec().action.hi),
        rng_(derive_seed(seed, "cql-sample", 0)) {
    const int sd = env.spec().state_dim, ad = env.spec().action.dim;
    Rng rq(derive_seed(seed, "cql-q", 0)), ra(derive_seed(seed, "cql-actor", 0));
    q_.emplace(Mlp::xavier_init(layer_spec(sd + ad, p.hidden, p.depth, 1),
                                nn::Activation::kTanh, rq));
    actor_.emplace(Mlp::xavier_init(layer_spec(sd, p.hidden, p.depth, ad),
                                    nn::Activation::kTanh, ra));
    opt_q_.emplace(p.lr);
    opt_actor_.emplace(p.lr);
  }

  UpdateStats update(const Batch& batch) override {
    validate_continuous_batch(batch, *env_);
    const int n = batch.size();
    const int ad = env_->spec().action.dim;
    const double gamma = env_->spec().gamma;

    const MatrixXd a_next = hi_ * actor_->forward_batch(batch.s_next).array().tanh();
    const VectorXd q_next = q_->forward_batch(hstack(batch.s_next, a_next)).col(0);
    const MatrixXd a_pi = hi_ * actor_->forward_batch(batch.s).array().tanh();

    // One stacked forward: rows [0,n) hold the data actions, then
    // kPenaltySamples uniform action blocks, then the policy actions.
    const int blocks = 2 + kPenaltySamples;
    MatrixXd stacked(n * blocks, batch.s.cols() + ad);
    stacked.topRows(n) = hstack(batch.s, batch.a_enc);
    for (int m = 0; m < kPenaltySamples; ++m) {
      MatrixXd u(n, ad);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < ad; ++j)
          u(i, j) = rng_.uniform(env_->spec().action.lo, env_->spec().action.hi);
      stacked.middleRows((1 + m) * n, n) = hstack(batch.s, u);
    }
    stacked.bottomRows(n) = hstack(batch.s, a_pi);

    Trace q_tr;
    const VectorXd vals = q_->forward_batch(stacked, &q_tr).col(0);
    MatrixXd dq = MatrixXd::Zero(n * blocks, 1);
    double loss = 0.0, pen = 0.0;
    for (int i = 0; i < n; ++i) {
      const double target = bellman_target(batch.r[i], gamma, batch.done[i] != 0, q_next[i]);
      const double diff = vals[i] - target;
      loss += 0.5 * diff * diff;
      dq(i, 0) += diff / n;

      VectorXd group(blocks);
      for (int b = 0; b < blocks; ++b) group[b] = vals[b * n + i];
      const VectorXd scaled = group / p_.cql_temp;
      const double lse = nn::logsumexp(scaled);
      pen += p_.cql_temp * lse - vals[i];
      const VectorXd w = (scaled.array() - lse).exp();
      for (int b = 0; b < blocks; ++b) dq(b * n + i, 0) += p_.cql_alpha * w[b] / n;
      dq(i, 0) -= p_.cql_alpha / n;
    }
    loss /= n;
    pen /= n;
    if (p_.diag_mode) {
      check_finite(loss, "cql net loss");
      if (pen < -1e-9) throw NumericError("cql net penalty negative: " + std::to_string(pen));
    }
    opt_q_->update(*q_, q_->backprop(q_tr, dq));

    // Deterministic policy improvement through dQ/da at the policy action.
    Trace pi_tr;
    const VectorXd q_pi = q_->forward_batch(hstack(batch.s, a_pi), &pi_tr).col(0);
    (void)q_pi;
    MatrixXd d_in;
    MatrixXd ones = MatrixXd::Constant(n, 1, -1.0 / n);
    q_->backprop(pi_tr, ones, &d_in);
    const MatrixXd dq_da = d_in.rightCols(ad);

    Trace a_tr;
    const MatrixXd raw = actor_->forward_batch(batch.s, &a_tr);
    MatrixXd draw(n, ad);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < ad; ++j) {
        const double t = std::tanh(raw(i, j));
        draw(i, j) = dq_da(i, j) * hi_ * (1.0 - t * t);
      }
    opt_actor_->update(*actor_, actor_->backprop(a_tr, draw));
    return {loss, pen};
  }

  PolicyFn eval_policy() const override {
    const Mlp actor = *actor_;
    const double hi = hi_;
    return [actor, hi](const VectorXd& s, Rng&) -> Action {
      return VectorXd(hi * actor.forward(s).array().tanh());
    };
  }

  PolicyFn rollout_policy(double explore) const override {
    const Mlp actor = *actor_;
    const double hi = hi_, lo = env_->spec().action.lo;
    return [actor, hi, lo, explore](const VectorXd& s, Rng& rng) -> Action {
      VectorXd a = hi * actor.forward(s).array().tanh();
      for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += explore * rng.normal();
      return VectorXd(a.cwiseMax(lo).cwiseMin(hi));
    };
  }

  PolicyArtifact artifact() const override {
    return {"net_actor", env_->spec().name, MatrixXd(), *actor_, hi_};
  }

 private:
  const Env* env_;
  LearnerParams p_;
  double hi_;
  Rng rng_;
  std::optional<Mlp> q_, actor_;
  std::optional<Adam> opt_q_, opt_actor_;
};

}  // namespace

std::unique_ptr<OfflineLearner> make_learner(const Env& env, const LearnerParams& params,
                                             uint64_t seed) {
  if (params.algo != "cql" && params.algo != "iql")
    throw ContractError("make_learner: algo must be cql or iql, got '" + params.algo + "'");
  if (env.spec().action.discrete) {
    if (env.tabular() == nullptr)
      throw ContractError("make_learner: discrete env without a tabular model");
    if (params.algo == "cql") return std::make_unique<TabularCql>(env, params);
    return std::make_unique<TabularIql>(env, params);
  }
  if (params.algo == "cql") return std::make_unique<NetCql>(env, params, seed);
  return std::make_unique<NetIql>(env, params, seed);
}

}  // namespace preflab::policy
