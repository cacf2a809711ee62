#include <cmath>
#include <cstdio>
#include <deque>
#include <set>

#include "doctest.h"
#include "preflab/envs.hpp"

using namespace preflab;
using namespace preflab::envs;

namespace {

EnvSpec tiny_spec(const std::string& name, int n_states, int n_actions, int horizon) {
  EnvSpec s;
  s.name = name;
  s.state_dim = 1;
  s.action = {true, n_actions, n_actions, 0.0, 0.0};
  s.horizon = horizon;
  s.gamma = 0.99;
  s.r_max = 1.0;
  (void)n_states;
  return s;
}

}  // namespace

TEST_CASE("factory produces all three envs and rejects unknown names") {
  for (const auto& name : env_names()) {
    auto env = make_env(name, 1);
    CHECK(env->spec().name == name);
    const VectorXd s = env->reset();
    CHECK(s.size() == env->spec().state_dim);
  }
  CHECK_THROWS_AS(make_env("mountaincar", 1), ContractError);
}

TEST_CASE("chainwalk rewards are a deterministic function of commanded (s, a)") {
  auto env = make_env("chainwalk", 3);
  CHECK(env->true_reward(env->encode_state_index(10), Action{1}) == 1.0);
  CHECK(env->true_reward(env->encode_state_index(10), Action{0}) == -0.1);
  CHECK(env->true_reward(env->encode_state_index(5), Action{1}) == -0.1);
  CHECK(env->true_reward(env->encode_state_index(0), Action{0}) == -0.1);

  Rng r(17);
  VectorXd s = env->reset();
  for (int i = 0; i < 2000; ++i) {
    const int a = r.uniform_int(2);
    const double expected = env->true_reward(s, Action{a});
    const StepResult res = env->step(Action{a});
    CHECK(res.reward == expected);
    s = res.done ? env->reset() : res.state;
  }
}

TEST_CASE("chainwalk starts at state 2 and terminates only at state 11") {
  auto env = make_env("chainwalk", 5);
  for (int trial = 0; trial < 20; ++trial) {
    VectorXd s = env->reset();
    CHECK(env->state_index(s) == 2);
    for (int t = 0; t < 200; ++t) {
      const StepResult res = env->step(Action{1});
      if (res.done) {
        CHECK(env->state_index(res.state) == 11);
        break;
      }
      s = res.state;
    }
  }
}

TEST_CASE("slip rates materialize at the configured frequency") {
  SUBCASE("chainwalk 0.1") {
    auto env = make_env("chainwalk", 7);
    Rng r(1);
    long steps = 0;
    env->reset();
    while (steps < 100000) {
      const StepResult res = env->step(Action{r.uniform_int(2)});
      ++steps;
      if (res.done) env->reset();
    }
    CHECK(std::abs(env->slip_count() / 100000.0 - 0.1) < 0.005);
  }
  SUBCASE("gridnav 0.05") {
    auto env = make_env("gridnav", 7);
    Rng r(2);
    long steps = 0;
    env->reset();
    while (steps < 100000) {
      const StepResult res = env->step(Action{r.uniform_int(4)});
      ++steps;
      if (res.done) env->reset();
    }
    CHECK(std::abs(env->slip_count() / 100000.0 - 0.05) < 0.005);
  }
}

TEST_CASE("discrete transition matrices are row-stochastic with hand-checked rows") {
  for (const char* name : {"chainwalk", "gridnav"}) {
    auto env = make_env(name, 1);
    const TabularModel* m = env->tabular();
    REQUIRE(m != nullptr);
    for (Eigen::Index row = 0; row < m->transition.rows(); ++row) {
      CHECK(m->transition.row(row).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(m->transition.row(row).minCoeff() >= 0.0);
    }
  }

  auto chain = make_env("chainwalk", 1);
  const TabularModel* cm = chain->tabular();
  CHECK(cm->transition(2 * 2 + 1, 3) == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(cm->transition(2 * 2 + 1, 1) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(cm->transition(0 * 2 + 0, 0) == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(cm->transition(0 * 2 + 0, 1) == doctest::Approx(0.1).epsilon(1e-14));

  auto grid = make_env("gridnav", 1);
  const TabularModel* gm = grid->tabular();
  // From (0,0), commanding up: up and left are blocked (edge), right and
  // down are open, slips go to each other direction with probability 0.05/3.
  const int s00_up = (0 * 8 + 0) * 4 + 0;
  CHECK(gm->transition(s00_up, 0) == doctest::Approx(0.95 + 0.05 / 3.0).epsilon(1e-12));
  CHECK(gm->transition(s00_up, 1) == doctest::Approx(0.05 / 3.0).epsilon(1e-12));
  CHECK(gm->transition(s00_up, 8) == doctest::Approx(0.05 / 3.0).epsilon(1e-12));
}

TEST_CASE("chainwalk first-step distribution matches the matrix empirically") {
  auto env = make_env("chainwalk", 11);
  int to3 = 0, to1 = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    env->reset();
    const StepResult res = env->step(Action{1});
    const int next = env->state_index(res.state);
    if (next == 3) ++to3;
    if (next == 1) ++to1;
  }
  CHECK(to3 + to1 == n);
  CHECK(std::abs(to3 / static_cast<double>(n) - 0.9) < 0.02);
}

TEST_CASE("gridnav walls block movement and every start cell can reach the goal") {
  auto env = make_env("gridnav", 9);
  const TabularModel* m = env->tabular();

  // Blocked commands cost -0.2 wherever the intended target is wall/edge.
  CHECK(env->true_reward(env->encode_state_index(0), Action{0}) == -0.2);
  CHECK(env->true_reward(env->encode_state_index(0), Action{3}) == -0.2);
  // (1,1) commanding down hits the wall at (2,1).
  CHECK(env->true_reward(env->encode_state_index(1 * 8 + 1), Action{2}) == -0.2);
  // (7,6) commanding right reaches the goal.
  CHECK(env->true_reward(env->encode_state_index(7 * 8 + 6), Action{1}) == 1.0);
  CHECK(env->true_reward(env->encode_state_index(4 * 8 + 4), Action{1}) == 0.0);

  // Reverse BFS from the goal over nonzero transition entries.
  std::vector<uint8_t> reaches(64, 0);
  reaches[63] = 1;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int s = 0; s < 64; ++s) {
      if (reaches[s]) continue;
      for (int a = 0; a < 4 && !reaches[s]; ++a)
        for (int t = 0; t < 64; ++t)
          if (m->transition(s * 4 + a, t) > 0.0 && reaches[t] && t != s) {
            reaches[s] = 1;
            changed = true;
            break;
          }
    }
  }
  int unreachable_starts = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int s = env->state_index(env->reset());
    CHECK(s != 63);
    if (!reaches[s]) ++unreachable_starts;
  }
  CHECK(unreachable_starts == 0);
}

TEST_CASE("gridnav start distribution avoids walls and covers many cells") {
  auto env = make_env("gridnav", 13);
  std::set<int> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(env->state_index(env->reset()));
  CHECK(seen.size() > 40);
}

TEST_CASE("state encode/decode round-trips, including slightly off-grid points") {
  for (const char* name : {"chainwalk", "gridnav"}) {
    auto env = make_env(name, 1);
    const int n = env->tabular()->n_states;
    for (int s = 0; s < n; ++s) {
      VectorXd enc = env->encode_state_index(s);
      CHECK(env->state_index(enc) == s);
      enc.array() += 0.02;
      CHECK(env->state_index(enc) == s);
    }
  }
}

TEST_CASE("action encode/decode: one-hot argmax and box clamping") {
  auto grid = make_env("gridnav", 1);
  for (int a = 0; a < 4; ++a) {
    const VectorXd enc = grid->encode_action(Action{a});
    CHECK(enc.sum() == 1.0);
    CHECK(std::get<int>(grid->decode_action(enc)) == a);
  }
  auto pm = make_env("pointmass", 1);
  VectorXd big(2);
  big << 3.0, -7.0;
  const VectorXd dec = std::get<VectorXd>(pm->decode_action(big));
  CHECK(dec[0] == 1.0);
  CHECK(dec[1] == -1.0);
}

TEST_CASE("pointmass integrates, clamps, and prices actions as documented") {
  auto env = make_env("pointmass", 21);
  VectorXd s = env->reset();
  CHECK(s.size() == 4);
  CHECK(s.head(2).minCoeff() >= -1.2);
  CHECK(s.head(2).maxCoeff() <= -0.8);
  CHECK(s.tail(2).cwiseAbs().maxCoeff() == 0.0);

  VectorXd a(2);
  a << 1.0, 0.5;
  const double expected_r =
      -(s.head(2) - (VectorXd(2) << 1.0, 1.0).finished()).norm() - 0.05 * a.squaredNorm();
  const StepResult res = env->step(Action{a});
  CHECK(res.reward == doctest::Approx(expected_r).epsilon(1e-14));
  CHECK(res.state[2] == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(res.state[3] == doctest::Approx(0.05).epsilon(1e-14));
  CHECK(res.state[0] == doctest::Approx(s[0] + 0.01).epsilon(1e-12));
  CHECK(res.state[1] == doctest::Approx(s[1] + 0.005).epsilon(1e-12));

  // Oversized actions behave exactly like their clamped versions.
  auto env_a = make_env("pointmass", 33);
  auto env_b = make_env("pointmass", 33);
  env_a->reset();
  env_b->reset();
  VectorXd wild(2), clamped(2);
  wild << 5.0, -9.0;
  clamped << 1.0, -1.0;
  const StepResult ra = env_a->step(Action{wild});
  const StepResult rb = env_b->step(Action{clamped});
  CHECK(ra.state == rb.state);
  CHECK(ra.reward == rb.reward);

  // State bounds hold under sustained extreme inputs.
  auto env_c = make_env("pointmass", 5);
  env_c->reset();
  VectorXd push(2);
  push << 1.0, 1.0;
  for (int t = 0; t < env_c->spec().horizon; ++t) {
    const StepResult r = env_c->step(Action{push});
    CHECK(r.state.head(2).cwiseAbs().maxCoeff() <= 1.5);
    CHECK(r.state.tail(2).cwiseAbs().maxCoeff() <= 1.0);
    if (r.done) break;
  }
}

TEST_CASE("stepping before reset or after done is a contract violation") {
  auto env = make_env("chainwalk", 3);
  CHECK_THROWS_AS(env->step(Action{1}), ContractError);

  bool finished = false;
  for (int episode = 0; episode < 50 && !finished; ++episode) {
    env->reset();
    for (int t = 0; t < 100; ++t) {
      if (env->step(Action{1}).done) {
        finished = true;
        break;
      }
    }
  }
  REQUIRE(finished);
  CHECK_THROWS_AS(env->step(Action{1}), ContractError);
}

TEST_CASE("invalid actions are rejected with context") {
  auto grid = make_env("gridnav", 1);
  grid->reset();
  CHECK_THROWS_AS(grid->step(Action{4}), ContractError);
  CHECK_THROWS_AS(grid->step(Action{-1}), ContractError);
  CHECK_THROWS_AS(grid->step(Action{VectorXd::Zero(4)}), ContractError);

  auto pm = make_env("pointmass", 1);
  pm->reset();
  CHECK_THROWS_AS(pm->step(Action{1}), ContractError);
  CHECK_THROWS_AS(pm->step(Action{VectorXd::Zero(3)}), ContractError);
}

TEST_CASE("TabularEnv sampling matches its transition rows empirically") {
  TabularModel m;
  m.n_states = 3;
  m.n_actions = 2;
  m.transition = MatrixXd::Zero(6, 3);
  m.transition.row(0) << 0.5, 0.3, 0.2;
  m.transition.row(1) << 0.0, 1.0, 0.0;
  m.transition.row(2) << 0.1, 0.1, 0.8;
  m.transition.row(3) << 0.25, 0.5, 0.25;
  m.transition.row(4) << 1.0, 0.0, 0.0;
  m.transition.row(5) << 0.0, 0.0, 1.0;
  m.reward = MatrixXd::Zero(3, 2);
  m.terminal.assign(3, 0);
  VectorXd start = VectorXd::Zero(3);
  start[0] = 1.0;

  TabularEnv env(tiny_spec("tiny", 3, 2, 1), m, start, 31);
  std::vector<int> counts(3, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    env.reset();
    ++counts[env.state_index(env.step(Action{0}).state)];
  }
  CHECK(std::abs(counts[0] / static_cast<double>(n) - 0.5) < 0.02);
  CHECK(std::abs(counts[1] / static_cast<double>(n) - 0.3) < 0.02);
  CHECK(std::abs(counts[2] / static_cast<double>(n) - 0.2) < 0.02);
}

TEST_CASE("discounted return matches the geometric closed form") {
  TabularModel m;
  m.n_states = 1;
  m.n_actions = 1;
  m.transition = MatrixXd::Ones(1, 1);
  m.reward = MatrixXd::Ones(1, 1);
  m.terminal.assign(1, 0);
  TabularEnv env(tiny_spec("loop", 1, 1, 5), m, VectorXd::Ones(1), 1);

  const PolicyFn pi = [](const VectorXd&, Rng&) -> Action { return 0; };
  const EvalResult res = evaluate_policy(env, pi, 10, 99);
  double expected = 0.0;
  for (int t = 0; t < 5; ++t) expected += std::pow(0.99, t);
  CHECK(res.mean == doctest::Approx(expected).epsilon(1e-12));
  CHECK(res.stderr_mean == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("normalized_score maps anchors to 0 and 100") {
  CHECK(normalized_score(5.0, 5.0, 25.0) == doctest::Approx(0.0));
  CHECK(normalized_score(25.0, 5.0, 25.0) == doctest::Approx(100.0));
  CHECK(normalized_score(15.0, 5.0, 25.0) == doctest::Approx(50.0));
  CHECK(normalized_score(0.0, 5.0, 25.0) < 0.0);
  CHECK_THROWS_AS(normalized_score(1.0, 2.0, 2.0), ContractError);
}

TEST_CASE("registry JSON round-trips anchors exactly") {
  Registry reg;
  reg.anchors["chainwalk"] = {-1.2345678901234567, 3.9999999999999996, 500, 42};
  reg.anchors["pointmass"] = {-55.5, -12.25, 500, 43};
  const std::string path = "tmp_registry_test.json";
  save_registry(path, reg);
  const Registry back = load_registry(path);
  CHECK(back.anchors.at("chainwalk").j_random == reg.anchors.at("chainwalk").j_random);
  CHECK(back.anchors.at("chainwalk").j_expert == reg.anchors.at("chainwalk").j_expert);
  CHECK(back.anchors.at("pointmass").j_random == reg.anchors.at("pointmass").j_random);
  CHECK(back.anchors.at("chainwalk").episodes == 500);
  CHECK_THROWS_AS(require_anchors(back, "gridnav"), ContractError);
  CHECK(require_anchors(back, "chainwalk").seed == 42);
  std::remove(path.c_str());
}

TEST_CASE("uniform policy respects the action space") {
  auto pm = make_env("pointmass", 3);
  const PolicyFn pi = make_uniform_policy(*pm);
  Rng r(4);
  for (int i = 0; i < 200; ++i) {
    const VectorXd a = std::get<VectorXd>(pi(VectorXd::Zero(4), r));
    CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
  }
  auto grid = make_env("gridnav", 3);
  const PolicyFn pig = make_uniform_policy(*grid);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 40000; ++i) ++counts[std::get<int>(pig(VectorXd::Zero(2), r))];
  for (int a = 0; a < 4; ++a)
    CHECK(std::abs(counts[a] / 40000.0 - 0.25) < 0.02);
}
