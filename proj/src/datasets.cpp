#include "preflab/datasets.hpp"

#include <cmath>

#include "json.hpp"
#include "preflab/losses.hpp"
#include "preflab/policy.hpp"

namespace preflab::data {

using nlohmann::json;

double Dataset::mean_true_reward() const {
  if (records.empty()) throw ContractError("mean_true_reward: empty dataset");
  double sum = 0.0;
  for (const auto& rec : records) sum += rec.r_true;
  return sum / static_cast<double>(records.size());
}

Dataset collect_offline(Env& env, const PolicyFn& policy, int size, uint64_t policy_seed,
                        const std::string& behavior_tag) {
  if (size <= 0) throw ContractError("collect_offline: size must be positive");
  Dataset d;
  d.env_name = env.spec().name;
  d.behavior = behavior_tag;
  d.seed = policy_seed;
  d.records.reserve(size);
  Rng policy_rng(policy_seed);
  VectorXd s = env.reset();
  int t = 0;
  while (d.size() < size) {
    const Action a = policy(s, policy_rng);
    const envs::StepResult res = env.step(a);
    d.records.push_back({s, a, res.reward, res.state, res.done, t});
    ++t;
    if (res.done || t >= env.spec().horizon) {
      s = env.reset();
      t = 0;
    } else {
      s = res.state;
    }
  }
  return d;
}

PolicyFn make_behavior_policy(const Env& env, const std::string& behavior,
                              uint64_t master_seed) {
  if (behavior == "random") return envs::make_uniform_policy(env);
  if (behavior == "medium") {
    const PolicyFn reference = policy::make_reference_policy(
        env.spec().name, derive_seed(master_seed, "reference", 0));
    return policy::make_eps_greedy(env, reference, 0.3);
  }
  if (behavior == "expert_mix")
    throw ContractError(
        "make_behavior_policy: expert_mix mixes controllers per episode and "
        "has no stationary policy form");
  throw ContractError("make_behavior_policy: unknown behavior '" + behavior +
                      "', expected random, medium, or expert_mix");
}

Dataset build_offline_dataset(const std::string& env_name, const std::string& behavior,
                              int size, uint64_t master_seed) {
  if (behavior != "random" && behavior != "medium" && behavior != "expert_mix")
    throw ContractError("build_offline_dataset: unknown behavior '" + behavior +
                        "', expected random, medium, or expert_mix");
  auto env = envs::make_env(env_name, derive_seed(master_seed, "collect-env", 0));
  if (behavior == "random" || behavior == "medium") {
    Dataset d = collect_offline(*env, make_behavior_policy(*env, behavior, master_seed),
                                size, derive_seed(master_seed, "collect-policy", 0),
                                behavior);
    d.seed = master_seed;
    return d;
  }

  const PolicyFn random = envs::make_uniform_policy(*env);
  const PolicyFn reference =
      policy::make_reference_policy(env_name, derive_seed(master_seed, "reference", 0));

  // expert_mix: a fair coin at every episode start picks the whole
  // episode's controller.
  Dataset d;
  d.env_name = env_name;
  d.behavior = behavior;
  d.seed = master_seed;
  d.records.reserve(size);
  Rng policy_rng(derive_seed(master_seed, "collect-policy", 0));
  bool use_expert = policy_rng.uniform01() < 0.5;
  VectorXd s = env->reset();
  int t = 0;
  while (d.size() < size) {
    const Action a = use_expert ? reference(s, policy_rng) : random(s, policy_rng);
    const envs::StepResult res = env->step(a);
    d.records.push_back({s, a, res.reward, res.state, res.done, t});
    ++t;
    if (res.done || t >= env->spec().horizon) {
      s = env->reset();
      t = 0;
      use_expert = policy_rng.uniform01() < 0.5;
    } else {
      s = res.state;
    }
  }
  return d;
}

namespace {

std::vector<int> episode_ids(const Dataset& d) {
  std::vector<int> ep(d.records.size());
  int cur = -1;
  for (size_t i = 0; i < d.records.size(); ++i) {
    if (d.records[i].t == 0) ++cur;
    ep[i] = cur;
  }
  return ep;
}

}  // namespace

std::vector<int> valid_window_starts(const Dataset& d, int L) {
  if (L <= 0) throw ContractError("valid_window_starts: L must be positive");
  const std::vector<int> ep = episode_ids(d);
  std::vector<int> starts;
  for (int i = 0; i + L <= d.size(); ++i)
    if (ep[i] == ep[i + L - 1]) starts.push_back(i);
  return starts;
}

int count_disjoint_windows(const Dataset& d, int L) {
  const std::vector<int> ep = episode_ids(d);
  int count = 0;
  int i = 0;
  while (i + L <= d.size()) {
    if (ep[i] == ep[i + L - 1]) {
      ++count;
      i += L;
    } else {
      ++i;
    }
  }
  return count;
}

Segment make_segment(const Env& env, const Dataset& d, int start, int L) {
  if (start < 0 || start + L > d.size())
    throw ContractError("make_segment: window [" + std::to_string(start) + ", " +
                        std::to_string(start + L) + ") outside the dataset");
  Segment seg;
  seg.states.resize(L, env.spec().state_dim);
  seg.actions.resize(L, env.spec().action.dim);
  seg.true_return = 0.0;
  seg.origin_row = start;
  for (int k = 0; k < L; ++k) {
    const TransitionRecord& rec = d.records[start + k];
    if (k > 0 && rec.t != d.records[start + k - 1].t + 1)
      throw ContractError("make_segment: window crosses an episode boundary at row " +
                          std::to_string(start + k));
    seg.states.row(k) = rec.s.transpose();
    seg.actions.row(k) = env.encode_action(rec.a).transpose();
    seg.true_return += rec.r_true;
  }
  return seg;
}

std::vector<PreferencePair> sample_segment_pairs(const Env& env, const Dataset& d, int L,
                                                 int n_pairs, uint64_t seed) {
  if (n_pairs <= 0) throw ContractError("sample_segment_pairs: n_pairs must be positive");
  const std::vector<int> starts = valid_window_starts(d, L);
  if (starts.empty()) {
    int longest = 0, cur = 0;
    for (const auto& rec : d.records) {
      cur = rec.t + 1;
      longest = std::max(longest, cur);
    }
    throw ContractError("sample_segment_pairs: no episode admits a length-" +
                        std::to_string(L) + " window (longest episode: " +
                        std::to_string(longest) + " steps)");
  }
  Rng rng(seed);
  std::vector<PreferencePair> pairs;
  pairs.reserve(n_pairs);
  const int n_starts = static_cast<int>(starts.size());
  for (int i = 0; i < n_pairs; ++i) {
    PreferencePair p;
    p.seg0 = make_segment(env, d, starts[rng.uniform_int(n_starts)], L);
    p.seg1 = make_segment(env, d, starts[rng.uniform_int(n_starts)], L);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

int label_pair(const PreferencePair& pair, const std::string& labeler, double beta,
               Rng& rng) {
  const double r0 = pair.seg0.true_return, r1 = pair.seg1.true_return;
  check_finite(r0, "label_pair seg0 return");
  check_finite(r1, "label_pair seg1 return");
  if (labeler == "ground_truth") {
    if (r1 > r0) return 1;
    if (r0 > r1) return 0;
    return rng.uniform01() < 0.5 ? 1 : 0;
  }
  if (labeler == "noisy_bt") {
    if (beta < 0.0) throw ContractError("label_pair: noisy_bt beta must be nonnegative");
    return rng.uniform01() < nn::sigmoid(beta * (r1 - r0)) ? 1 : 0;
  }
  throw ContractError("label_pair: unknown labeler '" + labeler +
                      "', expected ground_truth or noisy_bt");
}

void label_pairs(std::vector<PreferencePair>& pairs, const std::string& labeler, double beta,
                 Rng& rng) {
  for (auto& p : pairs) p.y = label_pair(p, labeler, beta, rng);
}

std::string sidecar_path(const std::string& path) { return path + ".sha256"; }

namespace {

std::string basename_of(const std::string& path) {
  const size_t pos = path.find_last_of('/');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

void write_with_sidecar(const std::string& path, const std::string& contents) {
  write_file(path, contents);
  write_file(sidecar_path(path), sha256_hex(contents) + "  " + basename_of(path) + "\n");
}

std::string read_verified(const std::string& path) {
  const std::string contents = read_file(path);
  std::string sidecar;
  try {
    sidecar = read_file(sidecar_path(path));
  } catch (const ContractError&) {
    throw ContractError("checksum sidecar missing for " + path);
  }
  const std::string expected = sidecar.substr(0, sidecar.find_first_of(" \n"));
  const std::string actual = sha256_hex(contents);
  if (expected != actual)
    throw ContractError("checksum mismatch for " + path + ": sidecar has " + expected +
                        ", file hashes to " + actual);
  return contents;
}

json vec_to_json(const VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

VectorXd vec_from_json(const json& arr) {
  VectorXd v(arr.size());
  for (size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
  return v;
}

json action_to_json(const Action& a) {
  if (const int* k = std::get_if<int>(&a)) return *k;
  return vec_to_json(std::get<VectorXd>(a));
}

Action action_from_json(const json& j) {
  if (j.is_number_integer()) return j.get<int>();
  return Action{vec_from_json(j)};
}

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec_to_json(m.row(r)));
  return rows;
}

MatrixXd matrix_from_json(const json& rows) {
  if (rows.empty()) return MatrixXd(0, 0);
  MatrixXd m(rows.size(), rows[0].size());
  for (size_t r = 0; r < rows.size(); ++r) m.row(r) = vec_from_json(rows[r]).transpose();
  return m;
}

json segment_to_json(const Segment& seg) {
  return {{"s", matrix_to_json(seg.states)},
          {"a", matrix_to_json(seg.actions)},
          {"ret", seg.true_return},
          {"row", seg.origin_row}};
}

Segment segment_from_json(const json& j) {
  Segment seg;
  seg.states = matrix_from_json(j.at("s"));
  seg.actions = matrix_from_json(j.at("a"));
  seg.true_return = j.at("ret").get<double>();
  seg.origin_row = j.at("row").get<int>();
  return seg;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& d) {
  std::string out;
  json header = {{"format", "preflab.dataset"},
                 {"version", 1},
                 {"env", d.env_name},
                 {"behavior", d.behavior},
                 {"seed", d.seed},
                 {"count", d.records.size()}};
  out += header.dump();
  out += '\n';
  for (const auto& rec : d.records) {
    json line = {{"t", rec.t},
                 {"s", vec_to_json(rec.s)},
                 {"a", action_to_json(rec.a)},
                 {"r", rec.r_true},
                 {"sn", vec_to_json(rec.s_next)},
                 {"done", rec.done}};
    out += line.dump();
    out += '\n';
  }
  write_with_sidecar(path, out);
}

Dataset load_dataset(const std::string& path) {
  const std::string contents = read_verified(path);
  Dataset d;
  size_t pos = 0;
  bool saw_header = false;
  size_t expected = 0;
  while (pos < contents.size()) {
    size_t nl = contents.find('\n', pos);
    if (nl == std::string::npos) nl = contents.size();
    const std::string line = contents.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ContractError("load_dataset: bad JSONL line in " + path + ": " + e.what());
    }
    if (!saw_header) {
      if (j.value("format", "") != "preflab.dataset")
        throw ContractError("load_dataset: not a dataset file: " + path);
      d.env_name = j.at("env").get<std::string>();
      d.behavior = j.at("behavior").get<std::string>();
      d.seed = j.at("seed").get<uint64_t>();
      expected = j.at("count").get<size_t>();
      saw_header = true;
      continue;
    }
    TransitionRecord rec;
    rec.t = j.at("t").get<int>();
    rec.s = vec_from_json(j.at("s"));
    rec.a = action_from_json(j.at("a"));
    rec.r_true = j.at("r").get<double>();
    rec.s_next = vec_from_json(j.at("sn"));
    rec.done = j.at("done").get<bool>();
    d.records.push_back(std::move(rec));
  }
  if (!saw_header) throw ContractError("load_dataset: empty file: " + path);
  if (d.records.size() != expected)
    throw ContractError("load_dataset: header count " + std::to_string(expected) +
                        " does not match " + std::to_string(d.records.size()) + " records");
  return d;
}

void save_pairs(const std::string& path, const std::vector<PreferencePair>& pairs) {
  std::string out;
  json header = {{"format", "preflab.pairs"}, {"version", 1}, {"count", pairs.size()}};
  out += header.dump();
  out += '\n';
  for (const auto& p : pairs) {
    json line = {{"y", p.y},
                 {"seg0", segment_to_json(p.seg0)},
                 {"seg1", segment_to_json(p.seg1)}};
    out += line.dump();
    out += '\n';
  }
  write_with_sidecar(path, out);
}

std::vector<PreferencePair> load_pairs(const std::string& path) {
  const std::string contents = read_verified(path);
  std::vector<PreferencePair> pairs;
  size_t pos = 0;
  bool saw_header = false;
  size_t expected = 0;
  while (pos < contents.size()) {
    size_t nl = contents.find('\n', pos);
    if (nl == std::string::npos) nl = contents.size();
    const std::string line = contents.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ContractError("load_pairs: bad JSONL line in " + path + ": " + e.what());
    }
    if (!saw_header) {
      if (j.value("format", "") != "preflab.pairs")
        throw ContractError("load_pairs: not a preference-pair file: " + path);
      expected = j.at("count").get<size_t>();
      saw_header = true;
      continue;
    }
    PreferencePair p;
    p.y = j.at("y").get<int>();
    p.seg0 = segment_from_json(j.at("seg0"));
    p.seg1 = segment_from_json(j.at("seg1"));
    pairs.push_back(std::move(p));
  }
  if (!saw_header) throw ContractError("load_pairs: empty file: " + path);
  if (pairs.size() != expected)
    throw ContractError("load_pairs: header count mismatch in " + path);
  return pairs;
}

}  // namespace preflab::data
