// Offline data plumbing: behavior-policy collection, fixed-length segment
// windows that never cross episode boundaries, preference pair sampling and
// labeling, and JSONL persistence with checksum sidecars.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "preflab/envs.hpp"

namespace preflab::data {

using envs::Action;
using envs::Env;
using envs::PolicyFn;

struct TransitionRecord {
  VectorXd s;
  Action a;
  double r_true = 0.0;
  VectorXd s_next;
  bool done = false;
  int t = 0;  // step index within its episode; 0 starts a new episode
};

struct Dataset {
  std::string env_name;
  std::string behavior;
  uint64_t seed = 0;
  std::vector<TransitionRecord> records;

  int size() const { return static_cast<int>(records.size()); }
  double mean_true_reward() const;
};

// Runs `policy` until exactly `size` transitions exist, resetting on done
// or at the env horizon. The final episode may be cut mid-way.
Dataset collect_offline(Env& env, const PolicyFn& policy, int size, uint64_t policy_seed,
                        const std::string& behavior_tag);

// Behavior names: "random", "medium" (eps-greedy 0.3 around the reference
// policy), "expert_mix" (per-episode fair coin between reference and
// random). Seeds for the env, the policy, and the reference are derived
// from master_seed.
Dataset build_offline_dataset(const std::string& env_name, const std::string& behavior,
                              int size, uint64_t master_seed);

// The stationary policy behind a behavior name, seeded exactly as
// build_offline_dataset seeds it, so diagnostics can roll out the same
// distribution the data came from. expert_mix switches controllers at
// episode starts, which no stationary policy reproduces, so it is rejected.
PolicyFn make_behavior_policy(const Env& env, const std::string& behavior,
                              uint64_t master_seed);

// A length-L slice of a trajectory: encoded states, encoded actions, and
// the hidden (undiscounted) sum of true rewards used only for labeling and
// diagnostics.
struct Segment {
  MatrixXd states;       // L x state_dim
  MatrixXd actions;      // L x action_enc_dim
  double true_return = 0.0;
  int origin_row = -1;   // dataset row the window starts at; -1 if synthetic

  int length() const { return static_cast<int>(states.rows()); }
};

// Label convention: y == 1 means seg1 is preferred over seg0.
struct PreferencePair {
  Segment seg0, seg1;
  int y = -1;  // -1 while unlabeled
};

// Rows where a length-L window fits entirely inside one episode.
std::vector<int> valid_window_starts(const Dataset& d, int L);
// Count of non-overlapping windows, the capacity used to cap label budgets.
int count_disjoint_windows(const Dataset& d, int L);

Segment make_segment(const Env& env, const Dataset& d, int start, int L);

// n_pairs unlabeled pairs; both sides drawn independently and uniformly
// over all valid windows (overlap between windows is allowed).
std::vector<PreferencePair> sample_segment_pairs(const Env& env, const Dataset& d, int L,
                                                 int n_pairs, uint64_t seed);

// labeler "ground_truth": prefer the larger true return, exact ties decided
// by a fair coin. labeler "noisy_bt": Bernoulli with success probability
// sigmoid(beta * (ret1 - ret0)).
int label_pair(const PreferencePair& pair, const std::string& labeler, double beta, Rng& rng);
void label_pairs(std::vector<PreferencePair>& pairs, const std::string& labeler, double beta,
                 Rng& rng);

// JSONL with a header line; a .sha256 sidecar guards the bytes. Loading
// verifies the sidecar and fails on any mismatch.
void save_dataset(const std::string& path, const Dataset& d);
Dataset load_dataset(const std::string& path);

void save_pairs(const std::string& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> load_pairs(const std::string& path);

std::string sidecar_path(const std::string& path);

}  // namespace preflab::data
