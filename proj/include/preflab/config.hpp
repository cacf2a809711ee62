#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "preflab/common.hpp"

namespace preflab::config {

// Everything a training run needs, in one flat struct. Files use a strict
// TOML subset: [section] headers, key = value lines, # comments, quoted
// strings, numbers, and true/false. Unknown sections or keys are errors,
// as are duplicate assignments.
struct RunConfig {
  // [run]
  std::string env = "chainwalk";
  std::string variant = "lease";  // lease | fewer | fresh | fulldata
  uint64_t seed = 0;
  int64_t n_iter = 50000;
  int64_t eval_every = 2500;
  int64_t eval_episodes = 100;
  std::string out_dir = "out";  // PREFLAB_OUT overrides at run time
  std::string registry = "data/env_registry.json";

  // [data]
  std::string behavior = "medium";
  int64_t offline_size = 20000;
  int64_t n_labeled = 100;
  int64_t segment_len = 25;
  std::string labeler = "ground_truth";
  double label_beta = 1.0;

  // [dynamics]
  int64_t dyn_members = 7;
  int64_t dyn_elites = 5;
  int64_t dyn_hidden = 64;
  int64_t dyn_depth = 2;
  double dyn_lr = 1e-3;
  int64_t dyn_batch = 256;
  int64_t dyn_epochs = 200;
  int64_t dyn_patience = 10;

  // [reward]
  int64_t rew_members = 3;
  int64_t rew_hidden = 64;
  int64_t rew_depth = 2;
  double rew_lr = 3e-4;
  int64_t pretrain_steps = 3000;
  int64_t pretrain_batch = 64;
  int64_t update_steps = 100;
  int64_t batch_labeled = 64;
  int64_t batch_unlabeled = 256;
  double kappa_p = 0.85;
  double kappa_tau = 0.05;

  // [rollout]
  int64_t rollout_freq = 1000;
  int64_t rollout_pairs = 512;
  int64_t buffer_capacity = 4096;
  double rollout_eps = 0.5;

  // [policy]
  std::string algo = "cql";
  double pol_lr = 0.1;
  double cql_alpha = 5.0;
  double cql_temp = 1.0;
  double iql_expectile = 0.7;
  double iql_beta = 3.0;
  int64_t pol_hidden = 64;
  int64_t pol_depth = 2;
  int64_t pol_batch = 256;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

// "section.key=value" assignment on top of an existing config.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Sorted section.key = value serialization; parsing it back is lossless.
std::string canonical_config(const RunConfig& cfg);
// Hash of the canonical form; two configs agree iff their hashes do.
std::string config_hash(const RunConfig& cfg);

// Sanity bounds that every entry point checks before running.
void validate(const RunConfig& cfg);

}  // namespace preflab::config
