#pragma once

#include <string>
#include <vector>

#include "preflab/config.hpp"

namespace preflab::harness {

struct RunResult {
  std::string run_id;
  std::string run_dir;
  double score = 0.0;  // mean normalized score of the last <= 5 evals
  std::vector<double> eval_j;
  std::vector<double> eval_norm;
  int reward_updates = 0;
  int rollouts = 0;
};

// out base (PREFLAB_OUT env var wins over cfg.out_dir), per-run directory
// out_base/<env>/<variant>/s<seed>, and the run id <env>-<variant>-s<seed>.
std::string resolve_out_base(const config::RunConfig& cfg);
std::string run_dir_for(const config::RunConfig& cfg);
std::string run_id_for(const config::RunConfig& cfg);

// The full training loop: offline data, preference labeling, model fitting,
// interleaved reward updates from screened model-generated pairs, offline
// policy optimization, and periodic evaluation. Variants:
//   lease     screened pseudo-labels from model rollouts
//   fresh     same rollouts, but every pseudo-label is used unscreened
//   fewer     no model, no rollouts: the labeled pairs are all there is
//   fulldata  like fewer with the label budget raised to the dataset's
//             disjoint-window capacity (capped at 2000)
// Writes metrics.csv, evaluations.csv, reward_updates.csv, artifacts, and a
// manifest.json whose status ends at complete or invalid:<stage>.
RunResult run_lease(const config::RunConfig& cfg);

// run_lease over a seed grid (and optional variant grid).
std::vector<RunResult> sweep(const config::RunConfig& base,
                             const std::vector<uint64_t>& seeds,
                             const std::vector<std::string>& variants);

// Scans run manifests under the out base(s) and formats the score table.
std::string report(const std::string& out_base);
std::string report(const std::vector<std::string>& out_bases);

}  // namespace preflab::harness
