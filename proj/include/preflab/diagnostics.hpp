#pragma once

#include <functional>
#include <string>
#include <vector>

#include "preflab/common.hpp"
#include "preflab/datasets.hpp"
#include "preflab/envs.hpp"
#include "preflab/reward.hpp"

namespace preflab::diag {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Fraction of the selected pairs whose pseudo label contradicts the label
// implied by true segment returns. Exact return ties are never counted as
// wrong. An empty selection has error rate zero.
double pseudo_label_error_rate(const std::vector<data::PreferencePair>& pairs,
                               const reward::Selection& sel);

// Audit of the pseudo-labeling bound: the loss computed with pseudo labels
// can differ from the loss under true labels by at most (error rate) times
// (worst per-pair loss over either labeling), all on the selected batch.
struct Prop1Report {
  double eta = 0.0;    // wrong-label fraction among selected
  double omega = 0.0;  // max per-pair loss over selected pairs and both labels
  double bound = 0.0;  // eta * omega
  double gap = 0.0;    // |loss(pseudo) - loss(true)| on the selected batch
  bool holds = true;
  int n_selected = 0;
};
Prop1Report prop1_check(const reward::RewardEnsemble& r,
                        const std::vector<data::PreferencePair>& pairs,
                        const reward::Selection& sel);

// Self-normalized discounted state-action visitation of a deterministic
// policy against the empirical dataset distribution, on discrete envs. The
// ratio is undefined when the policy puts mass where the data has none.
struct VisitationReport {
  VectorXd data_dist;    // length S*A, sums to 1
  VectorXd policy_dist;  // length S*A, sums to 1
  double max_ratio = 0.0;
  double mean_ratio = 0.0;
  bool defined = true;
};
VisitationReport visitation_ratio(const envs::Env& env, const data::Dataset& d,
                                  const std::vector<int>& action_of_state,
                                  double gamma);

// Learned reward evaluated on an encoded action, so the comparison against
// the true reward can plug in anything from a trained ensemble to the true
// reward itself.
using RewardFn = std::function<double(const VectorXd& s, const VectorXd& a_enc)>;

// How much worse the reward error looks under the target policy than under
// the behavior policy: |E_pi[R* - Rhat]| / |E_mu[R* - Rhat]|, with both
// expectations taken over the discounted state-action distribution,
// estimated by Monte Carlo rollouts in the true environment. Steps are
// weighted (1 - gamma) * gamma^t and each side is self-normalized by its
// realized weight mass (renorm_* records mass / samples). The ratio is
// flagged undefined when the denominator is within 1e-6 of zero, i.e. the
// learned reward already matches the truth on the behavior distribution.
struct ConcentrabilityReport {
  double value = 0.0;
  double numerator = 0.0;    // E_pi[R* - Rhat], signed
  double denominator = 0.0;  // E_mu[R* - Rhat], signed
  double renorm_pi = 0.0;
  double renorm_mu = 0.0;
  bool defined = true;
};
ConcentrabilityReport concentrability(envs::Env& env, const envs::PolicyFn& mu,
                                      const envs::PolicyFn& pi,
                                      const RewardFn& r_hat, int samples,
                                      uint64_t seed);

// Pearson correlation; `defined` is false when either side is constant.
struct Correlation {
  double r = 0.0;
  bool defined = false;
};
Correlation pearson(const VectorXd& x, const VectorXd& y);

// Learned-vs-true reward comparison on a probe set of state-action pairs:
// every (s, a) combination for discrete envs, `n_samples` seeded draws from
// the dataset's rows otherwise. scatter column 0 is the true reward,
// column 1 the ensemble mean prediction.
struct RewardTruthReport {
  MatrixXd scatter;
  double pearson_r = 0.0;
  bool defined = false;
  int n = 0;
};
RewardTruthReport reward_truth_report(const envs::Env& env,
                                      const reward::RewardEnsemble& r,
                                      const data::Dataset& d, int n_samples,
                                      uint64_t seed);
void save_scatter_csv(const std::string& path, const RewardTruthReport& rep);

// One scored run. The table aggregates scores per (env, variant) cell as
// mean +- standard error with the run count; missing cells print n/a.
struct AblationRow {
  std::string env;
  std::string variant;
  double score = 0.0;
};
std::string ablation_table(const std::vector<AblationRow>& rows);

// Long-form metrics log: one (run, seed, config, step, metric, value) row
// per observation. Values survive a save/load cycle bit for bit.
struct MetricRow {
  std::string run_id;
  uint64_t seed = 0;
  std::string config_hash;
  int64_t step = 0;
  std::string metric;
  double value = 0.0;
};

class MetricsLog {
 public:
  void add(const MetricRow& row) { rows_.push_back(row); }
  void add(const std::string& run_id, uint64_t seed,
           const std::string& config_hash, int64_t step,
           const std::string& metric, double value) {
    rows_.push_back({run_id, seed, config_hash, step, metric, value});
  }
  const std::vector<MetricRow>& rows() const { return rows_; }

  void save(const std::string& path) const;
  static MetricsLog load(const std::string& path);

 private:
  std::vector<MetricRow> rows_;
};

}  // namespace preflab::diag
