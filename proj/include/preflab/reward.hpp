#pragma once

#include <string>
#include <vector>

#include "preflab/common.hpp"
#include "preflab/datasets.hpp"
#include "preflab/envs.hpp"
#include "preflab/net.hpp"

namespace preflab::reward {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct RewardConfig {
  int n_members = 3;
  int hidden = 64;
  int depth = 2;  // hidden layers
  double lr = 3e-4;
  uint64_t seed = 0;
};

// Outcome of screening a batch of unlabeled pairs: a pseudo label per pair,
// the ensemble's confidence in it, the spread across members, and the final
// keep/drop decision.
struct Selection {
  std::vector<int> pseudo_y;
  VectorXd confidence;
  VectorXd uncertainty;
  std::vector<uint8_t> selected;
  int n_selected = 0;
};

// Ensemble of bounded reward models trained on segment preferences. Each
// member maps an encoded (state, action) row to a reward in (-r_max, r_max)
// via a tanh squash; a segment's score is its summed per-step reward and the
// probability that seg1 beats seg0 is the logistic of the score gap.
// Members share training batches and differ by initialization.
class RewardEnsemble {
 public:
  static RewardEnsemble init(const envs::Env& env, const RewardConfig& cfg);

  int n_members() const { return static_cast<int>(members_.size()); }
  double r_max() const { return r_max_; }
  const std::string& env_name() const { return env_name_; }

  static double prob_from_scores(double score0, double score1);

  VectorXd member_segment_scores(const data::Segment& seg) const;
  VectorXd member_probs(const data::PreferencePair& p) const;
  double ensemble_prob(const data::PreferencePair& p) const;
  // One row per pair, one column per member.
  MatrixXd member_probs_batch(const std::vector<data::PreferencePair>& pairs) const;

  // Ensemble-mean reward per row, bounded by r_max.
  VectorXd predict_mean(const MatrixXd& s, const MatrixXd& a_enc) const;
  // rows x members.
  MatrixXd predict_members(const MatrixXd& s, const MatrixXd& a_enc) const;

  // Mean preference loss per pair for one member (pure; used by training and
  // by gradient checks). Gradient shapes mirror the member's parameters.
  nn::Grads pair_loss_grads(int member,
                            const std::vector<const data::PreferencePair*>& pairs,
                            const std::vector<int>& labels, double* loss) const;

  // Mean loss across members and pairs under the given labels.
  double mean_loss(const std::vector<data::PreferencePair>& pairs,
                   const std::vector<int>& labels) const;
  // Per-pair loss, averaged over members only.
  VectorXd pair_losses(const std::vector<data::PreferencePair>& pairs,
                       const std::vector<int>& labels) const;

  // `steps` Adam steps on labeled pairs only. Batches are uniform draws with
  // replacement. Returns the step count applied.
  int pretrain(const std::vector<data::PreferencePair>& labeled, int steps,
               int batch_size, uint64_t seed);

  // `steps` Adam steps on the screened semi-supervised objective: mean
  // labeled loss plus mean loss over the selected pseudo-labeled pairs. An
  // empty selection reduces exactly to pretraining on the labeled set.
  int semi_supervised_update(const std::vector<data::PreferencePair>& labeled,
                             const std::vector<data::PreferencePair>& selected,
                             const std::vector<int>& pseudo_y, int steps,
                             int batch_l, int batch_u, uint64_t seed);

  VectorXd member_params(int member) const;
  void set_member_params(int member, const VectorXd& flat);

  void save(const std::string& dir) const;
  static RewardEnsemble load(const std::string& dir);

 private:
  RewardEnsemble() = default;

  // Per-member score gap (seg1 minus seg0) for every pair.
  MatrixXd member_gaps(const std::vector<data::PreferencePair>& pairs) const;

  std::string env_name_;
  int state_dim_ = 0;
  int act_dim_ = 0;
  double r_max_ = 1.0;
  double lr_ = 3e-4;
  std::vector<nn::Mlp> members_;
  std::vector<nn::Adam> opts_;
};

// Pure selection rule on a pairs-by-members probability matrix. The pseudo
// label follows the ensemble mean (exactly 0.5 rounds down), confidence is
// the mean probability of the pseudo-labeled outcome, and uncertainty is the
// population standard deviation across members.
Selection select_from_probs(const MatrixXd& member_probs, double kappa_p,
                            double kappa_tau);

Selection pseudo_label_and_select(const RewardEnsemble& r,
                                  const std::vector<data::PreferencePair>& pairs,
                                  double kappa_p, double kappa_tau);

}  // namespace preflab::reward
