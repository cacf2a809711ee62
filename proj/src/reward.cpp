#include "preflab/reward.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "preflab/losses.hpp"

namespace preflab::reward {

namespace {

using nlohmann::json;

// Stacks all segment rows of a pair batch: seg0 rows then seg1 rows per
// pair, pairs in order. Returns per-pair offsets into the stack.
struct PairStack {
  MatrixXd x;
  std::vector<int> off0, off1, len0, len1;
};

PairStack stack_pairs(const std::vector<const data::PreferencePair*>& pairs,
                      int state_dim, int act_dim) {
  PairStack st;
  int total = 0;
  for (const auto* p : pairs) {
    if (p->seg0.states.cols() != state_dim || p->seg1.states.cols() != state_dim ||
        p->seg0.actions.cols() != act_dim || p->seg1.actions.cols() != act_dim)
      throw ContractError("preference pair does not match the reward model's env");
    if (p->seg0.length() < 1 || p->seg1.length() < 1)
      throw ContractError("preference pair contains an empty segment");
    total += p->seg0.length() + p->seg1.length();
  }
  st.x.resize(total, state_dim + act_dim);
  int row = 0;
  for (const auto* p : pairs) {
    st.off0.push_back(row);
    st.len0.push_back(p->seg0.length());
    st.x.block(row, 0, p->seg0.length(), state_dim) = p->seg0.states;
    st.x.block(row, state_dim, p->seg0.length(), act_dim) = p->seg0.actions;
    row += p->seg0.length();
    st.off1.push_back(row);
    st.len1.push_back(p->seg1.length());
    st.x.block(row, 0, p->seg1.length(), state_dim) = p->seg1.states;
    st.x.block(row, state_dim, p->seg1.length(), act_dim) = p->seg1.actions;
    row += p->seg1.length();
  }
  return st;
}

std::vector<const data::PreferencePair*> ptrs(
    const std::vector<data::PreferencePair>& pairs) {
  std::vector<const data::PreferencePair*> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(&p);
  return out;
}

void require_binary(const std::vector<int>& labels) {
  for (int y : labels)
    if (y != 0 && y != 1)
      throw ContractError("preference labels must be 0 or 1, got " +
                          std::to_string(y));
}

}  // namespace

RewardEnsemble RewardEnsemble::init(const envs::Env& env, const RewardConfig& cfg) {
  if (cfg.n_members < 1)
    throw ContractError("reward ensemble needs at least one member");
  if (cfg.hidden < 1 || cfg.depth < 1)
    throw ContractError("reward net needs at least one hidden layer");

  RewardEnsemble r;
  r.env_name_ = env.spec().name;
  r.state_dim_ = env.spec().state_dim;
  r.act_dim_ = static_cast<int>(
      env.encode_action(env.spec().action.discrete
                            ? envs::Action{0}
                            : envs::Action{VectorXd::Zero(env.spec().action.dim)})
          .size());
  r.r_max_ = env.spec().r_max;
  r.lr_ = cfg.lr;

  std::vector<int> sizes;
  sizes.push_back(r.state_dim_ + r.act_dim_);
  for (int l = 0; l < cfg.depth; ++l) sizes.push_back(cfg.hidden);
  sizes.push_back(1);
  for (int m = 0; m < cfg.n_members; ++m) {
    Rng rng(derive_seed(cfg.seed, "reward-member", m));
    r.members_.push_back(nn::Mlp::xavier_init(sizes, nn::Activation::kTanh, rng));
    r.opts_.emplace_back(cfg.lr);
  }
  return r;
}

double RewardEnsemble::prob_from_scores(double score0, double score1) {
  return nn::sigmoid(score1 - score0);
}

VectorXd RewardEnsemble::member_segment_scores(const data::Segment& seg) const {
  if (seg.length() < 1) throw ContractError("empty segment has no score");
  MatrixXd x(seg.length(), state_dim_ + act_dim_);
  if (seg.states.cols() != state_dim_ || seg.actions.cols() != act_dim_)
    throw ContractError("segment does not match the reward model's env");
  x.leftCols(state_dim_) = seg.states;
  x.rightCols(act_dim_) = seg.actions;
  VectorXd scores(n_members());
  for (int m = 0; m < n_members(); ++m)
    scores[m] = r_max_ * members_[m].forward_batch(x).array().tanh().sum();
  return scores;
}

VectorXd RewardEnsemble::member_probs(const data::PreferencePair& p) const {
  const VectorXd s0 = member_segment_scores(p.seg0);
  const VectorXd s1 = member_segment_scores(p.seg1);
  VectorXd probs(n_members());
  for (int m = 0; m < n_members(); ++m)
    probs[m] = prob_from_scores(s0[m], s1[m]);
  return probs;
}

double RewardEnsemble::ensemble_prob(const data::PreferencePair& p) const {
  return member_probs(p).mean();
}

MatrixXd RewardEnsemble::member_gaps(
    const std::vector<data::PreferencePair>& pairs) const {
  const PairStack st = stack_pairs(ptrs(pairs), state_dim_, act_dim_);
  MatrixXd gaps(static_cast<int>(pairs.size()), n_members());
  for (int m = 0; m < n_members(); ++m) {
    const Eigen::ArrayXd r = members_[m].forward_batch(st.x).array().tanh() * r_max_;
    for (size_t k = 0; k < pairs.size(); ++k) {
      const double s0 = r.segment(st.off0[k], st.len0[k]).sum();
      const double s1 = r.segment(st.off1[k], st.len1[k]).sum();
      gaps(static_cast<int>(k), m) = s1 - s0;
    }
  }
  return gaps;
}

MatrixXd RewardEnsemble::member_probs_batch(
    const std::vector<data::PreferencePair>& pairs) const {
  MatrixXd probs = member_gaps(pairs);
  for (int i = 0; i < probs.rows(); ++i)
    for (int m = 0; m < probs.cols(); ++m)
      probs(i, m) = nn::sigmoid(probs(i, m));
  return probs;
}

VectorXd RewardEnsemble::predict_mean(const MatrixXd& s, const MatrixXd& a_enc) const {
  return predict_members(s, a_enc).rowwise().mean();
}

MatrixXd RewardEnsemble::predict_members(const MatrixXd& s,
                                         const MatrixXd& a_enc) const {
  if (s.cols() != state_dim_ || a_enc.cols() != act_dim_ || s.rows() != a_enc.rows())
    throw ContractError("reward query shape mismatch");
  MatrixXd x(s.rows(), state_dim_ + act_dim_);
  x.leftCols(state_dim_) = s;
  x.rightCols(act_dim_) = a_enc;
  MatrixXd out(s.rows(), n_members());
  for (int m = 0; m < n_members(); ++m)
    out.col(m) = (members_[m].forward_batch(x).array().tanh() * r_max_).matrix();
  return out;
}

nn::Grads RewardEnsemble::pair_loss_grads(
    int member, const std::vector<const data::PreferencePair*>& pairs,
    const std::vector<int>& labels, double* loss) const {
  if (member < 0 || member >= n_members())
    throw ContractError("reward member index out of range");
  if (pairs.empty()) throw ContractError("cannot take gradients on zero pairs");
  if (labels.size() != pairs.size())
    throw ContractError("label count does not match pair count");
  require_binary(labels);

  const PairStack st = stack_pairs(pairs, state_dim_, act_dim_);
  nn::Trace trace;
  const MatrixXd raw = members_[member].forward_batch(st.x, &trace);
  const Eigen::ArrayXd t = raw.col(0).array().tanh();
  const Eigen::ArrayXd dr = r_max_ * (1.0 - t.square());  // d reward / d raw

  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  MatrixXd d_out = MatrixXd::Zero(st.x.rows(), 1);
  double total = 0.0;
  for (size_t k = 0; k < pairs.size(); ++k) {
    const double s0 = (r_max_ * t.segment(st.off0[k], st.len0[k])).sum();
    const double s1 = (r_max_ * t.segment(st.off1[k], st.len1[k])).sum();
    const double gap = s1 - s0;
    total += nn::bce_from_logit_gap(gap, labels[k]);
    const double w = nn::bce_grad_gap(gap, labels[k]) * inv_n;
    d_out.col(0).segment(st.off1[k], st.len1[k]).array() +=
        w * dr.segment(st.off1[k], st.len1[k]);
    d_out.col(0).segment(st.off0[k], st.len0[k]).array() -=
        w * dr.segment(st.off0[k], st.len0[k]);
  }
  if (loss) *loss = total * inv_n;
  return members_[member].backprop(trace, d_out);
}

double RewardEnsemble::mean_loss(const std::vector<data::PreferencePair>& pairs,
                                 const std::vector<int>& labels) const {
  return pair_losses(pairs, labels).mean();
}

VectorXd RewardEnsemble::pair_losses(const std::vector<data::PreferencePair>& pairs,
                                     const std::vector<int>& labels) const {
  if (pairs.empty()) throw ContractError("pair_losses needs at least one pair");
  if (labels.size() != pairs.size())
    throw ContractError("label count does not match pair count");
  require_binary(labels);
  const MatrixXd gaps = member_gaps(pairs);
  VectorXd losses = VectorXd::Zero(static_cast<int>(pairs.size()));
  for (size_t k = 0; k < pairs.size(); ++k) {
    for (int m = 0; m < n_members(); ++m)
      losses[static_cast<int>(k)] +=
          nn::bce_from_logit_gap(gaps(static_cast<int>(k), m), labels[k]);
    losses[static_cast<int>(k)] /= n_members();
  }
  return losses;
}

int RewardEnsemble::pretrain(const std::vector<data::PreferencePair>& labeled,
                             int steps, int batch_size, uint64_t seed) {
  return semi_supervised_update(labeled, {}, {}, steps, batch_size, 0, seed);
}

int RewardEnsemble::semi_supervised_update(
    const std::vector<data::PreferencePair>& labeled,
    const std::vector<data::PreferencePair>& selected,
    const std::vector<int>& pseudo_y, int steps, int batch_l, int batch_u,
    uint64_t seed) {
  if (labeled.empty()) throw ContractError("reward training needs labeled pairs");
  if (steps < 1) throw ContractError("reward training needs at least one step");
  if (batch_l < 1) throw ContractError("labeled batch size must be positive");
  if (pseudo_y.size() != selected.size())
    throw ContractError("pseudo label count does not match selected pair count");
  require_binary(pseudo_y);
  std::vector<int> y_l;
  for (const auto& p : labeled) {
    if (p.y != 0 && p.y != 1)
      throw ContractError("labeled pair carries no 0/1 label");
    y_l.push_back(p.y);
  }

  const int n_l = static_cast<int>(labeled.size());
  const int n_u = static_cast<int>(selected.size());
  const int b_l = std::min(batch_l, n_l);
  const int b_u = n_u == 0 ? 0 : std::min(std::max(batch_u, 1), n_u);

  Rng rng(derive_seed(seed, "reward-batch", 0));
  for (int step = 0; step < steps; ++step) {
    std::vector<const data::PreferencePair*> bl(b_l);
    std::vector<int> yl(b_l);
    for (int i = 0; i < b_l; ++i) {
      const int k = rng.uniform_int(n_l);
      bl[i] = &labeled[k];
      yl[i] = y_l[k];
    }
    std::vector<const data::PreferencePair*> bu(b_u);
    std::vector<int> yu(b_u);
    for (int i = 0; i < b_u; ++i) {
      const int k = rng.uniform_int(n_u);
      bu[i] = &selected[k];
      yu[i] = pseudo_y[k];
    }
    for (int m = 0; m < n_members(); ++m) {
      nn::Grads g = pair_loss_grads(m, bl, yl, nullptr);
      if (b_u > 0) {
        const nn::Grads gu = pair_loss_grads(m, bu, yu, nullptr);
        for (size_t l = 0; l < g.w.size(); ++l) {
          g.w[l] += gu.w[l];
          g.b[l] += gu.b[l];
        }
      }
      opts_[m].update(members_[m], g);
    }
  }
  return steps;
}

VectorXd RewardEnsemble::member_params(int member) const {
  if (member < 0 || member >= n_members())
    throw ContractError("reward member index out of range");
  return members_[member].flatten_params();
}

void RewardEnsemble::set_member_params(int member, const VectorXd& flat) {
  if (member < 0 || member >= n_members())
    throw ContractError("reward member index out of range");
  members_[member].set_params(flat);
}

void RewardEnsemble::save(const std::string& dir) const {
  ensure_dir(dir);
  json meta;
  meta["format"] = "preflab.rewmeta";
  meta["version"] = 1;
  meta["env"] = env_name_;
  meta["state_dim"] = state_dim_;
  meta["act_dim"] = act_dim_;
  meta["r_max"] = r_max_;
  meta["lr"] = lr_;
  meta["n_members"] = n_members();
  write_file(dir + "/meta.json", meta.dump(2) + "\n");
  for (int m = 0; m < n_members(); ++m)
    members_[m].save(dir + "/member_" + std::to_string(m) + ".net");
}

RewardEnsemble RewardEnsemble::load(const std::string& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir + "/meta.json"));
  } catch (const json::exception& e) {
    throw ContractError("bad reward meta in " + dir + ": " + e.what());
  }
  if (meta.value("format", "") != "preflab.rewmeta")
    throw ContractError(dir + "/meta.json is not a reward meta file");

  RewardEnsemble r;
  r.env_name_ = meta.at("env").get<std::string>();
  r.state_dim_ = meta.at("state_dim").get<int>();
  r.act_dim_ = meta.at("act_dim").get<int>();
  r.r_max_ = meta.at("r_max").get<double>();
  r.lr_ = meta.at("lr").get<double>();
  const int k = meta.at("n_members").get<int>();
  for (int m = 0; m < k; ++m) {
    r.members_.push_back(nn::Mlp::load(dir + "/member_" + std::to_string(m) + ".net"));
    r.opts_.emplace_back(r.lr_);
  }
  return r;
}

Selection select_from_probs(const MatrixXd& member_probs, double kappa_p,
                            double kappa_tau) {
  if (member_probs.cols() < 1)
    throw ContractError("selection needs at least one ensemble member");
  const int n = static_cast<int>(member_probs.rows());
  Selection sel;
  sel.pseudo_y.resize(n);
  sel.confidence.resize(n);
  sel.uncertainty.resize(n);
  sel.selected.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    const double mean = member_probs.row(i).mean();
    const int y = mean > 0.5 ? 1 : 0;
    const double p = y == 1 ? mean : 1.0 - mean;
    const double tau = std::sqrt(
        (member_probs.row(i).array() - mean).square().mean());
    sel.pseudo_y[i] = y;
    sel.confidence[i] = p;
    sel.uncertainty[i] = tau;
    if (p > kappa_p && tau < kappa_tau) {
      sel.selected[i] = 1;
      ++sel.n_selected;
    }
  }
  return sel;
}

Selection pseudo_label_and_select(const RewardEnsemble& r,
                                  const std::vector<data::PreferencePair>& pairs,
                                  double kappa_p, double kappa_tau) {
  if (pairs.empty()) {
    Selection empty;
    return empty;
  }
  return select_from_probs(r.member_probs_batch(pairs), kappa_p, kappa_tau);
}

}  // namespace preflab::reward
