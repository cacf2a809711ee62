#include "preflab/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "preflab/losses.hpp"

namespace preflab::dynamics {

namespace {

using nlohmann::json;

void shuffle_ints(std::vector<int>& v, Rng& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
    std::swap(v[i], v[rng.uniform_int(i + 1)]);
}

// Population statistics per column; near-constant columns get unit scale so
// normalization never divides by ~0.
void column_stats(const MatrixXd& x, VectorXd* mu, VectorXd* sigma) {
  *mu = x.colwise().mean();
  VectorXd var = (x.rowwise() - mu->transpose()).array().square().colwise().mean();
  *sigma = var.array().sqrt();
  for (int j = 0; j < sigma->size(); ++j)
    if ((*sigma)[j] < 1e-8) (*sigma)[j] = 1.0;
}

MatrixXd normalize(const MatrixXd& x, const VectorXd& mu, const VectorXd& sigma) {
  return (x.rowwise() - mu.transpose()).array().rowwise() /
         sigma.transpose().array();
}

// Mean over rows of the summed-over-dims Gaussian NLL, in normalized target
// space. Shared metric for early stopping and elite ranking.
double mean_nll(const nn::Mlp& net, const MatrixXd& xn, const MatrixXd& yn,
                double lo, double hi) {
  const int sd = static_cast<int>(yn.cols());
  const MatrixXd out = net.forward_batch(xn);
  double total = 0.0;
  for (int i = 0; i < xn.rows(); ++i) {
    VectorXd mean = out.row(i).head(sd);
    VectorXd ls(sd);
    for (int j = 0; j < sd; ++j) ls[j] = nn::soft_clamp(out(i, sd + j), lo, hi);
    total += nn::gaussian_nll(mean, ls, yn.row(i).transpose());
  }
  return total / xn.rows();
}

}  // namespace

DynamicsEnsemble DynamicsEnsemble::fit(const envs::Env& env,
                                       const data::Dataset& d,
                                       const DynamicsConfig& cfg) {
  const int n = d.size();
  if (n < 20)
    throw ContractError("dynamics fit needs at least 20 transitions, got " +
                        std::to_string(n));
  if (cfg.n_members < 1)
    throw ContractError("dynamics fit needs at least one member");
  if (cfg.n_elites < 1 || cfg.n_elites > cfg.n_members)
    throw ContractError("elite count must be in [1, n_members], got " +
                        std::to_string(cfg.n_elites));
  if (cfg.log_std_lo >= cfg.log_std_hi)
    throw ContractError("log_std bounds must satisfy lo < hi");
  if (d.env_name != env.spec().name)
    throw ContractError("dataset env " + d.env_name + " does not match " +
                        env.spec().name);

  const int sd = env.spec().state_dim;
  const int ad = static_cast<int>(env.encode_action(d.records[0].a).size());

  MatrixXd x(n, sd + ad), y(n, sd);
  for (int i = 0; i < n; ++i) {
    const auto& rec = d.records[i];
    x.row(i).head(sd) = rec.s.transpose();
    x.row(i).tail(ad) = env.encode_action(rec.a).transpose();
    y.row(i) = (rec.s_next - rec.s).transpose();
  }

  DynamicsEnsemble e;
  e.env_name_ = env.spec().name;
  e.state_dim_ = sd;
  e.act_dim_ = ad;
  e.log_std_lo_ = cfg.log_std_lo;
  e.log_std_hi_ = cfg.log_std_hi;
  column_stats(x, &e.mu_in_, &e.sigma_in_);
  column_stats(y, &e.mu_out_, &e.sigma_out_);
  const MatrixXd xn = normalize(x, e.mu_in_, e.sigma_in_);
  const MatrixXd yn = normalize(y, e.mu_out_, e.sigma_out_);

  // Shared validation split; members bootstrap the remaining pool.
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, "dyn-split", 0));
  shuffle_ints(perm, split_rng);
  const int n_val = std::min(n - 1, std::max(1, static_cast<int>(std::lround(
                                                    cfg.val_fraction * n))));
  const std::vector<int> val_idx(perm.begin(), perm.begin() + n_val);
  const std::vector<int> pool(perm.begin() + n_val, perm.end());

  MatrixXd xv(n_val, sd + ad), yv(n_val, sd);
  for (int i = 0; i < n_val; ++i) {
    xv.row(i) = xn.row(val_idx[i]);
    yv.row(i) = yn.row(val_idx[i]);
  }

  std::vector<int> sizes;
  sizes.push_back(sd + ad);
  for (int l = 0; l < cfg.depth; ++l) sizes.push_back(cfg.hidden);
  sizes.push_back(2 * sd);

  for (int m = 0; m < cfg.n_members; ++m) {
    Rng rng(derive_seed(cfg.seed, "dyn-member", m));
    nn::Mlp net = nn::Mlp::xavier_init(sizes, nn::Activation::kTanh, rng);
    nn::Adam opt(cfg.lr);

    std::vector<int> boot(pool.size());
    for (size_t i = 0; i < pool.size(); ++i)
      boot[i] = pool[rng.uniform_int(static_cast<int>(pool.size()))];

    VectorXd best = net.flatten_params();
    double best_val = std::numeric_limits<double>::infinity();
    int bad = 0;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      shuffle_ints(boot, rng);
      for (size_t off = 0; off < boot.size(); off += cfg.batch_size) {
        const int b = static_cast<int>(
            std::min(boot.size() - off, static_cast<size_t>(cfg.batch_size)));
        MatrixXd xb(b, sd + ad), yb(b, sd);
        for (int i = 0; i < b; ++i) {
          xb.row(i) = xn.row(boot[off + i]);
          yb.row(i) = yn.row(boot[off + i]);
        }
        nn::Trace trace;
        const MatrixXd out = net.forward_batch(xb, &trace);
        MatrixXd d_out(b, 2 * sd);
        for (int i = 0; i < b; ++i)
          for (int j = 0; j < sd; ++j) {
            const double raw = out(i, sd + j);
            const double ls = nn::soft_clamp(raw, cfg.log_std_lo, cfg.log_std_hi);
            const double inv_var = std::exp(-2.0 * ls);
            const double err = out(i, j) - yb(i, j);
            d_out(i, j) = err * inv_var / b;
            d_out(i, sd + j) = (1.0 - err * err * inv_var) *
                               nn::soft_clamp_grad(raw, cfg.log_std_lo, cfg.log_std_hi) / b;
          }
        opt.update(net, net.backprop(trace, d_out));
      }
      const double v = mean_nll(net, xv, yv, cfg.log_std_lo, cfg.log_std_hi);
      check_finite(v, "dynamics validation NLL");
      if (v < best_val - 1e-9) {
        best_val = v;
        best = net.flatten_params();
        bad = 0;
      } else if (++bad >= cfg.patience) {
        break;
      }
    }
    net.set_params(best);
    e.members_.push_back(std::move(net));
    e.val_nll_.push_back(best_val);
  }

  std::vector<int> order(cfg.n_members);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return e.val_nll_[a] < e.val_nll_[b];
  });
  e.elites_.assign(order.begin(), order.begin() + cfg.n_elites);
  std::sort(e.elites_.begin(), e.elites_.end());
  return e;
}

void DynamicsEnsemble::predict_dist(const MatrixXd& s, const MatrixXd& a_enc,
                                    int member, MatrixXd* mean,
                                    MatrixXd* std) const {
  if (member < 0 || member >= n_members())
    throw ContractError("dynamics member index " + std::to_string(member) +
                        " out of range");
  if (s.cols() != state_dim_ || a_enc.cols() != act_dim_ ||
      s.rows() != a_enc.rows())
    throw ContractError("dynamics query shape mismatch");

  MatrixXd x(s.rows(), state_dim_ + act_dim_);
  x.leftCols(state_dim_) = s;
  x.rightCols(act_dim_) = a_enc;
  const MatrixXd out =
      members_[member].forward_batch(normalize(x, mu_in_, sigma_in_));

  mean->resize(s.rows(), state_dim_);
  std->resize(s.rows(), state_dim_);
  for (int i = 0; i < s.rows(); ++i)
    for (int j = 0; j < state_dim_; ++j) {
      const double m = out(i, j) * sigma_out_[j] + mu_out_[j];
      const double ls = nn::soft_clamp(out(i, state_dim_ + j), log_std_lo_, log_std_hi_);
      (*mean)(i, j) = s(i, j) + m;
      (*std)(i, j) = std::exp(ls) * sigma_out_[j];
    }
}

MatrixXd DynamicsEnsemble::sample_next(const MatrixXd& s, const MatrixXd& a_enc,
                                       int member, Rng& rng) const {
  MatrixXd mean, std;
  predict_dist(s, a_enc, member, &mean, &std);
  for (int i = 0; i < mean.rows(); ++i)
    for (int j = 0; j < mean.cols(); ++j)
      mean(i, j) += std(i, j) * rng.normal();
  return mean;
}

void DynamicsEnsemble::save(const std::string& dir) const {
  ensure_dir(dir);
  json meta;
  meta["format"] = "preflab.dynmeta";
  meta["version"] = 1;
  meta["env"] = env_name_;
  meta["state_dim"] = state_dim_;
  meta["act_dim"] = act_dim_;
  meta["log_std_lo"] = log_std_lo_;
  meta["log_std_hi"] = log_std_hi_;
  meta["n_members"] = n_members();
  meta["elites"] = elites_;
  meta["val_nll"] = val_nll_;
  auto dump_vec = [](const VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  meta["mu_in"] = dump_vec(mu_in_);
  meta["sigma_in"] = dump_vec(sigma_in_);
  meta["mu_out"] = dump_vec(mu_out_);
  meta["sigma_out"] = dump_vec(sigma_out_);
  write_file(dir + "/meta.json", meta.dump(2) + "\n");

  for (int m = 0; m < n_members(); ++m) {
    const bool elite =
        std::find(elites_.begin(), elites_.end(), m) != elites_.end();
    members_[m].save(dir + "/member_" + std::to_string(m) + ".net",
                     {{"val_nll", fmt_double(val_nll_[m])},
                      {"elite", elite ? "1" : "0"}});
  }
}

DynamicsEnsemble DynamicsEnsemble::load(const std::string& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir + "/meta.json"));
  } catch (const json::exception& e) {
    throw ContractError("bad dynamics meta in " + dir + ": " + e.what());
  }
  if (meta.value("format", "") != "preflab.dynmeta")
    throw ContractError(dir + "/meta.json is not a dynamics meta file");

  DynamicsEnsemble e;
  e.env_name_ = meta.at("env").get<std::string>();
  e.state_dim_ = meta.at("state_dim").get<int>();
  e.act_dim_ = meta.at("act_dim").get<int>();
  e.log_std_lo_ = meta.at("log_std_lo").get<double>();
  e.log_std_hi_ = meta.at("log_std_hi").get<double>();
  e.elites_ = meta.at("elites").get<std::vector<int>>();
  e.val_nll_ = meta.at("val_nll").get<std::vector<double>>();
  auto load_vec = [&](const char* key) {
    const auto v = meta.at(key).get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), v.size()).eval();
  };
  e.mu_in_ = load_vec("mu_in");
  e.sigma_in_ = load_vec("sigma_in");
  e.mu_out_ = load_vec("mu_out");
  e.sigma_out_ = load_vec("sigma_out");

  const int k = meta.at("n_members").get<int>();
  for (int m = 0; m < k; ++m)
    e.members_.push_back(
        nn::Mlp::load(dir + "/member_" + std::to_string(m) + ".net"));
  if (static_cast<int>(e.val_nll_.size()) != k || e.elites_.empty())
    throw ContractError("dynamics meta in " + dir + " is inconsistent");
  return e;
}

std::vector<data::PreferencePair> rollout_pairs(const envs::Env& env,
                                                const DynamicsEnsemble& dyn,
                                                const data::Dataset& d,
                                                const envs::PolicyFn& pi,
                                                int segment_len, int n_pairs,
                                                uint64_t seed) {
  if (segment_len < 1) throw ContractError("segment_len must be positive");
  if (n_pairs < 1) throw ContractError("n_pairs must be positive");
  if (d.size() == 0) throw ContractError("cannot roll out from an empty dataset");
  if (env.spec().name != dyn.env_name())
    throw ContractError("dynamics model was fit on " + dyn.env_name() +
                        ", not " + env.spec().name);

  Rng rng(derive_seed(seed, "model-rollout", 0));
  const int n_segs = 2 * n_pairs;
  const int sd = dyn.state_dim();
  const int ad = dyn.action_dim();
  const auto& elites = dyn.elites();

  std::vector<data::Segment> segs(n_segs);
  std::vector<int> member_of(n_segs);
  MatrixXd cur(n_segs, sd);
  for (int i = 0; i < n_segs; ++i) {
    const int row = rng.uniform_int(d.size());
    segs[i].states.resize(segment_len, sd);
    segs[i].actions.resize(segment_len, ad);
    segs[i].origin_row = row;
    cur.row(i) = d.records[row].s.transpose();
    member_of[i] = elites[rng.uniform_int(static_cast<int>(elites.size()))];
  }

  MatrixXd a_enc(n_segs, ad);
  for (int t = 0; t < segment_len; ++t) {
    for (int i = 0; i < n_segs; ++i) {
      a_enc.row(i) = env.encode_action(pi(cur.row(i).transpose(), rng)).transpose();
      segs[i].states.row(t) = cur.row(i);
      segs[i].actions.row(t) = a_enc.row(i);
      segs[i].true_return +=
          env.true_reward_encoded(cur.row(i).transpose(), a_enc.row(i).transpose());
    }
    for (int m : elites) {
      std::vector<int> rows;
      for (int i = 0; i < n_segs; ++i)
        if (member_of[i] == m) rows.push_back(i);
      if (rows.empty()) continue;
      MatrixXd s_sub(rows.size(), sd), a_sub(rows.size(), ad);
      for (size_t r = 0; r < rows.size(); ++r) {
        s_sub.row(r) = cur.row(rows[r]);
        a_sub.row(r) = a_enc.row(rows[r]);
      }
      const MatrixXd next = dyn.sample_next(s_sub, a_sub, m, rng);
      for (size_t r = 0; r < rows.size(); ++r) cur.row(rows[r]) = next.row(r);
    }
  }

  std::vector<data::PreferencePair> pairs(n_pairs);
  for (int k = 0; k < n_pairs; ++k) {
    pairs[k].seg0 = std::move(segs[2 * k]);
    pairs[k].seg1 = std::move(segs[2 * k + 1]);
  }
  return pairs;
}

}  // namespace preflab::dynamics
