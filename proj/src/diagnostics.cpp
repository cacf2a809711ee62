#include "preflab/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace preflab::diag {

namespace {

// True label implied by segment returns; -1 for an exact tie.
int true_label(const data::PreferencePair& p) {
  if (p.seg1.true_return > p.seg0.true_return) return 1;
  if (p.seg1.true_return < p.seg0.true_return) return 0;
  return -1;
}

}  // namespace

double pseudo_label_error_rate(const std::vector<data::PreferencePair>& pairs,
                               const reward::Selection& sel) {
  if (sel.pseudo_y.size() != pairs.size() ||
      sel.selected.size() != pairs.size())
    throw ContractError("selection does not match the pair batch");
  int n = 0, wrong = 0;
  for (size_t k = 0; k < pairs.size(); ++k) {
    if (!sel.selected[k]) continue;
    ++n;
    const int truth = true_label(pairs[k]);
    if (truth != -1 && sel.pseudo_y[k] != truth) ++wrong;
  }
  return n == 0 ? 0.0 : static_cast<double>(wrong) / n;
}

Prop1Report prop1_check(const reward::RewardEnsemble& r,
                        const std::vector<data::PreferencePair>& pairs,
                        const reward::Selection& sel) {
  if (sel.pseudo_y.size() != pairs.size() ||
      sel.selected.size() != pairs.size())
    throw ContractError("selection does not match the pair batch");

  Prop1Report rep;
  std::vector<data::PreferencePair> chosen;
  std::vector<int> pseudo, truth;
  for (size_t k = 0; k < pairs.size(); ++k) {
    if (!sel.selected[k]) continue;
    chosen.push_back(pairs[k]);
    pseudo.push_back(sel.pseudo_y[k]);
    const int t = true_label(pairs[k]);
    truth.push_back(t == -1 ? sel.pseudo_y[k] : t);
  }
  rep.n_selected = static_cast<int>(chosen.size());
  if (chosen.empty()) return rep;  // zero gap, zero bound, holds

  rep.eta = pseudo_label_error_rate(pairs, sel);
  const VectorXd l0 = r.pair_losses(chosen, std::vector<int>(chosen.size(), 0));
  const VectorXd l1 = r.pair_losses(chosen, std::vector<int>(chosen.size(), 1));
  rep.omega = std::max(l0.maxCoeff(), l1.maxCoeff());
  rep.bound = rep.eta * rep.omega;

  double loss_pseudo = 0.0, loss_true = 0.0;
  for (size_t k = 0; k < chosen.size(); ++k) {
    loss_pseudo += pseudo[k] == 1 ? l1[k] : l0[k];
    loss_true += truth[k] == 1 ? l1[k] : l0[k];
  }
  rep.gap = std::abs(loss_pseudo - loss_true) / chosen.size();
  rep.holds = rep.gap <= rep.bound + 1e-12;
  return rep;
}

VisitationReport visitation_ratio(const envs::Env& env, const data::Dataset& d,
                                  const std::vector<int>& action_of_state,
                                  double gamma) {
  const envs::TabularModel* m = env.tabular();
  if (!m)
    throw ContractError("visitation_ratio is only defined for discrete envs");
  if (static_cast<int>(action_of_state.size()) != m->n_states)
    throw ContractError("policy must pick one action per state");
  for (int a : action_of_state)
    if (a < 0 || a >= m->n_actions)
      throw ContractError("policy action out of range");
  if (gamma <= 0.0 || gamma >= 1.0)
    throw ContractError("visitation_ratio needs gamma in (0, 1)");
  if (d.size() == 0) throw ContractError("empty dataset has no visitation");

  const int S = m->n_states, A = m->n_actions;
  VisitationReport rep;

  rep.data_dist = VectorXd::Zero(S * A);
  for (const auto& rec : d.records) {
    const int s = env.state_index(rec.s);
    const int a = std::get<int>(rec.a);
    rep.data_dist[s * A + a] += 1.0;
  }
  rep.data_dist /= rep.data_dist.sum();

  // Discounted occupancy of the deterministic policy, truncated at the
  // env horizon and self-normalized. Terminal states emit no actions.
  rep.policy_dist = VectorXd::Zero(S * A);
  VectorXd mass = env.start_distribution();
  double w = 1.0;
  for (int t = 0; t < env.spec().horizon; ++t) {
    VectorXd next = VectorXd::Zero(S);
    for (int s = 0; s < S; ++s) {
      if (mass[s] <= 0.0 || m->terminal[s]) continue;
      const int a = action_of_state[s];
      rep.policy_dist[s * A + a] += w * mass[s];
      next += mass[s] * m->transition.row(s * A + a).transpose();
    }
    mass = next;
    w *= gamma;
    if (mass.sum() * w < 1e-14) break;
  }
  const double total = rep.policy_dist.sum();
  if (total <= 0.0)
    throw ContractError("policy visitation is empty; check the start states");
  rep.policy_dist /= total;

  double sum_ratio = 0.0;
  int n_ratio = 0;
  for (int i = 0; i < S * A; ++i) {
    if (rep.policy_dist[i] <= 1e-12) continue;
    if (rep.data_dist[i] <= 1e-12) {
      rep.defined = false;
      continue;
    }
    const double ratio = rep.policy_dist[i] / rep.data_dist[i];
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    sum_ratio += ratio;
    ++n_ratio;
  }
  rep.mean_ratio = n_ratio == 0 ? 0.0 : sum_ratio / n_ratio;
  return rep;
}

namespace {

// Discounted average of (true reward - learned reward) along rollouts of one
// policy, with the realized weight mass for self-normalization.
struct GapEstimate {
  double mean = 0.0;
  double renorm = 0.0;
};

GapEstimate rollout_reward_gap(envs::Env& env, const envs::PolicyFn& p,
                               const RewardFn& r_hat, int samples,
                               uint64_t policy_seed) {
  const double gamma = env.spec().gamma;
  const int horizon = env.spec().horizon;
  Rng rng(policy_seed);
  double sum = 0.0, mass = 0.0;
  for (int ep = 0; ep < samples; ++ep) {
    VectorXd s = env.reset();
    double w = 1.0 - gamma;
    for (int t = 0; t < horizon; ++t) {
      const envs::Action a = p(s, rng);
      const envs::StepResult res = env.step(a);
      sum += w * (res.reward - r_hat(s, env.encode_action(a)));
      mass += w;
      w *= gamma;
      if (res.done) break;
      s = res.state;
    }
  }
  GapEstimate est;
  est.mean = sum / mass;
  est.renorm = mass / static_cast<double>(samples);
  return est;
}

}  // namespace

ConcentrabilityReport concentrability(envs::Env& env, const envs::PolicyFn& mu,
                                      const envs::PolicyFn& pi,
                                      const RewardFn& r_hat, int samples,
                                      uint64_t seed) {
  if (samples < 1) throw ContractError("concentrability needs samples >= 1");
  const GapEstimate mu_est =
      rollout_reward_gap(env, mu, r_hat, samples, derive_seed(seed, "conc-mu", 0));
  const GapEstimate pi_est =
      rollout_reward_gap(env, pi, r_hat, samples, derive_seed(seed, "conc-pi", 0));
  ConcentrabilityReport rep;
  rep.numerator = pi_est.mean;
  rep.denominator = mu_est.mean;
  rep.renorm_pi = pi_est.renorm;
  rep.renorm_mu = mu_est.renorm;
  rep.defined = std::abs(rep.denominator) >= 1e-6;
  rep.value = rep.defined ? std::abs(rep.numerator) / std::abs(rep.denominator) : 0.0;
  return rep;
}

Correlation pearson(const VectorXd& x, const VectorXd& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw ContractError("pearson needs two equal-length vectors of size >= 2");
  const double mx = x.mean(), my = y.mean();
  const VectorXd dx = x.array() - mx, dy = y.array() - my;
  const double sx = dx.norm(), sy = dy.norm();
  Correlation c;
  if (sx < 1e-12 || sy < 1e-12) return c;  // constant input, undefined
  c.r = dx.dot(dy) / (sx * sy);
  c.defined = true;
  return c;
}

RewardTruthReport reward_truth_report(const envs::Env& env,
                                      const reward::RewardEnsemble& r,
                                      const data::Dataset& d, int n_samples,
                                      uint64_t seed) {
  MatrixXd s, a;
  if (const envs::TabularModel* m = env.tabular()) {
    const int n = m->n_states * m->n_actions;
    s.resize(n, env.spec().state_dim);
    a.resize(n, 0);
    int row = 0;
    MatrixXd acts;
    for (int si = 0; si < m->n_states; ++si)
      for (int ai = 0; ai < m->n_actions; ++ai) {
        const VectorXd se = env.encode_state_index(si);
        const VectorXd ae = env.encode_action(ai);
        if (row == 0) a.resize(n, ae.size());
        s.row(row) = se.transpose();
        a.row(row) = ae.transpose();
        ++row;
      }
  } else {
    if (d.size() == 0)
      throw ContractError("continuous reward probe needs dataset rows");
    if (n_samples < 2)
      throw ContractError("reward probe needs at least two samples");
    Rng rng(derive_seed(seed, "reward-probe", 0));
    const int ad = static_cast<int>(env.encode_action(d.records[0].a).size());
    s.resize(n_samples, env.spec().state_dim);
    a.resize(n_samples, ad);
    for (int i = 0; i < n_samples; ++i) {
      const auto& rec = d.records[rng.uniform_int(d.size())];
      s.row(i) = rec.s.transpose();
      a.row(i) = env.encode_action(rec.a).transpose();
    }
  }

  RewardTruthReport rep;
  rep.n = static_cast<int>(s.rows());
  rep.scatter.resize(rep.n, 2);
  const VectorXd pred = r.predict_mean(s, a);
  for (int i = 0; i < rep.n; ++i) {
    rep.scatter(i, 0) =
        env.true_reward_encoded(s.row(i).transpose(), a.row(i).transpose());
    rep.scatter(i, 1) = pred[i];
  }
  const Correlation c = pearson(rep.scatter.col(0), rep.scatter.col(1));
  rep.pearson_r = c.r;
  rep.defined = c.defined;
  return rep;
}

void save_scatter_csv(const std::string& path, const RewardTruthReport& rep) {
  std::string out = "r_true,r_pred\n";
  for (int i = 0; i < rep.n; ++i)
    out += fmt_double(rep.scatter(i, 0)) + "," + fmt_double(rep.scatter(i, 1)) + "\n";
  write_file(path, out);
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  if (rows.empty()) throw ContractError("ablation table needs at least one row");
  std::set<std::string> envs, variants;
  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  for (const auto& r : rows) {
    envs.insert(r.env);
    variants.insert(r.variant);
    cells[{r.env, r.variant}].push_back(r.score);
  }

  auto cell_text = [&](const std::string& e, const std::string& v) -> std::string {
    const auto it = cells.find({e, v});
    if (it == cells.end()) return "n/a";
    const auto& xs = it->second;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= xs.size();
    char buf[64];
    if (xs.size() == 1) {
      std::snprintf(buf, sizeof buf, "%.2f (1)", mean);
      return buf;
    }
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    const double se = std::sqrt(var / (xs.size() - 1)) / std::sqrt(double(xs.size()));
    std::snprintf(buf, sizeof buf, "%.2f +- %.2f (%zu)", mean, se, xs.size());
    return buf;
  };

  std::vector<size_t> widths;
  size_t env_w = 3;
  for (const auto& e : envs) env_w = std::max(env_w, e.size());
  for (const auto& v : variants) {
    size_t w = v.size();
    for (const auto& e : envs) w = std::max(w, cell_text(e, v).size());
    widths.push_back(w);
  }

  std::ostringstream out;
  out << std::string(env_w, ' ');
  size_t vi = 0;
  for (const auto& v : variants)
    out << " | " << v << std::string(widths[vi++] - v.size(), ' ');
  out << "\n";
  for (const auto& e : envs) {
    out << e << std::string(env_w - e.size(), ' ');
    vi = 0;
    for (const auto& v : variants) {
      const std::string c = cell_text(e, v);
      out << " | " << c << std::string(widths[vi++] - c.size(), ' ');
    }
    out << "\n";
  }
  return out.str();
}

void MetricsLog::save(const std::string& path) const {
  std::string out = "run_id,seed,config_hash,step,metric,value\n";
  for (const auto& r : rows_)
    out += csv_join({r.run_id, std::to_string(r.seed), r.config_hash,
                     std::to_string(r.step), r.metric, fmt_double(r.value)}) +
           "\n";
  write_file(path, out);
}

MetricsLog MetricsLog::load(const std::string& path) {
  const std::string text = read_file(path);
  MetricsLog log;
  size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "run_id,seed,config_hash,step,metric,value")
        throw ContractError(path + " is not a metrics log");
      header = false;
      continue;
    }
    const auto f = csv_split(line);
    if (f.size() != 6)
      throw ContractError(path + " has a malformed metrics row: " + line);
    MetricRow r;
    r.run_id = f[0];
    const auto rc = std::from_chars(f[1].data(), f[1].data() + f[1].size(), r.seed);
    if (rc.ec != std::errc() || rc.ptr != f[1].data() + f[1].size())
      throw ContractError(path + " has a bad seed field: " + f[1]);
    r.config_hash = f[2];
    r.step = parse_long(f[3]);
    r.metric = f[4];
    r.value = parse_double(f[5]);
    log.rows_.push_back(r);
  }
  if (header) throw ContractError(path + " is empty, expected a metrics header");
  return log;
}

}  // namespace preflab::diag
