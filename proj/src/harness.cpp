#include "preflab/harness.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <optional>

#include "json.hpp"
#include "preflab/diagnostics.hpp"
#include "preflab/dynamics.hpp"
#include "preflab/policy.hpp"
#include "preflab/reward.hpp"

namespace preflab::harness {

namespace {

using config::RunConfig;
using nlohmann::json;

bool uses_rollouts(const RunConfig& cfg) {
  return cfg.variant == "lease" || cfg.variant == "fresh";
}

int to_int(int64_t v, const char* what) {
  if (v < 0 || v > INT32_MAX)
    throw ContractError(std::string(what) + " out of range: " + std::to_string(v));
  return static_cast<int>(v);
}

dynamics::DynamicsConfig dynamics_config(const RunConfig& cfg, uint64_t seed) {
  dynamics::DynamicsConfig dc;
  dc.n_members = to_int(cfg.dyn_members, "dynamics.members");
  dc.n_elites = to_int(cfg.dyn_elites, "dynamics.elites");
  dc.hidden = to_int(cfg.dyn_hidden, "dynamics.hidden");
  dc.depth = to_int(cfg.dyn_depth, "dynamics.depth");
  dc.lr = cfg.dyn_lr;
  dc.batch_size = to_int(cfg.dyn_batch, "dynamics.batch");
  dc.max_epochs = to_int(cfg.dyn_epochs, "dynamics.epochs");
  dc.patience = to_int(cfg.dyn_patience, "dynamics.patience");
  dc.seed = seed;
  return dc;
}

reward::RewardConfig reward_config(const RunConfig& cfg, uint64_t seed) {
  reward::RewardConfig rc;
  rc.n_members = to_int(cfg.rew_members, "reward.members");
  rc.hidden = to_int(cfg.rew_hidden, "reward.hidden");
  rc.depth = to_int(cfg.rew_depth, "reward.depth");
  rc.lr = cfg.rew_lr;
  rc.seed = seed;
  return rc;
}

policy::LearnerParams learner_params(const RunConfig& cfg) {
  policy::LearnerParams lp;
  lp.algo = cfg.algo;
  lp.lr = cfg.pol_lr;
  lp.cql_alpha = cfg.cql_alpha;
  lp.cql_temp = cfg.cql_temp;
  lp.iql_expectile = cfg.iql_expectile;
  lp.iql_beta = cfg.iql_beta;
  lp.hidden = to_int(cfg.pol_hidden, "policy.hidden");
  lp.depth = to_int(cfg.pol_depth, "policy.depth");
  lp.diag_mode = false;  // long runs skip per-step invariant asserts
  return lp;
}

// Model rewards for every dataset row, refreshed after each reward update.
VectorXd relabel_all(const envs::Env& env, const reward::RewardEnsemble& r,
                     const data::Dataset& d) {
  const int n = d.size();
  const int sd = env.spec().state_dim;
  const int ad = static_cast<int>(env.encode_action(d.records[0].a).size());
  MatrixXd s(n, sd), a(n, ad);
  for (int i = 0; i < n; ++i) {
    s.row(i) = d.records[i].s.transpose();
    a.row(i) = env.encode_action(d.records[i].a).transpose();
  }
  return r.predict_mean(s, a);
}

policy::Batch sample_batch(const envs::Env& env, const data::Dataset& d,
                           const VectorXd& r_hat, int n, Rng& rng) {
  const int sd = env.spec().state_dim;
  const int ad = static_cast<int>(env.encode_action(d.records[0].a).size());
  const bool discrete = env.spec().action.discrete;
  policy::Batch b;
  b.s.resize(n, sd);
  b.a_enc.resize(n, ad);
  b.s_next.resize(n, sd);
  b.r.resize(n);
  b.done.resize(n);
  for (int i = 0; i < n; ++i) {
    const int k = rng.uniform_int(d.size());
    const auto& rec = d.records[k];
    b.s.row(i) = rec.s.transpose();
    b.a_enc.row(i) = env.encode_action(rec.a).transpose();
    b.s_next.row(i) = rec.s_next.transpose();
    b.r[i] = r_hat[k];
    b.done[i] = rec.done;
    if (discrete) {
      b.s_idx.push_back(env.state_index(rec.s));
      b.a_idx.push_back(std::get<int>(rec.a));
      b.s_next_idx.push_back(env.state_index(rec.s_next));
    }
  }
  return b;
}

std::string file_sha256(const std::string& path) {
  return sha256_hex(read_file(path));
}

}  // namespace

std::string resolve_out_base(const RunConfig& cfg) {
  if (const char* env_override = std::getenv("PREFLAB_OUT"))
    if (*env_override) return env_override;
  return cfg.out_dir;
}

std::string run_id_for(const RunConfig& cfg) {
  return cfg.env + "-" + cfg.variant + "-s" + std::to_string(cfg.seed);
}

std::string run_dir_for(const RunConfig& cfg) {
  return resolve_out_base(cfg) + "/" + cfg.env + "/" + cfg.variant + "/s" +
         std::to_string(cfg.seed);
}

RunResult run_lease(const RunConfig& cfg) {
  config::validate(cfg);
  const std::string run_id = run_id_for(cfg);
  const std::string dir = run_dir_for(cfg);
  ensure_dir(dir);
  const std::string cfg_hash = config::config_hash(cfg);

  json manifest;
  manifest["format"] = "preflab.manifest";
  manifest["version"] = 1;
  manifest["run_id"] = run_id;
  manifest["env"] = cfg.env;
  manifest["variant"] = cfg.variant;
  manifest["seed"] = cfg.seed;
  manifest["config_hash"] = cfg_hash;
  manifest["status"] = "running";
  manifest["stage_seeds"] = json::object();
  manifest["artifacts"] = json::object();
  auto flush_manifest = [&]() {
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  };
  auto stage_seed = [&](const std::string& name, uint64_t index = 0) {
    const uint64_t s = derive_seed(cfg.seed, name, index);
    if (index == 0) manifest["stage_seeds"][name] = s;
    return s;
  };
  auto record_artifact = [&](const std::string& name, const std::string& path) {
    manifest["artifacts"][name] = {{"path", path}, {"sha256", file_sha256(path)}};
  };
  flush_manifest();

  std::string stage = "setup";
  try {
    auto env = envs::make_env(cfg.env, stage_seed("env"));
    const envs::Registry registry = envs::load_registry(cfg.registry);
    const envs::EnvAnchors& anchors = envs::require_anchors(registry, cfg.env);
    config::RunConfig c = cfg;  // local copy for the fulldata label raise
    const int L = to_int(c.segment_len, "data.segment_len");

    stage = "offline-data";
    const data::Dataset d = data::build_offline_dataset(
        c.env, c.behavior, to_int(c.offline_size, "data.offline_size"),
        stage_seed("offline-data"));
    manifest["offline_mean_true_reward"] = d.mean_true_reward();

    stage = "labeled-pairs";
    int n_labeled = to_int(c.n_labeled, "data.n_labeled");
    if (c.variant == "fulldata")
      n_labeled = std::min<int>(2000, data::count_disjoint_windows(d, L));
    // Scripted-teacher query selection: skip pairs whose true returns tie,
    // since a teacher label there is a fair coin carrying no signal. Tied
    // pairs fill the remainder only when the draw cannot supply enough
    // informative ones (degenerate behaviors on small chains).
    auto labeled = [&] {
      const auto candidates = data::sample_segment_pairs(
          *env, d, L, 10 * n_labeled, stage_seed("labeled-pairs"));
      std::vector<data::PreferencePair> keep, tied;
      for (const auto& p : candidates) {
        if (static_cast<int>(keep.size()) == n_labeled) break;
        if (std::abs(p.seg0.true_return - p.seg1.true_return) > 1e-9)
          keep.push_back(p);
        else
          tied.push_back(p);
      }
      for (size_t i = 0; static_cast<int>(keep.size()) < n_labeled; ++i)
        keep.push_back(tied.at(i));
      return keep;
    }();
    {
      Rng label_rng(stage_seed("labeler"));
      data::label_pairs(labeled, c.labeler, c.label_beta, label_rng);
    }
    data::save_pairs(dir + "/labeled_pairs.jsonl", labeled);
    record_artifact("labeled_pairs", dir + "/labeled_pairs.jsonl");
    manifest["n_labeled"] = n_labeled;
    flush_manifest();

    stage = "dynamics";
    std::optional<dynamics::DynamicsEnsemble> dyn;
    if (uses_rollouts(c)) {
      dyn = dynamics::DynamicsEnsemble::fit(
          *env, d, dynamics_config(c, stage_seed("dynamics")));
      dyn->save(dir + "/dynamics");
      record_artifact("dynamics_meta", dir + "/dynamics/meta.json");
      json nlls = json::array();
      for (double v : dyn->val_nlls()) nlls.push_back(v);
      manifest["dynamics_val_nll"] = nlls;
      flush_manifest();
    }

    stage = "reward-pretrain";
    reward::RewardEnsemble rew =
        reward::RewardEnsemble::init(*env, reward_config(c, stage_seed("reward-init")));
    rew.pretrain(labeled, to_int(c.pretrain_steps, "reward.pretrain_steps"),
                 to_int(c.pretrain_batch, "reward.pretrain_batch"),
                 stage_seed("pretrain"));

    stage = "policy-loop";
    auto learner = policy::make_learner(*env, learner_params(c), stage_seed("policy-init"));
    VectorXd r_hat = relabel_all(*env, rew, d);

    std::vector<int> y_labeled;
    for (const auto& p : labeled) y_labeled.push_back(p.y);

    diag::MetricsLog metrics;
    auto put = [&](int64_t step, const std::string& name, double value) {
      metrics.add(run_id, cfg.seed, cfg_hash, step, name, value);
    };

    std::string eval_csv = "iter,j_mean,j_stderr,j_norm\n";
    std::string upd_csv =
        "iter,update,n_buffer,n_screened,n_used,loss_labeled,loss_unlabeled,"
        "eta_used,eta_all,acc_used,acc_all,omega,bound,gap\n";

    std::deque<data::PreferencePair> buffer;
    RunResult result;
    result.run_id = run_id;
    result.run_dir = dir;

    Rng batch_rng(stage_seed("policy-batches"));
    const int capacity = to_int(c.buffer_capacity, "rollout.buffer_capacity");
    int eval_idx = 0;

    for (int64_t iter = 1; iter <= c.n_iter; ++iter) {
      if (dyn && iter % c.rollout_freq == 0) {
        auto fresh = dynamics::rollout_pairs(
            *env, *dyn, d, learner->rollout_policy(c.rollout_eps), L,
            to_int(c.rollout_pairs, "rollout.pairs"),
            stage_seed("rollout", static_cast<uint64_t>(result.rollouts)));
        ++result.rollouts;
        for (auto& p : fresh) buffer.push_back(std::move(p));
        while (static_cast<int>(buffer.size()) > capacity) buffer.pop_front();

        if (static_cast<int>(buffer.size()) >= capacity) {
          const std::vector<data::PreferencePair> pool(buffer.begin(), buffer.end());
          reward::Selection sel =
              reward::pseudo_label_and_select(rew, pool, c.kappa_p, c.kappa_tau);
          const int n_screened = sel.n_selected;
          if (c.variant == "fresh") {
            sel.selected.assign(pool.size(), 1);
            sel.n_selected = static_cast<int>(pool.size());
          }
          std::vector<data::PreferencePair> used;
          std::vector<int> pseudo;
          for (size_t k = 0; k < pool.size(); ++k)
            if (sel.selected[k]) {
              used.push_back(pool[k]);
              pseudo.push_back(sel.pseudo_y[k]);
            }

          rew.semi_supervised_update(
              labeled, used, pseudo, to_int(c.update_steps, "reward.update_steps"),
              to_int(c.batch_labeled, "reward.batch_labeled"),
              to_int(c.batch_unlabeled, "reward.batch_unlabeled"),
              stage_seed("reward-update", static_cast<uint64_t>(result.reward_updates)));
          r_hat = relabel_all(*env, rew, d);

          const double eta_used = diag::pseudo_label_error_rate(pool, sel);
          reward::Selection all = sel;
          all.selected.assign(pool.size(), 1);
          all.n_selected = static_cast<int>(pool.size());
          const double eta_all = diag::pseudo_label_error_rate(pool, all);
          const diag::Prop1Report p1 = diag::prop1_check(rew, pool, sel);
          const double loss_l = rew.mean_loss(labeled, y_labeled);
          const double loss_u = used.empty() ? 0.0 : rew.mean_loss(used, pseudo);

          upd_csv += std::to_string(iter) + "," +
                     std::to_string(result.reward_updates) + "," +
                     std::to_string(pool.size()) + "," +
                     std::to_string(n_screened) + "," +
                     std::to_string(used.size()) + "," + fmt_double(loss_l) +
                     "," + fmt_double(loss_u) + "," + fmt_double(eta_used) +
                     "," + fmt_double(eta_all) + "," +
                     fmt_double(1.0 - eta_used) + "," + fmt_double(1.0 - eta_all) +
                     "," + fmt_double(p1.omega) + "," + fmt_double(p1.bound) +
                     "," + fmt_double(p1.gap) + "\n";
          put(iter, "reward_loss_labeled", loss_l);
          put(iter, "reward_loss_unlabeled", loss_u);
          put(iter, "reward_eta_used", eta_used);
          put(iter, "reward_eta_all", eta_all);
          put(iter, "reward_n_used", static_cast<double>(used.size()));
          put(iter, "reward_bound", p1.bound);
          put(iter, "reward_gap", p1.gap);
          put(iter, "buffer_size", static_cast<double>(pool.size()));
          ++result.reward_updates;
        }
      }

      learner->update(sample_batch(*env, d, r_hat,
                                   to_int(c.pol_batch, "policy.batch"), batch_rng));

      if (iter % c.eval_every == 0) {
        auto eval_env = envs::make_env(
            c.env, stage_seed("eval-env", static_cast<uint64_t>(eval_idx)));
        const envs::EvalResult res = envs::evaluate_policy(
            *eval_env, learner->eval_policy(),
            to_int(c.eval_episodes, "run.eval_episodes"),
            stage_seed("eval-policy", static_cast<uint64_t>(eval_idx)));
        const double jn =
            envs::normalized_score(res.mean, anchors.j_random, anchors.j_expert);
        result.eval_j.push_back(res.mean);
        result.eval_norm.push_back(jn);
        eval_csv += std::to_string(iter) + "," + fmt_double(res.mean) + "," +
                    fmt_double(res.stderr_mean) + "," + fmt_double(jn) + "\n";
        put(iter, "eval_j", res.mean);
        put(iter, "eval_j_norm", jn);
        write_file(dir + "/evaluations.csv", eval_csv);
        ++eval_idx;
      }
    }

    stage = "finalize";
    if (result.eval_norm.empty())
      throw ContractError("run finished without a single evaluation");
    const size_t tail = std::min<size_t>(5, result.eval_norm.size());
    double score = 0.0;
    for (size_t i = result.eval_norm.size() - tail; i < result.eval_norm.size(); ++i)
      score += result.eval_norm[i];
    result.score = score / tail;
    put(static_cast<int64_t>(c.n_iter), "score_final", result.score);

    policy::save_policy(dir + "/policy.ckpt", learner->artifact());
    record_artifact("policy", dir + "/policy.ckpt");
    rew.save(dir + "/reward");
    record_artifact("reward_meta", dir + "/reward/meta.json");

    const diag::RewardTruthReport probe = diag::reward_truth_report(
        *env, rew, d, 512, stage_seed("reward-probe"));
    diag::save_scatter_csv(dir + "/reward_scatter.csv", probe);
    record_artifact("reward_scatter", dir + "/reward_scatter.csv");
    if (probe.defined)
      put(static_cast<int64_t>(c.n_iter), "pearson_reward_truth", probe.pearson_r);
    manifest["pearson_reward_truth"] = probe.defined ? json(probe.pearson_r) : json();

    if (env->tabular()) {
      const policy::PolicyArtifact art = learner->artifact();
      std::vector<int> acts;
      for (int s = 0; s < art.q.rows(); ++s) {
        int a = 0;
        art.q.row(s).maxCoeff(&a);
        acts.push_back(a);
      }
      const diag::VisitationReport vis =
          diag::visitation_ratio(*env, d, acts, env->spec().gamma);
      manifest["visitation_ratio_defined"] = vis.defined;
      if (vis.defined) {
        manifest["visitation_ratio_max"] = vis.max_ratio;
        put(static_cast<int64_t>(c.n_iter), "visitation_ratio_max", vis.max_ratio);
      }
    }

    // Reward-error transfer from the behavior distribution to the learned
    // policy's distribution. expert_mix re-draws its controller per episode,
    // so there is no stationary policy to roll out for it.
    if (c.behavior == "random" || c.behavior == "medium") {
      auto conc_env = envs::make_env(c.env, stage_seed("concentrability-env"));
      const envs::PolicyFn mu =
          data::make_behavior_policy(*conc_env, c.behavior, stage_seed("offline-data"));
      const diag::RewardFn r_fn = [&rew](const VectorXd& s, const VectorXd& a_enc) {
        MatrixXd sm(1, s.size()), am(1, a_enc.size());
        sm.row(0) = s.transpose();
        am.row(0) = a_enc.transpose();
        return rew.predict_mean(sm, am)(0);
      };
      const diag::ConcentrabilityReport conc =
          diag::concentrability(*conc_env, mu, learner->eval_policy(), r_fn, 400,
                                stage_seed("concentrability"));
      manifest["concentrability_defined"] = conc.defined;
      manifest["concentrability_renorm_pi"] = conc.renorm_pi;
      manifest["concentrability_renorm_mu"] = conc.renorm_mu;
      if (conc.defined) {
        manifest["concentrability"] = conc.value;
        put(static_cast<int64_t>(c.n_iter), "concentrability", conc.value);
      } else {
        manifest["concentrability"] = json();
        manifest["concentrability_note"] =
            "learned reward matches truth on the behavior distribution";
      }
    } else {
      manifest["concentrability"] = json();
      manifest["concentrability_note"] =
          "behavior " + c.behavior + " has no stationary policy to roll out";
    }

    write_file(dir + "/evaluations.csv", eval_csv);
    write_file(dir + "/reward_updates.csv", upd_csv);
    metrics.save(dir + "/metrics.csv");
    record_artifact("metrics", dir + "/metrics.csv");

    manifest["score"] = result.score;
    manifest["evals"] = result.eval_norm;
    manifest["reward_updates"] = result.reward_updates;
    manifest["rollouts"] = result.rollouts;
    manifest["status"] = "complete";
    flush_manifest();
    return result;
  } catch (...) {
    manifest["status"] = "invalid:" + stage;
    flush_manifest();
    throw;
  }
}

std::vector<RunResult> sweep(const RunConfig& base,
                             const std::vector<uint64_t>& seeds,
                             const std::vector<std::string>& variants) {
  if (seeds.empty()) throw ContractError("sweep needs at least one seed");
  std::vector<std::string> vs = variants;
  if (vs.empty()) vs.push_back(base.variant);
  std::vector<RunResult> out;
  for (const auto& v : vs)
    for (uint64_t s : seeds) {
      RunConfig cfg = base;
      cfg.variant = v;
      cfg.seed = s;
      out.push_back(run_lease(cfg));
    }
  return out;
}

namespace {

std::vector<diag::AblationRow> scan_rows(const std::string& out_base) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(out_base))
    throw ContractError(out_base + " is not a directory");
  std::vector<diag::AblationRow> rows;
  std::vector<fs::path> manifests;
  for (const auto& entry : fs::recursive_directory_iterator(out_base))
    if (entry.is_regular_file() && entry.path().filename() == "manifest.json")
      manifests.push_back(entry.path());
  std::sort(manifests.begin(), manifests.end());
  for (const auto& path : manifests) {
    json m;
    try {
      m = json::parse(read_file(path.string()));
    } catch (const json::exception&) {
      continue;  // unrelated or torn file
    }
    if (m.value("format", "") != "preflab.manifest") continue;
    if (m.value("status", "") != "complete") continue;
    rows.push_back({m.at("env").get<std::string>(),
                    m.at("variant").get<std::string>(),
                    m.at("score").get<double>()});
  }
  return rows;
}

}  // namespace

std::string report(const std::string& out_base) {
  return report(std::vector<std::string>{out_base});
}

std::string report(const std::vector<std::string>& out_bases) {
  if (out_bases.empty()) throw ContractError("report needs at least one directory");
  std::vector<diag::AblationRow> rows;
  for (const auto& base : out_bases) {
    auto more = scan_rows(base);
    rows.insert(rows.end(), more.begin(), more.end());
  }
  if (rows.empty()) {
    std::string joined;
    for (const auto& b : out_bases) joined += (joined.empty() ? "" : ", ") + b;
    throw ContractError("no runs found under " + joined +
                        " (a run counts once its manifest reports complete)");
  }
  return diag::ablation_table(rows);
}

}  // namespace preflab::harness
