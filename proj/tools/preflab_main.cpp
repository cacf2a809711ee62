// Command-line front end. Every pipeline stage is reachable on its own so
// runs can be inspected piecewise, and `train` drives the whole loop.
#include <charconv>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "preflab/common.hpp"
#include "preflab/config.hpp"
#include "preflab/datasets.hpp"
#include "preflab/diagnostics.hpp"
#include "preflab/dynamics.hpp"
#include "preflab/envs.hpp"
#include "preflab/harness.hpp"
#include "preflab/policy.hpp"
#include "preflab/reward.hpp"

namespace {

using namespace preflab;
using config::RunConfig;

// Flags shared by every subcommand. Precedence: defaults < --config file
// < shortcut flags < --set overrides (last one wins).
struct CommonOpts {
  std::string config_path;
  std::string env;
  std::string variant;
  std::string out;
  std::string seed_text;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (strict TOML subset)");
    cmd->add_option("--env", env, "environment name");
    cmd->add_option("--variant", variant, "lease | fewer | fresh | fulldata");
    cmd->add_option("--out", out, "output root (PREFLAB_OUT still wins)");
    cmd->add_option("--seed", seed_text, "master seed");
    cmd->add_option("--set", sets, "section.key=value override, repeatable")
        ->take_all();
  }

  RunConfig build() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = config::load_config(config_path);
    if (!env.empty()) config::apply_override(cfg, "run.env=\"" + env + "\"");
    if (!variant.empty())
      config::apply_override(cfg, "run.variant=\"" + variant + "\"");
    if (!out.empty()) config::apply_override(cfg, "run.out_dir=\"" + out + "\"");
    if (!seed_text.empty()) config::apply_override(cfg, "run.seed=" + seed_text);
    for (const auto& s : sets) config::apply_override(cfg, s);
    return cfg;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t end = s.find(',', pos);
    if (end == std::string::npos) end = s.size();
    std::string item = s.substr(pos, end - pos);
    if (!item.empty()) out.push_back(item);
    pos = end + 1;
  }
  return out;
}

uint64_t parse_seed(const std::string& s) {
  uint64_t v = 0;
  const auto rc = std::from_chars(s.data(), s.data() + s.size(), v);
  if (rc.ec != std::errc() || rc.ptr != s.data() + s.size())
    throw ContractError("bad seed value: " + s);
  return v;
}

std::string value_dir_name(const std::string& param, const std::string& value) {
  std::string v = value;
  std::erase(v, '"');
  for (char& c : v)
    if (c == '/') c = '_';
  return param + "=" + v;
}

int cmd_collect(const CommonOpts& opts) {
  const RunConfig cfg = opts.build();
  const data::Dataset d = data::build_offline_dataset(
      cfg.env, cfg.behavior, static_cast<int>(cfg.offline_size),
      derive_seed(cfg.seed, "offline-data", 0));
  const std::string dir = harness::resolve_out_base(cfg) + "/datasets";
  ensure_dir(dir);
  const std::string path = dir + "/" + cfg.env + "-" + cfg.behavior + "-s" +
                           std::to_string(cfg.seed) + ".jsonl";
  data::save_dataset(path, d);
  std::printf("wrote %s (%d transitions, mean true reward %s)\n", path.c_str(),
              d.size(), fmt_double(d.mean_true_reward()).c_str());
  return 0;
}

int cmd_fit_dynamics(const CommonOpts& opts) {
  const RunConfig cfg = opts.build();
  auto env = envs::make_env(cfg.env, derive_seed(cfg.seed, "env", 0));
  const data::Dataset d = data::build_offline_dataset(
      cfg.env, cfg.behavior, static_cast<int>(cfg.offline_size),
      derive_seed(cfg.seed, "offline-data", 0));
  dynamics::DynamicsConfig dc;
  dc.n_members = static_cast<int>(cfg.dyn_members);
  dc.n_elites = static_cast<int>(cfg.dyn_elites);
  dc.hidden = static_cast<int>(cfg.dyn_hidden);
  dc.depth = static_cast<int>(cfg.dyn_depth);
  dc.lr = cfg.dyn_lr;
  dc.batch_size = static_cast<int>(cfg.dyn_batch);
  dc.max_epochs = static_cast<int>(cfg.dyn_epochs);
  dc.patience = static_cast<int>(cfg.dyn_patience);
  dc.seed = derive_seed(cfg.seed, "dynamics", 0);
  const auto dyn = dynamics::DynamicsEnsemble::fit(*env, d, dc);
  const std::string dir = harness::resolve_out_base(cfg) + "/dynamics/" +
                          cfg.env + "-s" + std::to_string(cfg.seed);
  dyn.save(dir);
  std::printf("wrote %s\n", dir.c_str());
  for (size_t k = 0; k < dyn.val_nlls().size(); ++k) {
    const bool elite = std::find(dyn.elites().begin(), dyn.elites().end(),
                                 static_cast<int>(k)) != dyn.elites().end();
    std::printf("  member %zu: val nll %s%s\n", k,
                fmt_double(dyn.val_nlls()[k]).c_str(), elite ? " (elite)" : "");
  }
  return 0;
}

int cmd_pretrain_reward(const CommonOpts& opts) {
  const RunConfig cfg = opts.build();
  auto env = envs::make_env(cfg.env, derive_seed(cfg.seed, "env", 0));
  const data::Dataset d = data::build_offline_dataset(
      cfg.env, cfg.behavior, static_cast<int>(cfg.offline_size),
      derive_seed(cfg.seed, "offline-data", 0));
  auto pairs = data::sample_segment_pairs(
      *env, d, static_cast<int>(cfg.segment_len),
      static_cast<int>(cfg.n_labeled), derive_seed(cfg.seed, "labeled-pairs", 0));
  Rng label_rng(derive_seed(cfg.seed, "labeler", 0));
  data::label_pairs(pairs, cfg.labeler, cfg.label_beta, label_rng);

  reward::RewardConfig rc;
  rc.n_members = static_cast<int>(cfg.rew_members);
  rc.hidden = static_cast<int>(cfg.rew_hidden);
  rc.depth = static_cast<int>(cfg.rew_depth);
  rc.lr = cfg.rew_lr;
  rc.seed = derive_seed(cfg.seed, "reward-init", 0);
  reward::RewardEnsemble rew = reward::RewardEnsemble::init(*env, rc);
  rew.pretrain(pairs, static_cast<int>(cfg.pretrain_steps),
               static_cast<int>(cfg.pretrain_batch),
               derive_seed(cfg.seed, "pretrain", 0));

  std::vector<int> y;
  for (const auto& p : pairs) y.push_back(p.y);
  const std::string dir = harness::resolve_out_base(cfg) + "/reward/" +
                          cfg.env + "-s" + std::to_string(cfg.seed);
  rew.save(dir);
  data::save_pairs(dir + "/labeled_pairs.jsonl", pairs);
  std::printf("wrote %s (%zu labeled pairs, train loss %s)\n", dir.c_str(),
              pairs.size(), fmt_double(rew.mean_loss(pairs, y)).c_str());
  return 0;
}

int cmd_train(const CommonOpts& opts) {
  const RunConfig cfg = opts.build();
  const harness::RunResult res = harness::run_lease(cfg);
  std::printf("run %s complete\n", res.run_id.c_str());
  std::printf("  dir           %s\n", res.run_dir.c_str());
  std::printf("  rollouts      %d\n", res.rollouts);
  std::printf("  reward updates %d\n", res.reward_updates);
  std::printf("  final score   %s (mean of last %zu evals)\n",
              fmt_double(res.score).c_str(),
              std::min<size_t>(5, res.eval_norm.size()));
  return 0;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& policy_path,
                 int episodes) {
  const RunConfig cfg = opts.build();
  auto env = envs::make_env(cfg.env, derive_seed(cfg.seed, "eval-env", 0));
  const policy::PolicyArtifact art = policy::load_policy(policy_path);
  const envs::PolicyFn pi = policy::policy_from_artifact(art, *env);
  const int n = episodes > 0 ? episodes : static_cast<int>(cfg.eval_episodes);
  const envs::EvalResult res =
      envs::evaluate_policy(*env, pi, n, derive_seed(cfg.seed, "eval-policy", 0));
  std::printf("J = %s +- %s over %d episodes\n", fmt_double(res.mean).c_str(),
              fmt_double(res.stderr_mean).c_str(), res.episodes);
  try {
    const envs::Registry reg = envs::load_registry(cfg.registry);
    const envs::EnvAnchors& a = envs::require_anchors(reg, cfg.env);
    std::printf("normalized score = %s\n",
                fmt_double(envs::normalized_score(res.mean, a.j_random,
                                                  a.j_expert))
                    .c_str());
  } catch (const ContractError&) {
    std::printf("normalized score unavailable (no registry anchors for %s)\n",
                cfg.env.c_str());
  }
  return 0;
}

int cmd_report(const CommonOpts& opts, const std::vector<std::string>& runs) {
  std::vector<std::string> bases = runs;
  if (bases.empty()) bases.push_back(harness::resolve_out_base(opts.build()));
  std::printf("%s", harness::report(bases).c_str());
  return 0;
}

int cmd_sweep(const CommonOpts& opts, const std::string& seeds_text,
              const std::string& variants_text, const std::string& param,
              const std::string& values_text) {
  const RunConfig base = opts.build();
  std::vector<uint64_t> seeds;
  for (const auto& s : split_list(seeds_text)) seeds.push_back(parse_seed(s));
  if (seeds.empty()) seeds.push_back(base.seed);
  const std::vector<std::string> variants = split_list(variants_text);

  std::vector<RunConfig> grid;
  if (param.empty()) {
    grid.push_back(base);
  } else {
    const auto values = split_list(values_text);
    if (values.empty())
      throw ContractError("sweep over " + param + " needs --values");
    for (const auto& v : values) {
      RunConfig c = base;
      config::apply_override(c, param + "=" + v);
      // each value gets its own subtree so run directories never collide
      c.out_dir = base.out_dir + "/" + value_dir_name(param, v);
      grid.push_back(c);
    }
  }

  for (const auto& c : grid) {
    const auto results = harness::sweep(c, seeds, variants);
    for (const auto& r : results)
      std::printf("%-32s score %s\n", r.run_id.c_str(),
                  fmt_double(r.score).c_str());
  }
  return 0;
}

int cmd_registry(const CommonOpts& opts, const std::string& envs_text,
                 int episodes) {
  const RunConfig cfg = opts.build();
  std::vector<std::string> names = split_list(envs_text);
  if (names.empty()) names = {"chainwalk", "gridnav", "pointmass"};
  envs::Registry reg;
  for (size_t i = 0; i < names.size(); ++i) {
    auto env = envs::make_env(names[i], derive_seed(cfg.seed, "registry-env", i));
    const auto uniform = envs::make_uniform_policy(*env);
    const auto expert = policy::make_reference_policy(
        names[i], derive_seed(cfg.seed, "registry-reference", i));
    const envs::EvalResult jr = envs::evaluate_policy(
        *env, uniform, episodes, derive_seed(cfg.seed, "registry-random", i));
    const envs::EvalResult je = envs::evaluate_policy(
        *env, expert, episodes, derive_seed(cfg.seed, "registry-expert", i));
    reg.anchors[names[i]] = {jr.mean, je.mean, episodes, cfg.seed};
    std::printf("%-10s J_random %-12s J_expert %s\n", names[i].c_str(),
                fmt_double(jr.mean).c_str(), fmt_double(je.mean).c_str());
  }
  envs::save_registry(cfg.registry, reg);
  std::printf("wrote %s\n", cfg.registry.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"offline preference-based RL pipeline"};
  app.require_subcommand(1);

  CommonOpts collect_o, fitdyn_o, prerew_o, train_o, eval_o, report_o,
      sweep_o, registry_o;

  auto* collect = app.add_subcommand("collect", "collect an offline dataset");
  collect_o.attach(collect);

  auto* fitdyn =
      app.add_subcommand("fit-dynamics", "fit the dynamics ensemble");
  fitdyn_o.attach(fitdyn);

  auto* prerew = app.add_subcommand("pretrain-reward",
                                    "pretrain the reward ensemble on labels");
  prerew_o.attach(prerew);

  auto* train = app.add_subcommand("train", "run the full training loop");
  train_o.attach(train);

  std::string eval_policy_path;
  int eval_episodes = 0;
  auto* evaluate =
      app.add_subcommand("evaluate", "evaluate a saved policy checkpoint");
  eval_o.attach(evaluate);
  evaluate->add_option("--policy", eval_policy_path, "path to policy.ckpt")
      ->required();
  evaluate->add_option("--episodes", eval_episodes,
                       "episode count (default: config eval_episodes)");

  std::vector<std::string> report_runs;
  auto* report = app.add_subcommand("report", "tabulate completed runs");
  report_o.attach(report);
  report->add_option("--runs", report_runs, "run directories to scan")
      ->take_all();

  std::string sweep_seeds, sweep_variants, sweep_param, sweep_values;
  auto* sweep = app.add_subcommand("sweep", "grid of runs over seeds/values");
  sweep_o.attach(sweep);
  sweep->add_option("--seeds", sweep_seeds, "comma-separated seed list");
  sweep->add_option("--variants", sweep_variants,
                    "comma-separated variant list");
  sweep->add_option("--param", sweep_param,
                    "config key to sweep, e.g. data.n_labeled");
  sweep->add_option("--values", sweep_values, "comma-separated value list");

  std::string registry_envs;
  int registry_episodes = 500;
  auto* registry = app.add_subcommand(
      "registry", "estimate random/expert score anchors and save them");
  registry_o.attach(registry);
  registry->add_option("--envs", registry_envs, "comma-separated env names");
  registry->add_option("--episodes", registry_episodes,
                       "episodes per anchor estimate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (collect->parsed()) return cmd_collect(collect_o);
    if (fitdyn->parsed()) return cmd_fit_dynamics(fitdyn_o);
    if (prerew->parsed()) return cmd_pretrain_reward(prerew_o);
    if (train->parsed()) return cmd_train(train_o);
    if (evaluate->parsed())
      return cmd_evaluate(eval_o, eval_policy_path, eval_episodes);
    if (report->parsed()) return cmd_report(report_o, report_runs);
    if (sweep->parsed())
      return cmd_sweep(sweep_o, sweep_seeds, sweep_variants, sweep_param,
                       sweep_values);
    if (registry->parsed())
      return cmd_registry(registry_o, registry_envs, registry_episodes);
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
