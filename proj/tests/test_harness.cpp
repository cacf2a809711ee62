#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "preflab/common.hpp"
#include "preflab/config.hpp"
#include "preflab/datasets.hpp"
#include "preflab/diagnostics.hpp"
#include "preflab/envs.hpp"
#include "preflab/harness.hpp"

using namespace preflab;
using config::RunConfig;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t end = s.find(sep, pos);
    if (end == std::string::npos) end = s.size();
    out.push_back(s.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& line : split(read_file(path), '\n'))
    if (!line.empty()) rows.push_back(split(line, ','));
  return rows;
}

void write_test_registry(const std::string& path) {
  envs::Registry reg;
  reg.anchors["chainwalk"] = {-1.0, 4.0, 500, 7};
  reg.anchors["gridnav"] = {-2.0, 6.0, 500, 7};
  reg.anchors["pointmass"] = {-3.0, 2.0, 500, 7};
  envs::save_registry(path, reg);
}

// Small enough to finish in well under a second, big enough to exercise
// every event in the loop: 4 rollouts, 3 reward updates, 2 evals.
RunConfig tiny_config(const std::string& out_dir) {
  RunConfig c;
  c.env = "chainwalk";
  c.variant = "lease";
  c.seed = 11;
  c.n_iter = 20;
  c.eval_every = 10;
  c.eval_episodes = 5;
  c.out_dir = out_dir;
  c.registry = out_dir + "/registry.json";
  c.behavior = "medium";
  c.offline_size = 400;
  c.n_labeled = 6;
  c.segment_len = 4;
  c.dyn_members = 2;
  c.dyn_elites = 1;
  c.dyn_hidden = 8;
  c.dyn_depth = 1;
  c.dyn_batch = 128;
  c.dyn_epochs = 3;
  c.dyn_patience = 2;
  c.rew_members = 2;
  c.rew_hidden = 8;
  c.rew_depth = 1;
  c.pretrain_steps = 25;
  c.pretrain_batch = 8;
  c.update_steps = 5;
  c.batch_labeled = 8;
  c.batch_unlabeled = 16;
  c.rollout_freq = 5;
  c.rollout_pairs = 8;
  c.buffer_capacity = 16;
  c.algo = "cql";
  c.pol_batch = 32;
  return c;
}

RunConfig fresh_dir_config(const std::string& out_dir) {
  fs::remove_all(out_dir);
  ensure_dir(out_dir);
  write_test_registry(out_dir + "/registry.json");
  return tiny_config(out_dir);
}

}  // namespace

TEST_CASE("config serialization is canonical and reparses losslessly") {
  RunConfig cfg;
  cfg.env = "gridnav";
  cfg.seed = 12345;
  cfg.kappa_p = 0.9;
  cfg.dyn_lr = 2.5e-4;

  const std::string canon = config::canonical_config(cfg);
  const RunConfig back = config::parse_config(canon);
  CHECK(config::canonical_config(back) == canon);
  CHECK(config::config_hash(back) == config::config_hash(cfg));
  CHECK(config::config_hash(cfg).size() == 64);

  // sections sorted, keys sorted within each section
  for (const char* s : {"[data]", "[dynamics]", "[policy]", "[reward]",
                        "[rollout]", "[run]"})
    CHECK(canon.find(s) != std::string::npos);
  const auto lines = split(canon, '\n');
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i].front() == '[' ||
        lines[i - 1].front() == '[')
      continue;
    CHECK(lines[i - 1] < lines[i]);
  }

  RunConfig other = cfg;
  other.seed = 12346;
  CHECK(config::config_hash(other) != config::config_hash(cfg));
}

TEST_CASE("config files accept comments and quoted strings") {
  const std::string text =
      "# run settings\n"
      "[run]\n"
      "env = \"gridnav\"  # inline comment\n"
      "seed = 9\n"
      "n_iter = 123\n"
      "\n"
      "[reward]\n"
      "kappa_p = 0.9\n";
  const RunConfig cfg = config::parse_config(text);
  CHECK(cfg.env == "gridnav");
  CHECK(cfg.seed == 9);
  CHECK(cfg.n_iter == 123);
  CHECK(cfg.kappa_p == 0.9);
  CHECK(cfg.variant == "lease");  // untouched fields keep defaults
  CHECK(cfg.rollout_freq == 1000);
}

TEST_CASE("config parsing rejects malformed input") {
  CHECK_THROWS_AS(config::parse_config("[foo]\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[run]\nwhat = 3\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[run]\nseed = 1\nseed = 2\n"),
                  ContractError);
  CHECK_THROWS_AS(config::parse_config("seed = 3\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[run]\nenv = chainwalk\n"),
                  ContractError);
  CHECK_THROWS_AS(config::parse_config("[run]\nn_iter = abc\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[run\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[run]\nseed 3\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[run]\nseed =\n"), ContractError);
  CHECK_THROWS_AS(config::parse_config("[data]\nlabeler = \"a\"b\"\n"),
                  ContractError);
}

TEST_CASE("overrides rewrite individual keys") {
  RunConfig cfg;
  config::apply_override(cfg, "run.seed=77");
  config::apply_override(cfg, "reward.kappa_tau=0.1");
  config::apply_override(cfg, "run.env=\"pointmass\"");
  CHECK(cfg.seed == 77);
  CHECK(cfg.kappa_tau == 0.1);
  CHECK(cfg.env == "pointmass");

  CHECK_THROWS_AS(config::apply_override(cfg, "run.seed"), ContractError);
  CHECK_THROWS_AS(config::apply_override(cfg, "seed=3"), ContractError);
  CHECK_THROWS_AS(config::apply_override(cfg, "run.bogus=3"), ContractError);
  CHECK_THROWS_AS(config::apply_override(cfg, "run.env=unquoted"),
                  ContractError);
}

TEST_CASE("validate rejects out-of-range settings") {
  CHECK_NOTHROW(config::validate(RunConfig{}));
  auto reject = [](auto&& mutate) {
    RunConfig c;
    mutate(c);
    CHECK_THROWS_AS(config::validate(c), ContractError);
  };
  reject([](RunConfig& c) { c.variant = "ablate"; });
  reject([](RunConfig& c) { c.algo = "sac"; });
  reject([](RunConfig& c) { c.n_iter = 0; });
  reject([](RunConfig& c) { c.kappa_p = 0.4; });
  reject([](RunConfig& c) { c.kappa_p = 1.0; });
  reject([](RunConfig& c) { c.kappa_tau = 0.0; });
  reject([](RunConfig& c) { c.kappa_tau = 0.6; });
  reject([](RunConfig& c) { c.dyn_elites = 0; });
  reject([](RunConfig& c) { c.dyn_elites = c.dyn_members + 1; });
  reject([](RunConfig& c) { c.rollout_eps = -0.1; });
  reject([](RunConfig& c) { c.rollout_eps = 1.1; });
  reject([](RunConfig& c) { c.labeler = "oracle"; });
  reject([](RunConfig& c) { c.buffer_capacity = c.rollout_pairs - 1; });
}

TEST_CASE("run ids and directories derive from config and environment") {
  RunConfig cfg;
  cfg.env = "gridnav";
  cfg.variant = "fresh";
  cfg.seed = 3;
  cfg.out_dir = "some/base";
  CHECK(harness::run_id_for(cfg) == "gridnav-fresh-s3");
  CHECK(harness::run_dir_for(cfg) == "some/base/gridnav/fresh/s3");
  CHECK(harness::resolve_out_base(cfg) == "some/base");

  setenv("PREFLAB_OUT", "elsewhere", 1);
  CHECK(harness::resolve_out_base(cfg) == "elsewhere");
  setenv("PREFLAB_OUT", "", 1);
  CHECK(harness::resolve_out_base(cfg) == "some/base");
  unsetenv("PREFLAB_OUT");
}

TEST_CASE("a small end-to-end run completes with a full artifact trail") {
  const std::string base = "tmp_harness_run";
  const RunConfig cfg = fresh_dir_config(base);

  const harness::RunResult res = harness::run_lease(cfg);
  CHECK(res.run_id == "chainwalk-lease-s11");
  CHECK(res.run_dir == base + "/chainwalk/lease/s11");
  // rollouts at iters 5,10,15,20; the 16-pair buffer is full from iter 10 on
  CHECK(res.rollouts == 4);
  CHECK(res.reward_updates == 3);
  REQUIRE(res.eval_norm.size() == 2);
  CHECK(res.eval_j.size() == 2);
  CHECK(res.score == doctest::Approx(0.5 * (res.eval_norm[0] + res.eval_norm[1])));

  for (const char* f :
       {"manifest.json", "metrics.csv", "evaluations.csv", "reward_updates.csv",
        "labeled_pairs.jsonl", "policy.ckpt", "reward_scatter.csv",
        "reward/meta.json", "dynamics/meta.json"})
    CHECK(fs::exists(res.run_dir + "/" + f));

  const json m = json::parse(read_file(res.run_dir + "/manifest.json"));
  CHECK(m.at("format") == "preflab.manifest");
  CHECK(m.at("status") == "complete");
  CHECK(m.at("run_id") == res.run_id);
  CHECK(m.at("env") == "chainwalk");
  CHECK(m.at("variant") == "lease");
  CHECK(m.at("seed").get<uint64_t>() == 11);
  CHECK(m.at("config_hash") == config::config_hash(cfg));
  CHECK(m.at("n_labeled").get<int>() == 6);
  CHECK(m.at("score").get<double>() == res.score);
  CHECK(m.at("evals").size() == 2);
  CHECK(m.at("reward_updates").get<int>() == 3);
  CHECK(m.at("rollouts").get<int>() == 4);
  CHECK(m.contains("pearson_reward_truth"));
  CHECK(m.contains("visitation_ratio_defined"));
  CHECK(m.contains("concentrability_defined"));
  CHECK(m.contains("concentrability"));
  CHECK(m.at("concentrability_renorm_mu").get<double>() > 0.0);
  CHECK(m.at("concentrability_renorm_mu").get<double>() <= 1.0);
  CHECK(m.at("dynamics_val_nll").size() == 2);

  for (const char* s :
       {"env", "offline-data", "labeled-pairs", "labeler", "dynamics",
        "reward-init", "pretrain", "policy-init", "policy-batches", "rollout",
        "reward-update", "eval-env", "eval-policy", "reward-probe"})
    CHECK(m.at("stage_seeds").contains(s));
  CHECK(m.at("stage_seeds").at("env").get<uint64_t>() ==
        derive_seed(11, "env", 0));

  for (const auto& [name, art] : m.at("artifacts").items()) {
    const std::string path = art.at("path").get<std::string>();
    REQUIRE(fs::exists(path));
    CHECK(art.at("sha256").get<std::string>() == sha256_hex(read_file(path)));
  }

  const auto evals = read_csv(res.run_dir + "/evaluations.csv");
  REQUIRE(evals.size() == 3);
  CHECK(evals[0][0] == "iter");
  CHECK(evals[1][0] == "10");
  CHECK(evals[2][0] == "20");
  CHECK(parse_double(evals[1][3]) == doctest::Approx(res.eval_norm[0]));

  const auto upds = read_csv(res.run_dir + "/reward_updates.csv");
  REQUIRE(upds.size() == 4);
  CHECK(upds[0][2] == "n_buffer");
  CHECK(upds[1][0] == "10");
  CHECK(upds[2][0] == "15");
  CHECK(upds[3][0] == "20");
  for (size_t i = 1; i < upds.size(); ++i) {
    CHECK(upds[i][2] == "16");
    CHECK(parse_long(upds[i][4]) >= parse_long("0"));
    CHECK(parse_long(upds[i][4]) <= 16);
  }

  const diag::MetricsLog log = diag::MetricsLog::load(res.run_dir + "/metrics.csv");
  REQUIRE(!log.rows().empty());
  bool saw_score = false;
  for (const auto& r : log.rows()) {
    CHECK(r.run_id == res.run_id);
    CHECK(r.config_hash == config::config_hash(cfg));
    if (r.metric == "score_final") {
      saw_score = true;
      CHECK(r.value == res.score);
    }
  }
  CHECK(saw_score);

  const auto pairs = data::load_pairs(res.run_dir + "/labeled_pairs.jsonl");
  REQUIRE(pairs.size() == 6);
  for (const auto& p : pairs) CHECK((p.y == 0 || p.y == 1));
}

TEST_CASE("same-seed runs are byte-identical and different seeds are not") {
  // Identical configs, output redirected per run: the redirect must not
  // leak into the run's identity or its files.
  fs::remove_all("tmp_harness_det_reg");
  ensure_dir("tmp_harness_det_reg");
  write_test_registry("tmp_harness_det_reg/registry.json");
  RunConfig a = tiny_config("tmp_harness_det_unused");
  a.registry = "tmp_harness_det_reg/registry.json";

  fs::remove_all("tmp_harness_det_a");
  fs::remove_all("tmp_harness_det_b");
  setenv("PREFLAB_OUT", "tmp_harness_det_a", 1);
  const auto ra = harness::run_lease(a);
  setenv("PREFLAB_OUT", "tmp_harness_det_b", 1);
  const auto rb = harness::run_lease(a);
  unsetenv("PREFLAB_OUT");
  CHECK(ra.run_dir == "tmp_harness_det_a/chainwalk/lease/s11");
  CHECK(rb.run_dir == "tmp_harness_det_b/chainwalk/lease/s11");
  CHECK(read_file(ra.run_dir + "/metrics.csv") ==
        read_file(rb.run_dir + "/metrics.csv"));
  CHECK(read_file(ra.run_dir + "/evaluations.csv") ==
        read_file(rb.run_dir + "/evaluations.csv"));
  CHECK(read_file(ra.run_dir + "/reward_updates.csv") ==
        read_file(rb.run_dir + "/reward_updates.csv"));
  CHECK(read_file(ra.run_dir + "/labeled_pairs.jsonl") ==
        read_file(rb.run_dir + "/labeled_pairs.jsonl"));
  CHECK(ra.score == rb.score);

  const json ma = json::parse(read_file(ra.run_dir + "/manifest.json"));
  const json mb = json::parse(read_file(rb.run_dir + "/manifest.json"));
  for (const auto& [name, art] : ma.at("artifacts").items())
    CHECK(art.at("sha256") == mb.at("artifacts").at(name).at("sha256"));

  RunConfig c = a;
  c.seed = 12;
  fs::remove_all("tmp_harness_det_c");
  setenv("PREFLAB_OUT", "tmp_harness_det_c", 1);
  const auto rc = harness::run_lease(c);
  unsetenv("PREFLAB_OUT");
  CHECK(read_file(ra.run_dir + "/metrics.csv") !=
        read_file(rc.run_dir + "/metrics.csv"));
}

TEST_CASE("variants change the data budget and the screening behavior") {
  RunConfig fewer = fresh_dir_config("tmp_harness_variants");
  fewer.variant = "fewer";
  const auto rf = harness::run_lease(fewer);
  CHECK(rf.rollouts == 0);
  CHECK(rf.reward_updates == 0);
  CHECK(!fs::exists(rf.run_dir + "/dynamics"));
  const json mf = json::parse(read_file(rf.run_dir + "/manifest.json"));
  CHECK(!mf.contains("dynamics_val_nll"));
  CHECK(read_csv(rf.run_dir + "/reward_updates.csv").size() == 1);

  RunConfig full = tiny_config("tmp_harness_variants");
  full.variant = "fulldata";
  const auto rl = harness::run_lease(full);
  const json ml = json::parse(read_file(rl.run_dir + "/manifest.json"));
  const data::Dataset d = data::build_offline_dataset(
      "chainwalk", "medium", 400, derive_seed(full.seed, "offline-data", 0));
  const int want = std::min<int>(2000, data::count_disjoint_windows(d, 4));
  CHECK(ml.at("n_labeled").get<int>() == want);
  CHECK(want > 6);
  CHECK(data::load_pairs(rl.run_dir + "/labeled_pairs.jsonl").size() ==
        static_cast<size_t>(want));

  RunConfig fresh = tiny_config("tmp_harness_variants");
  fresh.variant = "fresh";
  const auto rr = harness::run_lease(fresh);
  CHECK(rr.reward_updates == 3);
  const auto upds = read_csv(rr.run_dir + "/reward_updates.csv");
  REQUIRE(upds.size() == 4);
  for (size_t i = 1; i < upds.size(); ++i) {
    CHECK(upds[i][4] == upds[i][2]);  // every buffered pair is used
    CHECK(parse_long(upds[i][3]) <= parse_long(upds[i][4]));
  }
}

TEST_CASE("failures mark the manifest invalid at the failing stage") {
  RunConfig cfg = fresh_dir_config("tmp_harness_fail");
  cfg.registry = "tmp_harness_fail/no_such_registry.json";
  CHECK_THROWS_AS(harness::run_lease(cfg), ContractError);
  json m = json::parse(read_file(harness::run_dir_for(cfg) + "/manifest.json"));
  CHECK(m.at("status") == "invalid:setup");

  RunConfig bad = fresh_dir_config("tmp_harness_fail");
  bad.behavior = "bogus";
  CHECK_THROWS_AS(harness::run_lease(bad), ContractError);
  m = json::parse(read_file(harness::run_dir_for(bad) + "/manifest.json"));
  CHECK(m.at("status") == "invalid:offline-data");
}

TEST_CASE("sweep covers the seed grid and report formats completed runs") {
  RunConfig base = fresh_dir_config("tmp_harness_report");
  base.variant = "fewer";
  const auto results = harness::sweep(base, {1, 2}, {});
  REQUIRE(results.size() == 2);
  CHECK(results[0].run_id == "chainwalk-fewer-s1");
  CHECK(results[1].run_id == "chainwalk-fewer-s2");

  const std::string table = harness::report("tmp_harness_report");
  CHECK(table.find("chainwalk") != std::string::npos);
  CHECK(table.find("fewer") != std::string::npos);
  CHECK(table.find("(2)") != std::string::npos);

  CHECK_THROWS_AS(harness::sweep(base, {}, {}), ContractError);
  fs::remove_all("tmp_harness_empty");
  ensure_dir("tmp_harness_empty");
  CHECK_THROWS_AS(harness::report("tmp_harness_empty"), ContractError);
  CHECK_THROWS_AS(harness::report("tmp_harness_missing_dir"), ContractError);
}
