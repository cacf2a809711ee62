// Exercises the installed command surface through real processes: exit
// codes, usage text, and the files each subcommand leaves behind.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "preflab/common.hpp"
#include "preflab/envs.hpp"

using namespace preflab;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::string& args) {
  const std::string out_path = "tmp_cli_stdout.txt";
  const std::string err_path = "tmp_cli_stderr.txt";
  const std::string cmd =
      std::string(PREFLAB_CLI) + " " + args + " > " + out_path + " 2> " + err_path;
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  std::remove(out_path.c_str());
  std::remove(err_path.c_str());
  return r;
}

// Every knob small enough that a full run takes about a second.
const char* kTinyLease =
    " --set run.n_iter=40 --set run.eval_every=20 --set run.eval_episodes=5"
    " --set data.offline_size=300 --set data.n_labeled=4"
    " --set dynamics.members=2 --set dynamics.elites=1"
    " --set dynamics.epochs=2 --set dynamics.hidden=8"
    " --set reward.pretrain_steps=10 --set reward.update_steps=3"
    " --set reward.hidden=8 --set reward.members=2"
    " --set rollout.freq=10 --set rollout.pairs=8"
    " --set rollout.buffer_capacity=16";

std::string src_path(const std::string& rel) {
  return std::string(PREFLAB_SOURCE_DIR) + "/" + rel;
}

}  // namespace

TEST_CASE("cli rejects bad invocations with usage text and exit 1") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("--help").out.find("Usage") != std::string::npos);

  const CliResult none = run_cli("");
  CHECK(none.exit_code == 1);

  const CliResult bogus = run_cli("definitely-not-a-command");
  CHECK(bogus.exit_code == 1);

  const CliResult flag = run_cli("train --bogus-flag 3");
  CHECK(flag.exit_code == 1);
  CHECK((flag.err + flag.out).find("--help") != std::string::npos);

  const CliResult badset = run_cli("train --set run.bogus=1");
  CHECK(badset.exit_code == 1);
  CHECK(badset.err.find("error:") != std::string::npos);
}

TEST_CASE("cli registry subcommand writes loadable anchors") {
  fs::remove_all("tmp_cli_registry");
  ensure_dir("tmp_cli_registry");
  const CliResult r = run_cli(
      "registry --seed 4 --envs chainwalk --episodes 8"
      " --set 'run.registry=\"tmp_cli_registry/reg.json\"'");
  CHECK(r.exit_code == 0);
  const envs::Registry reg = envs::load_registry("tmp_cli_registry/reg.json");
  REQUIRE(reg.anchors.count("chainwalk") == 1);
  CHECK(reg.anchors.at("chainwalk").episodes == 8);
  CHECK(reg.anchors.at("chainwalk").j_expert >
        reg.anchors.at("chainwalk").j_random);
  fs::remove_all("tmp_cli_registry");
}

TEST_CASE("cli train produces a manifest carrying the requested seed") {
  fs::remove_all("tmp_cli_train");
  ensure_dir("tmp_cli_train");
  run_cli(
      "registry --seed 4 --envs chainwalk --episodes 20"
      " --set 'run.registry=\"tmp_cli_train/reg.json\"'");

  const CliResult r = run_cli(
      "train --config " + src_path("configs/lease_chainwalk.toml") +
      " --seed 7 --out tmp_cli_train" +
      " --set 'run.registry=\"tmp_cli_train/reg.json\"'" + kTinyLease);
  INFO(r.err);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("chainwalk-lease-s7") != std::string::npos);

  const auto m = nlohmann::json::parse(
      read_file("tmp_cli_train/chainwalk/lease/s7/manifest.json"));
  CHECK(m.at("seed").get<uint64_t>() == 7);
  CHECK(m.at("status") == "complete");

  // the evaluate and report commands accept what train produced
  const CliResult ev = run_cli(
      "evaluate --policy tmp_cli_train/chainwalk/lease/s7/policy.ckpt"
      " --env chainwalk --episodes 5"
      " --set 'run.registry=\"tmp_cli_train/reg.json\"'");
  CHECK(ev.exit_code == 0);
  CHECK(ev.out.find("J = ") != std::string::npos);
  CHECK(ev.out.find("normalized score = ") != std::string::npos);

  const CliResult rep = run_cli("report --runs tmp_cli_train");
  CHECK(rep.exit_code == 0);
  CHECK(rep.out.find("chainwalk") != std::string::npos);
  fs::remove_all("tmp_cli_train");
}

TEST_CASE("cli report over zero runs exits 1 and says so") {
  fs::remove_all("tmp_cli_none");
  ensure_dir("tmp_cli_none");
  const CliResult r = run_cli("report --runs tmp_cli_none");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("no runs found") != std::string::npos);
  fs::remove_all("tmp_cli_none");
}

TEST_CASE("cli sweep emits one run directory per value") {
  fs::remove_all("tmp_cli_sweep");
  ensure_dir("tmp_cli_sweep");
  run_cli(
      "registry --seed 4 --envs chainwalk --episodes 20"
      " --set 'run.registry=\"tmp_cli_sweep/reg.json\"'");
  const CliResult r = run_cli(
      "sweep --env chainwalk --variant fewer --out tmp_cli_sweep"
      " --param data.n_labeled --values 4,6 --seeds 1" +
      std::string(kTinyLease) +
      " --set 'run.registry=\"tmp_cli_sweep/reg.json\"'");
  INFO(r.err);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(
      "tmp_cli_sweep/data.n_labeled=4/chainwalk/fewer/s1/manifest.json"));
  CHECK(fs::exists(
      "tmp_cli_sweep/data.n_labeled=6/chainwalk/fewer/s1/manifest.json"));
  const auto m4 = nlohmann::json::parse(read_file(
      "tmp_cli_sweep/data.n_labeled=4/chainwalk/fewer/s1/manifest.json"));
  const auto m6 = nlohmann::json::parse(read_file(
      "tmp_cli_sweep/data.n_labeled=6/chainwalk/fewer/s1/manifest.json"));
  CHECK(m4.at("n_labeled").get<int>() == 4);
  CHECK(m6.at("n_labeled").get<int>() == 6);
  fs::remove_all("tmp_cli_sweep");
}
