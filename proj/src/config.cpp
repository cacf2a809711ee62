#include "preflab/config.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>

namespace preflab::config {

namespace {

enum class Kind { kInt, kDouble, kString, kSeed };

struct FieldDef {
  const char* section;
  const char* key;
  Kind kind;
  int64_t RunConfig::*i = nullptr;
  double RunConfig::*d = nullptr;
  std::string RunConfig::*s = nullptr;
  uint64_t RunConfig::*u = nullptr;
};

FieldDef fi(const char* sec, const char* key, int64_t RunConfig::*p) {
  FieldDef f{sec, key, Kind::kInt};
  f.i = p;
  return f;
}
FieldDef fd(const char* sec, const char* key, double RunConfig::*p) {
  FieldDef f{sec, key, Kind::kDouble};
  f.d = p;
  return f;
}
FieldDef fs(const char* sec, const char* key, std::string RunConfig::*p) {
  FieldDef f{sec, key, Kind::kString};
  f.s = p;
  return f;
}
FieldDef fu(const char* sec, const char* key, uint64_t RunConfig::*p) {
  FieldDef f{sec, key, Kind::kSeed};
  f.u = p;
  return f;
}

const std::vector<FieldDef>& fields() {
  static const std::vector<FieldDef> defs = {
      fs("run", "env", &RunConfig::env),
      fs("run", "variant", &RunConfig::variant),
      fu("run", "seed", &RunConfig::seed),
      fi("run", "n_iter", &RunConfig::n_iter),
      fi("run", "eval_every", &RunConfig::eval_every),
      fi("run", "eval_episodes", &RunConfig::eval_episodes),
      fs("run", "out_dir", &RunConfig::out_dir),
      fs("run", "registry", &RunConfig::registry),

      fs("data", "behavior", &RunConfig::behavior),
      fi("data", "offline_size", &RunConfig::offline_size),
      fi("data", "n_labeled", &RunConfig::n_labeled),
      fi("data", "segment_len", &RunConfig::segment_len),
      fs("data", "labeler", &RunConfig::labeler),
      fd("data", "label_beta", &RunConfig::label_beta),

      fi("dynamics", "members", &RunConfig::dyn_members),
      fi("dynamics", "elites", &RunConfig::dyn_elites),
      fi("dynamics", "hidden", &RunConfig::dyn_hidden),
      fi("dynamics", "depth", &RunConfig::dyn_depth),
      fd("dynamics", "lr", &RunConfig::dyn_lr),
      fi("dynamics", "batch", &RunConfig::dyn_batch),
      fi("dynamics", "epochs", &RunConfig::dyn_epochs),
      fi("dynamics", "patience", &RunConfig::dyn_patience),

      fi("reward", "members", &RunConfig::rew_members),
      fi("reward", "hidden", &RunConfig::rew_hidden),
      fi("reward", "depth", &RunConfig::rew_depth),
      fd("reward", "lr", &RunConfig::rew_lr),
      fi("reward", "pretrain_steps", &RunConfig::pretrain_steps),
      fi("reward", "pretrain_batch", &RunConfig::pretrain_batch),
      fi("reward", "update_steps", &RunConfig::update_steps),
      fi("reward", "batch_labeled", &RunConfig::batch_labeled),
      fi("reward", "batch_unlabeled", &RunConfig::batch_unlabeled),
      fd("reward", "kappa_p", &RunConfig::kappa_p),
      fd("reward", "kappa_tau", &RunConfig::kappa_tau),

      fi("rollout", "freq", &RunConfig::rollout_freq),
      fi("rollout", "pairs", &RunConfig::rollout_pairs),
      fi("rollout", "buffer_capacity", &RunConfig::buffer_capacity),
      fd("rollout", "eps", &RunConfig::rollout_eps),

      fs("policy", "algo", &RunConfig::algo),
      fd("policy", "lr", &RunConfig::pol_lr),
      fd("policy", "cql_alpha", &RunConfig::cql_alpha),
      fd("policy", "cql_temp", &RunConfig::cql_temp),
      fd("policy", "iql_expectile", &RunConfig::iql_expectile),
      fd("policy", "iql_beta", &RunConfig::iql_beta),
      fi("policy", "hidden", &RunConfig::pol_hidden),
      fi("policy", "depth", &RunConfig::pol_depth),
      fi("policy", "batch", &RunConfig::pol_batch),
  };
  return defs;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Strips a trailing comment that starts outside of quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

void set_field(RunConfig& cfg, const FieldDef& f, const std::string& raw_in) {
  const std::string raw = trim(raw_in);
  if (raw.empty())
    throw ContractError(std::string("empty value for ") + f.section + "." + f.key);
  switch (f.kind) {
    case Kind::kInt:
      cfg.*(f.i) = parse_long(raw);
      break;
    case Kind::kDouble:
      cfg.*(f.d) = parse_double(raw);
      break;
    case Kind::kSeed: {
      uint64_t v = 0;
      const auto rc = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (rc.ec != std::errc() || rc.ptr != raw.data() + raw.size())
        throw ContractError(std::string("bad unsigned value for ") + f.section +
                            "." + f.key + ": " + raw);
      cfg.*(f.u) = v;
      break;
    }
    case Kind::kString: {
      if (raw.size() < 2 || raw.front() != '"' || raw.back() != '"')
        throw ContractError(std::string(f.section) + "." + f.key +
                            " must be a quoted string, got: " + raw);
      const std::string inner = raw.substr(1, raw.size() - 2);
      if (inner.find('"') != std::string::npos)
        throw ContractError(std::string(f.section) + "." + f.key +
                            " contains an embedded quote");
      cfg.*(f.s) = inner;
      break;
    }
  }
}

const FieldDef& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (section == f.section && key == f.key) return f;
  throw ContractError("unknown config key " + section + "." + key);
}

std::string field_value(const RunConfig& cfg, const FieldDef& f) {
  switch (f.kind) {
    case Kind::kInt:
      return std::to_string(cfg.*(f.i));
    case Kind::kDouble:
      return fmt_double(cfg.*(f.d));
    case Kind::kSeed:
      return std::to_string(cfg.*(f.u));
    case Kind::kString:
      return "\"" + cfg.*(f.s) + "\"";
  }
  throw ContractError("unreachable config kind");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  static const std::set<std::string> known_sections = {
      "run", "data", "dynamics", "reward", "rollout", "policy"};

  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = trim(strip_comment(text.substr(pos, end - pos)));
    pos = end + 1;
    ++line_no;
    if (line.empty()) {
      if (pos > text.size()) break;
      continue;
    }

    if (line.front() == '[') {
      if (line.back() != ']')
        throw ContractError("config line " + std::to_string(line_no) +
                            ": malformed section header: " + line);
      section = trim(line.substr(1, line.size() - 2));
      if (!known_sections.count(section))
        throw ContractError("config line " + std::to_string(line_no) +
                            ": unknown section [" + section + "]");
      continue;
    }

    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(line_no) +
                          ": expected key = value, got: " + line);
    if (section.empty())
      throw ContractError("config line " + std::to_string(line_no) +
                          ": assignment before any [section]");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = line.substr(eq + 1);
    const FieldDef& f = find_field(section, key);
    const std::string full = section + "." + key;
    if (!seen.insert(full).second)
      throw ContractError("config line " + std::to_string(line_no) +
                          ": duplicate assignment of " + full);
    set_field(cfg, f, value);
    if (pos > text.size()) break;
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  return parse_config(read_file(path));
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ContractError("override must look like section.key=value, got: " +
                        assignment);
  const std::string path = trim(assignment.substr(0, eq));
  const size_t dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size())
    throw ContractError("override must look like section.key=value, got: " +
                        assignment);
  const FieldDef& f = find_field(path.substr(0, dot), path.substr(dot + 1));
  set_field(cfg, f, assignment.substr(eq + 1));
}

std::string canonical_config(const RunConfig& cfg) {
  std::map<std::string, std::vector<std::string>> by_section;
  for (const auto& f : fields())
    by_section[f.section].push_back(std::string(f.key) + " = " +
                                    field_value(cfg, f));
  std::string out;
  for (auto& [section, lines] : by_section) {
    out += "[" + section + "]\n";
    std::sort(lines.begin(), lines.end());
    for (const auto& l : lines) out += l + "\n";
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  return sha256_hex(canonical_config(cfg));
}

void validate(const RunConfig& cfg) {
  auto positive = [](int64_t v, const char* what) {
    if (v < 1)
      throw ContractError(std::string(what) + " must be positive, got " +
                          std::to_string(v));
  };
  static const std::set<std::string> variants = {"lease", "fewer", "fresh",
                                                 "fulldata"};
  if (!variants.count(cfg.variant))
    throw ContractError("unknown variant: " + cfg.variant);
  if (cfg.algo != "cql" && cfg.algo != "iql")
    throw ContractError("unknown policy algo: " + cfg.algo);
  positive(cfg.n_iter, "run.n_iter");
  positive(cfg.eval_every, "run.eval_every");
  positive(cfg.eval_episodes, "run.eval_episodes");
  positive(cfg.offline_size, "data.offline_size");
  positive(cfg.n_labeled, "data.n_labeled");
  positive(cfg.segment_len, "data.segment_len");
  positive(cfg.dyn_members, "dynamics.members");
  positive(cfg.rew_members, "reward.members");
  positive(cfg.pretrain_steps, "reward.pretrain_steps");
  positive(cfg.update_steps, "reward.update_steps");
  positive(cfg.batch_labeled, "reward.batch_labeled");
  positive(cfg.batch_unlabeled, "reward.batch_unlabeled");
  positive(cfg.rollout_freq, "rollout.freq");
  positive(cfg.rollout_pairs, "rollout.pairs");
  positive(cfg.buffer_capacity, "rollout.buffer_capacity");
  positive(cfg.pol_batch, "policy.batch");
  if (cfg.dyn_elites < 1 || cfg.dyn_elites > cfg.dyn_members)
    throw ContractError("dynamics.elites must be in [1, dynamics.members]");
  if (cfg.kappa_p < 0.5 || cfg.kappa_p >= 1.0)
    throw ContractError("reward.kappa_p must be in [0.5, 1)");
  if (cfg.kappa_tau <= 0.0 || cfg.kappa_tau > 0.5)
    throw ContractError("reward.kappa_tau must be in (0, 0.5]");
  if (cfg.rollout_eps < 0.0 || cfg.rollout_eps > 1.0)
    throw ContractError("rollout.eps must be in [0, 1]");
  if (cfg.labeler != "ground_truth" && cfg.labeler != "noisy_bt")
    throw ContractError("unknown labeler: " + cfg.labeler);
  if (cfg.buffer_capacity < cfg.rollout_pairs)
    throw ContractError("rollout.buffer_capacity must hold at least one rollout");
}

}  // namespace preflab::config
