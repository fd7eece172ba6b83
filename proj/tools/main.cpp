// sysmoe command-line entry point. Every subcommand resolves its settings from
// an optional INI file (--config) overridden by flags, writes the resolved
// settings to <out>/resolved_config.ini and then runs. Rerunning with
// --config <out>/resolved_config.ini reproduces the artifacts exactly.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "sysmoe/data.hpp"
#include "sysmoe/eval.hpp"
#include "sysmoe/model.hpp"
#include "sysmoe/planner.hpp"
#include "sysmoe/sim.hpp"
#include "sysmoe/structure.hpp"
#include "sysmoe/training.hpp"

namespace fs = std::filesystem;
using namespace sysmoe;

namespace {

// Bad flags, bad config files and invalid settings: exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Section = std::map<std::string, std::string>;
using Sections = std::map<std::string, Section>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

Sections read_ini(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  Sections out;
  std::string line, section;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw UsageError(path + ":" + std::to_string(n) + ": bad section header");
      section = trim(t.substr(1, t.size() - 2));
      out[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(n) + ": expected 'key = value', got '" + t + "'");
    if (section.empty()) throw UsageError(path + ":" + std::to_string(n) + ": key outside a [section]");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw UsageError(path + ":" + std::to_string(n) + ": empty key");
    out[section][key] = trim(t.substr(eq + 1));
  }
  return out;
}

void write_ini(const std::string& path, const Sections& sections) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  bool first = true;
  for (const auto& [name, kv] : sections) {
    if (kv.empty()) continue;
    out << (first ? "" : "\n") << '[' << name << "]\n";
    for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
    first = false;
  }
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Settings lookup that records every value it hands out (defaults included),
// so the echo lists everything a run depended on.
class Settings {
 public:
  explicit Settings(Sections s) : raw_(std::move(s)) {}

  std::string str(const std::string& sec, const std::string& key, const std::string& def) {
    used_[sec].insert(key);
    auto& slot = raw_[sec];
    auto it = slot.find(key);
    if (it == slot.end()) it = slot.emplace(key, def).first;
    resolved_[sec][key] = it->second;
    return it->second;
  }
  std::string required(const std::string& sec, const std::string& key, const std::string& flag) {
    const std::string v = str(sec, key, "");
    if (v.empty()) throw UsageError("missing " + flag + " (or " + sec + "." + key + " in the config file)");
    return v;
  }
  std::size_t size(const std::string& sec, const std::string& key, std::size_t def) {
    const std::string v = str(sec, key, std::to_string(def));
    try {
      std::size_t pos = 0;
      const auto n = std::stoull(v, &pos);
      if (pos != v.size() || v.find('-') != std::string::npos) throw std::invalid_argument("");
      return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
      throw UsageError(sec + "." + key + ": expected a nonnegative integer, got '" + v + "'");
    }
  }
  double number(const std::string& sec, const std::string& key, double def) {
    const std::string v = str(sec, key, fmt(def));
    try {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return x;
    } catch (const std::exception&) {
      throw UsageError(sec + "." + key + ": expected a number, got '" + v + "'");
    }
  }
  bool flag(const std::string& sec, const std::string& key, bool def) {
    const std::string v = str(sec, key, def ? "true" : "false");
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw UsageError(sec + "." + key + ": expected true or false, got '" + v + "'");
  }
  // Hands a whole section to a module parser; the parsed result is echoed.
  Section section(const std::string& sec) {
    whole_.insert(sec);
    return raw_[sec];
  }
  void set_resolved(const std::string& sec, const Section& kv) { resolved_[sec] = kv; }

  // Rejects unknown keys in the sections this command reads. Sections it
  // never touches belong to other commands and are left alone.
  void check_unused() const {
    for (const auto& [sec, kv] : raw_) {
      if (whole_.count(sec)) continue;
      auto it = used_.find(sec);
      if (it == used_.end()) continue;
      for (const auto& [key, value] : kv)
        if (!it->second.count(key)) throw UsageError("unknown setting " + sec + "." + key);
    }
  }
  const Sections& resolved() const { return resolved_; }

 private:
  Sections raw_, resolved_;
  std::map<std::string, std::set<std::string>> used_;
  std::set<std::string> whole_;
};

// A flag bound to a config key; `value` receives the parsed text.
struct Binding {
  std::string flag;
  std::vector<std::string> keys;  // "section.key"
  std::string value;
  CLI::Option* option = nullptr;
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::string config_path, out_dir;
  std::vector<std::unique_ptr<Binding>> bindings;

  void bind(const std::string& flag, std::vector<std::string> keys, const std::string& help) {
    auto b = std::make_unique<Binding>();
    b->flag = flag;
    b->keys = std::move(keys);
    b->option = app->add_option(flag, b->value, help);
    bindings.push_back(std::move(b));
  }
  void bind_switch(const std::string& flag, const std::string& key, const std::string& help) {
    auto b = std::make_unique<Binding>();
    b->flag = flag;
    b->keys = {key};
    b->option = app->add_flag(flag, help);
    bindings.push_back(std::move(b));
  }

  Settings settings() const {
    Sections s = config_path.empty() ? Sections{} : read_ini(config_path);
    for (const auto& b : bindings) {
      if (b->option->count() == 0) continue;
      const std::string value = b->option->get_expected_max() == 0 ? "true" : b->value;
      for (const auto& full : b->keys) {
        const auto dot = full.find('.');
        s[full.substr(0, dot)][full.substr(dot + 1)] = value;
      }
    }
    return Settings(std::move(s));
  }

  // Creates the output directory and writes the echo.
  fs::path start(Settings& s) const {
    s.check_unused();
    fs::path out = out_dir;
    if (out.empty()) {
      const char* root = std::getenv("SYSMOE_OUT_ROOT");
      out = fs::path(root && *root ? root : "runs") / name;
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out.string() + ": " + ec.message());
    write_ini((out / "resolved_config.ini").string(), s.resolved());
    return out;
  }
};

model::ModelConfig resolve_model(Settings& s, const model::ModelConfig& base = {}) {
  auto kv = base.to_map();
  for (const auto& [k, v] : s.section("model")) kv[k] = v;
  const auto config = model::ModelConfig::from_map(kv);
  s.set_resolved("model", config.to_map());
  return config;
}

train::TrainConfig resolve_train(Settings& s) {
  const auto config = train::TrainConfig::from_map(s.section("train"));
  s.set_resolved("train", config.to_map());
  return config;
}

plan::MPPIConfig resolve_plan(Settings& s) {
  const auto config = plan::MPPIConfig::from_map(s.section("plan"));
  s.set_resolved("plan", config.to_map());
  return config;
}

std::vector<data::TrajectoryEpisode> normalize_all(const std::vector<data::TrajectoryEpisode>& eps,
                                                   const data::StatsTable& stats, std::size_t* clamped = nullptr) {
  std::vector<data::TrajectoryEpisode> out;
  for (const auto& ep : eps) {
    auto r = data::normalize(ep, data::stats_for(stats, ep.system_id));
    if (clamped) *clamped += r.clamped;
    out.push_back(std::move(r.episode));
  }
  return out;
}

struct SplitChoice {
  double train_frac, val_frac;
  std::uint64_t seed;
};

SplitChoice resolve_split(Settings& s) {
  return {s.number("split", "train_frac", 0.8), s.number("split", "val_frac", 0.1), s.size("split", "seed", 0)};
}

std::vector<data::TrajectoryEpisode> pick_split(const std::vector<data::TrajectoryEpisode>& eps,
                                                const SplitChoice& c, const std::string& which) {
  if (which == "all") return eps;
  auto split = data::split_dataset(eps, c.train_frac, c.val_frac, c.seed);
  if (which == "train") return split.train;
  if (which == "val") return split.val;
  if (which == "test") return split.test;
  throw UsageError("unknown split '" + which + "' (train, val, test, all)");
}

// ---------------------------------------------------------------------------
// Subcommands.

int run_gen_data(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string kind = s.str("data", "kind", "linear");
  const std::size_t systems = s.size("data", "systems", 1);
  const std::size_t episodes = s.size("data", "episodes", 8);
  const std::size_t steps = s.size("data", "steps", 64);
  const std::uint64_t seed = s.size("data", "seed", 0);
  const double noise = s.number("data", "noise", 0.0);
  if (kind != "linear" && kind != "pendulum" && kind != "double-integrator" && kind != "multi")
    throw UsageError("unknown --kind '" + kind + "' (linear, pendulum, double-integrator, multi)");
  data::ToyGenParams p;
  if (kind == "pendulum" || kind == "double-integrator") {
    p.init_velocity_range = s.number("data", "init_velocity_range", 0.0);
    p.action_hold = s.size("data", "action_hold", 1);
    if (p.action_hold == 0) throw UsageError("data.action_hold must be at least 1");
  }
  const fs::path out = cmd.start(s);

  std::vector<data::TrajectoryEpisode> eps;
  if (kind == "linear") {
    data::LinearSystem sys;
    sys.a = num::Array({2, 2}, {0.9, 0.0, 0.0, 0.9});
    sys.b = num::Array({2, 2}, {0.1, 0.0, 0.0, 0.1});
    sys.noise_std = noise;
    eps = data::gen_linear_system(sys, episodes, steps, seed);
  } else if (kind == "multi") {
    eps = data::gen_multi_system(systems, episodes, steps, seed);
  } else {
    const sim::EnvParams env;
    eps = kind == "pendulum" ? data::gen_pendulum(p, episodes, steps, env.dt, seed)
                             : data::gen_double_integrator(p, episodes, steps, env.dt, seed);
  }
  data::write_episodes((out / "episodes.jsonl").string(), eps);
  const auto stats = data::compute_stats_table(eps);
  data::write_stats((out / "stats.tsv").string(), stats);
  std::cout << "gen-data kind=" << kind << " seed=" << seed << " episodes=" << eps.size()
            << " systems=" << stats.size() << " steps=" << steps << " out=" << out.string() << '\n';
  return 0;
}

void print_train_summary(const train::TrainResult& r, const eval::RolloutReport& report) {
  std::cout << "steps=" << r.steps << " initial_train_ce=" << r.initial_train_ce
            << " final_train_ce=" << r.final_train_ce << " best_val_ce=" << r.best_val_ce
            << " early_stopped=" << (r.early_stopped ? "true" : "false") << " test_mae=" << report.mae
            << " test_mse=" << report.mse << '\n';
}

int run_train(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string data_path = s.required("run", "data", "--data");
  const SplitChoice split_choice = resolve_split(s);
  const auto mc = resolve_model(s);
  const auto tc = resolve_train(s);
  const fs::path out = cmd.start(s);

  const auto episodes = data::read_episodes(data_path);
  const auto prepared =
      train::prepare(data::split_dataset(episodes, split_choice.train_frac, split_choice.val_frac, split_choice.seed));
  model::SysMoEModel m(mc, tc.seed);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  const auto result = train::train(m, prepared.train, prepared.val, tc, nullptr, &metrics);
  model::save_checkpoint((out / "model.ckpt").string(), result.best, prepared.stats);
  const auto report = eval::evaluate_rollout(result.best, prepared.test);
  eval::write_report((out / "report.tsv").string(), report);
  print_train_summary(result, report);
  return 0;
}

int run_distill(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string data_path = s.required("run", "data", "--data");
  const std::string teacher_path = s.required("run", "teacher", "--teacher");
  const std::uint64_t student_seed = s.size("run", "student_seed", 0);
  const SplitChoice split_choice = resolve_split(s);
  const auto teacher = model::load_checkpoint(teacher_path);
  const auto mc = resolve_model(s, teacher.model.config());
  const auto tc = resolve_train(s);
  const fs::path out = cmd.start(s);

  const auto episodes = data::read_episodes(data_path);
  const auto split = data::split_dataset(episodes, split_choice.train_frac, split_choice.val_frac, split_choice.seed);
  const auto train_set = normalize_all(split.train, teacher.stats);
  const auto val_set = normalize_all(split.val, teacher.stats);
  const auto test_set = normalize_all(split.test, teacher.stats);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  const auto result = train::distill(teacher.model, mc, student_seed, train_set, val_set, tc, &metrics);
  model::save_checkpoint((out / "student.ckpt").string(), result.best, teacher.stats);
  const auto report = eval::evaluate_rollout(result.best, test_set);
  eval::write_report((out / "report.tsv").string(), report);
  const auto teacher_val = train::evaluate_loss(teacher.model, val_set, tc.batch);
  std::cout << "teacher_val_ce=" << teacher_val.ce << ' ';
  print_train_summary(result, report);
  return 0;
}

int run_eval(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string ckpt_path = s.required("run", "checkpoint", "--checkpoint");
  const std::string data_path = s.required("run", "data", "--data");
  const std::string which = s.str("run", "split", "test");
  const std::string decode = s.str("run", "decode", "expectation");
  const SplitChoice split_choice = resolve_split(s);
  if (decode != "expectation" && decode != "argmax" && decode != "both")
    throw UsageError("unknown --decode '" + decode + "' (expectation, argmax, both)");
  const fs::path out = cmd.start(s);

  const auto ckpt = model::load_checkpoint(ckpt_path);
  std::size_t clamped = 0;
  const auto eps = normalize_all(pick_split(data::read_episodes(data_path), split_choice, which), ckpt.stats, &clamped);
  auto run = [&](eval::Decode d, const std::string& file, const std::string& label) {
    auto report = eval::evaluate_rollout(ckpt.model, eps, d);
    eval::write_report((out / file).string(), report);
    std::cout << "decode=" << label << " mae=" << report.mae << " mse=" << report.mse << " count=" << report.count
              << " skipped=" << report.skipped << " normalize_clamped=" << clamped << '\n';
  };
  if (decode != "argmax") run(eval::Decode::expectation, "report.tsv", "expectation");
  if (decode == "argmax") run(eval::Decode::argmax, "report.tsv", "argmax");
  if (decode == "both") run(eval::Decode::argmax, "report_argmax.tsv", "argmax");
  return 0;
}

int run_route_dump(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string ckpt_path = s.required("run", "checkpoint", "--checkpoint");
  const std::string data_path = s.required("run", "data", "--data");
  const std::string which = s.str("run", "split", "all");
  const SplitChoice split_choice = resolve_split(s);
  const fs::path out = cmd.start(s);

  const auto ckpt = model::load_checkpoint(ckpt_path);
  const auto eps = normalize_all(pick_split(data::read_episodes(data_path), split_choice, which), ckpt.stats);
  const auto dump = eval::dump_routing(ckpt.model, eps);
  eval::write_routing((out / "routing.tsv").string(), dump);
  for (std::size_t sys = 0; sys < dump.systems.size(); ++sys)
    for (std::size_t b = 0; b < dump.n_blocks; ++b) {
      std::cout << dump.systems[sys] << " block" << b;
      for (double w : dump.weights[sys][b]) std::cout << ' ' << w;
      std::cout << '\n';
    }
  return 0;
}

int run_scale(const Command& cmd) {
  Settings s = cmd.settings();
  eval::ScalingOptions opt;
  auto sizes = [&](const std::string& key, const std::string& def) {
    std::vector<std::size_t> v;
    for (const auto& item : split_list(s.str("scale", key, def))) {
      try {
        v.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw UsageError("scale." + key + ": bad entry '" + item + "'");
      }
    }
    if (v.empty()) throw UsageError("scale." + key + " is empty");
    return v;
  };
  opt.n_values = sizes("n_values", "1,2,5");
  opt.seeds.clear();
  for (auto v : sizes("seeds", "0")) opt.seeds.push_back(v);
  opt.episodes_per_system = s.size("scale", "episodes_per_system", opt.episodes_per_system);
  opt.steps = s.size("scale", "steps", opt.steps);
  opt.data_seed = s.size("scale", "data_seed", opt.data_seed);
  const auto mc = resolve_model(s);
  const auto tc = resolve_train(s);
  const fs::path out = cmd.start(s);

  const auto rows = eval::scaling_harness(opt, mc, tc, &std::cout);
  eval::write_scaling((out / "scaling.tsv").string(), rows);
  return 0;
}

int run_plan(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string env_name = s.str("run", "env", "double-integrator");
  const std::string oracle_spec = s.str("run", "oracle", "truth");
  const std::string cost_name = s.str("run", "cost", "goal");
  const std::size_t episodes = s.size("run", "episodes", 1);
  const std::size_t steps = s.size("run", "steps", 200);
  const bool sample = s.flag("run", "sample_decode", false);
  const auto mppi = resolve_plan(s);

  sim::EnvParams env;
  try {
    env.kind = sim::parse_env_kind(env_name == "double-integrator" ? "double_integrator" : env_name);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  env.goal = s.number("run", "goal", 0.0);
  plan::CostSpec cost;
  if (cost_name == "goal") {
    cost = env.kind == sim::EnvKind::pendulum ? plan::CostSpec::pendulum_goal(env.goal)
                                              : plan::CostSpec::double_integrator_goal(env.goal);
  } else if (cost_name == "forward_progress") {
    cost.kind = plan::CostKind::forward_progress;
    cost.goal = {env.goal, 0.0};
  } else {
    throw UsageError("unknown --cost '" + cost_name + "' (goal, forward_progress)");
  }
  if (oracle_spec != "truth" && oracle_spec.rfind("model:", 0) != 0)
    throw UsageError("unknown --oracle '" + oracle_spec + "' (truth or model:<checkpoint>)");
  const fs::path out = cmd.start(s);

  std::unique_ptr<plan::RolloutOracle> oracle;
  if (oracle_spec == "truth") {
    oracle = std::make_unique<plan::TruthOracle>(env);
  } else {
    auto ckpt = model::load_checkpoint(oracle_spec.substr(6));
    data::ToyGenParams p;
    p.env = env;
    auto layout = env.kind == sim::EnvKind::pendulum ? data::gen_pendulum(p, 1, 1, env.dt, 0)
                                                     : data::gen_double_integrator(p, 1, 1, env.dt, 0);
    if (ckpt.stats.size() == 1) layout[0].system_id = ckpt.stats.begin()->first;
    oracle = std::make_unique<plan::ModelOracle>(std::move(ckpt.model), std::move(ckpt.stats), layout[0], sample,
                                                 mppi.seed);
  }

  std::ofstream summary(out / "summary.tsv", std::ios::binary);
  summary.precision(17);
  summary << "episode\tenv_seed\ttotal_reward\tfinal_distance\tdiverged\n";
  for (std::size_t e = 0; e < episodes; ++e) {
    plan::MPPIConfig c = mppi;
    c.seed = mppi.seed + e;
    const auto r = plan::run_episode(env, *oracle, c, cost, steps, c.seed);
    std::ofstream trace(out / ("trace_" + std::to_string(e) + ".jsonl"), std::ios::binary);
    plan::write_trace(trace, r);
    const double dist = sim::goal_distance(env, r.states.back());
    summary << e << '\t' << c.seed << '\t' << r.total_reward << '\t' << dist << '\t' << (r.diverged ? 1 : 0) << '\n';
    std::cout << "episode " << e << " reward=" << r.total_reward << " final_distance=" << dist
              << (r.diverged ? " diverged" : "") << '\n';
  }
  return 0;
}

int run_struct_check(const Command& cmd) {
  Settings s = cmd.settings();
  const std::string tree_path = s.required("run", "tree", "--tree");
  const fs::path out = cmd.start(s);

  const auto trees = structure::load_tree_file(tree_path);
  std::ostringstream table;
  table << "object\tbody\tglobal\tpre\tin\tpost\n";
  for (std::size_t o = 0; o < trees.size(); ++o) {
    const auto ranks = structure::traversal_indices(structure::lcrs_convert(trees[o]));
    for (const auto& node : trees[o].nodes) {
      const auto& r = ranks[static_cast<std::size_t>(node.id)];
      table << trees[o].object_name << '\t' << node.name << '\t' << node.id << '\t' << r.pre << '\t' << r.in << '\t'
            << r.post << '\n';
    }
  }
  std::ofstream((out / "struct.tsv").string(), std::ios::binary) << table.str();
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sysmoe: system-aware mixture-of-experts trajectory world model"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help) -> Command& {
    auto c = std::make_unique<Command>();
    c->name = name;
    c->app = app.add_subcommand(name, help);
    c->app->add_option("--config", c->config_path, "INI settings file; flags override its values");
    c->app->add_option("--out", c->out_dir, "Output directory (default $SYSMOE_OUT_ROOT/<command> or runs/<command>)");
    commands.push_back(std::move(c));
    return *commands.back();
  };
  auto add_model_flags = [](Command& c) {
    c.bind("--blocks", {"model.n_blocks"}, "Number of Sys-MoE blocks");
    c.bind("--experts", {"model.n_experts"}, "Experts per block (P)");
    c.bind("--d-model", {"model.d"}, "Model width d");
    c.bind("--bins", {"model.k_bins"}, "Tokenizer bins K");
    c.bind_switch("--dense-ssm", "model.dense_ssm", "Replace the routed mixture with one dense expert");
    c.bind_switch("--no-struct-embed", "model.no_struct_embed", "Drop the structural embedding");
  };
  auto add_train_flags = [](Command& c) {
    c.bind("--steps", {"train.total_steps"}, "Optimizer steps");
    c.bind("--batch", {"train.batch"}, "Windows per batch");
    c.bind("--lr", {"train.lr"}, "Peak learning rate");
    c.bind("--warmup", {"train.warmup"}, "Warmup steps");
    c.bind("--eval-interval", {"train.eval_interval"}, "Steps between validation passes");
    c.bind("--patience", {"train.patience"}, "Evaluations without improvement before stopping (0 = never)");
    c.bind("--freeze", {"train.freeze"}, "Comma list of parameter groups to freeze");
  };
  auto add_split_flags = [](Command& c) {
    c.bind("--train-frac", {"split.train_frac"}, "Train fraction per system");
    c.bind("--val-frac", {"split.val_frac"}, "Validation fraction per system");
    c.bind("--split-seed", {"split.seed"}, "Seed of the train/val/test shuffle");
  };

  Command& gen = add("gen-data", "Generate synthetic episodes and their stats file");
  gen.bind("--kind", {"data.kind"}, "linear, pendulum, double-integrator or multi");
  gen.bind("--systems", {"data.systems"}, "Number of systems for --kind multi");
  gen.bind("--episodes", {"data.episodes"}, "Episodes (per system for multi)");
  gen.bind("--steps", {"data.steps"}, "Steps per episode");
  gen.bind("--noise", {"data.noise"}, "Process noise std for --kind linear");
  gen.bind("--seed", {"data.seed"}, "Generator seed");
  gen.bind("--init-velocity-range", {"data.init_velocity_range"}, "Toy kinds: v0 ~ U[-r, r]");
  gen.bind("--action-hold", {"data.action_hold"}, "Toy kinds: steps each random action is held");

  Command& tr = add("train", "Train a model; writes model.ckpt, metrics.jsonl and report.tsv");
  tr.bind("--data", {"run.data"}, "Episode file");
  tr.bind("--seed", {"train.seed"}, "Initialisation and batching seed");
  add_model_flags(tr);
  add_train_flags(tr);
  add_split_flags(tr);

  Command& ds = add("distill", "Distil a teacher checkpoint into a smaller student");
  ds.bind("--data", {"run.data"}, "Episode file");
  ds.bind("--teacher", {"run.teacher"}, "Teacher checkpoint");
  ds.bind("--student-seed", {"run.student_seed"}, "Student initialisation seed");
  ds.bind("--seed", {"train.seed"}, "Batching seed");
  ds.bind("--alpha", {"train.kd_alpha"}, "Weight of the hard-label loss");
  add_model_flags(ds);
  add_train_flags(ds);
  add_split_flags(ds);

  Command& ev = add("eval", "Rollout MAE/MSE of a checkpoint in normalized space; writes report.tsv");
  ev.bind("--checkpoint", {"run.checkpoint"}, "Checkpoint file");
  ev.bind("--data", {"run.data"}, "Episode file");
  ev.bind("--split", {"run.split"}, "train, val, test or all");
  ev.bind("--decode", {"run.decode"}, "expectation, argmax or both");
  add_split_flags(ev);

  Command& rd = add("route-dump", "Mean routing weights per system and block; writes routing.tsv");
  rd.bind("--checkpoint", {"run.checkpoint"}, "Checkpoint file");
  rd.bind("--data", {"run.data"}, "Episode file");
  rd.bind("--split", {"run.split"}, "train, val, test or all");
  add_split_flags(rd);

  Command& sc = add("scale", "Sys-MoE vs parameter-matched dense model over system counts; writes scaling.tsv");
  sc.bind("--n-values", {"scale.n_values"}, "Comma list of system counts");
  sc.bind("--seeds", {"scale.seeds"}, "Comma list of training seeds");
  sc.bind("--episodes-per-system", {"scale.episodes_per_system"}, "Episodes generated per system");
  sc.bind("--episode-steps", {"scale.steps"}, "Steps per generated episode");
  sc.bind("--data-seed", {"scale.data_seed"}, "Generator and split seed");
  add_model_flags(sc);
  add_train_flags(sc);

  Command& pl = add("plan", "MPPI control in a toy environment; writes trace_<i>.jsonl and summary.tsv");
  pl.bind("--horizon", {"plan.horizon"}, "Planning horizon H");
  pl.bind("--samples", {"plan.samples"}, "Samples N per step");
  pl.bind("--lambda", {"plan.lambda"}, "Temperature");
  pl.bind("--sigma", {"plan.sigma"}, "Noise std per action dim (comma list or one value)");
  pl.bind("--seed", {"plan.seed"}, "Seed of episode 0; episode i uses seed + i");
  pl.bind("--oracle", {"run.oracle"}, "truth or model:<checkpoint>");
  pl.bind("--env", {"run.env"}, "double-integrator or pendulum");
  pl.bind("--cost", {"run.cost"}, "goal or forward_progress");
  pl.bind("--goal", {"run.goal"}, "Goal position (integrator) or angle (pendulum)");
  pl.bind("--episodes", {"run.episodes"}, "Episodes to run");
  pl.bind("--steps", {"run.steps"}, "Control steps per episode");
  pl.bind_switch("--sample-decode", "run.sample_decode", "Sample model predictions instead of the expectation");

  Command& st = add("struct-check", "Print the LCRS traversal index table of a tree file");
  st.bind("--tree", {"run.tree"}, "Tree file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::map<std::string, int (*)(const Command&)> handlers{
      {"gen-data", run_gen_data}, {"train", run_train},       {"distill", run_distill},
      {"eval", run_eval},         {"route-dump", run_route_dump}, {"scale", run_scale},
      {"plan", run_plan},         {"struct-check", run_struct_check}};
  for (const auto& c : commands) {
    if (!c->app->parsed()) continue;
    try {
      return handlers.at(c->name)(*c);
    } catch (const UsageError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    } catch (const model::ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    } catch (const train::ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    } catch (const plan::ContractError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    }
  }
  return 1;
}
