#include "sysmoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace sysmoe::data {

using num::Array;
using json = nlohmann::json;

std::string to_string(Modality m) { return m == Modality::state ? "state" : "action"; }

std::size_t TrajectoryEpisode::valid_steps() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<ChannelSpec> TrajectoryEpisode::state_channels() const {
  return {channels.begin(), channels.begin() + static_cast<std::ptrdiff_t>(state_dim())};
}

std::vector<ChannelSpec> TrajectoryEpisode::action_channels() const {
  return {channels.begin() + static_cast<std::ptrdiff_t>(state_dim()), channels.end()};
}

namespace {

void check_episode(const TrajectoryEpisode& ep) {
  const std::size_t t = ep.mask.size();
  if (ep.states.rank() != 2 || ep.actions.rank() != 2 || ep.states.dim(0) != t || ep.actions.dim(0) != t) {
    throw FormatError("episode of system '" + ep.system_id + "': states " + num::shape_str(ep.states.shape()) +
                      ", actions " + num::shape_str(ep.actions.shape()) + " and mask length " + std::to_string(t) +
                      " disagree");
  }
  if (ep.channels.size() != ep.states.dim(1) + ep.actions.dim(1)) {
    throw FormatError("episode of system '" + ep.system_id + "' lists " + std::to_string(ep.channels.size()) +
                      " channels for " + std::to_string(ep.states.dim(1) + ep.actions.dim(1)) + " columns");
  }
}

// Value of channel c (state channels first) at row t.
double channel_value(const TrajectoryEpisode& ep, std::size_t t, std::size_t c) {
  const std::size_t ms = ep.state_dim();
  return c < ms ? ep.states.at(t, c) : ep.actions.at(t, c - ms);
}

double& channel_value(TrajectoryEpisode& ep, std::size_t t, std::size_t c) {
  const std::size_t ms = ep.state_dim();
  return c < ms ? ep.states.at(t, c) : ep.actions.at(t, c - ms);
}

const ChannelStats& find_stats(const SystemStats& stats, const std::string& name, const std::string& system_id) {
  for (const auto& [n, s] : stats) {
    if (n == name) return s;
  }
  throw StatsError("no normalization stats for channel '" + name + "' of system '" + system_id + "'");
}

}  // namespace

SystemStats compute_norm_stats(const std::vector<TrajectoryEpisode>& episodes) {
  if (episodes.empty()) throw StatsError("cannot compute stats from zero episodes");
  const auto& ref = episodes.front();
  SystemStats stats;
  std::vector<bool> seen(ref.channels.size(), false);
  for (const ChannelSpec& c : ref.channels) stats.emplace_back(c.name, ChannelStats{});
  for (const TrajectoryEpisode& ep : episodes) {
    check_episode(ep);
    if (ep.channels.size() != ref.channels.size()) {
      throw StatsError("system '" + ep.system_id + "' episodes disagree on channel count");
    }
    for (std::size_t c = 0; c < ep.channels.size(); ++c) {
      if (ep.channels[c].name != ref.channels[c].name) {
        throw StatsError("system '" + ep.system_id + "' episodes disagree on channel " + std::to_string(c) + " ('" +
                         ep.channels[c].name + "' vs '" + ref.channels[c].name + "')");
      }
      ChannelStats& s = stats[c].second;
      for (std::size_t t = 0; t < ep.steps(); ++t) {
        if (!ep.mask[t]) continue;
        const double v = channel_value(ep, t, c);
        if (!seen[c]) {
          s = {v, v};
          seen[c] = true;
        } else {
          s.min = std::min(s.min, v);
          s.max = std::max(s.max, v);
        }
      }
    }
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (!seen[c]) throw StatsError("channel '" + stats[c].first + "' has no unmasked steps");
  }
  return stats;
}

StatsTable compute_stats_table(const std::vector<TrajectoryEpisode>& episodes) {
  std::map<std::string, std::vector<TrajectoryEpisode>> by_system;
  for (const auto& ep : episodes) by_system[ep.system_id].push_back(ep);
  StatsTable table;
  for (const auto& [id, eps] : by_system) table[id] = compute_norm_stats(eps);
  return table;
}

double normalize_value(double x, const ChannelStats& s) {
  if (s.max <= s.min) return 0.5;
  return std::clamp((x - s.min) / (s.max - s.min), 0.0, 1.0);
}

double denormalize_value(double x, const ChannelStats& s) {
  if (s.max <= s.min) return s.min;
  return s.min + x * (s.max - s.min);
}

NormalizeResult normalize(const TrajectoryEpisode& episode, const SystemStats& stats) {
  check_episode(episode);
  NormalizeResult r{episode, 0};
  TrajectoryEpisode& out = r.episode;
  for (std::size_t c = 0; c < out.channels.size(); ++c) {
    const ChannelStats& s = find_stats(stats, out.channels[c].name, out.system_id);
    out.channels[c].norm_min = s.min;
    out.channels[c].norm_max = s.max;
    for (std::size_t t = 0; t < out.steps(); ++t) {
      double& v = channel_value(out, t, c);
      if (!out.mask[t]) {
        v = 0.0;
        continue;
      }
      if (s.max > s.min && (v < s.min || v > s.max)) ++r.clamped;
      v = normalize_value(v, s);
    }
  }
  return r;
}

TrajectoryEpisode denormalize(const TrajectoryEpisode& episode, const SystemStats& stats) {
  check_episode(episode);
  TrajectoryEpisode out = episode;
  for (std::size_t c = 0; c < out.channels.size(); ++c) {
    const ChannelStats& s = find_stats(stats, out.channels[c].name, out.system_id);
    for (std::size_t t = 0; t < out.steps(); ++t) {
      if (out.mask[t]) channel_value(out, t, c) = denormalize_value(channel_value(out, t, c), s);
    }
  }
  return out;
}

TrajectoryEpisode pad_clip(const TrajectoryEpisode& episode, std::size_t max_len) {
  check_episode(episode);
  if (episode.steps() == 0) throw FormatError("cannot pad an empty episode");
  TrajectoryEpisode out = episode;
  const std::size_t ms = episode.state_dim();
  const std::size_t ma = episode.action_dim();
  const std::size_t keep = std::min(max_len, episode.steps());
  out.states = Array({max_len, ms});
  out.actions = Array({max_len, ma});
  out.mask.assign(max_len, 0);
  for (std::size_t t = 0; t < keep; ++t) {
    out.mask[t] = episode.mask[t];
    if (!episode.mask[t]) continue;
    for (std::size_t c = 0; c < ms; ++c) out.states.at(t, c) = episode.states.at(t, c);
    for (std::size_t c = 0; c < ma; ++c) out.actions.at(t, c) = episode.actions.at(t, c);
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<TrajectoryEpisode>& episodes, double train_frac, double val_frac,
                           std::uint64_t seed) {
  if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0) {
    throw std::invalid_argument("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1");
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> by_system;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    auto& v = by_system[episodes[i].system_id];
    if (v.empty()) order.push_back(episodes[i].system_id);
    v.push_back(i);
  }
  DatasetSplit split;
  std::mt19937_64 rng(seed);
  for (const std::string& id : order) {
    std::vector<std::size_t> idx = by_system[id];
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n = idx.size();
    const std::size_t n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(train_frac * n)));
    const std::size_t n_val = std::min(n - std::min(n, n_train), static_cast<std::size_t>(std::llround(val_frac * n)));
    std::vector<TrajectoryEpisode> train;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ep = episodes[idx[i]];
      if (i < n_train) {
        split.train.push_back(ep);
        train.push_back(ep);
      } else if (i < n_train + n_val) {
        split.val.push_back(ep);
      } else {
        split.test.push_back(ep);
      }
    }
    split.stats[id] = compute_norm_stats(train);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Files.

std::string episode_to_json_line(const TrajectoryEpisode& ep) {
  check_episode(ep);
  json j;
  j["system_id"] = ep.system_id;
  j["object"] = ep.tree.object_name;
  json tree = json::array();
  for (const auto& n : ep.tree.nodes) {
    tree.push_back({n.name, n.parent == structure::kRootParent
                                ? std::string("ROOT")
                                : ep.tree.nodes[static_cast<std::size_t>(n.parent)].name});
  }
  j["tree"] = tree;
  json channels = json::array();
  for (const auto& c : ep.channels) {
    channels.push_back({{"name", c.name},
                        {"modality", to_string(c.modality)},
                        {"body_node", c.body_node},
                        {"min", c.norm_min},
                        {"max", c.norm_max}});
  }
  j["channels"] = channels;
  j["T"] = ep.steps();
  j["state_dim"] = ep.state_dim();
  j["action_dim"] = ep.action_dim();
  j["states"] = ep.states.storage();
  j["actions"] = ep.actions.storage();
  std::vector<int> mask(ep.mask.begin(), ep.mask.end());
  j["mask"] = mask;
  return j.dump();
}

TrajectoryEpisode episode_from_json_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    TrajectoryEpisode ep;
    ep.system_id = j.at("system_id").get<std::string>();
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& e : j.at("tree")) edges.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    ep.tree = structure::KinematicTree::from_edges(edges, 0, j.value("object", std::string("robot")));
    for (const auto& c : j.at("channels")) {
      ChannelSpec spec;
      spec.name = c.at("name").get<std::string>();
      const std::string mod = c.at("modality").get<std::string>();
      if (mod != "state" && mod != "action") throw FormatError("unknown modality '" + mod + "'");
      spec.modality = mod == "state" ? Modality::state : Modality::action;
      spec.body_node = c.at("body_node").get<int>();
      spec.norm_min = c.value("min", 0.0);
      spec.norm_max = c.value("max", 0.0);
      ep.channels.push_back(spec);
    }
    const auto t = j.at("T").get<std::size_t>();
    const auto ms = j.at("state_dim").get<std::size_t>();
    const auto ma = j.at("action_dim").get<std::size_t>();
    ep.states = Array({t, ms}, j.at("states").get<std::vector<double>>());
    ep.actions = Array({t, ma}, j.at("actions").get<std::vector<double>>());
    for (int m : j.at("mask").get<std::vector<int>>()) ep.mask.push_back(m != 0 ? 1 : 0);
    check_episode(ep);
    for (std::size_t c = 0; c < ep.channels.size(); ++c) {
      const bool is_state = c < ms;
      if ((ep.channels[c].modality == Modality::state) != is_state) {
        throw FormatError("channel '" + ep.channels[c].name + "' modality does not match its column block");
      }
      const int node = ep.channels[c].body_node;
      if (node != structure::kGlobalNode && (node < 0 || node >= static_cast<int>(ep.tree.size()))) {
        throw FormatError("channel '" + ep.channels[c].name + "' references unknown body node " +
                          std::to_string(node));
      }
    }
    return ep;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed episode record: ") + e.what());
  } catch (const num::DimensionError& e) {
    throw FormatError(std::string("malformed episode record: ") + e.what());
  }
}

void write_episodes(const std::string& path, const std::vector<TrajectoryEpisode>& episodes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write episode file " + path);
  for (const auto& ep : episodes) f << episode_to_json_line(ep) << '\n';
  if (!f) throw std::runtime_error("failed writing episode file " + path);
}

std::vector<TrajectoryEpisode> read_episodes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open episode file " + path);
  std::vector<TrajectoryEpisode> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(episode_from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const structure::StructureError& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_stats(const std::string& path, const StatsTable& stats) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write stats file " + path);
  f << "system_id\tchannel\tmin\tmax\n";
  char buf[64];
  for (const auto& [id, sys] : stats) {
    for (const auto& [name, s] : sys) {
      f << id << '\t' << name;
      std::snprintf(buf, sizeof buf, "\t%.17g", s.min);
      f << buf;
      std::snprintf(buf, sizeof buf, "\t%.17g\n", s.max);
      f << buf;
    }
  }
  if (!f) throw std::runtime_error("failed writing stats file " + path);
}

StatsTable read_stats(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open stats file " + path);
  StatsTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::istringstream ls(line);
    std::string id, name, lo, hi;
    if (!std::getline(ls, id, '\t') || !std::getline(ls, name, '\t') || !std::getline(ls, lo, '\t') ||
        !std::getline(ls, hi)) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    try {
      table[id].emplace_back(name, ChannelStats{std::stod(lo), std::stod(hi)});
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": invalid number");
    }
  }
  return table;
}

const SystemStats& stats_for(const StatsTable& table, const std::string& system_id) {
  auto it = table.find(system_id);
  if (it == table.end()) throw StatsError("no normalization stats for system '" + system_id + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Generators.

namespace {

// base -> link0 -> link1 -> ...; state channel i sits on link i, action
// channel j on link min(j, n-1).
TrajectoryEpisode linear_skeleton(const std::string& id, std::size_t ms, std::size_t ma, std::size_t steps) {
  TrajectoryEpisode ep;
  ep.system_id = id;
  std::vector<std::pair<std::string, std::string>> edges{{"base", "ROOT"}};
  for (std::size_t i = 0; i < ms; ++i) edges.emplace_back("link" + std::to_string(i), i == 0 ? "base" : "link" + std::to_string(i - 1));
  ep.tree = structure::KinematicTree::from_edges(edges);
  for (std::size_t i = 0; i < ms; ++i) ep.channels.push_back({"s" + std::to_string(i), Modality::state, static_cast<int>(i) + 1});
  for (std::size_t j = 0; j < ma; ++j) {
    ep.channels.push_back({"a" + std::to_string(j), Modality::action, static_cast<int>(std::min(j, ms - 1)) + 1});
  }
  ep.states = Array({steps, ms});
  ep.actions = Array({steps, ma});
  ep.mask.assign(steps, 1);
  return ep;
}

TrajectoryEpisode toy_skeleton(const std::string& id, const std::string& body, const std::string& pos_name,
                               const std::string& vel_name, std::size_t steps) {
  TrajectoryEpisode ep;
  ep.system_id = id;
  ep.tree = structure::KinematicTree::from_edges({{"base", "ROOT"}, {body, "base"}});
  ep.channels = {{pos_name, Modality::state, 1}, {vel_name, Modality::state, 1}, {"torque", Modality::action, 1}};
  ep.states = Array({steps, 2});
  ep.actions = Array({steps, 1});
  ep.mask.assign(steps, 1);
  return ep;
}

std::vector<TrajectoryEpisode> gen_toy(const ToyGenParams& params, std::size_t episodes, std::size_t steps,
                                       double dt, std::uint64_t seed) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (steps == 0) throw std::invalid_argument("episodes need at least one step");
  if (params.action_hold == 0) throw std::invalid_argument("action_hold must be at least 1");
  sim::EnvParams env = params.env;
  env.dt = dt;
  const bool pendulum = env.kind == sim::EnvKind::pendulum;
  const std::string id = params.system_id.empty() ? sim::to_string(env.kind) : params.system_id;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<TrajectoryEpisode> out;
  for (std::size_t e = 0; e < episodes; ++e) {
    TrajectoryEpisode ep = pendulum ? toy_skeleton(id, "pole", "theta", "omega", steps)
                                    : toy_skeleton(id, "cart", "x", "v", steps);
    sim::EnvState s;
    if (params.initial_state) {
      s.x = *params.initial_state;
    } else if (pendulum) {
      s.x = {sim::wrap_angle(std::numbers::pi + params.init_range * unit(rng)), params.init_velocity};
    } else {
      s.x = {params.init_range * unit(rng), params.init_velocity};
    }
    if (!params.initial_state && params.init_velocity_range > 0.0) s.x[1] += params.init_velocity_range * unit(rng);
    double a = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
      if (t % params.action_hold == 0) a = params.action_scale * unit(rng);
      ep.states.at(t, 0) = s.x[0];
      ep.states.at(t, 1) = s.x[1];
      ep.actions.at(t, 0) = a;
      s = sim::step(env, s, {a}).next;
    }
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace

std::vector<TrajectoryEpisode> gen_linear_system(const LinearSystem& sys, std::size_t episodes, std::size_t steps,
                                                 std::uint64_t seed) {
  const std::size_t ms = sys.a.dim(0);
  if (sys.a.rank() != 2 || sys.a.dim(1) != ms || sys.b.rank() != 2 || sys.b.dim(0) != ms) {
    throw num::DimensionError("linear system needs A [n,n] and B [n,m], got " + num::shape_str(sys.a.shape()) +
                              " and " + num::shape_str(sys.b.shape()));
  }
  if (sys.initial_state && sys.initial_state->size() != ms) {
    throw num::DimensionError("initial state has " + std::to_string(sys.initial_state->size()) + " entries, expected " +
                              std::to_string(ms));
  }
  if (steps == 0) throw std::invalid_argument("episodes need at least one step");
  const std::size_t ma = sys.b.dim(1);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<TrajectoryEpisode> out;
  for (std::size_t e = 0; e < episodes; ++e) {
    TrajectoryEpisode ep = linear_skeleton(sys.system_id, ms, ma, steps);
    std::vector<double> s(ms);
    for (std::size_t i = 0; i < ms; ++i) s[i] = sys.initial_state ? (*sys.initial_state)[i] : sys.init_range * unit(rng);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t j = 0; j < ma; ++j) ep.actions.at(t, j) = unit(rng);
      for (std::size_t i = 0; i < ms; ++i) ep.states.at(t, i) = s[i];
      std::vector<double> next(ms, 0.0);
      for (std::size_t i = 0; i < ms; ++i) {
        double v = 0.0;
        for (std::size_t k = 0; k < ms; ++k) v += sys.a.at(i, k) * s[k];
        for (std::size_t j = 0; j < ma; ++j) v += sys.b.at(i, j) * ep.actions.at(t, j);
        if (sys.noise_std > 0.0) v += sys.noise_std * noise(rng);
        next[i] = v;
      }
      s = std::move(next);
    }
    out.push_back(std::move(ep));
  }
  return out;
}

std::vector<TrajectoryEpisode> gen_double_integrator(const ToyGenParams& params, std::size_t episodes,
                                                     std::size_t steps, double dt, std::uint64_t seed) {
  ToyGenParams p = params;
  p.env.kind = sim::EnvKind::double_integrator;
  return gen_toy(p, episodes, steps, dt, seed);
}

std::vector<TrajectoryEpisode> gen_pendulum(const ToyGenParams& params, std::size_t episodes, std::size_t steps,
                                            double dt, std::uint64_t seed) {
  ToyGenParams p = params;
  p.env.kind = sim::EnvKind::pendulum;
  return gen_toy(p, episodes, steps, dt, seed);
}

std::vector<LinearSystem> multi_system_specs(std::size_t n_systems, std::uint64_t seed) {
  if (n_systems == 0) throw std::invalid_argument("need at least one system");
  auto rot = [](double radius, double angle) {
    return Array({2, 2}, {radius * std::cos(angle), -radius * std::sin(angle), radius * std::sin(angle),
                          radius * std::cos(angle)});
  };
  // Hand-picked maps first: decaying, sign-flipped, two rotations, a shear.
  std::vector<Array> maps{Array({2, 2}, {0.9, 0.0, 0.0, 0.9}), Array({2, 2}, {-0.9, 0.0, 0.0, -0.9}),
                          rot(0.95, 0.5), rot(0.95, -1.2), Array({2, 2}, {0.6, 0.3, 0.0, -0.7})};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> radius(0.6, 0.95), angle(-std::numbers::pi, std::numbers::pi);
  while (maps.size() < n_systems) maps.push_back(rot(radius(rng), angle(rng)));
  std::vector<LinearSystem> out;
  for (std::size_t i = 0; i < n_systems; ++i) {
    LinearSystem s;
    s.system_id = "sys" + std::to_string(i);
    s.a = maps[i];
    s.b = Array({2, 2}, {0.1, 0.0, 0.0, 0.1});
    s.noise_std = 0.0;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TrajectoryEpisode> gen_multi_system(std::size_t n_systems, std::size_t episodes_per_system,
                                                std::size_t steps, std::uint64_t seed) {
  std::vector<TrajectoryEpisode> out;
  const auto specs = multi_system_specs(n_systems, seed);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto eps = gen_linear_system(specs[i], episodes_per_system, steps, seed * 1000003ULL + i + 1);
    for (auto& e : eps) out.push_back(std::move(e));
  }
  return out;
}

double lag1_autocorrelation(const std::vector<TrajectoryEpisode>& episodes, std::size_t channel) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.steps(); ++t) {
      if (ep.mask[t]) {
        total += ep.states.at(t, channel);
        ++count;
      }
    }
  }
  if (count == 0) return 0.0;
  const double mu = total / static_cast<double>(count);
  double num = 0.0, den = 0.0;
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.steps(); ++t) {
      if (!ep.mask[t]) continue;
      const double x = ep.states.at(t, channel) - mu;
      den += x * x;
      if (t + 1 < ep.steps() && ep.mask[t + 1]) num += x * (ep.states.at(t + 1, channel) - mu);
    }
  }
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace sysmoe::data
