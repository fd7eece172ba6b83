#include "sysmoe/planner.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <sstream>

#include "json.hpp"

#include "sysmoe/tokenizer.hpp"

namespace sysmoe::plan {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

bool finite(const Vec& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double weight_at(const Vec& w, std::size_t i, double fallback) { return w.empty() ? fallback : w.at(i); }

}  // namespace

// ---------------------------------------------------------------------------
// Config.

void MPPIConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("invalid MPPI config: " + msg); };
  if (horizon == 0) fail("horizon must be >= 1");
  if (samples == 0) fail("samples must be >= 1");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) fail("lambda must be > 0, got " + fmt(lambda));
  if (sigma.empty()) fail("sigma needs at least one entry");
  for (double s : sigma)
    if (!(s > 0.0) || !std::isfinite(s)) fail("sigma entries must be > 0, got " + fmt(s));
}

double MPPIConfig::sigma_at(std::size_t dim) const { return sigma.size() == 1 ? sigma[0] : sigma.at(dim); }

std::map<std::string, std::string> MPPIConfig::to_map() const {
  std::string s;
  for (std::size_t i = 0; i < sigma.size(); ++i) s += (i ? "," : "") + fmt(sigma[i]);
  return {{"horizon", std::to_string(horizon)},
          {"samples", std::to_string(samples)},
          {"lambda", fmt(lambda)},
          {"sigma", s},
          {"seed", std::to_string(seed)}};
}

MPPIConfig MPPIConfig::from_map(const std::map<std::string, std::string>& kv) {
  MPPIConfig c;
  for (const auto& [key, value] : kv) {
    auto number = [&](const std::string& text) {
      try {
        std::size_t pos = 0;
        const double v = std::stod(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("");
        return v;
      } catch (const std::exception&) {
        throw ContractError("plan." + key + ": expected a number, got '" + text + "'");
      }
    };
    auto count = [&]() {
      const double v = number(value);
      if (v < 0 || v != std::floor(v)) throw ContractError("plan." + key + ": expected a nonnegative integer");
      return static_cast<std::size_t>(v);
    };
    if (key == "horizon") c.horizon = count();
    else if (key == "samples") c.samples = count();
    else if (key == "lambda") c.lambda = number(value);
    else if (key == "seed") c.seed = count();
    else if (key == "sigma") {
      c.sigma.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) c.sigma.push_back(number(item));
    } else {
      throw ContractError("unknown key plan." + key);
    }
  }
  c.validate();
  return c;
}

MPPIConfig MPPIConfig::walker() { return {100, 256, 0.25, {0.3}, 0}; }
MPPIConfig MPPIConfig::hopper() { return {100, 256, 0.5, {0.3}, 0}; }
MPPIConfig MPPIConfig::go1() { return {40, 30, 0.1, {0.3}, 0}; }

// ---------------------------------------------------------------------------
// Costs.

std::string to_string(CostKind kind) {
  switch (kind) {
    case CostKind::tracking: return "tracking";
    case CostKind::goal: return "goal";
    case CostKind::forward_progress: return "forward_progress";
  }
  return "?";
}

CostKind parse_cost_kind(const std::string& name) {
  if (name == "tracking") return CostKind::tracking;
  if (name == "goal") return CostKind::goal;
  if (name == "forward_progress") return CostKind::forward_progress;
  throw ContractError("unknown cost kind '" + name + "' (tracking, goal, forward_progress)");
}

CostSpec CostSpec::walker(const Seq& s_ref, const Vec& q, const Vec& r) {
  CostSpec c;
  c.kind = CostKind::tracking;
  c.s_ref = s_ref;
  c.q = q;
  c.r = r;
  c.walker_terms = true;
  return c;
}

CostSpec CostSpec::double_integrator_goal(double goal) {
  CostSpec c;
  c.kind = CostKind::goal;
  c.goal = {goal, 0.0};
  c.q = {10.0, 1.0};
  c.r = {1e-3};
  return c;
}

CostSpec CostSpec::pendulum_goal(double goal) {
  CostSpec c;
  c.kind = CostKind::goal;
  c.goal = {goal, 0.0};
  c.q = {1.0, 0.1};
  c.r = {1e-3};
  c.angle_index = 0;
  return c;
}

double forward_progress_reward(const Vec& p_pre, const Vec& p_post, const Vec& goal, double eps) {
  if (p_pre.size() != p_post.size() || p_pre.size() != goal.size())
    throw ContractError("forward_progress_reward: point dimensions differ");
  double norm2 = 0.0;
  for (std::size_t i = 0; i < goal.size(); ++i) norm2 += (goal[i] - p_pre[i]) * (goal[i] - p_pre[i]);
  const double norm = std::sqrt(norm2);
  if (norm < eps) return 0.0;
  double r = 0.0;
  for (std::size_t i = 0; i < goal.size(); ++i) r += (p_post[i] - p_pre[i]) * (goal[i] - p_pre[i]) / norm;
  return r;
}

double tracking_cost(const Seq& traj, const Seq& actions, const CostSpec& spec, std::size_t t0) {
  if (traj.size() != actions.size() + 1)
    throw ContractError("tracking_cost: expected " + std::to_string(actions.size() + 1) + " states, got " +
                        std::to_string(traj.size()));
  const std::size_t horizon = actions.size();
  if (horizon == 0) return 0.0;
  const std::size_t ms = traj[0].size();
  const std::size_t ma = actions[0].size();
  if (!spec.q.empty() && spec.q.size() != ms)
    throw ContractError("tracking_cost: Q has " + std::to_string(spec.q.size()) + " entries for " +
                        std::to_string(ms) + " state dims");
  if (!spec.r.empty() && spec.r.size() != ma)
    throw ContractError("tracking_cost: R has " + std::to_string(spec.r.size()) + " entries for " +
                        std::to_string(ma) + " action dims");
  if (spec.kind == CostKind::tracking && spec.s_ref.size() < horizon)
    throw ContractError("tracking_cost: reference has " + std::to_string(spec.s_ref.size()) +
                        " rows, horizon is " + std::to_string(horizon));
  if (spec.kind == CostKind::goal && spec.goal.size() != ms)
    throw ContractError("tracking_cost: goal has " + std::to_string(spec.goal.size()) + " entries for " +
                        std::to_string(ms) + " state dims");

  double cost = 0.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    const Vec& s = traj[t + 1];
    const Vec& a = actions[t];
    if (spec.kind == CostKind::forward_progress) {
      auto planar = [&](const Vec& x) { return Vec{x.at(0), ms > 2 ? x.at(1) : 0.0}; };
      Vec goal = spec.goal;
      goal.resize(2, 0.0);
      cost -= forward_progress_reward(planar(traj[t]), planar(s), goal);
    } else {
      const Vec* ref = &spec.goal;
      if (spec.kind == CostKind::tracking) ref = &spec.s_ref[std::min(t0 + t + 1, spec.s_ref.size() - 1)];
      if (ref->size() != ms) throw ContractError("tracking_cost: reference dimension mismatch");
      for (std::size_t i = 0; i < ms; ++i) {
        double e = (*ref)[i] - s[i];
        if (static_cast<int>(i) == spec.angle_index) e = sim::wrap_angle(e);
        cost += weight_at(spec.q, i, 1.0) * e * e;
      }
    }
    for (std::size_t j = 0; j < ma; ++j) {
      const double aref = spec.a_ref.empty() ? 0.0 : spec.a_ref[std::min(t0 + t, spec.a_ref.size() - 1)].at(j);
      const double e = aref - a[j];
      cost += weight_at(spec.r, j, 0.0) * e * e;
    }
    if (spec.walker_terms || spec.kind == CostKind::forward_progress) {
      double a2 = 0.0;
      for (double v : a) a2 += v * v;
      cost += spec.w_ctrl * a2;
    }
    if (spec.walker_terms) {
      const double dx = s.at(spec.progress_index) - traj[t].at(spec.progress_index);
      cost += -spec.healthy - spec.w_fwd * dx / spec.dt;
    }
  }
  return cost;
}

Vec mppi_weights(const Vec& costs, double lambda) {
  if (costs.empty()) throw PlannerError("mppi_weights: no samples");
  double lmin = std::numeric_limits<double>::infinity();
  for (double c : costs)
    if (std::isfinite(c)) lmin = std::min(lmin, c);
  if (!std::isfinite(lmin)) throw PlannerError("all " + std::to_string(costs.size()) + " MPPI samples diverged");
  Vec w(costs.size(), 0.0);
  double total = 0.0;
  for (std::size_t n = 0; n < costs.size(); ++n) {
    if (!std::isfinite(costs[n])) continue;
    w[n] = std::exp(-(costs[n] - lmin) / lambda);
    total += w[n];
  }
  for (double& v : w) v /= total;
  return w;
}

// ---------------------------------------------------------------------------
// Oracles.

std::vector<Seq> TruthOracle::rollout(const History& history, const std::vector<Seq>& action_seqs) const {
  if (history.states.empty()) throw ContractError("rollout: empty history");
  std::vector<Seq> out;
  out.reserve(action_seqs.size());
  for (const Seq& actions : action_seqs) {
    Seq traj{history.states.back()};
    sim::EnvState s{history.states.back(), 0};
    for (const Vec& a : actions) {
      s = sim::step(env_, s, a).next;
      traj.push_back(s.x);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

ModelOracle::ModelOracle(model::SysMoEModel model, data::StatsTable stats, data::TrajectoryEpisode layout,
                         bool sample, std::uint64_t seed)
    : model_(std::move(model)), stats_(std::move(stats)), layout_(std::move(layout)), sample_(sample), rng_(seed) {
  data::stats_for(stats_, layout_.system_id);
}

std::vector<Seq> ModelOracle::rollout(const History& history, const std::vector<Seq>& action_seqs) const {
  if (history.states.empty()) throw ContractError("rollout: empty history");
  if (history.actions.size() + 1 != history.states.size())
    throw ContractError("rollout: history needs one action fewer than states");
  const model::ModelConfig& c = model_.config();
  const std::size_t h = c.history, k = c.horizon, l = c.window();
  const std::size_t ms = layout_.state_dim(), ma = layout_.action_dim();
  const data::SystemStats& stats = data::stats_for(stats_, layout_.system_id);
  num::NoGradGuard no_grad;

  // Per-sample observed + predicted states and the actions between them.
  const std::size_t n = action_seqs.size();
  std::vector<Seq> states(n, history.states), actions(n, history.actions);
  std::vector<Seq> out(n, Seq{history.states.back()});
  const std::size_t horizon = n ? action_seqs[0].size() : 0;

  for (std::size_t done = 0; done < horizon; done += k) {
    const std::size_t chunk = std::min(k, horizon - done);
    std::vector<data::TrajectoryEpisode> windows;
    windows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      data::TrajectoryEpisode ep = layout_;
      ep.states = num::Array(num::Shape{l, ms});
      ep.actions = num::Array(num::Shape{l, ma});
      ep.mask.assign(l, 1);
      const std::size_t t = states[i].size() - 1;  // current time
      for (std::size_t r = 0; r < h; ++r) {
        // Row h-1 holds the current state; earlier rows reach back, padding
        // with the first state and a zero action.
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(h - 1 - r);
        const Vec& s = states[i][static_cast<std::size_t>(std::max<std::ptrdiff_t>(src, 0))];
        for (std::size_t m = 0; m < ms; ++m) ep.states.at(r, m) = s[m];
        if (src >= 0 && r + 1 < h)
          for (std::size_t m = 0; m < ma; ++m) ep.actions.at(r, m) = actions[i][static_cast<std::size_t>(src)][m];
      }
      for (std::size_t j = 0; j < chunk; ++j)
        for (std::size_t m = 0; m < ma; ++m) ep.actions.at(h - 1 + j, m) = action_seqs[i].at(done + j).at(m);
      windows.push_back(data::normalize(ep, stats).episode);
    }
    std::vector<const data::TrajectoryEpisode*> ptrs;
    for (const auto& w : windows) ptrs.push_back(&w);
    const num::Array probs = model_.forward(model::make_input(ptrs, std::vector<std::size_t>(n, 0), c)).probs();
    const std::size_t kb = c.k_bins;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < chunk; ++j) {
        Vec next(ms);
        for (std::size_t m = 0; m < ms; ++m) {
          std::span<const double> dist(probs.storage().data() + ((i * l + h - 1 + j) * ms + m) * kb, kb);
          double u;
          if (sample_) {
            std::discrete_distribution<std::size_t> pick(dist.begin(), dist.end());
            u = tok::bin_center(pick(rng_), kb);
          } else {
            u = tok::decode_distribution(dist);
          }
          next[m] = data::denormalize_value(u, stats[m].second);
        }
        actions[i].push_back(action_seqs[i][done + j]);
        states[i].push_back(next);
        out[i].push_back(std::move(next));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MPPI.

StepResult mppi_step(const History& history, const Seq& nominal, const RolloutOracle& oracle, const CostSpec& cost,
                     const MPPIConfig& config, std::size_t step, double action_bound) {
  config.validate();
  if (nominal.size() != config.horizon)
    throw ContractError("mppi_step: nominal has " + std::to_string(nominal.size()) + " steps, horizon is " +
                        std::to_string(config.horizon));
  const std::size_t ma = nominal.at(0).size();
  const std::size_t t0 = history.states.empty() ? 0 : history.states.size() - 1;

  std::vector<Seq> samples(config.samples, nominal);
  for (std::size_t n = 0; n < config.samples; ++n) {
    std::mt19937_64 rng(mix64(mix64(mix64(config.seed) ^ step) ^ n));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Vec& a : samples[n])
      for (std::size_t j = 0; j < ma; ++j)
        a[j] = std::clamp(a[j] + config.sigma_at(j) * normal(rng), -action_bound, action_bound);
  }

  const std::vector<Seq> trajs = oracle.rollout(history, samples);
  StepResult r;
  r.costs.resize(config.samples);
  for (std::size_t n = 0; n < config.samples; ++n) {
    const bool ok = std::all_of(trajs[n].begin(), trajs[n].end(), finite);
    const double c = ok ? tracking_cost(trajs[n], samples[n], cost, t0) : std::numeric_limits<double>::infinity();
    r.costs[n] = std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
  }
  r.weights = mppi_weights(r.costs, config.lambda);
  r.best_cost = std::numeric_limits<double>::infinity();
  r.worst_cost = -std::numeric_limits<double>::infinity();
  for (double c : r.costs)
    if (std::isfinite(c)) {
      r.best_cost = std::min(r.best_cost, c);
      r.worst_cost = std::max(r.worst_cost, c);
    }

  r.updated.assign(config.horizon, Vec(ma, 0.0));
  for (std::size_t n = 0; n < config.samples; ++n) {
    if (r.weights[n] == 0.0) continue;
    for (std::size_t t = 0; t < config.horizon; ++t)
      for (std::size_t j = 0; j < ma; ++j) r.updated[t][j] += r.weights[n] * samples[n][t][j];
  }
  r.action = r.updated[0];
  r.nominal.assign(r.updated.begin() + 1, r.updated.end());
  r.nominal.push_back(Vec(ma, 0.0));
  return r;
}

EpisodeResult run_episode(const sim::EnvParams& env, const RolloutOracle& oracle, const MPPIConfig& config,
                          const CostSpec& cost, std::size_t steps, std::uint64_t env_seed) {
  EpisodeResult result;
  sim::EnvState s = sim::reset(env, env_seed);
  History history{{s.x}, {}};
  Seq nominal(config.horizon, Vec(env.action_dim(), 0.0));
  result.states.push_back(s.x);
  for (std::size_t t = 0; t < steps; ++t) {
    StepResult plan = mppi_step(history, nominal, oracle, cost, config, t, env.action_bound);
    const sim::StepResult next = sim::step(env, s, plan.action);
    result.actions.push_back(plan.action);
    result.best_costs.push_back(plan.best_cost);
    result.worst_costs.push_back(plan.worst_cost);
    if (!finite(next.next.x) || !std::isfinite(next.reward)) {
      result.diverged = true;
      break;
    }
    s = next.next;
    result.rewards.push_back(next.reward);
    result.total_reward += next.reward;
    result.states.push_back(s.x);
    history.states.push_back(s.x);
    history.actions.push_back(plan.action);
    nominal = std::move(plan.nominal);
  }
  return result;
}

void write_trace(std::ostream& out, const EpisodeResult& result) {
  for (std::size_t t = 0; t < result.rewards.size(); ++t) {
    nlohmann::json line = {{"step", t},
                           {"action", result.actions[t]},
                           {"next_state", result.states[t + 1]},
                           {"reward", result.rewards[t]},
                           {"best_cost", result.best_costs[t]},
                           {"worst_cost", result.worst_costs[t]}};
    out << line.dump() << '\n';
  }
}

}  // namespace sysmoe::plan
