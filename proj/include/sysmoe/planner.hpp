#pragma once

// MPPI trajectory optimisation with pluggable rollout oracles (the analytic
// simulator or a learned world model), tracking / goal / forward-progress
// costs and a receding-horizon episode loop.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sysmoe/data.hpp"
#include "sysmoe/model.hpp"
#include "sysmoe/sim.hpp"

namespace sysmoe::plan {

class PlannerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Vec = std::vector<double>;
using Seq = std::vector<Vec>;  // time-major sequence of vectors

struct MPPIConfig {
  std::size_t horizon = 20;  // H
  std::size_t samples = 64;  // N
  double lambda = 0.25;
  Vec sigma{0.3};  // per-action-dim noise standard deviation; one entry broadcasts
  std::uint64_t seed = 0;

  void validate() const;
  double sigma_at(std::size_t dim) const;
  std::map<std::string, std::string> to_map() const;
  static MPPIConfig from_map(const std::map<std::string, std::string>& kv);

  static MPPIConfig walker();  // lambda 0.25, H 100, N 256
  static MPPIConfig hopper();  // lambda 0.5, H 100, N 256
  static MPPIConfig go1();     // lambda 0.1, H 40, N 30
};

enum class CostKind { tracking, goal, forward_progress };
std::string to_string(CostKind kind);
CostKind parse_cost_kind(const std::string& name);

struct CostSpec {
  CostKind kind = CostKind::goal;
  Vec q;      // diagonal state weights
  Vec r;      // diagonal action weights
  Seq s_ref;  // tracking reference, indexed by absolute time
  Seq a_ref;  // optional action reference (zero when empty)
  Vec goal;   // goal state (goal kind) or planar goal point (forward_progress)
  // Walker-style terms: -healthy - w_fwd * dx/dt + w_ctrl * |a|^2 per step.
  bool walker_terms = false;
  double healthy = 1.0;
  double w_fwd = 0.5;
  double w_ctrl = 1e-3;
  double dt = 0.02;
  std::size_t progress_index = 0;  // state index of the forward coordinate
  int angle_index = -1;            // state error wrapped to (-pi, pi] at this index

  static CostSpec walker(const Seq& s_ref, const Vec& q, const Vec& r);
  // 10 (x - goal)^2 + v^2 + 1e-3 a^2 per step on the double integrator.
  static CostSpec double_integrator_goal(double goal);
  // wrap(theta - goal)^2 + 0.1 omega^2 + 1e-3 a^2 per step on the pendulum.
  static CostSpec pendulum_goal(double goal);
};

// Cost of traj = (s_0, s_1, ..., s_H) under actions (a_0, ..., a_{H-1});
// state terms cover s_1..s_H and `t0` is the absolute time of s_0.
double tracking_cost(const Seq& traj, const Seq& actions, const CostSpec& spec, std::size_t t0 = 0);

// (p_post - p_pre) projected on the unit direction to the goal; zero when
// |goal - p_pre| < eps.
double forward_progress_reward(const Vec& p_pre, const Vec& p_post, const Vec& goal, double eps = 1e-8);

// Importance weights exp(-(L - L_min) / lambda), normalised. Non-finite costs
// get weight 0; all non-finite is a PlannerError.
Vec mppi_weights(const Vec& costs, double lambda);

// Observed past: states s_0..s_t and the actions a_0..a_{t-1} between them.
struct History {
  Seq states;
  Seq actions;
};

class RolloutOracle {
 public:
  virtual ~RolloutOracle() = default;
  // For each action sequence, the states (s_t, s_{t+1}, ..., s_{t+H}) starting
  // from the last state of `history`.
  virtual std::vector<Seq> rollout(const History& history, const std::vector<Seq>& action_seqs) const = 0;
};

class TruthOracle : public RolloutOracle {
 public:
  explicit TruthOracle(sim::EnvParams env) : env_(std::move(env)) {}
  std::vector<Seq> rollout(const History& history, const std::vector<Seq>& action_seqs) const override;

 private:
  sim::EnvParams env_;
};

// Learned-model oracle: normalises the last h observed steps, predicts k
// states per forward pass (chained for longer horizons), decodes by
// expectation or by sampling, and denormalises with the checkpoint stats.
// Missing history before the episode start repeats the first state with zero
// action. `layout` supplies the system id, tree and channel specs.
class ModelOracle : public RolloutOracle {
 public:
  ModelOracle(model::SysMoEModel model, data::StatsTable stats, data::TrajectoryEpisode layout, bool sample = false,
              std::uint64_t seed = 0);
  std::vector<Seq> rollout(const History& history, const std::vector<Seq>& action_seqs) const override;

 private:
  model::SysMoEModel model_;
  data::StatsTable stats_;
  data::TrajectoryEpisode layout_;
  bool sample_;
  mutable std::mt19937_64 rng_;
};

struct StepResult {
  Vec action;    // mu_0, executed
  Seq nominal;   // shifted warm start for the next cycle
  Seq updated;   // weighted average before the shift
  Vec weights;
  Vec costs;
  double best_cost = 0.0, worst_cost = 0.0;  // over finite samples
};

// One MPPI cycle at control step `step`. Samples are clamped to
// [-bound, bound]; sample n draws its noise from a stream seeded by
// (config.seed, step, n).
StepResult mppi_step(const History& history, const Seq& nominal, const RolloutOracle& oracle, const CostSpec& cost,
                     const MPPIConfig& config, std::size_t step, double action_bound = 1.0);

struct EpisodeResult {
  double total_reward = 0.0;
  bool diverged = false;
  Seq states;   // s_0..s_T
  Seq actions;  // a_0..a_{T-1}
  Vec rewards;
  Vec best_costs, worst_costs;
};

// Receding-horizon loop in the true environment, reset with `env_seed`.
EpisodeResult run_episode(const sim::EnvParams& env, const RolloutOracle& oracle, const MPPIConfig& config,
                          const CostSpec& cost, std::size_t steps, std::uint64_t env_seed);

// Line-delimited trace: step, action, next_state, reward, best_cost, worst_cost.
void write_trace(std::ostream& out, const EpisodeResult& result);

}  // namespace sysmoe::plan
