#include "sysmoe/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace sysmoe::sim {

std::string to_string(EnvKind kind) {
  return kind == EnvKind::pendulum ? "pendulum" : "double-integrator";
}

EnvKind parse_env_kind(const std::string& name) {
  if (name == "double-integrator" || name == "double_integrator" || name == "integrator") {
    return EnvKind::double_integrator;
  }
  if (name == "pendulum") return EnvKind::pendulum;
  throw std::invalid_argument("unknown environment '" + name + "'");
}

double wrap_angle(double theta) {
  constexpr double kPi = std::numbers::pi;
  double w = std::fmod(theta + kPi, 2.0 * kPi);
  if (w < 0) w += 2.0 * kPi;
  w -= kPi;
  // fmod maps +pi to -pi; keep the interval right-closed.
  return w == -kPi ? kPi : w;
}

double goal_distance(const EnvParams& env, const std::vector<double>& x) {
  if (env.kind == EnvKind::pendulum) return std::abs(wrap_angle(x[0] - env.goal));
  return std::abs(x[0] - env.goal);
}

StepResult step(const EnvParams& env, const EnvState& state, const std::vector<double>& action) {
  if (action.size() != env.action_dim()) throw std::invalid_argument("action dimension mismatch");
  StepResult r;
  const double a = std::clamp(action[0], -env.action_bound, env.action_bound);
  r.clamped = a != action[0];
  const double p = state.x[0];
  const double v = state.x[1];
  double v_next = 0.0, p_next = 0.0;
  if (env.kind == EnvKind::double_integrator) {
    v_next = v + a * env.dt;
    p_next = p + v_next * env.dt;
  } else {
    const double inertia = env.mass * env.length * env.length;
    // theta measured from upright: gravity pushes away from 0.
    const double acc = (env.gravity / env.length) * std::sin(p) - env.damping * v + env.torque_scale * a / inertia;
    v_next = v + acc * env.dt;
    p_next = wrap_angle(p + v_next * env.dt);
  }
  r.next.x = {p_next, v_next};
  r.next.t = state.t + 1;
  r.reward = goal_distance(env, state.x) - goal_distance(env, r.next.x) - env.w_ctrl * a * a;
  return r;
}

EnvState reset(const EnvParams& env, std::uint64_t seed) {
  EnvState s;
  if (env.kind == EnvKind::pendulum) {
    s.x = {std::numbers::pi, 0.0};
    return s;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-env.reset_range, env.reset_range);
  s.x = {u(rng), 0.0};
  return s;
}

double pendulum_energy(const EnvParams& env, const std::vector<double>& x) {
  const double inertia = env.mass * env.length * env.length;
  return 0.5 * inertia * x[1] * x[1] + env.mass * env.gravity * env.length * std::cos(x[0]);
}

}  // namespace sysmoe::sim
