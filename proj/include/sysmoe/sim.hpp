#pragma once

// Analytic toy environments: a double integrator (x, v) and a torque-driven
// pendulum (theta, omega) with theta = 0 upright and theta = pi hanging down.
// Both integrate with semi-implicit Euler and bound actions to [-1, 1].

#include <cstdint>
#include <string>
#include <vector>

namespace sysmoe::sim {

enum class EnvKind { double_integrator, pendulum };

std::string to_string(EnvKind kind);
EnvKind parse_env_kind(const std::string& name);

struct EnvParams {
  EnvKind kind = EnvKind::double_integrator;
  double dt = 0.02;
  double action_bound = 1.0;
  double w_ctrl = 1e-3;
  // Goal position (integrator) or goal angle (pendulum).
  double goal = 0.0;
  // Pendulum physics.
  double gravity = 9.81;
  double length = 1.0;
  double mass = 1.0;
  double damping = 0.0;
  double torque_scale = 2.0;
  // Double-integrator reset range for x0; v0 = 0.
  double reset_range = 1.0;

  std::size_t state_dim() const { return 2; }
  std::size_t action_dim() const { return 1; }
};

struct EnvState {
  std::vector<double> x;
  std::int64_t t = 0;
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool clamped = false;
};

double wrap_angle(double theta);  // (-pi, pi]

// Distance from the state to the goal used by the progress reward.
double goal_distance(const EnvParams& env, const std::vector<double>& x);

StepResult step(const EnvParams& env, const EnvState& state, const std::vector<double>& action);
EnvState reset(const EnvParams& env, std::uint64_t seed);

double pendulum_energy(const EnvParams& env, const std::vector<double>& x);

}  // namespace sysmoe::sim
