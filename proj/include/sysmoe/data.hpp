#pragma once

// Trajectory episodes, per-channel min-max statistics, padding, splits, the
// episode/stats file formats and synthetic system generators.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sysmoe/numerics.hpp"
#include "sysmoe/sim.hpp"
#include "sysmoe/structure.hpp"

namespace sysmoe::data {

class StatsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Modality { state, action };

std::string to_string(Modality m);

struct ChannelSpec {
  std::string name;
  Modality modality = Modality::state;
  int body_node = structure::kGlobalNode;
  double norm_min = 0.0;
  double norm_max = 0.0;
};

struct TrajectoryEpisode {
  std::string system_id;
  structure::KinematicTree tree;
  std::vector<ChannelSpec> channels;  // state channels first, then action channels
  num::Array states;                  // [T, M_s]
  num::Array actions;                 // [T, M_a]
  std::vector<std::uint8_t> mask;     // 1 = real step

  std::size_t steps() const { return mask.size(); }
  std::size_t state_dim() const { return states.dim(1); }
  std::size_t action_dim() const { return actions.dim(1); }
  std::size_t valid_steps() const;
  std::vector<ChannelSpec> state_channels() const;
  std::vector<ChannelSpec> action_channels() const;
};

struct ChannelStats {
  double min = 0.0;
  double max = 0.0;
  bool operator==(const ChannelStats&) const = default;
};

// Keyed by channel name, state channels then action channels.
using SystemStats = std::vector<std::pair<std::string, ChannelStats>>;
using StatsTable = std::map<std::string, SystemStats>;  // system_id -> stats

SystemStats compute_norm_stats(const std::vector<TrajectoryEpisode>& episodes);
StatsTable compute_stats_table(const std::vector<TrajectoryEpisode>& episodes);

struct NormalizeResult {
  TrajectoryEpisode episode;
  std::size_t clamped = 0;
};

// Maps each channel to [0,1] (clamped); degenerate channels map to 0.5.
NormalizeResult normalize(const TrajectoryEpisode& episode, const SystemStats& stats);
TrajectoryEpisode denormalize(const TrajectoryEpisode& episode, const SystemStats& stats);
double normalize_value(double x, const ChannelStats& s);
double denormalize_value(double x, const ChannelStats& s);

inline constexpr std::size_t kDefaultMaxLen = 150;
TrajectoryEpisode pad_clip(const TrajectoryEpisode& episode, std::size_t max_len = kDefaultMaxLen);

struct DatasetSplit {
  std::vector<TrajectoryEpisode> train, val, test;
  StatsTable stats;
};

// Splits each system's episodes by fraction in file order after a seeded
// shuffle; stats come from the train part only.
DatasetSplit split_dataset(const std::vector<TrajectoryEpisode>& episodes, double train_frac, double val_frac,
                           std::uint64_t seed);

// Episode file: one JSON object per line.
std::string episode_to_json_line(const TrajectoryEpisode& episode);
TrajectoryEpisode episode_from_json_line(const std::string& line);
void write_episodes(const std::string& path, const std::vector<TrajectoryEpisode>& episodes);
std::vector<TrajectoryEpisode> read_episodes(const std::string& path);

// Stats file: header `system_id<TAB>channel<TAB>min<TAB>max`, one row per channel.
void write_stats(const std::string& path, const StatsTable& stats);
StatsTable read_stats(const std::string& path);
const SystemStats& stats_for(const StatsTable& table, const std::string& system_id);

// ---------------------------------------------------------------------------
// Generators.

struct LinearSystem {
  std::string system_id = "sys0";
  num::Array a;  // [M_s, M_s]
  num::Array b;  // [M_s, M_a]
  double noise_std = 0.0;
  double init_range = 0.5;  // s_0 ~ U[-init_range, init_range]
  std::optional<std::vector<double>> initial_state;
};

// s_{t+1} = A s_t + B a_t + eps with a_t ~ U[-1, 1].
std::vector<TrajectoryEpisode> gen_linear_system(const LinearSystem& sys, std::size_t episodes, std::size_t steps,
                                                 std::uint64_t seed);

struct ToyGenParams {
  sim::EnvParams env;
  double action_scale = 1.0;  // a_t ~ U[-scale, scale]
  std::size_t action_hold = 1;  // each draw is repeated for this many steps
  std::optional<std::vector<double>> initial_state;
  double init_range = 1.0;    // x0 (or theta0 - pi) ~ U[-init_range, init_range]
  double init_velocity = 0.0;
  double init_velocity_range = 0.0;  // v0 += U[-range, range] when positive
  std::string system_id;
};

std::vector<TrajectoryEpisode> gen_double_integrator(const ToyGenParams& params, std::size_t episodes,
                                                     std::size_t steps, double dt, std::uint64_t seed);
std::vector<TrajectoryEpisode> gen_pendulum(const ToyGenParams& params, std::size_t episodes, std::size_t steps,
                                            double dt, std::uint64_t seed);

// Linear systems with materially different transition maps, ids sys0..sys{n-1}.
std::vector<LinearSystem> multi_system_specs(std::size_t n_systems, std::uint64_t seed);
std::vector<TrajectoryEpisode> gen_multi_system(std::size_t n_systems, std::size_t episodes_per_system,
                                                std::size_t steps, std::uint64_t seed);

double lag1_autocorrelation(const std::vector<TrajectoryEpisode>& episodes, std::size_t channel);

}  // namespace sysmoe::data
