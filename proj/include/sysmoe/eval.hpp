#pragma once

// Rollout prediction metrics in normalized space, routing-weight dumps, the
// environment-scaling harness (Sys-MoE vs dense) and few-shot curves.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sysmoe/data.hpp"
#include "sysmoe/model.hpp"
#include "sysmoe/training.hpp"

namespace sysmoe::eval {

enum class Decode { expectation, argmax };

struct EpisodeError {
  std::size_t index = 0;
  std::string system_id;
  double mae = 0.0, mse = 0.0;
  std::size_t count = 0;
};

struct ChannelError {
  std::string system_id;
  std::string channel;
  double mae = 0.0, mse = 0.0;
  std::size_t count = 0;
};

struct RolloutReport {
  double mae = 0.0, mse = 0.0;  // unmasked-element means over all evaluated episodes
  std::size_t count = 0;
  std::size_t skipped = 0;          // episodes with fewer than h + k real steps
  std::size_t clamped_targets = 0;  // ground-truth entries outside [0, 1]
  std::vector<EpisodeError> episodes;
  std::vector<ChannelError> channels;
};

// Predicted normalized states for the k steps after the history window of an
// episode starting at row 0: [k, M_s].
using Predictor = std::function<num::Array(const data::TrajectoryEpisode&)>;

// Scores predictions for rows h..h+k-1 of each episode against the truth.
RolloutReport score_rollouts(const std::vector<data::TrajectoryEpisode>& episodes, std::size_t h, std::size_t k,
                             const Predictor& predict);

// Single forward pass per episode window, decoded per `decode`.
RolloutReport evaluate_rollout(const model::SysMoEModel& model, const std::vector<data::TrajectoryEpisode>& episodes,
                               Decode decode = Decode::expectation, std::size_t batch = 16);

// Decoded [B, k, M_s] future predictions for a model input.
num::Array predict_future(const model::SysMoEModel& model, const model::ModelInput& input, Decode decode);

void write_report(const std::string& path, const RolloutReport& report);

// Mean final-position routing weights per system and block.
struct RoutingDump {
  std::size_t n_blocks = 0, n_experts = 0;
  std::vector<std::string> systems;
  std::vector<std::vector<std::vector<double>>> weights;  // [system][block][expert]
};
RoutingDump dump_routing(const model::SysMoEModel& model, const std::vector<data::TrajectoryEpisode>& episodes);
void write_routing(const std::string& path, const RoutingDump& dump);

// Dense-variant config with |params| within 5% of the Sys-MoE config: P = 1,
// depth increased while it stays under the budget, then the expert width
// adjusted to close the remaining gap.
model::ModelConfig matched_dense_config(const model::ModelConfig& moe);
std::size_t parameter_count(const model::ModelConfig& config);

struct ScalingRow {
  std::size_t n_systems = 0;
  std::string variant;  // "sysmoe" or "dense"
  std::uint64_t seed = 0;
  std::size_t params = 0;
  double test_mae = 0.0, test_mse = 0.0;
};

struct ScalingOptions {
  std::vector<std::size_t> n_values{1, 2, 5};
  std::vector<std::uint64_t> seeds{0};
  std::size_t episodes_per_system = 24;
  std::size_t steps = 48;
  std::uint64_t data_seed = 7;
};

std::vector<ScalingRow> scaling_harness(const ScalingOptions& options, const model::ModelConfig& base,
                                        const train::TrainConfig& train_config, std::ostream* log = nullptr);
void write_scaling(const std::string& path, const std::vector<ScalingRow>& rows);

struct CurvePoint {
  std::size_t step = 0;
  double val_mse = 0.0;
};
struct FewShotCurves {
  std::vector<CurvePoint> pretrained, scratch;
};
// Fine-tunes a copy of `pretrained` and a fresh model on the same data order,
// recording rollout MSE on `val` at step 0 and every eval_interval steps.
FewShotCurves fewshot_curves(const model::SysMoEModel& pretrained, const model::ModelConfig& scratch_config,
                             std::uint64_t scratch_seed, const std::vector<data::TrajectoryEpisode>& train_set,
                             const std::vector<data::TrajectoryEpisode>& val, const train::TrainConfig& config);

}  // namespace sysmoe::eval
