#pragma once

// AdamW training loop with warmup-cosine schedule, global-norm clipping,
// early stopping on validation CE, freeze masks and teacher-student
// distillation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sysmoe/data.hpp"
#include "sysmoe/model.hpp"
#include "sysmoe/numerics.hpp"

namespace sysmoe::train {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite loss; the message names the step and the batch episode ids.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 2e-4;
  std::size_t warmup = 200;
  std::size_t total_steps = 5000;
  std::size_t batch = 16;
  double weight_decay = 1e-5;
  double clip = 0.25;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;
  std::size_t patience = 10;  // evaluations without improvement; 0 disables early stopping
  std::size_t log_interval = 10;
  std::vector<std::string> freeze;  // group names, see SysMoEModel::group_of
  double kd_alpha = 0.9;            // used only when a teacher is given

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
};

// Linear warmup 0 -> lr, then cosine decay lr -> 0 at total_steps.
double lr_at(std::size_t step, const TrainConfig& config);

double global_norm(const std::vector<num::Array>& grads);
// Scales all gradients by max_norm / norm when the global norm exceeds
// max_norm. Returns the norm before clipping.
double clip_gradients(std::vector<num::Array>& grads, double max_norm);

struct OptimizerState {
  std::vector<num::Array> m, v;
  std::size_t step = 0;
};

// One AdamW update (beta 0.9 / 0.999, eps 1e-8, decoupled decay) on the
// parameters whose entry in `trainable` is true; an empty mask trains all.
void adamw_step(std::vector<num::Var>& params, const std::vector<num::Array>& grads, OptimizerState& state,
                double lr, double weight_decay, const std::vector<bool>& trainable = {});

// Per-parameter trainable flags for a freeze list. Unknown groups are a ConfigError.
std::vector<bool> apply_freeze_mask(const model::SysMoEModel& model, const std::vector<std::string>& freeze);
double trainable_fraction(const model::SysMoEModel& model, const std::vector<bool>& trainable);

// Normalized train/val/test episodes plus the train-split statistics.
struct PreparedData {
  std::vector<data::TrajectoryEpisode> train, val, test;
  data::StatsTable stats;
};
PreparedData prepare(const data::DatasetSplit& split);

// Windows grouped by (state_dim, action_dim) so a batch shares a channel layout.
struct Batch {
  std::vector<std::size_t> episodes;  // indices into the episode list
  std::vector<std::size_t> starts;
};

// Shuffled epochs of random-offset windows, deterministic in `seed`.
class BatchSampler {
 public:
  BatchSampler(const std::vector<data::TrajectoryEpisode>& episodes, std::size_t window, std::size_t batch,
               std::uint64_t seed);
  Batch next();

 private:
  void refill();

  const std::vector<data::TrajectoryEpisode>* episodes_;
  std::size_t window_, batch_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> buckets_;
  std::vector<Batch> queue_;
  std::size_t pos_ = 0;
};

// Fixed evaluation batches: every episode long enough for a window, start 0.
std::vector<Batch> eval_batches(const std::vector<data::TrajectoryEpisode>& episodes, std::size_t window,
                                std::size_t batch);

struct EvalLoss {
  double ce = 0.0;
  double mae = 0.0;  // expectation decode vs next state, normalized space
  std::size_t count = 0;
};
EvalLoss evaluate_loss(const model::SysMoEModel& model, const std::vector<data::TrajectoryEpisode>& episodes,
                       std::size_t batch);

// Mean over positions of the routing-weight entropy, per block.
std::vector<double> routing_entropy(const model::ForwardResult& result);

struct TrainResult {
  model::SysMoEModel best;
  double best_val_ce = 0.0;
  double initial_train_ce = 0.0;
  double final_train_ce = 0.0;
  std::size_t steps = 0;
  bool early_stopped = false;
  double trainable_fraction = 1.0;
  std::vector<double> train_ce;  // per step
  std::vector<double> val_ce;    // per evaluation
};

// Called with the current model at step 0 and at every evaluation point.
using EvalHook = std::function<void(std::size_t step, const model::SysMoEModel& model)>;

// Trains `model` in place and returns the best-validation copy. With a
// teacher, the loss is kd_loss(alpha = config.kd_alpha) against the teacher's
// per-batch predictions. Metrics go to `metrics` as JSON lines when given.
TrainResult train(model::SysMoEModel& model, const std::vector<data::TrajectoryEpisode>& train_set,
                  const std::vector<data::TrajectoryEpisode>& val_set, const TrainConfig& config,
                  const model::SysMoEModel* teacher = nullptr, std::ostream* metrics = nullptr,
                  const EvalHook& on_eval = {});

// Distils `teacher` into a fresh student built from `student_config`.
TrainResult distill(const model::SysMoEModel& teacher, const model::ModelConfig& student_config,
                    std::uint64_t student_seed, const std::vector<data::TrajectoryEpisode>& train_set,
                    const std::vector<data::TrajectoryEpisode>& val_set, const TrainConfig& config,
                    std::ostream* metrics = nullptr);

}  // namespace sysmoe::train
