#pragma once

// The Sys-MoE world model: per-timestep channel self-attention, action
// cross-attention, a selective SSM over time with an appended system token
// that drives a softmax router, a soft mixture of expert MLPs and a K-bin
// categorical decoder. Also the CE / KD losses and the checkpoint format.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sysmoe/data.hpp"
#include "sysmoe/numerics.hpp"
#include "sysmoe/structure.hpp"
#include "sysmoe/tokenizer.hpp"

namespace sysmoe::model {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t d = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  std::size_t n_experts = 4;  // P
  std::size_t k_bins = 64;    // K
  std::size_t history = 16;   // h
  std::size_t horizon = 16;   // k
  std::size_t ssm_state = 16;
  std::size_t expert_hidden = 128;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t max_channels = 128;
  std::size_t max_objects = 8;
  std::size_t max_nodes = 128;
  double dropout = 0.1;
  bool dense_ssm = false;
  bool no_struct_embed = false;

  // Single-core defaults; full_scale is d 256, 6 blocks, K 256, h 50, k 100.
  static ModelConfig desk();
  static ModelConfig full_scale();

  std::size_t window() const { return history + horizon; }  // L
  std::size_t inner() const { return expand * d; }
  std::size_t dt_rank() const { return (d + 15) / 16; }
  void validate() const;

  // Flat key/value view used by checkpoints and config echoes.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

struct NamedParam {
  std::string name;
  num::Var var;
};

// One batch of windows that share a channel signature. All values are in
// normalized [0,1] space.
struct ModelInput {
  std::size_t batch = 0;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  num::Array history;  // [B, h, M_s]
  num::Array actions;  // [B, L, M_a]; rows h..L-1 are the future actions
  // Structural index per channel (states then actions); either one shared
  // list of M_s + M_a entries or one list per episode (B * (M_s + M_a)).
  std::vector<structure::StructIndex> struct_idx;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  // Replaces the router output in every block with this P-vector.
  std::optional<std::vector<double>> routing_override;
};

struct ForwardResult {
  num::Var log_probs;                 // [B, L, M_s, K]
  std::vector<num::Array> routing;    // per block, [B, L, P] (empty for dense_ssm)
  std::size_t batch = 0;
  std::size_t state_dim = 0;

  num::Array probs() const;
};

// ---------------------------------------------------------------------------
// Block components, exposed for testing and reuse.

// Optional inverted dropout applied to a sublayer output.
struct DropoutSpec {
  double rate = 0.0;
  bool training = false;
  std::mt19937_64* rng = nullptr;
  num::Var operator()(const num::Var& x) const;
};

struct AttentionWeights {
  num::Var wq, bq, wk, bk, wv, bv, wo, bo, ln_g, ln_b;
};

// Multi-head attention of q_in [G, Mq, d] over kv_in [G, Mk, d], output
// projection included. `probs_out` receives the [G * heads, Mq, Mk] weights.
num::Var multi_head_attention(const num::Var& q_in, const num::Var& kv_in, const AttentionWeights& w,
                              std::size_t heads, num::Array* probs_out = nullptr);
// LN(S + SelfAttn(S)) over the channel axis of s [G, M_s, d].
num::Var channel_self_attention(const num::Var& s, const AttentionWeights& w, std::size_t heads,
                                const DropoutSpec& drop = {}, num::Array* probs_out = nullptr);
// LN(S + CrossAttn(S, A)); an undefined `a` (no action channels) gives LN(S).
num::Var action_cross_attention(const num::Var& s, const num::Var& a, const AttentionWeights& w, std::size_t heads,
                                const DropoutSpec& drop = {}, num::Array* probs_out = nullptr);

struct SsmWeights {
  num::Var in_proj;   // [d, 2D]
  num::Var conv;      // [D, W]
  num::Var x_proj;    // [D, R + 2N]
  num::Var dt_proj;   // [R, D]
  num::Var dt_bias;   // [D]
  num::Var a_log;     // [D, N]
  num::Var d_skip;    // [D]
  num::Var out_proj;  // [D, d]
};

struct SsmResult {
  num::Var u;        // [G, L, d]
  num::Var readout;  // [G, L, d]: output of the system token appended after each position
};

// Selective scan over seq [G, L, d]. With a system token, readout[:, l] is the
// output the token would get if appended right after position l, so the last
// row equals the token's output after the full sequence.
SsmResult ssm_scan(const num::Var& seq, const SsmWeights& w, const num::Var& system_token = {});

// softmax(u W + b) over the last axis.
num::Var route(const num::Var& u_sys, const num::Var& router_w, const num::Var& router_b);
// GeLU MLP experts on u [G, L, d]: w1 [d, P*H], b1 [P*H], w2 [P, H, d], b2 [P, 1, d] -> [P, G, L, d].
num::Var expert_outputs(const num::Var& u, const num::Var& w1, const num::Var& b1, const num::Var& w2,
                        const num::Var& b2);
// experts [P, B, M, L, d] mixed by w [B, L, P] -> [B, M, L, d].
num::Var moe_mix(const num::Var& experts, const num::Var& w);

class SysMoEModel {
 public:
  SysMoEModel() = default;
  SysMoEModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const num::Var& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  std::size_t parameter_count() const;

  ForwardResult forward(const ModelInput& input, const ForwardOptions& options = {}) const;

  // Freeze-mask groups: "embeddings", "block<i>", "queries", "decoder", "all".
  static std::string group_of(const std::string& param_name);
  std::vector<std::string> groups() const;

  // Deep copy with independent parameter storage.
  SysMoEModel clone() const;

  // which: "attn" or "cross".
  AttentionWeights attention_weights(std::size_t block, const std::string& which) const;
  SsmWeights ssm_weights(std::size_t block) const;

 private:
  num::Var& add_param(const std::string& name, num::Array value);
  const num::Var& p(const std::string& name) const;

  ModelConfig config_;
  std::vector<NamedParam> params_;
  std::map<std::string, std::size_t> index_;
};

// Builds a model input from windows [start, start + L) of normalized episodes
// that share a channel signature. Episodes shorter than start + h are an error.
ModelInput make_input(const std::vector<const data::TrajectoryEpisode*>& episodes,
                      const std::vector<std::size_t>& starts, const ModelConfig& config);

// Next-step targets for positions 0..L-2 and their loss mask, laid out [B, L, M_s].
struct Targets {
  std::vector<std::size_t> bins;
  std::vector<std::uint8_t> mask;
};
Targets make_targets(const std::vector<const data::TrajectoryEpisode*>& episodes,
                     const std::vector<std::size_t>& starts, const ModelConfig& config);

// Mean over unmasked (position, channel) pairs of -log p(target).
num::Var ce_loss(const num::Var& log_probs, const std::vector<std::size_t>& targets,
                 const std::vector<std::uint8_t>& mask);
// alpha * CE + (1 - alpha) * mean(-sum teacher * log student); teacher is data.
num::Var kd_loss(const num::Var& student_log_probs, const num::Array& teacher_probs,
                 const std::vector<std::size_t>& targets, const std::vector<std::uint8_t>& mask, double alpha);

// Checkpoint: text header with the config and stats, then named parameters
// stored as raw little-endian doubles.
void save_checkpoint(const std::string& path, const SysMoEModel& model, const data::StatsTable& stats);
struct Checkpoint {
  SysMoEModel model;
  data::StatsTable stats;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sysmoe::model
