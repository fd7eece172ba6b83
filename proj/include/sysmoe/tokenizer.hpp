#pragma once

// K-bin discretization of normalized scalars and additive token embeddings
// (value + time + channel + modality + structure).

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "sysmoe/data.hpp"
#include "sysmoe/numerics.hpp"
#include "sysmoe/structure.hpp"

namespace sysmoe::tok {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// min(floor(x*K), K-1); x is clamped to [0,1] first.
std::size_t discretize(double x, std::size_t k_bins);
// (index + 0.5) / K.
double bin_center(std::size_t index, std::size_t k_bins);
// Expectation over bin centers; p must sum to 1 within 1e-6.
double decode_distribution(std::span<const double> p);
// Center of the most probable bin (lowest index on ties).
double decode_argmax(std::span<const double> p);
std::vector<double> one_hot(std::size_t index, std::size_t k_bins);

struct EmbeddingTables {
  num::Var value_proj;     // [K, d]
  num::Var time_table;     // [time_rows, d]
  num::Var channel_table;  // [max_channels, d]
  num::Var modality_table; // [2, d]

  static EmbeddingTables create(std::size_t k_bins, std::size_t d, std::size_t time_rows, std::size_t max_channels,
                                std::mt19937_64& rng, double stddev = 0.02);
  std::size_t k_bins() const { return value_proj.dim(0); }
  std::size_t width() const { return value_proj.dim(1); }
};

struct TokenGrid {
  std::vector<std::size_t> targets;   // [T, M_s] bin indices of the state channels
  num::Var input_embeds;              // [T, M, d], state channels then action channels
  std::size_t k_bins = 0;
  std::vector<data::Modality> modality;  // per channel
  std::size_t steps = 0;
  std::size_t channels = 0;
};

// Structural index tuple of every channel (states then actions), object rank 0.
std::vector<structure::StructIndex> channel_struct_indices(const data::TrajectoryEpisode& episode);

// Embeds a normalized episode. `struct_embeds` holds one row per channel
// ([M, d]); pass an undefined Var to omit the structural summand.
TokenGrid embed(const data::TrajectoryEpisode& episode, const EmbeddingTables& tables, const num::Var& struct_embeds);

// Value projection of `bins` ([batch, steps, channels] flattened) plus time
// rows time_offset + t, channel rows channel_offset + m and the modality row;
// returns [batch, steps, channels, d]. Shared by embed() and the model.
num::Var compose_embeddings(std::span<const std::size_t> bins, std::size_t batch, std::size_t steps,
                            std::size_t channels, std::size_t time_offset, std::size_t channel_offset,
                            data::Modality modality, const EmbeddingTables& tables);

}  // namespace sysmoe::tok
