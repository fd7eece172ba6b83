#include "sysmoe/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sysmoe::tok {

using num::Array;
using num::Var;

std::size_t discretize(double x, std::size_t k_bins) {
  if (k_bins == 0) throw num::ContractError("bin count must be positive");
  const double c = std::clamp(x, 0.0, 1.0);
  const auto idx = static_cast<std::size_t>(std::floor(c * static_cast<double>(k_bins)));
  return std::min(idx, k_bins - 1);
}

double bin_center(std::size_t index, std::size_t k_bins) {
  if (index >= k_bins) {
    throw num::ContractError("bin index " + std::to_string(index) + " out of range for K=" + std::to_string(k_bins));
  }
  return (static_cast<double>(index) + 0.5) / static_cast<double>(k_bins);
}

namespace {

void check_simplex(std::span<const double> p) {
  if (p.empty()) throw num::ContractError("empty distribution");
  double s = 0.0;
  for (double v : p) {
    if (!(v >= -1e-12)) throw num::ContractError("distribution has a negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) {
    throw num::ContractError("distribution sums to " + std::to_string(s) + ", expected 1 within 1e-6");
  }
}

}  // namespace

double decode_distribution(std::span<const double> p) {
  check_simplex(p);
  double e = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) e += p[i] * bin_center(i, p.size());
  return e;
}

double decode_argmax(std::span<const double> p) {
  check_simplex(p);
  const auto it = std::max_element(p.begin(), p.end());
  return bin_center(static_cast<std::size_t>(it - p.begin()), p.size());
}

std::vector<double> one_hot(std::size_t index, std::size_t k_bins) {
  if (index >= k_bins) throw num::ContractError("bin index out of range");
  std::vector<double> v(k_bins, 0.0);
  v[index] = 1.0;
  return v;
}

EmbeddingTables EmbeddingTables::create(std::size_t k_bins, std::size_t d, std::size_t time_rows,
                                        std::size_t max_channels, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  auto table = [&](std::size_t rows) {
    Array a({rows, d});
    for (double& v : a.data()) v = normal(rng);
    return Var(std::move(a), true);
  };
  EmbeddingTables t;
  t.value_proj = table(k_bins);
  t.time_table = table(time_rows);
  t.channel_table = table(max_channels);
  t.modality_table = table(2);
  return t;
}

std::vector<structure::StructIndex> channel_struct_indices(const data::TrajectoryEpisode& episode) {
  const auto per_node = structure::struct_indices(episode.tree, 0);
  const int n = static_cast<int>(episode.tree.size());
  std::vector<structure::StructIndex> out;
  out.reserve(episode.channels.size());
  for (const auto& c : episode.channels) {
    if (c.body_node == structure::kGlobalNode) {
      out.push_back({0, n, n, n});
    } else if (c.body_node >= 0 && c.body_node < n) {
      out.push_back(per_node[static_cast<std::size_t>(c.body_node)]);
    } else {
      throw ConfigError("channel '" + c.name + "' is attached to body node " + std::to_string(c.body_node) +
                        ", which is not in the kinematic tree");
    }
  }
  return out;
}

Var compose_embeddings(std::span<const std::size_t> bins, std::size_t batch, std::size_t steps, std::size_t channels,
                       std::size_t time_offset, std::size_t channel_offset, data::Modality modality,
                       const EmbeddingTables& tables) {
  const std::size_t d = tables.width();
  if (bins.size() != batch * steps * channels) {
    throw num::DimensionError("expected " + std::to_string(batch * steps * channels) + " bins, got " +
                              std::to_string(bins.size()));
  }
  if (time_offset + steps > tables.time_table.dim(0)) {
    throw ConfigError("time index " + std::to_string(time_offset + steps - 1) + " exceeds time table rows " +
                      std::to_string(tables.time_table.dim(0)));
  }
  if (channel_offset + channels > tables.channel_table.dim(0)) {
    throw ConfigError("channel index " + std::to_string(channel_offset + channels - 1) +
                      " exceeds channel table capacity " + std::to_string(tables.channel_table.dim(0)));
  }
  for (std::size_t b : bins) {
    if (b >= tables.k_bins()) throw num::ContractError("bin index " + std::to_string(b) + " >= K");
  }
  const std::size_t mod_row = modality == data::Modality::state ? 0 : 1;
  Var v = num::reshape(num::gather_rows(tables.value_proj, bins), {batch, steps, channels, d});
  Var time = num::reshape(num::slice(tables.time_table, 0, time_offset, time_offset + steps), {1, steps, 1, d});
  Var ch = num::reshape(num::slice(tables.channel_table, 0, channel_offset, channel_offset + channels),
                        {1, 1, channels, d});
  Var mod = num::reshape(num::slice(tables.modality_table, 0, mod_row, mod_row + 1), {1, 1, 1, d});
  return num::add(num::add(num::add(v, time), ch), mod);
}

TokenGrid embed(const data::TrajectoryEpisode& episode, const EmbeddingTables& tables, const Var& struct_embeds) {
  const std::size_t t = episode.steps();
  const std::size_t ms = episode.state_dim();
  const std::size_t ma = episode.action_dim();
  const std::size_t m = ms + ma;
  const std::size_t k = tables.k_bins();
  const std::size_t d = tables.width();
  if (struct_embeds.defined() && (struct_embeds.value().rank() != 2 || struct_embeds.dim(0) != m ||
                                  struct_embeds.dim(1) != d)) {
    throw ConfigError("structural embeddings " + num::shape_str(struct_embeds.shape()) + " do not cover the " +
                      std::to_string(m) + " channels of system '" + episode.system_id + "'");
  }
  TokenGrid grid;
  grid.k_bins = k;
  grid.steps = t;
  grid.channels = m;
  for (const auto& c : episode.channels) grid.modality.push_back(c.modality);
  std::vector<std::size_t> sbins(t * ms), abins(t * ma);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t c = 0; c < ms; ++c) sbins[i * ms + c] = discretize(episode.states.at(i, c), k);
    for (std::size_t c = 0; c < ma; ++c) abins[i * ma + c] = discretize(episode.actions.at(i, c), k);
  }
  grid.targets = sbins;
  std::vector<Var> parts;
  parts.push_back(compose_embeddings(sbins, 1, t, ms, 0, 0, data::Modality::state, tables));
  if (ma > 0) parts.push_back(compose_embeddings(abins, 1, t, ma, 0, ms, data::Modality::action, tables));
  Var x = num::reshape(parts.size() == 1 ? parts[0] : num::concat(parts, 2), {t, m, d});
  if (struct_embeds.defined()) x = num::add(x, num::reshape(struct_embeds, {1, m, d}));
  grid.input_embeds = x;
  return grid;
}

}  // namespace sysmoe::tok
