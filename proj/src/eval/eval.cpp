#include "sysmoe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>

#include "sysmoe/tokenizer.hpp"

namespace sysmoe::eval {

using data::TrajectoryEpisode;
using model::ModelConfig;
using model::SysMoEModel;
using num::Array;

namespace {

bool has_full_window(const TrajectoryEpisode& ep, std::size_t len) {
  if (ep.steps() < len) return false;
  for (std::size_t t = 0; t < len; ++t)
    if (!ep.mask[t]) return false;
  return true;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  return out;
}

// Groups eligible episode indices by channel layout, keeping file order inside a group.
std::vector<std::vector<std::size_t>> layout_groups(const std::vector<TrajectoryEpisode>& episodes,
                                                    const std::vector<std::size_t>& indices) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> by_layout;
  for (std::size_t i : indices) by_layout[{episodes[i].state_dim(), episodes[i].action_dim()}].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [key, ids] : by_layout) out.push_back(std::move(ids));
  return out;
}

}  // namespace

RolloutReport score_rollouts(const std::vector<TrajectoryEpisode>& episodes, std::size_t h, std::size_t k,
                             const Predictor& predict) {
  RolloutReport report;
  std::map<std::pair<std::string, std::string>, ChannelError> channels;
  std::vector<std::pair<std::string, std::string>> channel_order;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const TrajectoryEpisode& ep = episodes[i];
    if (!has_full_window(ep, h + k)) {
      ++report.skipped;
      continue;
    }
    const std::size_t ms = ep.state_dim();
    const Array pred = predict(ep);
    if (pred.rank() != 2 || pred.dim(0) != k || pred.dim(1) != ms)
      throw std::invalid_argument("predictor returned " + num::shape_str(pred.shape()) + " for episode " +
                                  std::to_string(i));
    EpisodeError e{i, ep.system_id, 0.0, 0.0, 0};
    const auto names = ep.state_channels();
    for (std::size_t c = 0; c < ms; ++c) {
      auto key = std::make_pair(ep.system_id, names[c].name);
      auto [it, inserted] = channels.try_emplace(key, ChannelError{ep.system_id, names[c].name, 0.0, 0.0, 0});
      if (inserted) channel_order.push_back(key);
      ChannelError& ce = it->second;
      for (std::size_t j = 0; j < k; ++j) {
        double truth = ep.states.at(h + j, c);
        if (truth < 0.0 || truth > 1.0) {
          ++report.clamped_targets;
          truth = std::clamp(truth, 0.0, 1.0);
        }
        const double err = pred.at(j, c) - truth;
        e.mae += std::abs(err);
        e.mse += err * err;
        ce.mae += std::abs(err);
        ce.mse += err * err;
        ++ce.count;
      }
    }
    e.count = ms * k;
    abs_sum += e.mae;
    sq_sum += e.mse;
    report.count += e.count;
    e.mae /= static_cast<double>(e.count);
    e.mse /= static_cast<double>(e.count);
    report.episodes.push_back(std::move(e));
  }
  if (report.count > 0) {
    report.mae = abs_sum / static_cast<double>(report.count);
    report.mse = sq_sum / static_cast<double>(report.count);
  }
  for (const auto& key : channel_order) {
    ChannelError ce = channels.at(key);
    ce.mae /= static_cast<double>(ce.count);
    ce.mse /= static_cast<double>(ce.count);
    report.channels.push_back(std::move(ce));
  }
  return report;
}

Array predict_future(const SysMoEModel& model, const model::ModelInput& input, Decode decode) {
  const ModelConfig& c = model.config();
  num::NoGradGuard no_grad;
  const Array probs = model.forward(input).probs();  // [B, L, Ms, K]
  const std::size_t b = input.batch, ms = input.state_dim, l = c.window(), kb = c.k_bins;
  Array out(num::Shape{b, c.horizon, ms});
  const double* p = probs.storage().data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c.horizon; ++j)
      for (std::size_t ch = 0; ch < ms; ++ch) {
        // Position h-1+j predicts row h+j.
        const std::size_t pos = c.history - 1 + j;
        std::span<const double> dist(p + ((i * l + pos) * ms + ch) * kb, kb);
        out[(i * c.horizon + j) * ms + ch] =
            decode == Decode::expectation ? tok::decode_distribution(dist) : tok::decode_argmax(dist);
      }
  return out;
}

RolloutReport evaluate_rollout(const SysMoEModel& model, const std::vector<TrajectoryEpisode>& episodes,
                               Decode decode, std::size_t batch) {
  const ModelConfig& c = model.config();
  if (batch == 0) throw std::invalid_argument("evaluate_rollout: batch must be >= 1");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < episodes.size(); ++i)
    if (has_full_window(episodes[i], c.window())) eligible.push_back(i);

  std::vector<Array> predictions(episodes.size());
  for (const auto& group : layout_groups(episodes, eligible)) {
    for (std::size_t lo = 0; lo < group.size(); lo += batch) {
      const std::size_t hi = std::min(group.size(), lo + batch);
      std::vector<const TrajectoryEpisode*> eps;
      for (std::size_t g = lo; g < hi; ++g) eps.push_back(&episodes[group[g]]);
      const std::vector<std::size_t> starts(eps.size(), 0);
      const Array pred = predict_future(model, model::make_input(eps, starts, c), decode);
      const std::size_t ms = eps.front()->state_dim();
      for (std::size_t g = lo; g < hi; ++g) {
        Array one(num::Shape{c.horizon, ms});
        for (std::size_t j = 0; j < c.horizon; ++j)
          for (std::size_t ch = 0; ch < ms; ++ch) one.at(j, ch) = pred[((g - lo) * c.horizon + j) * ms + ch];
        predictions[group[g]] = std::move(one);
      }
    }
  }
  return score_rollouts(episodes, c.history, c.horizon, [&](const TrajectoryEpisode& ep) {
    return predictions[static_cast<std::size_t>(&ep - episodes.data())];
  });
}

void write_report(const std::string& path, const RolloutReport& report) {
  auto out = open_out(path);
  out << "scope\tsystem_id\tkey\tmae\tmse\tcount\n";
  out << "aggregate\t*\t*\t" << report.mae << '\t' << report.mse << '\t' << report.count << '\n';
  for (const auto& e : report.episodes)
    out << "episode\t" << e.system_id << '\t' << e.index << '\t' << e.mae << '\t' << e.mse << '\t' << e.count << '\n';
  for (const auto& c : report.channels)
    out << "channel\t" << c.system_id << '\t' << c.channel << '\t' << c.mae << '\t' << c.mse << '\t' << c.count << '\n';
  out << "skipped\t*\t*\t0\t0\t" << report.skipped << '\n';
  out << "clamped_targets\t*\t*\t0\t0\t" << report.clamped_targets << '\n';
}

RoutingDump dump_routing(const SysMoEModel& model, const std::vector<TrajectoryEpisode>& episodes) {
  const ModelConfig& c = model.config();
  RoutingDump dump;
  dump.n_blocks = c.n_blocks;
  dump.n_experts = c.dense_ssm ? 1 : c.n_experts;
  std::map<std::string, std::size_t> row_of;
  std::vector<std::size_t> counts;
  num::NoGradGuard no_grad;
  for (const auto& ep : episodes) {
    if (!has_full_window(ep, c.window())) continue;
    auto [it, inserted] = row_of.try_emplace(ep.system_id, dump.systems.size());
    if (inserted) {
      dump.systems.push_back(ep.system_id);
      dump.weights.emplace_back(c.n_blocks, std::vector<double>(dump.n_experts, 0.0));
      counts.push_back(0);
    }
    const std::size_t row = it->second;
    const auto result = model.forward(model::make_input({&ep}, {0}, c));
    for (std::size_t blk = 0; blk < c.n_blocks; ++blk) {
      for (std::size_t p = 0; p < dump.n_experts; ++p) {
        // Dense models route everything to the single expert.
        const double w = c.dense_ssm ? 1.0 : result.routing[blk][(c.window() - 1) * dump.n_experts + p];
        dump.weights[row][blk][p] += w;
      }
    }
    ++counts[row];
  }
  for (std::size_t s = 0; s < dump.systems.size(); ++s)
    for (auto& block : dump.weights[s])
      for (double& w : block) w /= static_cast<double>(counts[s]);
  return dump;
}

void write_routing(const std::string& path, const RoutingDump& dump) {
  auto out = open_out(path);
  out << "system_id\tblock";
  for (std::size_t p = 0; p < dump.n_experts; ++p) out << "\texpert" << p;
  out << '\n';
  for (std::size_t s = 0; s < dump.systems.size(); ++s)
    for (std::size_t blk = 0; blk < dump.n_blocks; ++blk) {
      out << dump.systems[s] << '\t' << blk;
      for (double w : dump.weights[s][blk]) out << '\t' << w;
      out << '\n';
    }
}

std::size_t parameter_count(const ModelConfig& config) { return SysMoEModel(config, 0).parameter_count(); }

ModelConfig matched_dense_config(const ModelConfig& moe) {
  const double target = static_cast<double>(parameter_count(moe));
  ModelConfig dense = moe;
  dense.dense_ssm = true;
  dense.n_experts = 1;
  for (;;) {
    ModelConfig deeper = dense;
    ++deeper.n_blocks;
    if (static_cast<double>(parameter_count(deeper)) > target) break;
    dense = deeper;
  }
  // The count is affine in expert_hidden, so two probes give the exact slope.
  ModelConfig probe = dense;
  probe.expert_hidden = dense.expert_hidden + 1;
  const double base = static_cast<double>(parameter_count(dense));
  const double slope = static_cast<double>(parameter_count(probe)) - base;
  const double want = static_cast<double>(dense.expert_hidden) + (target - base) / slope;
  dense.expert_hidden = static_cast<std::size_t>(std::max(1.0, std::round(want)));
  const double got = static_cast<double>(parameter_count(dense));
  if (std::abs(got - target) > 0.05 * target)
    throw std::logic_error("matched_dense_config: cannot match " + std::to_string(target) + " parameters (got " +
                           std::to_string(got) + ")");
  return dense;
}

std::vector<ScalingRow> scaling_harness(const ScalingOptions& options, const ModelConfig& base,
                                        const train::TrainConfig& train_config, std::ostream* log) {
  ModelConfig moe = base;
  moe.dense_ssm = false;
  const ModelConfig dense = matched_dense_config(moe);
  const std::size_t moe_params = parameter_count(moe), dense_params = parameter_count(dense);
  if (std::abs(static_cast<double>(dense_params) - static_cast<double>(moe_params)) >
      0.05 * static_cast<double>(moe_params))
    throw std::logic_error("scaling_harness: parameter budgets differ by more than 5%");

  std::vector<ScalingRow> rows;
  for (std::size_t n : options.n_values) {
    const auto episodes = data::gen_multi_system(n, options.episodes_per_system, options.steps, options.data_seed);
    const auto prepared = train::prepare(data::split_dataset(episodes, 0.7, 0.15, options.data_seed));
    for (std::uint64_t seed : options.seeds) {
      for (const auto& [variant, config, params] :
           {std::make_tuple(std::string("sysmoe"), moe, moe_params),
            std::make_tuple(std::string("dense"), dense, dense_params)}) {
        SysMoEModel m(config, seed);
        train::TrainConfig tc = train_config;
        tc.seed = seed;
        const auto result = train::train(m, prepared.train, prepared.val, tc);
        const auto report = evaluate_rollout(result.best, prepared.test);
        rows.push_back({n, variant, seed, params, report.mae, report.mse});
        if (log)
          *log << "scale n=" << n << " variant=" << variant << " seed=" << seed << " params=" << params
               << " test_mae=" << report.mae << " test_mse=" << report.mse << '\n';
      }
    }
  }
  return rows;
}

void write_scaling(const std::string& path, const std::vector<ScalingRow>& rows) {
  auto out = open_out(path);
  out << "n_systems\tvariant\tseed\tparams\ttest_mae\ttest_mse\n";
  for (const auto& r : rows)
    out << r.n_systems << '\t' << r.variant << '\t' << r.seed << '\t' << r.params << '\t' << r.test_mae << '\t'
        << r.test_mse << '\n';
}

FewShotCurves fewshot_curves(const SysMoEModel& pretrained, const ModelConfig& scratch_config,
                             std::uint64_t scratch_seed, const std::vector<TrajectoryEpisode>& train_set,
                             const std::vector<TrajectoryEpisode>& val, const train::TrainConfig& config) {
  FewShotCurves curves;
  auto run = [&](SysMoEModel model, std::vector<CurvePoint>& curve) {
    train::train(model, train_set, val, config, nullptr, nullptr, [&](std::size_t step, const SysMoEModel& m) {
      curve.push_back({step, evaluate_rollout(m, val).mse});
    });
  };
  run(pretrained.clone(), curves.pretrained);
  run(SysMoEModel(scratch_config, scratch_seed), curves.scratch);
  return curves;
}

}  // namespace sysmoe::eval
