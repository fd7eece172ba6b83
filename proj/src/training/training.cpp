#include "sysmoe/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "sysmoe/tokenizer.hpp"

namespace sysmoe::train {

using data::TrajectoryEpisode;
using model::SysMoEModel;
using num::Array;
using num::Var;

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Rows [0, last real row] of an episode.
std::size_t real_length(const TrajectoryEpisode& ep) {
  std::size_t n = ep.steps();
  while (n > 0 && !ep.mask[n - 1]) --n;
  return n;
}

std::vector<std::vector<std::size_t>> bucket_by_layout(const std::vector<TrajectoryEpisode>& episodes,
                                                       std::size_t window) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> by_dims;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (episodes[i].steps() < window || real_length(episodes[i]) < 2) continue;
    by_dims[{episodes[i].state_dim(), episodes[i].action_dim()}].push_back(i);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& [dims, idx] : by_dims) out.push_back(std::move(idx));
  return out;
}

std::vector<const TrajectoryEpisode*> pointers(const std::vector<TrajectoryEpisode>& episodes, const Batch& b) {
  std::vector<const TrajectoryEpisode*> out;
  for (std::size_t i : b.episodes) out.push_back(&episodes[i]);
  return out;
}

std::size_t mask_count(const std::vector<std::uint8_t>& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config.

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a finite nonnegative number");
  if (total_steps == 0) throw ConfigError("train.total_steps must be at least 1");
  if (warmup > total_steps) {
    throw ConfigError("train.warmup (" + std::to_string(warmup) + ") exceeds train.total_steps (" +
                      std::to_string(total_steps) + ")");
  }
  if (!(clip > 0.0)) throw ConfigError("train.clip must be positive");
  if (batch == 0) throw ConfigError("train.batch must be at least 1");
  if (eval_interval == 0) throw ConfigError("train.eval_interval must be at least 1");
  if (log_interval == 0) throw ConfigError("train.log_interval must be at least 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be nonnegative");
  if (!(kd_alpha >= 0.0 && kd_alpha <= 1.0)) throw ConfigError("train.kd_alpha must lie in [0, 1]");
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::string groups;
  for (std::size_t i = 0; i < freeze.size(); ++i) groups += (i ? "," : "") + freeze[i];
  return {{"lr", fmt(lr)},
          {"warmup", std::to_string(warmup)},
          {"total_steps", std::to_string(total_steps)},
          {"batch", std::to_string(batch)},
          {"weight_decay", fmt(weight_decay)},
          {"clip", fmt(clip)},
          {"seed", std::to_string(seed)},
          {"eval_interval", std::to_string(eval_interval)},
          {"patience", std::to_string(patience)},
          {"log_interval", std::to_string(log_interval)},
          {"freeze", groups},
          {"kd_alpha", fmt(kd_alpha)}};
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [key, value] : kv) {
    auto as_size = [&](std::size_t& out) {
      try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size() || value.find('-') != std::string::npos) throw std::invalid_argument("");
        out = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("train." + key + ": expected a nonnegative integer, got '" + value + "'");
      }
    };
    auto as_double = [&](double& out) {
      try {
        std::size_t pos = 0;
        out = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ConfigError("train." + key + ": expected a number, got '" + value + "'");
      }
    };
    if (key == "lr") as_double(c.lr);
    else if (key == "warmup") as_size(c.warmup);
    else if (key == "total_steps") as_size(c.total_steps);
    else if (key == "batch") as_size(c.batch);
    else if (key == "weight_decay") as_double(c.weight_decay);
    else if (key == "clip") as_double(c.clip);
    else if (key == "seed") {
      std::size_t s = 0;
      as_size(s);
      c.seed = s;
    } else if (key == "eval_interval") as_size(c.eval_interval);
    else if (key == "patience") as_size(c.patience);
    else if (key == "log_interval") as_size(c.log_interval);
    else if (key == "kd_alpha") as_double(c.kd_alpha);
    else if (key == "freeze") {
      c.freeze.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) c.freeze.push_back(item);
      }
    } else {
      throw ConfigError("unknown key train." + key);
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer pieces.

double lr_at(std::size_t step, const TrainConfig& c) {
  if (step > c.total_steps) throw num::ContractError("lr_at: step beyond total_steps");
  if (step < c.warmup) return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup);
  if (c.total_steps == c.warmup) return c.lr;
  const double progress = static_cast<double>(step - c.warmup) / static_cast<double>(c.total_steps - c.warmup);
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_norm(const std::vector<Array>& grads) {
  double s = 0.0;
  for (const Array& g : grads) {
    for (double v : g.data()) s += v * v;
  }
  return std::sqrt(s);
}

double clip_gradients(std::vector<Array>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw num::ContractError("clip_gradients: max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (Array& g : grads) {
      for (double& v : g.data()) v *= f;
    }
  }
  return norm;
}

void adamw_step(std::vector<Var>& params, const std::vector<Array>& grads, OptimizerState& st, double lr,
                double weight_decay, const std::vector<bool>& trainable) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (grads.size() != params.size() || (!trainable.empty() && trainable.size() != params.size())) {
    throw num::DimensionError("adamw_step: parameter/gradient/mask counts differ");
  }
  if (st.m.empty()) {
    for (const Var& p : params) {
      st.m.emplace_back(p.shape(), 0.0);
      st.v.emplace_back(p.shape(), 0.0);
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    if (grads[i].shape() != params[i].shape()) {
      throw num::DimensionError("adamw_step: gradient " + num::shape_str(grads[i].shape()) + " vs parameter " +
                                num::shape_str(params[i].shape()));
    }
    auto p = params[i].mutable_value().data();
    auto g = grads[i].data();
    auto m = st.m[i].data();
    auto v = st.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= lr * weight_decay * p[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

std::vector<bool> apply_freeze_mask(const SysMoEModel& model, const std::vector<std::string>& freeze) {
  const auto groups = model.groups();
  for (const std::string& f : freeze) {
    if (f != "all" && std::find(groups.begin(), groups.end(), f) == groups.end()) {
      std::string known;
      for (const auto& g : groups) known += " " + g;
      throw ConfigError("unknown freeze group '" + f + "' (known: all" + known + ")");
    }
  }
  const bool all = std::find(freeze.begin(), freeze.end(), "all") != freeze.end();
  std::vector<bool> trainable;
  for (const auto& np : model.parameters()) {
    const std::string g = SysMoEModel::group_of(np.name);
    trainable.push_back(!all && std::find(freeze.begin(), freeze.end(), g) == freeze.end());
  }
  return trainable;
}

double trainable_fraction(const SysMoEModel& model, const std::vector<bool>& trainable) {
  std::size_t total = 0, on = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const std::size_t n = model.parameters()[i].var.size();
    total += n;
    if (trainable.empty() || trainable[i]) on += n;
  }
  return total ? static_cast<double>(on) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Data plumbing.

PreparedData prepare(const data::DatasetSplit& split) {
  PreparedData out;
  out.stats = split.stats;
  auto norm = [&](const std::vector<TrajectoryEpisode>& in, std::vector<TrajectoryEpisode>& dst) {
    for (const auto& ep : in) dst.push_back(data::normalize(ep, data::stats_for(split.stats, ep.system_id)).episode);
  };
  norm(split.train, out.train);
  norm(split.val, out.val);
  norm(split.test, out.test);
  return out;
}

BatchSampler::BatchSampler(const std::vector<TrajectoryEpisode>& episodes, std::size_t window, std::size_t batch,
                           std::uint64_t seed)
    : episodes_(&episodes), window_(window), batch_(batch), rng_(seed) {
  if (batch == 0) throw ConfigError("batch size must be at least 1");
  buckets_ = bucket_by_layout(episodes, window);
  if (buckets_.empty()) {
    throw ConfigError("no training episode has the " + std::to_string(window) + " steps a window needs");
  }
}

void BatchSampler::refill() {
  queue_.clear();
  pos_ = 0;
  for (auto bucket : buckets_) {
    std::shuffle(bucket.begin(), bucket.end(), rng_);
    for (std::size_t i = 0; i < bucket.size(); i += batch_) {
      Batch b;
      for (std::size_t j = i; j < std::min(bucket.size(), i + batch_); ++j) {
        const auto& ep = (*episodes_)[bucket[j]];
        // Windows start where at least the next-step target of position 0 is real.
        const std::size_t real = real_length(ep);
        const std::size_t last = std::min(ep.steps() - window_, real >= window_ ? real - window_ : 0);
        b.episodes.push_back(bucket[j]);
        b.starts.push_back(std::uniform_int_distribution<std::size_t>(0, last)(rng_));
      }
      queue_.push_back(std::move(b));
    }
  }
  std::shuffle(queue_.begin(), queue_.end(), rng_);
}

Batch BatchSampler::next() {
  if (pos_ >= queue_.size()) refill();
  return queue_[pos_++];
}

std::vector<Batch> eval_batches(const std::vector<TrajectoryEpisode>& episodes, std::size_t window,
                                std::size_t batch) {
  std::vector<Batch> out;
  for (const auto& bucket : bucket_by_layout(episodes, window)) {
    for (std::size_t i = 0; i < bucket.size(); i += batch) {
      Batch b;
      for (std::size_t j = i; j < std::min(bucket.size(), i + batch); ++j) {
        b.episodes.push_back(bucket[j]);
        b.starts.push_back(0);
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

EvalLoss evaluate_loss(const SysMoEModel& model, const std::vector<TrajectoryEpisode>& episodes, std::size_t batch) {
  const auto& c = model.config();
  const std::size_t l = c.window(), k = c.k_bins;
  num::NoGradGuard no_grad;
  EvalLoss out;
  double ce_sum = 0.0, abs_sum = 0.0;
  for (const Batch& b : eval_batches(episodes, l, batch)) {
    const auto eps = pointers(episodes, b);
    const auto in = model::make_input(eps, b.starts, c);
    const auto tg = model::make_targets(eps, b.starts, c);
    const std::size_t n = mask_count(tg.mask);
    if (n == 0) continue;
    const auto res = model.forward(in);
    const double ce = model::ce_loss(res.log_probs, tg.bins, tg.mask).value().item();
    ce_sum += ce * static_cast<double>(n);
    out.count += n;
    if (!std::isfinite(ce)) {
      abs_sum = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const Array p = res.probs();
    const std::size_t ms = in.state_dim;
    for (std::size_t bi = 0; bi < eps.size(); ++bi) {
      for (std::size_t pos = 0; pos < l; ++pos) {
        for (std::size_t m = 0; m < ms; ++m) {
          const std::size_t row = (bi * l + pos) * ms + m;
          if (!tg.mask[row]) continue;
          const double pred = tok::decode_distribution(std::span<const double>(p.storage().data() + row * k, k));
          abs_sum += std::abs(pred - eps[bi]->states.at(b.starts[bi] + pos + 1, m));
        }
      }
    }
  }
  if (out.count > 0) {
    out.ce = ce_sum / static_cast<double>(out.count);
    out.mae = abs_sum / static_cast<double>(out.count);
  }
  return out;
}

std::vector<double> routing_entropy(const model::ForwardResult& result) {
  std::vector<double> out;
  for (const Array& w : result.routing) {
    const std::size_t p = w.shape().back();
    const std::size_t rows = w.size() / p;
    double h = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < p; ++j) {
        const double v = w[r * p + j];
        if (v > 0.0) h -= v * std::log(v);
      }
    }
    out.push_back(rows ? h / static_cast<double>(rows) : 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loop.

TrainResult train(SysMoEModel& model, const std::vector<TrajectoryEpisode>& train_set,
                  const std::vector<TrajectoryEpisode>& val_set, const TrainConfig& config,
                  const SysMoEModel* teacher, std::ostream* metrics, const EvalHook& on_eval) {
  config.validate();
  const auto& mc = model.config();
  if (teacher) {
    const auto& tc = teacher->config();
    if (tc.k_bins != mc.k_bins) {
      throw ConfigError("teacher has K=" + std::to_string(tc.k_bins) + " bins but the student has K=" +
                        std::to_string(mc.k_bins));
    }
    if (tc.history != mc.history || tc.horizon != mc.horizon) {
      throw ConfigError("teacher and student must share history and horizon lengths");
    }
  }
  const auto& eval_set = val_set.empty() ? train_set : val_set;
  const std::vector<bool> trainable = apply_freeze_mask(model, config.freeze);

  TrainResult result;
  result.trainable_fraction = trainable_fraction(model, trainable);
  auto emit = [&](const nlohmann::json& j) {
    if (metrics) *metrics << j.dump() << '\n';
  };
  {
    std::size_t on = 0, total = 0;
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      total += model.parameters()[i].var.size();
      if (trainable[i]) on += model.parameters()[i].var.size();
    }
    emit({{"event", "start"},
          {"trainable_params", on},
          {"total_params", total},
          {"trainable_fraction", result.trainable_fraction}});
  }

  std::vector<Var> params;
  for (auto& np : model.parameters()) params.push_back(np.var);
  OptimizerState opt;
  BatchSampler sampler(train_set, mc.window(), config.batch, mix64(config.seed));

  const EvalLoss first = evaluate_loss(model, eval_set, config.batch);
  result.best_val_ce = first.ce;
  result.best = model.clone();
  result.val_ce.push_back(first.ce);
  emit({{"step", 0}, {"val_ce", first.ce}, {"val_mae", first.mae}, {"best_val_ce", first.ce}});
  if (on_eval) on_eval(0, model);
  std::size_t bad_evals = 0;

  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    const Batch b = sampler.next();
    const auto eps = pointers(train_set, b);
    const auto in = model::make_input(eps, b.starts, mc);
    const auto tg = model::make_targets(eps, b.starts, mc);
    model::ForwardOptions fo;
    fo.training = true;
    fo.dropout_seed = mix64(config.seed ^ mix64(step));
    const auto res = model.forward(in, fo);
    Var loss;
    if (teacher) {
      Array tp;
      {
        num::NoGradGuard no_grad;
        tp = teacher->forward(in).probs();
      }
      loss = model::kd_loss(res.log_probs, tp, tg.bins, tg.mask, config.kd_alpha);
    } else {
      loss = model::ce_loss(res.log_probs, tg.bins, tg.mask);
    }
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      std::string ids;
      for (std::size_t i = 0; i < b.episodes.size(); ++i) {
        ids += (i ? ", " : "") + std::to_string(b.episodes[i]) + "@" + std::to_string(b.starts[i]);
      }
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; batch episodes [" + ids + "]");
    }
    num::backward(loss);
    std::vector<Array> grads;
    for (std::size_t i = 0; i < params.size(); ++i) {
      grads.push_back(trainable[i] ? params[i].grad() : Array(params[i].shape(), 0.0));
      params[i].zero_grad();
    }
    const double norm = clip_gradients(grads, config.clip);
    const double lr = lr_at(step, config);
    adamw_step(params, grads, opt, lr, config.weight_decay, trainable);

    if (step == 1) result.initial_train_ce = lv;
    result.final_train_ce = lv;
    result.train_ce.push_back(lv);
    result.steps = step;
    if (step % config.log_interval == 0 || step == 1) {
      emit({{"step", step}, {"train_ce", lv}, {"lr", lr}, {"grad_norm", norm}, {"routing_entropy", routing_entropy(res)}});
    }
    if (step % config.eval_interval == 0 || step == config.total_steps) {
      const EvalLoss ev = evaluate_loss(model, eval_set, config.batch);
      result.val_ce.push_back(ev.ce);
      if (ev.ce < result.best_val_ce) {
        result.best_val_ce = ev.ce;
        result.best = model.clone();
        bad_evals = 0;
      } else {
        ++bad_evals;
      }
      emit({{"step", step}, {"val_ce", ev.ce}, {"val_mae", ev.mae}, {"best_val_ce", result.best_val_ce}});
      if (on_eval) on_eval(step, model);
      if (config.patience > 0 && bad_evals >= config.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  for (double v : result.val_ce) {
    if (result.best_val_ce > v) throw std::logic_error("retained checkpoint is not the best evaluated one");
  }
  emit({{"event", "end"},
        {"steps", result.steps},
        {"early_stopped", result.early_stopped},
        {"best_val_ce", result.best_val_ce}});
  return result;
}

TrainResult distill(const SysMoEModel& teacher, const model::ModelConfig& student_config, std::uint64_t student_seed,
                    const std::vector<TrajectoryEpisode>& train_set, const std::vector<TrajectoryEpisode>& val_set,
                    const TrainConfig& config, std::ostream* metrics) {
  if (student_config.k_bins != teacher.config().k_bins) {
    throw ConfigError("teacher has K=" + std::to_string(teacher.config().k_bins) + " bins but the student has K=" +
                      std::to_string(student_config.k_bins));
  }
  SysMoEModel student(student_config, student_seed);
  return train(student, train_set, val_set, config, &teacher, metrics);
}

}  // namespace sysmoe::train
