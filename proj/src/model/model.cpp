#include "sysmoe/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace sysmoe::model {

using num::Array;
using num::Shape;
using num::Var;

// ---------------------------------------------------------------------------
// Config.

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.d = 256;
  c.n_blocks = 6;
  c.n_heads = 4;
  c.n_experts = 4;
  c.k_bins = 256;
  c.history = 50;
  c.horizon = 100;
  c.ssm_state = 64;
  c.expert_hidden = 512;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (d == 0 || d % 4 != 0) fail("d=" + std::to_string(d) + " must be a positive multiple of 4");
  if (n_heads == 0 || d % n_heads != 0) fail("d=" + std::to_string(d) + " not divisible by n_heads=" + std::to_string(n_heads));
  if (n_blocks == 0) fail("n_blocks must be >= 1");
  if (n_experts == 0) fail("n_experts must be >= 1");
  if (dense_ssm && n_experts != 1) fail("dense_ssm requires n_experts=1");
  if (k_bins < 2) fail("k_bins must be >= 2");
  if (history == 0) fail("history must be >= 1");
  if (ssm_state == 0 || expert_hidden == 0 || expand == 0) fail("ssm_state, expert_hidden and expand must be positive");
  if (conv_width < 2) fail("conv_width must be >= 2");
  if (max_channels == 0 || max_objects == 0 || max_nodes == 0) fail("table capacities must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  char buf[64];
  *std::to_chars(buf, buf + sizeof buf - 1, dropout).ptr = '\0';
  return {{"d", std::to_string(d)},
          {"n_blocks", std::to_string(n_blocks)},
          {"n_heads", std::to_string(n_heads)},
          {"n_experts", std::to_string(n_experts)},
          {"k_bins", std::to_string(k_bins)},
          {"history", std::to_string(history)},
          {"horizon", std::to_string(horizon)},
          {"ssm_state", std::to_string(ssm_state)},
          {"expert_hidden", std::to_string(expert_hidden)},
          {"expand", std::to_string(expand)},
          {"conv_width", std::to_string(conv_width)},
          {"max_channels", std::to_string(max_channels)},
          {"max_objects", std::to_string(max_objects)},
          {"max_nodes", std::to_string(max_nodes)},
          {"dropout", buf},
          {"dense_ssm", dense_ssm ? "true" : "false"},
          {"no_struct_embed", no_struct_embed ? "true" : "false"}};
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [key, value] : kv) {
    auto as_size = [&](std::size_t& out) {
      try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size() || v < 0) throw std::invalid_argument("");
        out = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("model." + key + ": expected a nonnegative integer, got '" + value + "'");
      }
    };
    auto as_bool = [&](bool& out) {
      if (value == "true" || value == "1") {
        out = true;
      } else if (value == "false" || value == "0") {
        out = false;
      } else {
        throw ConfigError("model." + key + ": expected true/false, got '" + value + "'");
      }
    };
    if (key == "d") as_size(c.d);
    else if (key == "n_blocks") as_size(c.n_blocks);
    else if (key == "n_heads") as_size(c.n_heads);
    else if (key == "n_experts") as_size(c.n_experts);
    else if (key == "k_bins") as_size(c.k_bins);
    else if (key == "history") as_size(c.history);
    else if (key == "horizon") as_size(c.horizon);
    else if (key == "ssm_state") as_size(c.ssm_state);
    else if (key == "expert_hidden") as_size(c.expert_hidden);
    else if (key == "expand") as_size(c.expand);
    else if (key == "conv_width") as_size(c.conv_width);
    else if (key == "max_channels") as_size(c.max_channels);
    else if (key == "max_objects") as_size(c.max_objects);
    else if (key == "max_nodes") as_size(c.max_nodes);
    else if (key == "dense_ssm") as_bool(c.dense_ssm);
    else if (key == "no_struct_embed") as_bool(c.no_struct_embed);
    else if (key == "dropout") {
      try {
        std::size_t pos = 0;
        c.dropout = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ConfigError("model.dropout: expected a number, got '" + value + "'");
      }
    } else {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters.

Array ForwardResult::probs() const {
  Array p = log_probs.value();
  for (double& v : p.data()) v = std::exp(v);
  return p;
}

Var& SysMoEModel::add_param(const std::string& name, Array value) {
  index_[name] = params_.size();
  params_.push_back({name, Var(std::move(value), true)});
  return params_.back().var;
}

const Var& SysMoEModel::p(const std::string& name) const { return param(name); }

const Var& SysMoEModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("model has no parameter '" + name + "'");
  return params_[it->second].var;
}

bool SysMoEModel::has_param(const std::string& name) const { return index_.count(name) > 0; }

std::size_t SysMoEModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& np : params_) n += np.var.size();
  return n;
}

SysMoEModel::SysMoEModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const ModelConfig& c = config_;
  std::mt19937_64 rng(seed);
  auto normal = [&](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Array a(std::move(shape));
    for (double& v : a.data()) v = dist(rng);
    return a;
  };
  auto uniform = [&](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Array a(std::move(shape));
    for (double& v : a.data()) v = dist(rng);
    return a;
  };
  auto linear = [&](std::size_t fan_in, Shape shape) {
    return uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };
  const std::size_t d = c.d, inner = c.inner(), n = c.ssm_state, r = c.dt_rank(), P = c.n_experts;
  const std::size_t hx = c.expert_hidden;

  add_param("embed.value", normal({c.k_bins, d}, 0.02));
  add_param("embed.time", normal({c.window(), d}, 0.02));
  add_param("embed.channel", normal({c.max_channels, d}, 0.02));
  add_param("embed.modality", normal({2, d}, 0.02));
  add_param("struct.obj", normal({c.max_objects, d / 4}, 0.02));
  add_param("struct.pre", normal({c.max_nodes, d / 4}, 0.02));
  add_param("struct.in", normal({c.max_nodes, d / 4}, 0.02));
  add_param("struct.post", normal({c.max_nodes, d / 4}, 0.02));
  if (c.horizon > 0) add_param("query", normal({c.horizon, d}, 0.02));

  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    for (const char* att : {"attn", "cross"}) {
      const std::string a = pre + att + ".";
      for (const char* w : {"q", "k", "v", "o"}) {
        add_param(a + "w" + w, linear(d, {d, d}));
        add_param(a + "b" + w, Array({d}));
      }
      add_param(a + "ln.g", Array({d}, 1.0));
      add_param(a + "ln.b", Array({d}));
    }
    add_param(pre + "ssm.in_proj", linear(d, {d, 2 * inner}));
    add_param(pre + "ssm.conv", linear(c.conv_width, {inner, c.conv_width}));
    add_param(pre + "ssm.x_proj", linear(inner, {inner, r + 2 * n}));
    add_param(pre + "ssm.dt_proj", linear(r, {r, inner}));
    {
      std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
      Array bias({inner});
      for (double& v : bias.data()) {
        const double dt = std::exp(log_dt(rng));
        v = dt + std::log(-std::expm1(-dt));  // softplus^-1(dt)
      }
      add_param(pre + "ssm.dt_bias", std::move(bias));
    }
    {
      Array a_log({inner, n});
      for (std::size_t i = 0; i < inner; ++i) {
        for (std::size_t j = 0; j < n; ++j) a_log.at(i, j) = std::log(static_cast<double>(j + 1));
      }
      add_param(pre + "ssm.a_log", std::move(a_log));
    }
    add_param(pre + "ssm.d_skip", Array({inner}, 1.0));
    add_param(pre + "ssm.out_proj", linear(inner, {inner, d}));
    if (!c.dense_ssm) {
      add_param(pre + "sys", normal({d}, 0.02));
      add_param(pre + "router.w", Array({d, P}));
      add_param(pre + "router.b", Array({P}));
    }
    add_param(pre + "expert.w1", linear(d, {d, P * hx}));
    add_param(pre + "expert.b1", Array({P * hx}));
    add_param(pre + "expert.w2", linear(hx, {P, hx, d}));
    add_param(pre + "expert.b2", Array({P, 1, d}));
  }
  add_param("decoder.w", linear(d, {d, c.k_bins}));
  add_param("decoder.b", Array({c.k_bins}));
}

SysMoEModel SysMoEModel::clone() const {
  SysMoEModel m;
  m.config_ = config_;
  m.index_ = index_;
  for (const auto& np : params_) m.params_.push_back({np.name, Var(np.var.value(), true)});
  return m;
}

std::string SysMoEModel::group_of(const std::string& name) {
  if (name.rfind("embed.", 0) == 0 || name.rfind("struct.", 0) == 0) return "embeddings";
  if (name == "query") return "queries";
  if (name.rfind("decoder.", 0) == 0) return "decoder";
  if (name.rfind("block", 0) == 0) return name.substr(0, name.find('.'));
  throw ConfigError("parameter '" + name + "' belongs to no group");
}

std::vector<std::string> SysMoEModel::groups() const {
  std::vector<std::string> out;
  for (const auto& np : params_) {
    const std::string g = group_of(np.name);
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block components.

Var DropoutSpec::operator()(const Var& x) const {
  if (!training || rate == 0.0 || rng == nullptr) return x;
  return num::dropout(x, rate, training, *rng);
}

Var multi_head_attention(const Var& q_in, const Var& kv_in, const AttentionWeights& w, std::size_t heads,
                         Array* probs_out) {
  const std::size_t g = q_in.dim(0), mq = q_in.dim(1), mk = kv_in.dim(1), d = q_in.dim(2);
  if (heads == 0 || d % heads != 0) throw ConfigError("attention width not divisible by head count");
  const std::size_t dh = d / heads;
  auto proj = [](const Var& x, const Var& wm, const Var& b) { return num::add(num::matmul(x, wm), b); };
  auto split = [&](const Var& x, std::size_t m) {
    return num::reshape(num::permute(num::reshape(x, {g, m, heads, dh}), {0, 2, 1, 3}), {g * heads, m, dh});
  };
  Var q = split(proj(q_in, w.wq, w.bq), mq);
  Var k = split(proj(kv_in, w.wk, w.bk), mk);
  Var v = split(proj(kv_in, w.wv, w.bv), mk);
  Var probs = num::softmax(num::scale(num::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
  if (probs_out) *probs_out = probs.value();
  Var o = num::bmm(probs, v);
  o = num::reshape(num::permute(num::reshape(o, {g, heads, mq, dh}), {0, 2, 1, 3}), {g, mq, d});
  return proj(o, w.wo, w.bo);
}

Var channel_self_attention(const Var& s, const AttentionWeights& w, std::size_t heads, const DropoutSpec& drop,
                           Array* probs_out) {
  return num::layernorm(num::add(s, drop(multi_head_attention(s, s, w, heads, probs_out))), w.ln_g, w.ln_b, 2);
}

Var action_cross_attention(const Var& s, const Var& a, const AttentionWeights& w, std::size_t heads,
                           const DropoutSpec& drop, Array* probs_out) {
  if (!a.defined() || a.dim(1) == 0) return num::layernorm(s, w.ln_g, w.ln_b, 2);
  return num::layernorm(num::add(s, drop(multi_head_attention(s, a, w, heads, probs_out))), w.ln_g, w.ln_b, 2);
}

SsmResult ssm_scan(const Var& seq, const SsmWeights& w, const Var& system_token) {
  const std::size_t g = seq.dim(0), l = seq.dim(1), d = seq.dim(2);
  const std::size_t inner = w.d_skip.dim(0), n = w.a_log.dim(1), r = w.dt_proj.dim(0), width = w.conv.dim(1);
  const Var a = num::scale(num::exp(w.a_log), -1.0);  // [D, N]

  Var xz = num::matmul(seq, w.in_proj);
  Var x = num::slice(xz, 2, 0, inner);
  Var z = num::slice(xz, 2, inner, 2 * inner);

  // Input-dependent step, B and C from a conv-activated sequence.
  auto selective = [&](const Var& xc) {
    Var dbc = num::matmul(xc, w.x_proj);
    Var delta = num::softplus(num::add(num::matmul(num::slice(dbc, 2, 0, r), w.dt_proj), w.dt_bias));
    return std::tuple{delta, num::slice(dbc, 2, r, r + n), num::slice(dbc, 2, r + n, r + 2 * n)};
  };

  Var xc = num::silu(num::causal_conv1d(x, w.conv));
  auto [delta, bm, cm] = selective(xc);
  SsmResult out;
  if (!system_token.defined()) {
    Var y = num::add(num::selective_scan(xc, delta, a, bm, cm), num::mul(xc, w.d_skip));
    out.u = num::matmul(num::mul(y, num::silu(z)), w.out_proj);
    return out;
  }

  // Token after position l: its conv window is x[l-W+2..l] then the token,
  // and its state continues from h_l.
  Var xe_z = num::matmul(num::reshape(system_token, {1, d}), w.in_proj);
  Var xe = num::reshape(num::slice(xe_z, 1, 0, inner), {inner});
  Var ze = num::reshape(num::slice(xe_z, 1, inner, 2 * inner), {inner});
  Var shifted = num::concat({num::constant(Array({inner, 1})), num::slice(w.conv, 1, 0, width - 1)}, 1);
  Var tap = num::reshape(num::slice(w.conv, 1, width - 1, width), {inner});
  Var xr = num::silu(num::add(num::causal_conv1d(x, shifted), num::mul(tap, xe)));
  auto [delta_r, br, cr] = selective(xr);
  const num::ScanReadout readout{xr, delta_r, br, cr};
  Var both = num::selective_scan(xc, delta, a, bm, cm, &readout);  // [2, G, L, D]
  Var y = num::add(num::reshape(num::slice(both, 0, 0, 1), {g, l, inner}), num::mul(xc, w.d_skip));
  Var yr = num::add(num::reshape(num::slice(both, 0, 1, 2), {g, l, inner}), num::mul(xr, w.d_skip));
  out.u = num::matmul(num::mul(y, num::silu(z)), w.out_proj);
  out.readout = num::matmul(num::mul(yr, num::silu(ze)), w.out_proj);
  return out;
}

Var route(const Var& u_sys, const Var& router_w, const Var& router_b) {
  return num::softmax(num::add(num::matmul(u_sys, router_w), router_b), u_sys.value().rank() - 1);
}

Var expert_outputs(const Var& u, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
  const std::size_t g = u.dim(0), l = u.dim(1), p = w2.dim(0), hx = w2.dim(1), d = w2.dim(2);
  Var hidden = num::gelu(num::add(num::matmul(u, w1), b1));
  hidden = num::permute(num::reshape(hidden, {g * l, p, hx}), {1, 0, 2});
  return num::reshape(num::add(num::bmm(hidden, w2), b2), {p, g, l, d});
}

Var moe_mix(const Var& experts, const Var& w) {
  const Shape& es = experts.shape();
  if (es.size() != 5 || w.value().rank() != 3 || w.dim(0) != es[1] || w.dim(1) != es[3] || w.dim(2) != es[0]) {
    throw num::DimensionError("moe_mix: experts " + num::shape_str(es) + " incompatible with weights " +
                              num::shape_str(w.shape()));
  }
  const std::size_t p = es[0], b = es[1], l = es[3];
  Var wv = num::reshape(num::permute(w, {2, 0, 1}), {p, b, 1, l, 1});
  return num::reshape(num::sum_axis(num::mul(experts, wv), 0), {es[1], es[2], es[3], es[4]});
}

AttentionWeights SysMoEModel::attention_weights(std::size_t block, const std::string& which) const {
  const std::string a = "block" + std::to_string(block) + "." + which + ".";
  return {p(a + "wq"), p(a + "bq"), p(a + "wk"), p(a + "bk"), p(a + "wv"),
          p(a + "bv"), p(a + "wo"), p(a + "bo"), p(a + "ln.g"), p(a + "ln.b")};
}

SsmWeights SysMoEModel::ssm_weights(std::size_t block) const {
  const std::string s = "block" + std::to_string(block) + ".ssm.";
  return {p(s + "in_proj"), p(s + "conv"),  p(s + "x_proj"), p(s + "dt_proj"),
          p(s + "dt_bias"), p(s + "a_log"), p(s + "d_skip"), p(s + "out_proj")};
}

// ---------------------------------------------------------------------------
// Forward.

ForwardResult SysMoEModel::forward(const ModelInput& in, const ForwardOptions& opt) const {
  const ModelConfig& c = config_;
  const std::size_t bsz = in.batch, ms = in.state_dim, ma = in.action_dim;
  const std::size_t h = c.history, k = c.horizon, l = c.window(), d = c.d, P = c.n_experts;
  const std::size_t m_all = ms + ma;
  if (bsz == 0 || ms == 0) throw InputError("model input needs at least one episode and one state channel");
  if (in.history.shape() != Shape{bsz, h, ms}) {
    throw InputError("history " + num::shape_str(in.history.shape()) + " does not match [" + std::to_string(bsz) +
                     ", " + std::to_string(h) + ", " + std::to_string(ms) + "]");
  }
  if (in.actions.rank() != 3 || in.actions.dim(0) != bsz || in.actions.dim(2) != ma) {
    throw InputError("actions " + num::shape_str(in.actions.shape()) + " do not match batch/action dims");
  }
  if (in.actions.dim(1) < l) {
    throw InputError("missing future actions: got " + std::to_string(in.actions.dim(1)) + " steps, need h + k = " +
                     std::to_string(l));
  }
  if (m_all > c.max_channels) throw ConfigError("too many channels for the channel table");
  for (const Array* arr : {&in.history, &in.actions}) {
    for (double v : arr->data()) {
      if (!(v >= -1e-12 && v <= 1.0 + 1e-12)) {
        throw InputError("input value " + std::to_string(v) + " is not normalized to [0, 1]");
      }
    }
  }
  const bool shared_struct = in.struct_idx.size() == m_all;
  if (!c.no_struct_embed && !shared_struct && in.struct_idx.size() != bsz * m_all) {
    throw InputError("structural indices cover " + std::to_string(in.struct_idx.size()) + " channels, expected " +
                     std::to_string(m_all) + " or " + std::to_string(bsz * m_all));
  }
  if (opt.routing_override && opt.routing_override->size() != P) {
    throw InputError("routing override has " + std::to_string(opt.routing_override->size()) + " entries, expected " +
                     std::to_string(P));
  }

  tok::EmbeddingTables tables{p("embed.value"), p("embed.time"), p("embed.channel"), p("embed.modality")};
  std::vector<std::size_t> sbins(bsz * h * ms), abins(bsz * l * ma);
  for (std::size_t i = 0; i < sbins.size(); ++i) sbins[i] = tok::discretize(in.history[i], c.k_bins);
  const std::size_t a_steps = in.actions.dim(1);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t j = 0; j < ma; ++j) {
        abins[(b * l + t) * ma + j] = tok::discretize(in.actions[(b * a_steps + t) * ma + j], c.k_bins);
      }
    }
  }

  Var states = tok::compose_embeddings(sbins, bsz, h, ms, 0, 0, data::Modality::state, tables);
  if (k > 0) {
    Var q = num::reshape(p("query"), {1, k, 1, d});
    q = num::add(q, num::reshape(num::slice(tables.time_table, 0, h, l), {1, k, 1, d}));
    q = num::add(q, num::reshape(num::slice(tables.channel_table, 0, 0, ms), {1, 1, ms, d}));
    q = num::add(q, num::reshape(num::slice(tables.modality_table, 0, 0, 1), {1, 1, 1, d}));
    states = num::concat({states, num::broadcast_to(q, {bsz, k, ms, d})}, 1);
  }
  Var actions;
  if (ma > 0) actions = tok::compose_embeddings(abins, bsz, l, ma, 0, ms, data::Modality::action, tables);
  if (!c.no_struct_embed) {
    structure::StructTables st{p("struct.obj"), p("struct.pre"), p("struct.in"), p("struct.post")};
    Var rows = structure::structural_embedding(in.struct_idx, st);
    rows = num::reshape(rows, {shared_struct ? std::size_t{1} : bsz, 1, m_all, d});
    states = num::add(states, num::slice(rows, 2, 0, ms));
    if (ma > 0) actions = num::add(actions, num::slice(rows, 2, ms, m_all));
  }

  std::mt19937_64 rng(opt.dropout_seed);
  const DropoutSpec drop{c.dropout, opt.training, &rng};
  ForwardResult result;
  result.batch = bsz;
  result.state_dim = ms;
  Var s = states;  // [B, L, Ms, d]
  Var a_tokens = ma > 0 ? num::reshape(actions, {bsz * l, ma, d}) : Var();
  for (std::size_t blk = 0; blk < c.n_blocks; ++blk) {
    const std::string pre = "block" + std::to_string(blk) + ".";
    Var x = num::reshape(s, {bsz * l, ms, d});
    x = channel_self_attention(x, attention_weights(blk, "attn"), c.n_heads, drop);
    x = action_cross_attention(x, a_tokens, attention_weights(blk, "cross"), c.n_heads, drop);

    Var seq = num::reshape(num::permute(num::reshape(x, {bsz, l, ms, d}), {0, 2, 1, 3}), {bsz * ms, l, d});
    const bool routed = !c.dense_ssm;
    const bool need_readout = routed && !opt.routing_override;
    SsmResult so = ssm_scan(seq, ssm_weights(blk), need_readout ? p(pre + "sys") : Var());
    Var experts = expert_outputs(so.u, p(pre + "expert.w1"), p(pre + "expert.b1"), p(pre + "expert.w2"),
                                 p(pre + "expert.b2"));  // [P, B*Ms, L, d]
    Var y;
    if (!routed) {
      y = num::reshape(experts, {bsz, ms, l, d});
    } else {
      Var w;
      if (opt.routing_override) {
        Array fixed({bsz, l, P});
        for (std::size_t i = 0; i < fixed.size(); ++i) fixed[i] = (*opt.routing_override)[i % P];
        w = num::constant(std::move(fixed));
      } else {
        // Router input: system-token readout averaged over state channels.
        Var pooled = num::scale(num::sum_axis(num::reshape(so.readout, {bsz, ms, l, d}), 1),
                                1.0 / static_cast<double>(ms));
        w = route(num::reshape(pooled, {bsz, l, d}), p(pre + "router.w"), p(pre + "router.b"));
      }
      result.routing.push_back(w.value());
      y = moe_mix(num::reshape(experts, {P, bsz, ms, l, d}), w);
    }
    // Residual around the SSM and expert path.
    s = num::add(num::reshape(x, {bsz, l, ms, d}), num::permute(drop(y), {0, 2, 1, 3}));  // [B, L, Ms, d]
  }
  Var logits = num::add(num::matmul(s, p("decoder.w")), p("decoder.b"));
  result.log_probs = num::log_softmax(logits, 3);
  return result;
}

// ---------------------------------------------------------------------------
// Batching helpers.

ModelInput make_input(const std::vector<const data::TrajectoryEpisode*>& episodes,
                      const std::vector<std::size_t>& starts, const ModelConfig& c) {
  if (episodes.empty() || episodes.size() != starts.size()) {
    throw InputError("make_input needs one start per episode and at least one episode");
  }
  const auto& first = *episodes.front();
  ModelInput in;
  in.batch = episodes.size();
  in.state_dim = first.state_dim();
  in.action_dim = first.action_dim();
  const std::size_t h = c.history, l = c.window(), ms = in.state_dim, ma = in.action_dim;
  in.history = Array({in.batch, h, ms});
  in.actions = Array({in.batch, l, ma});
  for (std::size_t b = 0; b < in.batch; ++b) {
    const auto& ep = *episodes[b];
    if (ep.state_dim() != ms || ep.action_dim() != ma) {
      throw InputError("episodes in one batch must share channel counts (system '" + ep.system_id + "')");
    }
    if (starts[b] + l > ep.steps()) {
      throw InputError("window [" + std::to_string(starts[b]) + ", " + std::to_string(starts[b] + l) +
                       ") exceeds episode length " + std::to_string(ep.steps()));
    }
    for (std::size_t t = 0; t < h; ++t) {
      for (std::size_t m = 0; m < ms; ++m) in.history[(b * h + t) * ms + m] = ep.states.at(starts[b] + t, m);
    }
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t m = 0; m < ma; ++m) in.actions[(b * l + t) * ma + m] = ep.actions.at(starts[b] + t, m);
    }
    const auto idx = tok::channel_struct_indices(ep);
    in.struct_idx.insert(in.struct_idx.end(), idx.begin(), idx.end());
  }
  return in;
}

Targets make_targets(const std::vector<const data::TrajectoryEpisode*>& episodes,
                     const std::vector<std::size_t>& starts, const ModelConfig& c) {
  const std::size_t l = c.window();
  const std::size_t ms = episodes.front()->state_dim();
  Targets t;
  t.bins.assign(episodes.size() * l * ms, 0);
  t.mask.assign(episodes.size() * l * ms, 0);
  for (std::size_t b = 0; b < episodes.size(); ++b) {
    const auto& ep = *episodes[b];
    for (std::size_t pos = 0; pos + 1 < l; ++pos) {
      const std::size_t cur = starts[b] + pos, next = cur + 1;
      if (next >= ep.steps() || !ep.mask[cur] || !ep.mask[next]) continue;
      for (std::size_t m = 0; m < ms; ++m) {
        const std::size_t i = (b * l + pos) * ms + m;
        t.bins[i] = tok::discretize(ep.states.at(next, m), c.k_bins);
        t.mask[i] = 1;
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses.

namespace {

void check_targets(const Var& log_probs, const std::vector<std::size_t>& targets, const std::vector<std::uint8_t>& mask,
                   std::size_t& rows, std::size_t& kb, std::size_t& count) {
  const Shape& sh = log_probs.shape();
  if (sh.empty()) throw num::ContractError("log-probabilities need a bin axis");
  kb = sh.back();
  rows = log_probs.size() / kb;
  if (targets.size() != rows || mask.size() != rows) {
    throw num::DimensionError("targets/mask cover " + std::to_string(targets.size()) + "/" +
                              std::to_string(mask.size()) + " rows, predictions have " + std::to_string(rows));
  }
  count = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    if (targets[i] >= kb) {
      throw num::ContractError("target bin " + std::to_string(targets[i]) + " >= K=" + std::to_string(kb));
    }
    ++count;
  }
  if (count == 0) throw num::ContractError("loss mask selects no (position, channel) pair");
}

}  // namespace

Var ce_loss(const Var& log_probs, const std::vector<std::size_t>& targets, const std::vector<std::uint8_t>& mask) {
  std::size_t rows = 0, kb = 0, count = 0;
  check_targets(log_probs, targets, mask, rows, kb, count);
  Array weights(log_probs.shape());
  const double w = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < rows; ++i) {
    if (mask[i]) weights[i * kb + targets[i]] = w;
  }
  return num::scale(num::sum(num::mul(log_probs, num::constant(std::move(weights)))), -1.0);
}

Var kd_loss(const Var& student_log_probs, const Array& teacher_probs, const std::vector<std::size_t>& targets,
            const std::vector<std::uint8_t>& mask, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw num::ContractError("kd alpha must lie in [0, 1]");
  if (teacher_probs.shape() != student_log_probs.shape()) {
    throw num::DimensionError("teacher " + num::shape_str(teacher_probs.shape()) + " vs student " +
                              num::shape_str(student_log_probs.shape()));
  }
  if (alpha == 1.0) return ce_loss(student_log_probs, targets, mask);
  std::size_t rows = 0, kb = 0, count = 0;
  check_targets(student_log_probs, targets, mask, rows, kb, count);
  Array weights(student_log_probs.shape());
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < kb; ++j) weights[i * kb + j] = (1.0 - alpha) * teacher_probs[i * kb + j] * inv;
    weights[i * kb + targets[i]] += alpha * inv;
  }
  return num::scale(num::sum(num::mul(student_log_probs, num::constant(std::move(weights)))), -1.0);
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {
constexpr const char* kMagic = "SYSMOE-CHECKPOINT";
constexpr int kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const SysMoEModel& model, const data::StatsTable& stats) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + path);
  f << kMagic << ' ' << kVersion << '\n';
  f << "[config]\n";
  for (const auto& [key, value] : model.config().to_map()) f << key << '=' << value << '\n';
  std::size_t n_stats = 0;
  for (const auto& [id, sys] : stats) n_stats += sys.size();
  f << "[stats] " << n_stats << '\n';
  char buf[96];
  for (const auto& [id, sys] : stats) {
    for (const auto& [name, s] : sys) {
      std::snprintf(buf, sizeof buf, "\t%.17g\t%.17g\n", s.min, s.max);
      f << id << '\t' << name << buf;
    }
  }
  f << "[params] " << model.parameters().size() << '\n';
  for (const auto& np : model.parameters()) {
    const Array& v = np.var.value();
    f << np.name << ' ' << v.rank();
    for (std::size_t dim : v.shape()) f << ' ' << dim;
    f << '\n';
    f.write(reinterpret_cast<const char*>(v.storage().data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    f << '\n';
  }
  if (!f) throw CheckpointError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::string line;
  auto fail = [&](const std::string& msg) { throw CheckpointError(path + ": " + msg); };
  if (!std::getline(f, line)) fail("empty file");
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != kMagic) fail("not a checkpoint (bad magic)");
    if (version != kVersion) {
      fail("checkpoint version " + std::to_string(version) + ", this build reads version " + std::to_string(kVersion));
    }
  }
  if (!std::getline(f, line) || line != "[config]") fail("missing [config] section");
  std::map<std::string, std::string> kv;
  while (std::getline(f, line) && line.rfind("[stats]", 0) != 0) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!f) fail("missing [stats] section");
  Checkpoint ck;
  const std::size_t n_stats = std::stoul(line.substr(7));
  for (std::size_t i = 0; i < n_stats; ++i) {
    if (!std::getline(f, line)) fail("truncated stats section");
    std::istringstream ls(line);
    std::string id, name, lo, hi;
    std::getline(ls, id, '\t');
    std::getline(ls, name, '\t');
    std::getline(ls, lo, '\t');
    std::getline(ls, hi);
    ck.stats[id].emplace_back(name, data::ChannelStats{std::stod(lo), std::stod(hi)});
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_map(kv);
  } catch (const ConfigError& e) {
    fail(e.what());
  }
  ck.model = SysMoEModel(config, 0);
  if (!std::getline(f, line) || line.rfind("[params]", 0) != 0) fail("missing [params] section");
  const std::size_t n_params = std::stoul(line.substr(8));
  if (n_params != ck.model.parameters().size()) {
    fail("checkpoint holds " + std::to_string(n_params) + " parameters, config implies " +
         std::to_string(ck.model.parameters().size()));
  }
  for (auto& np : ck.model.parameters()) {
    if (!std::getline(f, line)) fail("truncated parameter section");
    std::istringstream ls(line);
    std::string name;
    std::size_t rank = 0;
    ls >> name >> rank;
    Shape shape(rank);
    for (auto& s : shape) ls >> s;
    if (name != np.name || shape != np.var.shape()) {
      fail("parameter '" + name + "' " + num::shape_str(shape) + " does not match expected '" + np.name + "' " +
           num::shape_str(np.var.shape()));
    }
    Array& v = np.var.mutable_value();
    f.read(reinterpret_cast<char*>(v.storage().data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!f || f.get() != '\n') fail("truncated data for parameter '" + name + "'");
  }
  return ck;
}

}  // namespace sysmoe::model
