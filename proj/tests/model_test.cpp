#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "sysmoe/model.hpp"

namespace {

using namespace sysmoe;
using model::ModelConfig;
using model::ModelInput;
using model::SysMoEModel;
using num::Array;
using num::Var;

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 8;
  c.n_blocks = 1;
  c.n_heads = 2;
  c.n_experts = 2;
  c.k_bins = 16;
  c.history = 4;
  c.horizon = 2;
  c.ssm_state = 4;
  c.expert_hidden = 8;
  c.dropout = 0.0;
  c.max_channels = 128;
  return c;
}

ModelInput random_input(const ModelConfig& c, std::size_t batch, std::size_t ms, std::size_t ma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ModelInput in;
  in.batch = batch;
  in.state_dim = ms;
  in.action_dim = ma;
  in.history = Array({batch, c.history, ms});
  in.actions = Array({batch, c.window(), ma});
  for (double& v : in.history.data()) v = u(rng);
  for (double& v : in.actions.data()) v = u(rng);
  // Chain tree base -> n1 -> n2 ...; channel i on node min(i, nodes-1).
  std::vector<std::pair<std::string, std::string>> edges{{"base", "ROOT"}};
  for (std::size_t i = 1; i < 4; ++i) edges.emplace_back("n" + std::to_string(i), i == 1 ? "base" : "n" + std::to_string(i - 1));
  const auto tree = structure::KinematicTree::from_edges(edges);
  for (std::size_t m = 0; m < ms + ma; ++m) {
    in.struct_idx.push_back(structure::struct_index(tree, 0, static_cast<int>(std::min<std::size_t>(m, 3))));
  }
  return in;
}

void randomize(SysMoEModel& m, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& np : m.parameters()) {
    if (np.name.find("a_log") != std::string::npos) continue;
    for (double& v : np.var.mutable_value().data()) v += u(rng);
  }
}

Var random_var(num::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Array a(std::move(shape));
  for (double& v : a.data()) v = u(rng);
  return Var(std::move(a), true);
}

// --- Config -----------------------------------------------------------------

TEST(ModelConfig, ValidatesInvariants) {
  ModelConfig c = tiny_config();
  c.d = 10;
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = tiny_config();
  c.n_experts = 0;
  EXPECT_THROW(c.validate(), model::ConfigError);
  EXPECT_NO_THROW(ModelConfig::full_scale().validate());
  EXPECT_EQ(ModelConfig::full_scale().k_bins, 256u);
  EXPECT_EQ(ModelConfig::desk().window(), 32u);
}

TEST(ModelConfig, MapRoundTrip) {
  ModelConfig c = tiny_config();
  c.dropout = 0.05;
  c.no_struct_embed = true;
  const ModelConfig back = ModelConfig::from_map(c.to_map());
  EXPECT_EQ(back.to_map(), c.to_map());
  auto kv = c.to_map();
  kv["bogus"] = "1";
  EXPECT_THROW(ModelConfig::from_map(kv), model::ConfigError);
}

// --- Attention ----------------------------------------------------------------

model::AttentionWeights random_attention(std::size_t d, std::mt19937_64& rng) {
  model::AttentionWeights w;
  w.wq = random_var({d, d}, rng);
  w.bq = random_var({d}, rng);
  w.wk = random_var({d, d}, rng);
  w.bk = random_var({d}, rng);
  w.wv = random_var({d, d}, rng);
  w.bv = random_var({d}, rng);
  w.wo = random_var({d, d}, rng);
  w.bo = random_var({d}, rng);
  w.ln_g = Var(Array({d}, 1.0));
  w.ln_b = Var(Array({d}, 0.0));
  return w;
}

TEST(ChannelSelfAttention, SingleChannelAttendsToItself) {
  std::mt19937_64 rng(1);
  auto w = random_attention(8, rng);
  Var s = random_var({3, 1, 8}, rng);
  Array probs;
  Var out = model::channel_self_attention(s, w, 2, {}, &probs);
  for (double p : probs.data()) EXPECT_EQ(p, 1.0);
  // Value path only: LN(S + (S Wv + bv) Wo + bo).
  Var expected = num::layernorm(
      num::add(s, num::add(num::matmul(num::add(num::matmul(s, w.wv), w.bv), w.wo), w.bo)), w.ln_g, w.ln_b, 2);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.value()[i], expected.value()[i], 1e-12);
}

TEST(ChannelSelfAttention, ZeroValuePathLeavesResidual) {
  std::mt19937_64 rng(2);
  auto w = random_attention(8, rng);
  w.wv = Var(Array({8, 8}));
  w.bv = Var(Array({8}));
  w.bo = Var(Array({8}));
  Var s = random_var({2, 3, 8}, rng);
  Array out = model::channel_self_attention(s, w, 2).value();
  Array ln = num::layernorm(s, w.ln_g, w.ln_b, 2).value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ln[i], 1e-12);
}

TEST(ChannelSelfAttention, RowsSumToOne) {
  std::mt19937_64 rng(3);
  auto w = random_attention(8, rng);
  Var s = random_var({4, 3, 8}, rng);
  Array probs;
  model::channel_self_attention(s, w, 2, {}, &probs);
  ASSERT_EQ(probs.shape(), (num::Shape{8, 3, 3}));
  for (std::size_t r = 0; r < 8 * 3; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) sum += probs[r * 3 + j];
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(ActionCrossAttention, NoActionsGivesLayerNorm) {
  std::mt19937_64 rng(4);
  auto w = random_attention(8, rng);
  Var s = random_var({2, 3, 8}, rng);
  EXPECT_EQ(model::action_cross_attention(s, Var(), w, 2).value(), num::layernorm(s, w.ln_g, w.ln_b, 2).value());
}

TEST(ActionCrossAttention, IdenticalActionsMakeWeightsIrrelevant) {
  std::mt19937_64 rng(5);
  auto w = random_attention(8, rng);
  Var s = random_var({2, 3, 8}, rng);
  Array row = random_var({1, 1, 8}, rng).value();
  Array a({2, 4, 8});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = row[i % 8];
  Array first = model::action_cross_attention(s, Var(a), w, 2).value();
  w.wq = random_var({8, 8}, rng, 3.0);  // different attention weights
  Array second = model::action_cross_attention(s, Var(a), w, 2).value();
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_NEAR(first[i], second[i], 1e-12);
}

TEST(ActionCrossAttention, WeightsOverActionsSumToOne) {
  std::mt19937_64 rng(6);
  auto w = random_attention(8, rng);
  Array probs;
  model::action_cross_attention(random_var({5, 3, 8}, rng), random_var({5, 2, 8}, rng), w, 2, {}, &probs);
  ASSERT_EQ(probs.shape(), (num::Shape{10, 3, 2}));
  for (std::size_t r = 0; r < 30; ++r) EXPECT_NEAR(probs[2 * r] + probs[2 * r + 1], 1.0, 1e-9);
}

// --- SSM ----------------------------------------------------------------------

model::SsmWeights random_ssm(std::size_t d, std::size_t inner, std::size_t n, std::size_t r, std::mt19937_64& rng) {
  model::SsmWeights w;
  w.in_proj = random_var({d, 2 * inner}, rng, 0.7);
  w.conv = random_var({inner, 4}, rng, 0.7);
  w.x_proj = random_var({inner, r + 2 * n}, rng, 0.7);
  w.dt_proj = random_var({r, inner}, rng, 0.7);
  w.dt_bias = random_var({inner}, rng, 0.5);
  w.a_log = random_var({inner, n}, rng, 0.5);
  w.d_skip = random_var({inner}, rng, 1.0);
  w.out_proj = random_var({inner, d}, rng, 0.7);
  return w;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

// Scalar-loop selective scan over one sequence u[t][k].
std::vector<std::vector<double>> scan_oracle(const std::vector<std::vector<double>>& u, const model::SsmWeights& w) {
  const std::size_t l = u.size(), d = u[0].size(), inner = w.d_skip.dim(0), n = w.a_log.dim(1), r = w.dt_proj.dim(0);
  const std::size_t width = w.conv.dim(1);
  auto at = [](const Var& v, std::size_t i, std::size_t j) { return v.value().at(i, j); };
  std::vector<std::vector<double>> x(l, std::vector<double>(inner)), z = x;
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t c = 0; c < 2 * inner; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += u[t][k] * at(w.in_proj, k, c);
      (c < inner ? x[t][c] : z[t][c - inner]) = acc;
    }
  }
  std::vector<std::vector<double>> hstate(inner, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> out(l, std::vector<double>(d, 0.0));
  for (std::size_t t = 0; t < l; ++t) {
    std::vector<double> xc(inner);
    for (std::size_t c = 0; c < inner; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        const long src = static_cast<long>(t) - static_cast<long>(width - 1) + static_cast<long>(j);
        if (src >= 0) acc += at(w.conv, c, j) * x[static_cast<std::size_t>(src)][c];
      }
      xc[c] = silu(acc);
    }
    std::vector<double> dbc(r + 2 * n, 0.0);
    for (std::size_t j = 0; j < r + 2 * n; ++j) {
      for (std::size_t c = 0; c < inner; ++c) dbc[j] += xc[c] * at(w.x_proj, c, j);
    }
    std::vector<double> y(inner);
    for (std::size_t c = 0; c < inner; ++c) {
      double pre = w.dt_bias.value()[c];
      for (std::size_t j = 0; j < r; ++j) pre += dbc[j] * at(w.dt_proj, j, c);
      const double delta = softplus(pre);
      double yc = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double a = -std::exp(at(w.a_log, c, s));
        hstate[c][s] = std::exp(delta * a) * hstate[c][s] + delta * xc[c] * dbc[r + s];
        yc += hstate[c][s] * dbc[r + n + s];
      }
      y[c] = (yc + w.d_skip.value()[c] * xc[c]) * silu(z[t][c]);
    }
    for (std::size_t k = 0; k < d; ++k) {
      for (std::size_t c = 0; c < inner; ++c) out[t][k] += y[c] * at(w.out_proj, c, k);
    }
  }
  return out;
}

TEST(SsmScan, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(7);
  auto w = random_ssm(8, 16, 4, 1, rng);
  Array out = model::ssm_scan(Var(Array({2, 6, 8})), w).u.value();
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(SsmScan, EarlierOutputsIgnoreLaterInputs) {
  std::mt19937_64 rng(8);
  auto w = random_ssm(8, 16, 4, 1, rng);
  Var seq = random_var({1, 7, 8}, rng);
  Var sys = random_var({8}, rng);
  auto base = model::ssm_scan(seq, w, sys);
  for (std::size_t tp = 0; tp < 7; ++tp) {
    Array pert = seq.value();
    for (std::size_t k = 0; k < 8; ++k) pert[tp * 8 + k] += 0.37;
    auto moved = model::ssm_scan(Var(pert), w, sys);
    for (std::size_t t = 0; t < tp; ++t) {
      for (std::size_t k = 0; k < 8; ++k) {
        EXPECT_EQ(moved.u.value()[t * 8 + k], base.u.value()[t * 8 + k]);
        EXPECT_EQ(moved.readout.value()[t * 8 + k], base.readout.value()[t * 8 + k]);
      }
    }
  }
}

TEST(SsmScan, MatchesUnrolledRecurrence) {
  std::mt19937_64 rng(9);
  // Three steps, one state per feature.
  auto w = random_ssm(2, 2, 1, 1, rng);
  Var seq = random_var({1, 3, 2}, rng);
  std::vector<std::vector<double>> u(3, std::vector<double>(2));
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t k = 0; k < 2; ++k) u[t][k] = seq.value()[t * 2 + k];
  }
  const auto ref = scan_oracle(u, w);
  Array got = model::ssm_scan(seq, w).u.value();
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(got[t * 2 + k], ref[t][k], 1e-12);
  }
  // Larger random instance.
  auto w2 = random_ssm(6, 12, 5, 1, rng);
  Var seq2 = random_var({3, 9, 6}, rng);
  Array got2 = model::ssm_scan(seq2, w2).u.value();
  for (std::size_t g = 0; g < 3; ++g) {
    std::vector<std::vector<double>> u2(9, std::vector<double>(6));
    for (std::size_t t = 0; t < 9; ++t) {
      for (std::size_t k = 0; k < 6; ++k) u2[t][k] = seq2.value()[(g * 9 + t) * 6 + k];
    }
    const auto ref2 = scan_oracle(u2, w2);
    for (std::size_t t = 0; t < 9; ++t) {
      for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(got2[(g * 9 + t) * 6 + k], ref2[t][k], 1e-12);
    }
  }
}

TEST(SsmScan, ReadoutEqualsAppendedSystemToken) {
  std::mt19937_64 rng(10);
  auto w = random_ssm(6, 12, 5, 1, rng);
  Var seq = random_var({2, 5, 6}, rng);
  Var sys = random_var({6}, rng);
  Array readout = model::ssm_scan(seq, w, sys).readout.value();
  for (std::size_t cut = 1; cut <= 5; ++cut) {
    for (std::size_t g = 0; g < 2; ++g) {
      std::vector<std::vector<double>> u;
      for (std::size_t t = 0; t < cut; ++t) {
        std::vector<double> row(6);
        for (std::size_t k = 0; k < 6; ++k) row[k] = seq.value()[(g * 5 + t) * 6 + k];
        u.push_back(row);
      }
      u.push_back(std::vector<double>(sys.value().data().begin(), sys.value().data().end()));
      const auto ref = scan_oracle(u, w);
      for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(readout[(g * 5 + cut - 1) * 6 + k], ref[cut][k], 1e-12);
    }
  }
}

// --- Routing and mixture ---------------------------------------------------------

TEST(Route, ZeroRouterIsUniform) {
  std::mt19937_64 rng(11);
  Array w = model::route(random_var({3, 8}, rng), Var(Array({8, 4})), Var(Array({4}))).value();
  for (double v : w.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Route, SingleExpertAndSaturation) {
  std::mt19937_64 rng(12);
  Array one = model::route(random_var({2, 8}, rng), random_var({8, 1}, rng), random_var({1}, rng)).value();
  for (double v : one.data()) EXPECT_EQ(v, 1.0);
  Array sat = model::route(Var(Array({1, 1}, {1.0})), Var(Array({1, 4}, {10, -10, -10, -10})), Var(Array({4}))).value();
  const double z = std::exp(10.0) + 3 * std::exp(-10.0);
  EXPECT_NEAR(sat[0], std::exp(10.0) / z, 1e-15);
  EXPECT_NEAR(sat[0], 1.0, 1e-8);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(sat[i], 0.0, 1e-8);
}

TEST(MoeMix, OneHotAndIdenticalExperts) {
  std::mt19937_64 rng(13);
  Var experts = random_var({3, 2, 2, 4, 5}, rng);
  Array w({2, 4, 3});
  for (std::size_t i = 0; i < 8; ++i) w[i * 3 + 1] = 1.0;
  Array y = model::moe_mix(experts, Var(w)).value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], experts.value()[y.size() + i]);

  Array same({3, 2, 2, 4, 5});
  for (std::size_t i = 0; i < same.size(); ++i) same[i] = experts.value()[i % 80];
  Array w2({2, 4, 3});
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (std::size_t i = 0; i < 8; ++i) {
    double a = u(rng), b = u(rng), c = u(rng), s = a + b + c;
    w2[i * 3] = a / s;
    w2[i * 3 + 1] = b / s;
    w2[i * 3 + 2] = c / s;
  }
  Array y2 = model::moe_mix(Var(same), Var(w2)).value();
  for (std::size_t i = 0; i < y2.size(); ++i) EXPECT_NEAR(y2[i], experts.value()[i], 1e-12);
}

TEST(MoeMix, HalfHalfAveragesLinearExperts) {
  // E_1(u) = 2u + 1, E_2(u) = -u + 3 on a [1, 1, 1, 3, 1] input.
  const std::vector<double> u{0.5, -1.0, 2.0};
  Array e({2, 1, 1, 3, 1});
  for (std::size_t t = 0; t < 3; ++t) {
    e[t] = 2 * u[t] + 1;
    e[3 + t] = -u[t] + 3;
  }
  Array y = model::moe_mix(Var(e), Var(Array({1, 3, 2}, 0.5))).value();
  for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(y[t], 0.5 * (u[t] + 4), 1e-15);
}

// --- Full forward ------------------------------------------------------------------

TEST(Forward, ShapeAndSimplex) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 1);
  auto in = random_input(c, 3, 2, 1, 2);
  auto out = m.forward(in);
  EXPECT_EQ(out.log_probs.shape(), (num::Shape{3, 6, 2, 16}));
  Array p = out.probs();
  for (std::size_t r = 0; r < p.size() / 16; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) s += p[r * 16 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  ASSERT_EQ(out.routing.size(), 1u);
  for (double v : out.routing[0].data()) EXPECT_DOUBLE_EQ(v, 0.5);  // zero-initialized router
}

TEST(Forward, HandlesWideChannelSets) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 2);
  auto in = random_input(c, 1, 78, 21, 3);
  EXPECT_EQ(m.forward(in).log_probs.shape(), (num::Shape{1, 6, 78, 16}));
}

TEST(Forward, RejectsBadInputs) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 3);
  auto in = random_input(c, 1, 2, 1, 4);
  auto bad = in;
  bad.history[0] = 1.5;
  EXPECT_THROW(m.forward(bad), model::InputError);
  bad = in;
  bad.actions = Array({1, c.history, 1}, 0.5);
  EXPECT_THROW(m.forward(bad), model::InputError);
}

TEST(Forward, CausalInStatesAndActions) {
  ModelConfig c = tiny_config();
  c.n_blocks = 2;
  c.horizon = 3;
  SysMoEModel m(c, 4);
  randomize(m, 5);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = random_input(c, 2, 3, 2, 7);
  const Array base = m.forward(in).log_probs.value();
  const std::size_t l = c.window(), row = 3 * 16;
  for (int trial = 0; trial < 20; ++trial) {
    auto pert = in;
    const bool state = trial % 2 == 0;
    const std::size_t tp = state ? rng() % c.history : rng() % l;
    for (std::size_t b = 0; b < 2; ++b) {
      if (state) {
        for (std::size_t mm = 0; mm < 3; ++mm) pert.history[(b * c.history + tp) * 3 + mm] = u(rng);
      } else {
        for (std::size_t mm = 0; mm < 2; ++mm) pert.actions[(b * l + tp) * 2 + mm] = u(rng);
      }
    }
    const Array moved = m.forward(pert).log_probs.value();
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t i = 0; i < tp * row; ++i) ASSERT_EQ(moved[b * l * row + i], base[b * l * row + i]);
    }
  }
}

TEST(Forward, RoutingWeightsAreSimplexes) {
  ModelConfig c = tiny_config();
  c.n_blocks = 2;
  c.n_experts = 3;
  SysMoEModel m(c, 8);
  randomize(m, 9, 1.0);
  auto out = m.forward(random_input(c, 4, 2, 1, 10));
  ASSERT_EQ(out.routing.size(), 2u);
  for (const Array& w : out.routing) {
    for (std::size_t r = 0; r < w.size() / 3; ++r) {
      EXPECT_GE(w[r * 3], 0.0);
      EXPECT_NEAR(w[r * 3] + w[r * 3 + 1] + w[r * 3 + 2], 1.0, 1e-9);
    }
  }
}

TEST(Forward, SingleExpertMatchesDenseVariant) {
  ModelConfig c = tiny_config();
  c.n_experts = 1;
  c.n_blocks = 2;
  SysMoEModel moe(c, 11);
  randomize(moe, 12);
  ModelConfig dc = c;
  dc.dense_ssm = true;
  SysMoEModel dense(dc, 13);
  for (auto& np : dense.parameters()) np.var.mutable_value() = moe.param(np.name).value();
  auto in = random_input(c, 2, 2, 1, 14);
  Array a = moe.forward(in).log_probs.value();
  Array b = dense.forward(in).log_probs.value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  EXPECT_FALSE(dense.has_param("block0.sys"));
}

TEST(Forward, NoStructEmbedIgnoresStructuralTables) {
  ModelConfig c = tiny_config();
  c.no_struct_embed = true;
  SysMoEModel m(c, 15);
  auto in = random_input(c, 2, 2, 1, 16);
  Array before = m.forward(in).log_probs.value();
  for (const char* t : {"struct.obj", "struct.pre", "struct.in", "struct.post"}) {
    Var table = m.param(t);
    for (double& v : table.mutable_value().data()) v = 5.0 * std::sin(v * 1000.0 + 1.0);
  }
  EXPECT_EQ(m.forward(in).log_probs.value(), before);
}

TEST(Forward, StructTablesMatterWhenEnabled) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 17);
  auto in = random_input(c, 1, 2, 1, 18);
  Array before = m.forward(in).log_probs.value();
  Var table = m.param("struct.pre");
  for (double& v : table.mutable_value().data()) v += 0.5;
  EXPECT_NE(m.forward(in).log_probs.value(), before);
}

TEST(Forward, FixedRoutingIsolatesSystemEmbedding) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 19);
  randomize(m, 20);
  auto in = random_input(c, 2, 2, 1, 21);
  model::ForwardOptions opt;
  opt.routing_override = std::vector<double>{0.3, 0.7};
  Array before = m.forward(in, opt).log_probs.value();
  Var sys = m.param("block0.sys");
  for (double& v : sys.mutable_value().data()) v = -v + 0.9;
  EXPECT_EQ(m.forward(in, opt).log_probs.value(), before);
  // Without the override the system embedding changes the mixture.
  EXPECT_NE(m.forward(in).log_probs.value(), before);
}

TEST(Forward, DropoutOnlyInTraining) {
  ModelConfig c = tiny_config();
  c.dropout = 0.3;
  SysMoEModel m(c, 22);
  auto in = random_input(c, 1, 2, 1, 23);
  model::ForwardOptions train;
  train.training = true;
  train.dropout_seed = 5;
  EXPECT_EQ(m.forward(in).log_probs.value(), m.forward(in).log_probs.value());
  EXPECT_EQ(m.forward(in, train).log_probs.value(), m.forward(in, train).log_probs.value());
  EXPECT_NE(m.forward(in, train).log_probs.value(), m.forward(in).log_probs.value());
}

TEST(Forward, EveryParameterPassesGradientCheck) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 24);
  randomize(m, 25, 0.3);
  auto in = random_input(c, 1, 2, 1, 26);
  std::vector<std::size_t> targets(c.window() * 2);
  std::vector<std::uint8_t> mask(targets.size(), 1);
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = (i * 7) % c.k_bins;
  for (std::size_t i = (c.window() - 1) * 2; i < targets.size(); ++i) mask[i] = 0;
  auto loss = [&] { return model::ce_loss(m.forward(in).log_probs, targets, mask); };
  for (const auto& np : m.parameters()) {
    const double err = num::finite_diff_check(loss, {np.var}, {1e-4, 64, 3});
    EXPECT_LT(err, 1e-3) << np.name;
  }
}

// --- Losses -------------------------------------------------------------------------

double naive_ce(const Array& lp, const std::vector<std::size_t>& t, const std::vector<std::uint8_t>& mask) {
  const std::size_t k = lp.shape().back();
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < k; ++j) total -= (j == t[r] ? 1.0 : 0.0) * lp[r * k + j];
    ++n;
  }
  return total / static_cast<double>(n);
}

double naive_kd(const Array& lp, const Array& teacher, const std::vector<std::size_t>& t,
                const std::vector<std::uint8_t>& mask, double alpha) {
  const std::size_t k = lp.shape().back();
  double soft = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < k; ++j) soft -= teacher[r * k + j] * lp[r * k + j];
    ++n;
  }
  return alpha * naive_ce(lp, t, mask) + (1.0 - alpha) * soft / static_cast<double>(n);
}

Array random_log_probs(num::Shape shape, std::mt19937_64& rng) {
  Var logits = random_var(shape, rng, 3.0);
  return num::log_softmax(logits, shape.size() - 1).value();
}

TEST(Losses, CeMatchesNaiveLoop) {
  std::mt19937_64 rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    Array lp = random_log_probs({1, 4, 2, 16}, rng);
    std::vector<std::size_t> t(8);
    std::vector<std::uint8_t> mask(8);
    for (std::size_t i = 0; i < 8; ++i) {
      t[i] = rng() % 16;
      mask[i] = (rng() % 4) != 0;
    }
    mask[0] = 1;
    EXPECT_NEAR(model::ce_loss(Var(lp), t, mask).value().item(), naive_ce(lp, t, mask), 1e-12);
    Array teacher = random_log_probs({1, 4, 2, 16}, rng);
    for (double& v : teacher.data()) v = std::exp(v);
    const double alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    EXPECT_NEAR(model::kd_loss(Var(lp), teacher, t, mask, alpha).value().item(), naive_kd(lp, teacher, t, mask, alpha),
                1e-12);
    EXPECT_EQ(model::kd_loss(Var(lp), teacher, t, mask, 1.0).value().item(),
              model::ce_loss(Var(lp), t, mask).value().item());
  }
}

TEST(Losses, PerfectAndUniformPredictions) {
  const std::size_t k = 16;
  std::vector<std::size_t> t{3, 0, 15, 7};
  std::vector<std::uint8_t> mask(4, 1);
  Array perfect({4, k}, -50.0);
  for (std::size_t r = 0; r < 4; ++r) perfect[r * k + t[r]] = 0.0;
  EXPECT_EQ(model::ce_loss(Var(perfect), t, mask).value().item(), 0.0);
  Array uniform({4, k}, -std::log(static_cast<double>(k)));
  EXPECT_NEAR(model::ce_loss(Var(uniform), t, mask).value().item(), std::log(16.0), 1e-9);
  std::vector<std::size_t> bad{16, 0, 0, 0};
  EXPECT_THROW(model::ce_loss(Var(uniform), bad, mask), num::ContractError);
}

TEST(Losses, KdWithMatchedOneHotsIsZero) {
  const std::size_t k = 8;
  std::vector<std::size_t> t{1, 2};
  std::vector<std::uint8_t> mask(2, 1);
  Array student({2, k}, -60.0), teacher({2, k}, 0.0);
  student[5] = 0.0;
  teacher[5] = 1.0;
  student[k + 2] = 0.0;
  teacher[k + 2] = 1.0;
  EXPECT_EQ(model::kd_loss(Var(student), teacher, t, mask, 0.0).value().item(), 0.0);
}

TEST(Losses, KdAgainstItselfIsTeacherEntropy) {
  std::mt19937_64 rng(31);
  Array lp = random_log_probs({3, 10}, rng);
  Array p = lp;
  for (double& v : p.data()) v = std::exp(v);
  std::vector<std::size_t> t{0, 1, 2};
  std::vector<std::uint8_t> mask(3, 1);
  double entropy = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) entropy -= p[i] * lp[i];
  EXPECT_NEAR(model::kd_loss(Var(lp), p, t, mask, 0.0).value().item(), entropy / 3.0, 1e-12);
}

// --- Targets and checkpoints -----------------------------------------------------------

TEST(Targets, AlignPositionWithNextState) {
  ModelConfig c = tiny_config();
  data::TrajectoryEpisode ep;
  ep.system_id = "s";
  ep.tree = structure::KinematicTree::from_edges({{"base", "ROOT"}});
  ep.channels = {{"x", data::Modality::state, 0}, {"u", data::Modality::action, 0}};
  ep.states = Array({8, 1});
  ep.actions = Array({8, 1}, 0.5);
  ep.mask.assign(8, 1);
  for (std::size_t t = 0; t < 8; ++t) ep.states.at(t, 0) = static_cast<double>(t) / 8.0;
  auto tg = model::make_targets({&ep}, {1}, c);
  for (std::size_t pos = 0; pos + 1 < c.window(); ++pos) {
    EXPECT_EQ(tg.mask[pos], 1);
    EXPECT_EQ(tg.bins[pos], tok::discretize(static_cast<double>(pos + 2) / 8.0, c.k_bins));
  }
  EXPECT_EQ(tg.mask[c.window() - 1], 0);
  ep.mask[5] = 0;
  auto masked = model::make_targets({&ep}, {1}, c);
  EXPECT_EQ(masked.mask[3], 0);  // predicts row 5
  EXPECT_EQ(masked.mask[4], 0);  // input row 5 is padding
}

TEST(Checkpoint, RoundTripsBitExactly) {
  ModelConfig c = tiny_config();
  SysMoEModel m(c, 40);
  randomize(m, 41);
  data::StatsTable stats;
  stats["sys0"] = {{"s0", {-0.1234567890123, 0.987654321}}, {"a0", {-1.0, 1.0}}};
  const auto path = (std::filesystem::temp_directory_path() / "sysmoe_model_test.ckpt").string();
  model::save_checkpoint(path, m, stats);
  auto ck = model::load_checkpoint(path);
  ASSERT_EQ(ck.model.parameters().size(), m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(ck.model.parameters()[i].name, m.parameters()[i].name);
    EXPECT_EQ(ck.model.parameters()[i].var.value(), m.parameters()[i].var.value());
  }
  EXPECT_EQ(ck.model.config().to_map(), c.to_map());
  EXPECT_EQ(ck.stats.at("sys0")[0].second.min, -0.1234567890123);
  const auto again = path + ".2";
  model::save_checkpoint(again, ck.model, ck.stats);
  std::ifstream a(path, std::ios::binary), b(again, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  std::filesystem::remove(path);
  std::filesystem::remove(again);
}

TEST(Checkpoint, RejectsOtherVersions) {
  const auto path = (std::filesystem::temp_directory_path() / "sysmoe_bad_version.ckpt").string();
  {
    std::ofstream f(path);
    f << "SYSMOE-CHECKPOINT 99\n[config]\n";
  }
  try {
    model::load_checkpoint(path);
    FAIL() << "expected CheckpointError";
  } catch (const model::CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version 99"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Params, GroupsCoverEveryParameter) {
  SysMoEModel m(tiny_config(), 50);
  const auto groups = m.groups();
  EXPECT_EQ(groups, (std::vector<std::string>{"embeddings", "queries", "block0", "decoder"}));
  EXPECT_EQ(SysMoEModel::group_of("block0.ssm.conv"), "block0");
  EXPECT_THROW(SysMoEModel::group_of("mystery"), model::ConfigError);
}

}  // namespace
