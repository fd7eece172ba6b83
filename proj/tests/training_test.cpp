#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "sysmoe/training.hpp"

namespace {

using namespace sysmoe;
using num::Array;
using num::Var;

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.d = 8;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.n_experts = 2;
  c.k_bins = 16;
  c.history = 4;
  c.horizon = 4;
  c.ssm_state = 4;
  c.expert_hidden = 16;
  c.dropout = 0.0;
  return c;
}

train::PreparedData tiny_data() {
  data::LinearSystem sys;
  sys.a = Array({2, 2}, {0.9, 0.1, 0.0, 0.8});
  sys.b = Array({2, 1}, {0.1, 0.2});
  const auto eps = data::gen_linear_system(sys, 10, 16, 3);
  return train::prepare(data::split_dataset(eps, 0.6, 0.2, 1));
}

train::TrainConfig tiny_train(std::size_t steps) {
  train::TrainConfig t;
  t.lr = 3e-3;
  t.warmup = 2;
  t.total_steps = steps;
  t.batch = 4;
  t.eval_interval = 5;
  t.log_interval = 1;
  t.patience = 0;
  return t;
}

std::string bytes_of(const model::SysMoEModel& m, const data::StatsTable& stats) {
  const auto path = std::filesystem::temp_directory_path() / "sysmoe_training_test.ckpt";
  model::save_checkpoint(path.string(), m, stats);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::filesystem::remove(path);
  return ss.str();
}

TEST(Schedule, WarmupThenCosine) {
  train::TrainConfig c;
  c.lr = 1e-3;
  c.warmup = 10;
  c.total_steps = 110;
  EXPECT_EQ(train::lr_at(0, c), 0.0);
  EXPECT_NEAR(train::lr_at(5, c), 5e-4, 1e-15);
  EXPECT_NEAR(train::lr_at(10, c), 1e-3, 1e-15);
  EXPECT_NEAR(train::lr_at(60, c), 5e-4, 1e-15);
  EXPECT_NEAR(train::lr_at(110, c), 0.0, 1e-12);
  for (std::size_t s = 11; s <= 110; ++s) EXPECT_LE(train::lr_at(s, c), train::lr_at(s - 1, c));
}

TEST(Config, Invariants) {
  auto c = tiny_train(10);
  c.warmup = 11;
  EXPECT_THROW(c.validate(), train::ConfigError);
  c = tiny_train(10);
  c.clip = 0.0;
  EXPECT_THROW(c.validate(), train::ConfigError);
  c = tiny_train(10);
  c.batch = 0;
  EXPECT_THROW(c.validate(), train::ConfigError);
  const auto again = train::TrainConfig::from_map(tiny_train(10).to_map());
  EXPECT_EQ(again.to_map(), tiny_train(10).to_map());
}

TEST(Clip, Examples) {
  std::vector<Array> g{Array({2}, {0.06, 0.08})};
  EXPECT_NEAR(train::clip_gradients(g, 0.25), 0.1, 1e-15);
  EXPECT_EQ(g[0][0], 0.06);
  std::vector<Array> big{Array({2}, {0.6, 0.0}), Array({1}, {0.8})};
  EXPECT_NEAR(train::clip_gradients(big, 0.25), 1.0, 1e-15);
  EXPECT_NEAR(train::global_norm(big), 0.25, 1e-9);
  std::vector<Array> zero{Array({3}, 0.0)};
  EXPECT_EQ(train::clip_gradients(zero, 0.25), 0.0);
  EXPECT_EQ(zero[0].storage(), std::vector<double>(3, 0.0));
}

TEST(Clip, NeverIncreasesNorm) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::pow(10.0, n(rng));
    std::vector<Array> g{Array({3}), Array({2, 2})};
    for (auto& a : g)
      for (double& v : a.data()) v = scale * n(rng);
    const double before = train::global_norm(g);
    train::clip_gradients(g, 0.25);
    const double after = train::global_norm(g);
    EXPECT_LE(after, before + 1e-15);
    EXPECT_LE(after, 0.25 + 1e-9);
  }
}

TEST(AdamW, HandComputedSteps) {
  std::vector<Var> p{Var(Array({1}, {1.0}), true)};
  train::OptimizerState st;
  const double lr = 0.1, wd = 0.01;
  // Step 1, g = 1: m = 0.1, v = 0.001, mhat = vhat = 1.
  train::adamw_step(p, {Array({1}, {1.0})}, st, lr, wd);
  double want = 1.0 * (1 - lr * wd) - lr * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(p[0].value()[0], want, 1e-15);
  EXPECT_LT(p[0].value()[0], 1.0);
  // Step 2, g = -2: m = 0.09 - 0.2, v = 0.000999 + 0.004.
  train::adamw_step(p, {Array({1}, {-2.0})}, st, lr, wd);
  const double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  want = want * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(p[0].value()[0], want, 1e-15);
  EXPECT_EQ(st.step, 2u);
}

TEST(AdamW, FixedPointAndDecoupledDecay) {
  std::vector<Var> p{Var(Array({2}, {0.5, -3.0}), true)};
  train::OptimizerState st;
  train::adamw_step(p, {Array({2}, 0.0)}, st, 0.1, 0.0);
  EXPECT_EQ(p[0].value().storage(), (std::vector<double>{0.5, -3.0}));
  train::adamw_step(p, {Array({2}, 0.0)}, st, 0.1, 0.2);
  EXPECT_NEAR(p[0].value()[0], 0.5 * 0.98, 1e-15);
  EXPECT_NEAR(p[0].value()[1], -3.0 * 0.98, 1e-15);
}

TEST(Freeze, Masks) {
  const model::SysMoEModel m(tiny_config(), 1);
  const auto all = train::apply_freeze_mask(m, {});
  EXPECT_EQ(train::trainable_fraction(m, all), 1.0);
  EXPECT_EQ(train::trainable_fraction(m, train::apply_freeze_mask(m, {"all"})), 0.0);
  const double partial = train::trainable_fraction(m, train::apply_freeze_mask(m, {"embeddings", "block0"}));
  EXPECT_GT(partial, 0.0);
  EXPECT_LT(partial, 1.0);
  EXPECT_THROW(train::apply_freeze_mask(m, {"block7"}), train::ConfigError);
}

TEST(Train, FreezeAllLeavesParametersIdentical) {
  const auto d = tiny_data();
  model::SysMoEModel m(tiny_config(), 2);
  const auto before = bytes_of(m, d.stats);
  auto c = tiny_train(10);
  c.freeze = {"all"};
  const auto r = train::train(m, d.train, d.val, c);
  EXPECT_EQ(bytes_of(m, d.stats), before);
  EXPECT_EQ(r.trainable_fraction, 0.0);
}

TEST(Train, PatienceOneStopsAtFirstNonImprovingEval) {
  const auto d = tiny_data();
  model::SysMoEModel m(tiny_config(), 2);
  auto c = tiny_train(100);
  c.freeze = {"all"};
  c.patience = 1;
  const auto r = train::train(m, d.train, d.val, c);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.steps, c.eval_interval);
  EXPECT_EQ(r.val_ce.size(), 2u);
}

TEST(Train, DeterministicLogsAndCheckpoint) {
  const auto d = tiny_data();
  std::string logs[2], ckpt[2];
  for (int i = 0; i < 2; ++i) {
    model::SysMoEModel m(tiny_config(), 5);
    std::ostringstream out;
    auto c = tiny_train(12);
    const auto r = train::train(m, d.train, d.val, c, nullptr, &out);
    logs[i] = out.str();
    ckpt[i] = bytes_of(r.best, d.stats);
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(ckpt[0], ckpt[1]);
}

TEST(Train, BestValidationIsMinimumAndLossDecreases) {
  const auto d = tiny_data();
  model::SysMoEModel m(tiny_config(), 6);
  const auto r = train::train(m, d.train, d.val, tiny_train(30));
  for (double v : r.val_ce) EXPECT_LE(r.best_val_ce, v);
  EXPECT_EQ(r.train_ce.size(), 30u);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    head += r.train_ce[i];
    tail += r.train_ce[r.train_ce.size() - 1 - i];
  }
  EXPECT_LT(tail, head);
  EXPECT_NEAR(train::evaluate_loss(r.best, d.val, 4).ce, r.best_val_ce, 1e-12);
}

TEST(Train, MetricRecordsCarryRequiredFields) {
  const auto d = tiny_data();
  model::SysMoEModel m(tiny_config(), 7);
  std::ostringstream out;
  train::train(m, d.train, d.val, tiny_train(6), nullptr, &out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t step_records = 0, eval_records = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("train_ce")) {
      ++step_records;
      EXPECT_TRUE(j.contains("lr"));
      EXPECT_TRUE(j.contains("grad_norm"));
      ASSERT_TRUE(j.contains("routing_entropy"));
      EXPECT_EQ(j["routing_entropy"].size(), 2u);
      for (double e : j["routing_entropy"]) {
        EXPECT_GE(e, 0.0);
        EXPECT_LE(e, std::log(2.0) + 1e-12);
      }
    }
    if (j.contains("val_ce")) ++eval_records;
  }
  EXPECT_EQ(step_records, 6u);
  EXPECT_EQ(eval_records, 3u);  // step 0, 5 and the last step
}

TEST(Train, NonFiniteLossReportsStepAndBatch) {
  const auto d = tiny_data();
  model::SysMoEModel m(tiny_config(), 8);
  for (auto& np : m.parameters())
    if (np.name.rfind("decoder.", 0) == 0) np.var.mutable_value().fill(std::numeric_limits<double>::quiet_NaN());
  try {
    train::train(m, d.train, d.val, tiny_train(3));
    FAIL() << "expected TrainingError";
  } catch (const train::TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("episodes ["), std::string::npos) << msg;
  }
}

TEST(Distill, AlphaOneMatchesPlainTraining) {
  const auto d = tiny_data();
  const model::SysMoEModel teacher(tiny_config(), 11);
  auto c = tiny_train(8);
  c.kd_alpha = 1.0;
  model::SysMoEModel plain(tiny_config(), 12);
  const auto a = train::train(plain, d.train, d.val, c);
  const auto b = train::distill(teacher, tiny_config(), 12, d.train, d.val, c);
  ASSERT_EQ(a.train_ce.size(), b.train_ce.size());
  for (std::size_t i = 0; i < a.train_ce.size(); ++i) EXPECT_EQ(a.train_ce[i], b.train_ce[i]);
  EXPECT_EQ(bytes_of(a.best, d.stats), bytes_of(b.best, d.stats));
}

TEST(Distill, AlphaZeroOnTeacherCopyIsTeacherEntropy) {
  const auto d = tiny_data();
  const auto cfg = tiny_config();
  const model::SysMoEModel teacher(cfg, 13);
  std::vector<const data::TrajectoryEpisode*> eps{&d.train[0], &d.train[1]};
  const std::vector<std::size_t> starts{0, 0};
  const auto in = model::make_input(eps, starts, cfg);
  const auto tg = model::make_targets(eps, starts, cfg);
  const auto res = teacher.forward(in);
  const Array probs = res.probs();
  const double loss = model::kd_loss(res.log_probs, probs, tg.bins, tg.mask, 0.0).value().item();
  // Oracle: mean over masked (position, channel) pairs of -sum p log p.
  const Array& lp = res.log_probs.value();
  const std::size_t k = cfg.k_bins, pairs = tg.mask.size();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pairs; ++i) {
    if (!tg.mask[i]) continue;
    for (std::size_t b = 0; b < k; ++b) sum -= probs[i * k + b] * lp[i * k + b];
    ++count;
  }
  ASSERT_GT(count, 0u);
  EXPECT_NEAR(loss, sum / static_cast<double>(count), 1e-12);
}

TEST(Distill, BinMismatchIsConfigError) {
  const auto d = tiny_data();
  const model::SysMoEModel teacher(tiny_config(), 1);
  auto student = tiny_config();
  student.k_bins = 32;
  EXPECT_THROW(train::distill(teacher, student, 2, d.train, d.val, tiny_train(2)), train::ConfigError);
}

TEST(Sampler, DeterministicWindowsInRange) {
  const auto d = tiny_data();
  train::BatchSampler a(d.train, 8, 4, 9), b(d.train, 8, 4, 9);
  for (int i = 0; i < 20; ++i) {
    const auto x = a.next(), y = b.next();
    EXPECT_EQ(x.episodes, y.episodes);
    EXPECT_EQ(x.starts, y.starts);
    for (std::size_t j = 0; j < x.episodes.size(); ++j) EXPECT_LE(x.starts[j] + 8, d.train[x.episodes[j]].steps());
  }
}

}  // namespace
