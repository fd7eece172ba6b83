#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "sysmoe/numerics.hpp"

namespace {

using namespace sysmoe::num;

Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array a(std::move(shape));
  for (double& v : a.data()) v = u(rng);
  return a;
}

Var param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Var(random_array(std::move(shape), rng, lo, hi), true);
}

// Contracts `y` with a fixed random tensor so every output coordinate matters.
Var probe(const Var& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, constant(random_array(y.shape(), rng))));
}

TEST(Elementwise, BasicValues) {
  Var a(Array({2}, {1, 2})), b(Array({2}, {3, 4}));
  EXPECT_EQ(add(a, b).value().storage(), (std::vector<double>{4, 6}));
  EXPECT_EQ(exp(Var(Array({1}, {0.0}))).value().item(), 1.0);
  EXPECT_EQ(gelu(Var(Array({1}, {0.0}))).value().item(), 0.0);
  EXPECT_EQ(elementwise(OpKind::sub, a, b).value().storage(), (std::vector<double>{-2, -2}));
  EXPECT_EQ(elementwise(OpKind::relu, Var(Array({2}, {-1, 2}))).value().storage(), (std::vector<double>{0, 2}));
}

TEST(Elementwise, BroadcastsLeadingAxes) {
  Var a(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var row(Array({3}, {10, 20, 30}));
  EXPECT_EQ(add(a, row).value().storage(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  Var col(Array({2, 1}, {1, -1}));
  EXPECT_EQ(mul(a, col).value().storage(), (std::vector<double>{1, 2, 3, -4, -5, -6}));
}

TEST(Elementwise, MismatchNamesBothShapes) {
  Var a(Array({2, 3})), b(Array({4}));
  try {
    add(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4]"), std::string::npos) << msg;
  }
}

TEST(Matmul, IdentityAndSmallProduct) {
  Var eye(Array({2, 2}, {1, 0, 0, 1}));
  Var m(Array({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, m).value(), m.value());
  EXPECT_EQ(matmul(Var(Array({1, 2}, {1, 2})), Var(Array({2, 1}, {3, 4}))).value().item(), 11.0);
  EXPECT_THROW(matmul(Var(Array({2, 3})), Var(Array({2, 3}))), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Var a = param({3, 4}, rng), b = param({4, 2}, rng);
  EXPECT_LT(finite_diff_check([&] { return probe(matmul(a, b)); }, {a, b}), 1e-4);
}

TEST(Matmul, BatchedGradient) {
  std::mt19937_64 rng(2);
  Var a = param({3, 2, 4}, rng), b = param({3, 4, 5}, rng), bt = param({3, 5, 4}, rng);
  EXPECT_LT(finite_diff_check([&] { return probe(bmm(a, b)); }, {a, b}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return probe(bmm(a, bt, true)); }, {a, bt}), 1e-6);
  Var w = param({4, 3}, rng);
  EXPECT_LT(finite_diff_check([&] { return probe(matmul(a, w)); }, {a, w}), 1e-6);
}

TEST(Softmax, UniformSaturationAndOracle) {
  auto s = softmax(Var(Array({4}, {0, 0, 0, 0})), 0).value();
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  auto sat = softmax(Var(Array({2}, {1000, 0})), 0).value();
  EXPECT_NEAR(sat[0], 1.0, 1e-12);
  EXPECT_NEAR(sat[1], 0.0, 1e-12);
  auto p = softmax(Var(Array({3}, {1, 2, 3})), 0).value();
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-12);
}

TEST(Softmax, SumsToOneOnRandomInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Array x = random_array({3, 5, 7}, rng, -50, 50);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Array p = softmax(Var(x), axis).value();
      const Shape& sh = p.shape();
      std::size_t inner = 1;
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= sh[i];
      const std::size_t outer = p.size() / (sh[axis] * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double s = 0.0;
          for (std::size_t j = 0; j < sh[axis]; ++j) {
            const double v = p[(o * sh[axis] + j) * inner + in];
            EXPECT_GE(v, 0.0);
            s += v;
          }
          EXPECT_NEAR(s, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(LayerNorm, ConstantAndNormalizedInputs) {
  Var gain(Array({2}, {1, 1})), bias(Array({2}, {0, 0}));
  auto c = layernorm(Var(Array({2}, {3, 3})), gain, bias, 0).value();
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.0);
  auto n = layernorm(Var(Array({2}, {1, -1})), gain, bias, 0).value();
  EXPECT_NEAR(n[0], 1.0, 1e-5);
  EXPECT_NEAR(n[1], -1.0, 1e-5);
}

TEST(LayerNorm, RandomVectorStatistics) {
  std::mt19937_64 rng(4);
  Var x(random_array({64}, rng, -3, 7));
  Var gain(Array({64}, 1.0)), bias(Array({64}, 0.0));
  Array y = layernorm(x, gain, bias, 0).value();
  double m = 0.0, v = 0.0;
  for (double e : y.data()) m += e;
  m /= 64;
  for (double e : y.data()) v += (e - m) * (e - m);
  EXPECT_LT(std::abs(m), 1e-7);
  EXPECT_LT(std::abs(std::sqrt(v / 64) - 1.0), 1e-3);
}

TEST(Backward, PolynomialAndSimplexSum) {
  Var x(Array({1}, {3.0}), true);
  backward(mul(x, x));
  EXPECT_EQ(x.grad().item(), 6.0);

  Var z(Array({4}, {0.3, -1.0, 2.0, 0.5}), true);
  backward(sum(softmax(z, 0)));
  const Array gz = z.grad();
  for (double g : gz.data()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, RejectsNonScalarLoss) {
  Var x(Array({2}, {1, 2}), true);
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, AccumulatesOncePerUse) {
  Var x(Array({1}, {2.0}), true);
  Var y = add(mul(x, x), x);  // 2x + 1 = 5
  backward(add(y, y));        // 2 * (x^2 + x) -> 10
  EXPECT_EQ(x.grad().item(), 10.0);
}

TEST(Backward, DeterministicAcrossRuns) {
  std::mt19937_64 rng(5);
  Var a = param({4, 6}, rng), w = param({6, 3}, rng), g = param({3}, rng), b = param({3}, rng);
  auto run = [&] {
    a.zero_grad();
    w.zero_grad();
    backward(probe(layernorm(gelu(matmul(a, w)), g, b, 1)));
    return std::pair{a.grad(), w.grad()};
  };
  auto first = run();
  auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(FiniteDiff, LinearAndQuadratic) {
  std::mt19937_64 rng(6);
  Var x = param({5}, rng);
  Var c(random_array({5}, rng));
  EXPECT_LT(finite_diff_check([&] { return sum(mul(x, c)); }, {x}), 1e-8);
  EXPECT_LT(finite_diff_check([&] { return sum(mul(mul(x, x), c)); }, {x}), 1e-6);
}

TEST(FiniteDiff, EveryOpOnRandomShapes) {
  std::mt19937_64 rng(7);
  Var x = param({2, 3, 4}, rng), y = param({3, 4}, rng), pos = param({2, 3, 4}, rng, 0.5, 2.0);
  Var gain = param({4}, rng), bias = param({4}, rng);
  const double tol = 1e-3;
  EXPECT_LT(finite_diff_check([&] { return probe(add(x, y)); }, {x, y}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(sub(x, y)); }, {x, y}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(mul(x, y)); }, {x, y}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(scale(x, -1.7)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(exp(x)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(log(pos)); }, {pos}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(gelu(x)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(silu(x)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(softplus(x)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(relu(pos)); }, {pos}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(softmax(x, 1)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(log_softmax(x, 2)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(layernorm(x, gain, bias, 2)); }, {x, gain, bias}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(sum_axis(x, 1)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return mean(mul(x, x)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(permute(x, {2, 0, 1})); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(reshape(x, {6, 4})); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(transpose(y)); }, {y}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(slice(x, 1, 1, 3)); }, {x}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(concat({x, pos}, 2)); }, {x, pos}), tol);
  EXPECT_LT(finite_diff_check([&] { return probe(broadcast_to(y, {2, 3, 4})); }, {y}), tol);
  std::vector<std::size_t> rows{2, 0, 2, 1};
  EXPECT_LT(finite_diff_check([&] { return probe(gather_rows(y, rows)); }, {y}), tol);
}

TEST(CausalConv, MatchesDirectLoopAndGradient) {
  std::mt19937_64 rng(8);
  Var x = param({2, 6, 3}, rng), k = param({3, 4}, rng);
  Array y = causal_conv1d(x, k).value();
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t t = 0; t < 6; ++t) {
      for (std::size_t c = 0; c < 3; ++c) {
        double ref = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
          const long s = static_cast<long>(t) - 3 + static_cast<long>(j);
          if (s >= 0) ref += k.value().at(c, j) * x.value()[(g * 6 + static_cast<std::size_t>(s)) * 3 + c];
        }
        EXPECT_NEAR(y[(g * 6 + t) * 3 + c], ref, 1e-14);
      }
    }
  }
  EXPECT_LT(finite_diff_check([&] { return probe(causal_conv1d(x, k)); }, {x, k}), 1e-6);
}

TEST(LinearRecurrence, MatchesUnrolledLoopAndGradient) {
  std::mt19937_64 rng(9);
  Var decay = param({2, 5, 3}, rng, 0.1, 0.9), drive = param({2, 5, 3}, rng);
  Array h = linear_recurrence(decay, drive).value();
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t c = 0; c < 3; ++c) {
      double state = 0.0;
      for (std::size_t t = 0; t < 5; ++t) {
        const std::size_t i = (g * 5 + t) * 3 + c;
        state = decay.value()[i] * state + drive.value()[i];
        EXPECT_NEAR(h[i], state, 1e-14);
      }
    }
  }
  EXPECT_LT(finite_diff_check([&] { return probe(linear_recurrence(decay, drive)); }, {decay, drive}), 1e-6);
}

// The same scan written with elementwise ops over [g, t, c, n] tensors.
Var composed_scan(const Var& x, const Var& delta, const Var& a, const Var& b, const Var& cm, const Var& h_in,
                  Var* h_out) {
  const std::size_t g = x.dim(0), t = x.dim(1), c = x.dim(2), n = a.dim(1);
  Var decay = exp(mul(reshape(delta, {g, t, c, 1}), a));
  Var drive = mul(reshape(mul(delta, x), {g, t, c, 1}), reshape(b, {g, t, 1, n}));
  Var h = h_in.defined() ? add(mul(decay, h_in), drive) : linear_recurrence(decay, drive);
  if (h_out) *h_out = h;
  return reshape(sum_axis(mul(h, reshape(cm, {g, t, 1, n})), 3), {g, t, c});
}

TEST(SelectiveScan, MatchesComposedOps) {
  std::mt19937_64 rng(12);
  Var x = param({2, 5, 3}, rng), delta = param({2, 5, 3}, rng, 0.01, 0.8);
  Var a = param({3, 4}, rng, -2.0, -0.1), b = param({2, 5, 4}, rng), cm = param({2, 5, 4}, rng);
  ScanReadout ro{param({2, 5, 3}, rng), param({2, 5, 3}, rng, 0.01, 0.8), param({2, 5, 4}, rng),
                 param({2, 5, 4}, rng)};
  Var h;
  Array y = composed_scan(x, delta, a, b, cm, Var(), &h).value();
  Array yr = composed_scan(ro.x, ro.delta, a, ro.b, ro.c, h, nullptr).value();
  Array plain = selective_scan(x, delta, a, b, cm).value();
  Array both = selective_scan(x, delta, a, b, cm, &ro).value();
  ASSERT_EQ(both.shape(), (Shape{2, 2, 5, 3}));
  for (std::size_t i = 0; i < y.size(); ++i) {
    EXPECT_NEAR(plain[i], y[i], 1e-12);
    EXPECT_NEAR(both[i], y[i], 1e-12);
    EXPECT_NEAR(both[y.size() + i], yr[i], 1e-12);
  }
}

TEST(SelectiveScan, GradientsMatchComposedOpsAndFiniteDifferences) {
  std::mt19937_64 rng(13);
  Var x = param({2, 4, 3}, rng), delta = param({2, 4, 3}, rng, 0.05, 0.9);
  Var a = param({3, 2}, rng, -1.5, -0.2), b = param({2, 4, 2}, rng), cm = param({2, 4, 2}, rng);
  ScanReadout ro{param({2, 4, 3}, rng), param({2, 4, 3}, rng, 0.05, 0.9), param({2, 4, 2}, rng),
                 param({2, 4, 2}, rng)};
  std::vector<Var> all{x, delta, a, b, cm, ro.x, ro.delta, ro.b, ro.c};
  auto fused = [&] { return probe(selective_scan(x, delta, a, b, cm, &ro)); };
  EXPECT_LT(finite_diff_check(fused, all), 1e-6);
  auto fused_plain = [&] { return probe(selective_scan(x, delta, a, b, cm)); };
  EXPECT_LT(finite_diff_check(fused_plain, {x, delta, a, b, cm}), 1e-6);

  for (Var& v : all) v.zero_grad();
  backward(fused());
  std::vector<Array> g1;
  for (Var& v : all) {
    g1.push_back(v.grad());
    v.zero_grad();
  }
  Var h;
  Var y = composed_scan(x, delta, a, b, cm, Var(), &h);
  Var yr = composed_scan(ro.x, ro.delta, a, ro.b, ro.c, h, nullptr);
  backward(probe(concat({reshape(y, {1, 2, 4, 3}), reshape(yr, {1, 2, 4, 3})}, 0)));
  for (std::size_t k = 0; k < all.size(); ++k) {
    const Array g2 = all[k].grad();
    for (std::size_t i = 0; i < g2.size(); ++i) EXPECT_NEAR(g1[k][i], g2[i], 1e-12) << "input " << k;
  }
}

TEST(Dropout, InferenceIdentityAndInvertedScaling) {
  std::mt19937_64 rng(10);
  Var x(Array({1000}, 1.0));
  EXPECT_EQ(dropout(x, 0.5, false, rng).value(), x.value());
  Array y = dropout(x, 0.25, true, rng).value();
  std::size_t kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_GT(kept, 650u);
  EXPECT_LT(kept, 850u);
  std::mt19937_64 r1(11), r2(11);
  EXPECT_EQ(dropout(x, 0.3, true, r1).value(), dropout(x, 0.3, true, r2).value());
}

TEST(NoGrad, RecordsNothing) {
  Var x(Array({2}, {1, 2}), true);
  Var y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

}  // namespace
