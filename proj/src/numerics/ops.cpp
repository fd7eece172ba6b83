#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "sysmoe/numerics.hpp"

namespace sysmoe::num {

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool needs_grad(std::initializer_list<const Var*> inputs) {
  if (!t_grad_enabled) return false;
  for (const Var* v : inputs) {
    if (v->defined() && v->requires_grad()) return true;
  }
  return false;
}

// Builds the output node; the closure is kept only when some input needs a gradient.
Var make_result(Array value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool any = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) any = any || p->requires_grad;
  }
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Per-axis operand strides for a broadcast, with 0 on broadcast axes. Adjacent
// axes that stay contiguous for both operands are merged so the inner loop is long.
struct Broadcast {
  Shape out;
  bool same = false;
  Shape extent, a_stride, b_stride;
};

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
    if (da == 0 || db == 0) out[i] = 0;
  }
  return out;
}

Shape broadcast_strides(const Shape& operand, const Shape& out) {
  const std::size_t r = out.size();
  Shape stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < operand.size(); ++i) {
    const std::size_t ax = operand.size() - 1 - i;
    if (operand[ax] != 1) stride[r - 1 - i] = s;
    s *= operand[ax];
  }
  return stride;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  p.out = broadcast_shape(a, b);
  const Shape sa = broadcast_strides(a, p.out);
  const Shape sb = broadcast_strides(b, p.out);
  for (std::size_t ax = 0; ax < p.out.size(); ++ax) {
    if (p.out[ax] == 1) continue;
    if (!p.extent.empty() && p.a_stride.back() == sa[ax] * p.out[ax] && p.b_stride.back() == sb[ax] * p.out[ax]) {
      p.extent.back() *= p.out[ax];
      p.a_stride.back() = sa[ax];
      p.b_stride.back() = sb[ax];
      continue;
    }
    p.extent.push_back(p.out[ax]);
    p.a_stride.push_back(sa[ax]);
    p.b_stride.push_back(sb[ax]);
  }
  if (p.extent.empty()) {
    p.extent = {1};
    p.a_stride = {0};
    p.b_stride = {0};
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each_broadcast(const Broadcast& p, F fn) {
  const std::size_t total = shape_size(p.out);
  if (total == 0) return;
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = p.extent.size();
  const std::size_t inner = p.extent[r - 1], sa = p.a_stride[r - 1], sb = p.b_stride[r - 1];
  std::vector<std::size_t> counter(r, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t i = 0; i < total; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(i + j, ai + j * sa, bi + j * sb);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++counter[ax];
      ai += p.a_stride[ax];
      bi += p.b_stride[ax];
      if (counter[ax] < p.extent[ax]) break;
      ai -= p.a_stride[ax] * counter[ax];
      bi -= p.b_stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
}

template <class F, class GA, class GB>
Var binary_op(const Var& a, const Var& b, F f, GA ga, GB gb) {
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape()));
  Array out(plan->out);
  const auto av = a.value().data();
  const auto bv = b.value().data();
  auto o = out.data();
  for_each_broadcast(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = f(av[ia], bv[ib]); });
  if (!needs_grad({&a, &b})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node(), b.node()}, [plan, ga, gb](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto g = self.grad.data();
    const auto av = pa.value.data();
    const auto bv = pb.value.data();
    if (pa.requires_grad) {
      auto da = pa.grad_buffer().data();
      for_each_broadcast(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        da[ia] += ga(g[i], av[ia], bv[ib]);
      });
    }
    if (pb.requires_grad) {
      auto db = pb.grad_buffer().data();
      for_each_broadcast(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        db[ib] += gb(g[i], av[ia], bv[ib]);
      });
    }
  });
}

// y = f(x), dy/dx = df(x, y).
template <class F, class DF>
Var unary_op(const Var& a, F f, DF df) {
  Array out(a.shape());
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(av[i]);
  if (!needs_grad({&a})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node()}, [df](Node& self) {
    Node& pa = *self.parents[0];
    const auto g = self.grad.data();
    const auto x = pa.value.data();
    const auto y = self.value.data();
    auto d = pa.grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * df(x[i], y[i]);
  });
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

Var constant(Array value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var scale(const Var& a, double c) {
  return unary_op(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var exp(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var gelu(const Var& a) {
  return unary_op(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      });
}

Var relu(const Var& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& a) {
  return unary_op(
      a, [](double x) { return x * sigmoid(x); },
      [](double x, double) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var softplus(const Var& a) {
  return unary_op(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return sigmoid(x); });
}

Var elementwise(OpKind kind, const Var& a, const Var& b) {
  switch (kind) {
    case OpKind::add: return add(a, b);
    case OpKind::sub: return sub(a, b);
    case OpKind::mul: return mul(a, b);
    case OpKind::exp: return exp(a);
    case OpKind::gelu: return gelu(a);
    case OpKind::relu: return relu(a);
  }
  throw ContractError("unknown op kind");
}

Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() != 2 || as.back() != bs[0]) {
    throw DimensionError("matmul inner-dimension mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t k = as.back();
  const std::size_t m = a.size() / std::max<std::size_t>(k, 1);
  const std::size_t n = bs[1];
  Shape os = as;
  os.back() = n;
  Array out(os);
  MutMap(out.data().data(), m, n).noalias() =
      ConstMap(a.value().data().data(), m, k) * ConstMap(b.value().data().data(), k, n);
  if (!needs_grad({&a, &b})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    ConstMap g(self.grad.data().data(), m, n);
    if (pa.requires_grad) {
      MutMap(pa.grad_buffer().data().data(), m, k).noalias() += g * ConstMap(pb.value.data().data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MutMap(pb.grad_buffer().data().data(), k, n).noalias() += ConstMap(pa.value.data().data(), m, k).transpose() * g;
    }
  });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != (transpose_b ? bs[2] : bs[1])) {
    throw DimensionError("bmm shape mismatch: " + shape_str(as) + " x " + shape_str(bs) +
                         (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t groups = as[0], m = as[1], k = as[2];
  const std::size_t n = transpose_b ? bs[1] : bs[2];
  Array out({groups, m, n});
  const double* ap = a.value().data().data();
  const double* bp = b.value().data().data();
  double* op = out.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMap am(ap + g * m * k, m, k);
    MutMap om(op + g * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * ConstMap(bp + g * n * k, n, k).transpose();
    } else {
      om.noalias() = am * ConstMap(bp + g * k * n, k, n);
    }
  }
  if (!needs_grad({&a, &b})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node(), b.node()}, [groups, m, k, n, transpose_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* gp = self.grad.data().data();
    const double* ap = pa.value.data().data();
    const double* bp = pb.value.data().data();
    double* dap = pa.requires_grad ? pa.grad_buffer().data().data() : nullptr;
    double* dbp = pb.requires_grad ? pb.grad_buffer().data().data() : nullptr;
    for (std::size_t g = 0; g < groups; ++g) {
      ConstMap gm(gp + g * m * n, m, n);
      ConstMap am(ap + g * m * k, m, k);
      if (transpose_b) {
        ConstMap bm(bp + g * n * k, n, k);
        if (dap) MutMap(dap + g * m * k, m, k).noalias() += gm * bm;
        if (dbp) MutMap(dbp + g * n * k, n, k).noalias() += gm.transpose() * am;
      } else {
        ConstMap bm(bp + g * k * n, k, n);
        if (dap) MutMap(dap + g * m * k, m, k).noalias() += gm * bm.transpose();
        if (dbp) MutMap(dbp + g * k * n, k, n).noalias() += am.transpose() * gm;
      }
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  if (!needs_grad({&a})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node()}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.data());
  });
}

namespace {

// out[perm index] = in[...]: returns for every output flat index the input flat index.
std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& order, Shape& out_shape) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  out_shape.assign(r, 0);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t total = shape_size(in);
  std::vector<std::size_t> idx(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < total; ++i) {
    idx[i] = cur;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      cur += stride[ax];
      if (counter[ax] < out_shape[ax]) break;
      cur -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return idx;
}

}  // namespace

Var permute(const Var& a, const std::vector<std::size_t>& order) {
  const Shape& in = a.shape();
  if (order.size() != in.size()) {
    throw DimensionError("permute order rank mismatch for shape " + shape_str(in));
  }
  std::vector<bool> seen(order.size(), false);
  for (std::size_t o : order) {
    if (o >= order.size() || seen[o]) throw DimensionError("permute order is not a permutation");
    seen[o] = true;
  }
  Shape out_shape;
  auto idx = std::make_shared<std::vector<std::size_t>>(permute_index(in, order, out_shape));
  Array out(out_shape);
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[(*idx)[i]];
  if (!needs_grad({&a})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node()}, [idx](Node& self) {
    const auto g = self.grad.data();
    auto d = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) d[(*idx)[i]] += g[i];
  });
}

Var transpose(const Var& a) {
  if (a.shape().size() != 2) throw DimensionError("transpose expects a 2-D array, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Var softmax(const Var& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Array out(x.shape());
  const auto xv = x.value().data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) y[base + j * s.inner] /= z;
    }
  }
  if (!needs_grad({&x})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {x.node()}, [s](Node& self) {
    const auto g = self.grad.data();
    const auto y = self.value.data();
    auto d = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          d[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Array out(x.shape());
  const auto xv = x.value().data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(xv[base + j * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < s.n; ++j) y[base + j * s.inner] = xv[base + j * s.inner] - lz;
    }
  }
  if (!needs_grad({&x})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {x.node()}, [s](Node& self) {
    const auto g = self.grad.data();
    const auto y = self.value.data();
    auto d = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double gsum = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          d[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

Var layernorm(const Var& x, const Var& gain, const Var& bias, std::size_t axis) {
  constexpr double kEps = 1e-5;
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.n < 2) throw DimensionError("layernorm axis extent must be >= 2, got shape " + shape_str(x.shape()));
  if (gain.size() != s.n || bias.size() != s.n) {
    throw DimensionError("layernorm gain/bias " + shape_str(gain.shape()) + " do not match axis extent " +
                         std::to_string(s.n));
  }
  Array out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(s.outer * s.inner);
  const auto xv = x.value().data();
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mu = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) mu += xv[base + j * s.inner];
      mu /= static_cast<double>(s.n);
      double var = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double c = xv[base + j * s.inner] - mu;
        var += c * c;
      }
      var /= static_cast<double>(s.n);
      const double is = 1.0 / std::sqrt(var + kEps);
      (*inv_std)[o * s.inner + in] = is;
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t i = base + j * s.inner;
        const double h = (xv[i] - mu) * is;
        (*xhat)[i] = h;
        y[i] = h * gv[j] + bv[j];
      }
    }
  }
  if (!needs_grad({&x, &gain, &bias})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {x.node(), gain.node(), bias.node()}, [s, xhat, inv_std](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const auto g = self.grad.data();
    const auto gv = pg.value.data();
    double* dx = px.requires_grad ? px.grad_buffer().data().data() : nullptr;
    double* dg = pg.requires_grad ? pg.grad_buffer().data().data() : nullptr;
    double* db = pb.requires_grad ? pb.grad_buffer().data().data() : nullptr;
    const double inv_n = 1.0 / static_cast<double>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          const double dh = g[i] * gv[j];
          m1 += dh;
          m2 += dh * (*xhat)[i];
          if (dg) dg[j] += g[i] * (*xhat)[i];
          if (db) db[j] += g[i];
        }
        if (!dx) continue;
        m1 *= inv_n;
        m2 *= inv_n;
        const double is = (*inv_std)[o * s.inner + in];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          dx[i] += is * (g[i] * gv[j] - m1 - (*xhat)[i] * m2);
        }
      }
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  if (!needs_grad({&a})) return make_result(Array::scalar(total), {}, nullptr);
  return make_result(Array::scalar(total), {a.node()}, [](Node& self) {
    const double g = self.grad[0];
    for (double& d : self.parents[0]->grad_buffer().data()) d += g;
  });
}

Var mean(const Var& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty array");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var sum_axis(const Var& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape os = a.shape();
  os[axis] = 1;
  Array out(os);
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < s.outer; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* row = av.data() + (i * s.n + j) * s.inner;
      double* dst = o.data() + i * s.inner;
      for (std::size_t k = 0; k < s.inner; ++k) dst[k] += row[k];
    }
  }
  if (!needs_grad({&a})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node()}, [s](Node& self) {
    const auto g = self.grad.data();
    auto d = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < s.outer; ++i) {
      for (std::size_t j = 0; j < s.n; ++j) {
        double* row = d.data() + (i * s.n + j) * s.inner;
        const double* src = g.data() + i * s.inner;
        for (std::size_t k = 0; k < s.inner; ++k) row[k] += src[k];
      }
    }
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> rows) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw DimensionError("gather_rows expects a 2-D table, got " + shape_str(ts));
  const std::size_t width = ts[1];
  Array out({rows.size(), width});
  const auto tv = table.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= ts[0]) {
      throw DimensionError("gather index " + std::to_string(rows[r]) + " out of range for table " + shape_str(ts));
    }
    std::copy_n(tv.data() + rows[r] * width, width, o.data() + r * width);
  }
  if (!needs_grad({&table})) return make_result(std::move(out), {}, nullptr);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_result(std::move(out), {table.node()}, [idx, width](Node& self) {
    const auto g = self.grad.data();
    auto d = self.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = d.data() + (*idx)[r] * width;
      const double* src = g.data() + r * width;
      for (std::size_t k = 0; k < width; ++k) dst[k] += src[k];
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero arrays");
  const Shape& first = parts[0].shape();
  Shape os = first;
  os.at(axis) = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    const Shape& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t i = 0; ok && i < ps.size(); ++i) ok = i == axis || ps[i] == first[i];
    if (!ok) throw DimensionError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(ps));
    extents.push_back(ps[axis]);
    os[axis] += ps[axis];
  }
  const AxisSplit s = split_axis(os, axis);
  Array out(os);
  auto o = out.data();
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].value().data();
    const std::size_t chunk = extents[p] * s.inner;
    for (std::size_t i = 0; i < s.outer; ++i) {
      std::copy_n(pv.data() + i * chunk, chunk, o.data() + i * s.n * s.inner + offset);
    }
    offset += chunk;
  }
  bool any = false;
  std::vector<NodePtr> parents;
  for (const Var& p : parts) {
    any = any || needs_grad({&p});
    parents.push_back(p.node());
  }
  if (!any) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), std::move(parents), [s, extents](Node& self) {
    const auto g = self.grad.data();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      Node& parent = *self.parents[p];
      const std::size_t chunk = extents[p] * s.inner;
      if (parent.requires_grad) {
        auto d = parent.grad_buffer().data();
        for (std::size_t i = 0; i < s.outer; ++i) {
          const double* src = g.data() + i * s.n * s.inner + offset;
          double* dst = d.data() + i * chunk;
          for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
        }
      }
      offset += chunk;
    }
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(a.shape(), axis);
  if (begin > end || end > s.n) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                         shape_str(a.shape()));
  }
  Shape os = a.shape();
  os[axis] = end - begin;
  Array out(os);
  const std::size_t chunk = (end - begin) * s.inner;
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < s.outer; ++i) {
    std::copy_n(av.data() + i * s.n * s.inner + begin * s.inner, chunk, o.data() + i * chunk);
  }
  if (!needs_grad({&a})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node()}, [s, begin, chunk](Node& self) {
    const auto g = self.grad.data();
    auto d = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < s.outer; ++i) {
      double* dst = d.data() + i * s.n * s.inner + begin * s.inner;
      const double* src = g.data() + i * chunk;
      for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
    }
  });
}

Var broadcast_to(const Var& a, Shape shape) {
  if (broadcast_shape(a.shape(), shape) != shape) {
    throw DimensionError("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  // Broadcasting against itself (b = out) walks the operand with a's strides.
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), shape));
  Array out(shape);
  const auto av = a.value().data();
  auto o = out.data();
  for_each_broadcast(*plan, [&](std::size_t i, std::size_t ia, std::size_t) { o[i] = av[ia]; });
  if (!needs_grad({&a})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {a.node()}, [plan](Node& self) {
    const auto g = self.grad.data();
    auto d = self.parents[0]->grad_buffer().data();
    for_each_broadcast(*plan, [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += g[i]; });
  });
}

Var causal_conv1d(const Var& x, const Var& kernel) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 3 || ks.size() != 2 || ks[0] != xs[2]) {
    throw DimensionError("causal_conv1d shape mismatch: x " + shape_str(xs) + ", kernel " + shape_str(ks));
  }
  const std::size_t groups = xs[0], steps = xs[1], channels = xs[2], width = ks[1];
  Array out(xs);
  const auto xv = x.value().data();
  const auto kv = kernel.value().data();
  auto o = out.data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* dst = o.data() + (g * steps + t) * channels;
      for (std::size_t j = 0; j < width; ++j) {
        if (t + j < width - 1) continue;
        const std::size_t src_t = t + j - (width - 1);
        const double* src = xv.data() + (g * steps + src_t) * channels;
        for (std::size_t c = 0; c < channels; ++c) dst[c] += kv[c * width + j] * src[c];
      }
    }
  }
  if (!needs_grad({&x, &kernel})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {x.node(), kernel.node()}, [groups, steps, channels, width](Node& self) {
    Node& px = *self.parents[0];
    Node& pk = *self.parents[1];
    const auto gy = self.grad.data();
    const auto xv = px.value.data();
    const auto kv = pk.value.data();
    double* dx = px.requires_grad ? px.grad_buffer().data().data() : nullptr;
    double* dk = pk.requires_grad ? pk.grad_buffer().data().data() : nullptr;
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t t = 0; t < steps; ++t) {
        const double* gr = gy.data() + (g * steps + t) * channels;
        for (std::size_t j = 0; j < width; ++j) {
          if (t + j < width - 1) continue;
          const std::size_t src_t = t + j - (width - 1);
          const std::size_t off = (g * steps + src_t) * channels;
          for (std::size_t c = 0; c < channels; ++c) {
            if (dx) dx[off + c] += kv[c * width + j] * gr[c];
            if (dk) dk[c * width + j] += xv[off + c] * gr[c];
          }
        }
      }
    }
  });
}

Var linear_recurrence(const Var& decay, const Var& drive) {
  const Shape& s = decay.shape();
  if (s != drive.shape() || s.size() < 2) {
    throw DimensionError("linear_recurrence shape mismatch: " + shape_str(s) + " vs " + shape_str(drive.shape()));
  }
  const std::size_t groups = s[0], steps = s[1];
  const std::size_t width = decay.size() / std::max<std::size_t>(groups * steps, 1);
  Array out(s);
  const auto a = decay.value().data();
  const auto b = drive.value().data();
  auto h = out.data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t off = (g * steps + t) * width;
      for (std::size_t i = 0; i < width; ++i) {
        const double prev = t ? h[off - width + i] : 0.0;
        h[off + i] = a[off + i] * prev + b[off + i];
      }
    }
  }
  if (!needs_grad({&decay, &drive})) return make_result(std::move(out), {}, nullptr);
  return make_result(std::move(out), {decay.node(), drive.node()}, [groups, steps, width](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto g = self.grad.data();
    const auto h = self.value.data();
    const auto a = pa.value.data();
    double* da = pa.requires_grad ? pa.grad_buffer().data().data() : nullptr;
    double* db = pb.requires_grad ? pb.grad_buffer().data().data() : nullptr;
    std::vector<double> carry(width);
    for (std::size_t grp = 0; grp < groups; ++grp) {
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::size_t t = steps; t-- > 0;) {
        const std::size_t off = (grp * steps + t) * width;
        for (std::size_t i = 0; i < width; ++i) {
          // carry holds a_{t+1} * dL/dh_{t+1}
          const double gh = g[off + i] + carry[i];
          if (db) db[off + i] += gh;
          if (da && t) da[off + i] += gh * h[off - width + i];
          carry[i] = gh * a[off + i];
        }
      }
    }
  });
}

Var selective_scan(const Var& x, const Var& delta, const Var& a, const Var& b, const Var& cm,
                   const ScanReadout* readout) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || delta.shape() != xs || a.value().rank() != 2 || a.dim(0) != xs[2]) {
    throw DimensionError("selective_scan: x " + shape_str(xs) + ", delta " + shape_str(delta.shape()) + ", a " +
                         shape_str(a.shape()));
  }
  const std::size_t groups = xs[0], steps = xs[1], ch = xs[2], n = a.dim(1);
  const Shape bs{groups, steps, n};
  if (b.shape() != bs || cm.shape() != bs) {
    throw DimensionError("selective_scan: b " + shape_str(b.shape()) + " and c " + shape_str(cm.shape()) +
                         " must be " + shape_str(bs));
  }
  if (readout && (readout->x.shape() != xs || readout->delta.shape() != xs || readout->b.shape() != bs ||
                  readout->c.shape() != bs)) {
    throw DimensionError("selective_scan: readout inputs do not match the main scan shapes");
  }
  const bool ro = readout != nullptr;
  Array out(ro ? Shape{2, groups, steps, ch} : xs);
  auto states = std::make_shared<std::vector<double>>(groups * steps * ch * n);
  const double* xv = x.value().data().data();
  const double* dv = delta.value().data().data();
  const double* av = a.value().data().data();
  const double* bv = b.value().data().data();
  const double* cv = cm.value().data().data();
  const double* xrv = ro ? readout->x.value().data().data() : nullptr;
  const double* drv = ro ? readout->delta.value().data().data() : nullptr;
  const double* brv = ro ? readout->b.value().data().data() : nullptr;
  const double* crv = ro ? readout->c.value().data().data() : nullptr;
  double* y = out.data().data();
  double* yr = ro ? y + groups * steps * ch : nullptr;
  double* h = states->data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t row = g * steps + t;
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t i = row * ch + c;
        double* hc = h + i * n;
        const double* hp = t ? hc - ch * n : nullptr;
        const double dl = dv[i], u = dl * xv[i];
        double acc = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          hc[s] = std::exp(dl * av[c * n + s]) * (hp ? hp[s] : 0.0) + u * bv[row * n + s];
          acc += hc[s] * cv[row * n + s];
        }
        y[i] = acc;
        if (ro) {
          const double dr = drv[i], ur = dr * xrv[i];
          double accr = 0.0;
          for (std::size_t s = 0; s < n; ++s) {
            accr += (std::exp(dr * av[c * n + s]) * hc[s] + ur * brv[row * n + s]) * crv[row * n + s];
          }
          yr[i] = accr;
        }
      }
    }
  }
  std::vector<Var> inputs{x, delta, a, b, cm};
  if (ro) inputs.insert(inputs.end(), {readout->x, readout->delta, readout->b, readout->c});
  bool any = false;
  for (const Var& v : inputs) any = any || needs_grad({&v});
  if (!any) return make_result(std::move(out), {}, nullptr);
  std::vector<NodePtr> parents;
  for (const Var& v : inputs) parents.push_back(v.node());
  return make_result(std::move(out), std::move(parents), [groups, steps, ch, n, ro, states](Node& self) {
    auto in = [&](std::size_t k) { return self.parents[k]->value.data().data(); };
    const double *xv = in(0), *dv = in(1), *av = in(2), *bv = in(3), *cv = in(4);
    const double* xrv = ro ? in(5) : nullptr;
    const double* drv = ro ? in(6) : nullptr;
    const double* brv = ro ? in(7) : nullptr;
    const double* crv = ro ? in(8) : nullptr;
    // Local gradient buffers; parents that need no gradient are skipped at the end.
    std::vector<std::vector<double>> gr;
    for (const auto& p : self.parents) gr.emplace_back(p->value.size(), 0.0);
    double *gx = gr[0].data(), *gd = gr[1].data(), *ga = gr[2].data(), *gb = gr[3].data(), *gc = gr[4].data();
    double *gxr = ro ? gr[5].data() : nullptr, *gdr = ro ? gr[6].data() : nullptr;
    double *gbr = ro ? gr[7].data() : nullptr, *gcr = ro ? gr[8].data() : nullptr;
    const double* gy = self.grad.data().data();
    const double* gyr = ro ? gy + groups * steps * ch : nullptr;
    const double* hs = states->data();
    std::vector<double> carry(ch * n);
    for (std::size_t g = 0; g < groups; ++g) {
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::size_t t = steps; t-- > 0;) {
        const std::size_t row = g * steps + t;
        for (std::size_t c = 0; c < ch; ++c) {
          const std::size_t i = row * ch + c;
          const double* hc = hs + i * n;
          const double* hp = t ? hc - ch * n : nullptr;
          const double dl = dv[i], xl = xv[i];
          double gdl = 0.0, gxl = 0.0, gdrl = 0.0, gxrl = 0.0;
          for (std::size_t s = 0; s < n; ++s) {
            const double as = av[c * n + s];
            // carry holds exp(delta_{t+1} a) * dL/dh_{t+1}
            double lam = gy[i] * cv[row * n + s] + carry[c * n + s];
            gc[row * n + s] += gy[i] * hc[s];
            if (ro) {
              const double dr = drv[i], xr = xrv[i], br = brv[row * n + s];
              const double ar = std::exp(dr * as);
              const double ghr = gyr[i] * crv[row * n + s];
              gcr[row * n + s] += gyr[i] * (ar * hc[s] + dr * xr * br);
              lam += ghr * ar;
              const double g_ar = ghr * hc[s] * ar;
              gdrl += g_ar * as + ghr * xr * br;
              ga[c * n + s] += g_ar * dr;
              gxrl += ghr * dr * br;
              gbr[row * n + s] += ghr * dr * xr;
            }
            const double al = std::exp(dl * as);
            if (hp) {
              const double g_al = lam * hp[s] * al;
              gdl += g_al * as;
              ga[c * n + s] += g_al * dl;
            }
            const double bsv = bv[row * n + s];
            gdl += lam * xl * bsv;
            gxl += lam * dl * bsv;
            gb[row * n + s] += lam * dl * xl;
            carry[c * n + s] = lam * al;
          }
          gx[i] += gxl;
          gd[i] += gdl;
          if (ro) {
            gxr[i] += gxrl;
            gdr[i] += gdrl;
          }
        }
      }
    }
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (self.parents[p]->requires_grad) self.parents[p]->accumulate(gr[p]);
    }
  });
}

Var dropout(const Var& x, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Array mask(x.shape());
  const double scale_kept = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) m = keep(rng) ? scale_kept : 0.0;
  return mul(x, constant(std::move(mask)));
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

double finite_diff_check(const std::function<Var()>& f, std::vector<Var> params, const FiniteDiffOptions& opts) {
  for (Var& p : params) p.zero_grad();
  backward(f());
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > opts.max_coords) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.max_coords);
  }
  std::vector<Array> analytic;
  for (const Var& p : params) analytic.push_back(p.grad());
  double worst = 0.0;
  NoGradGuard no_grad;
  for (const auto& [p, i] : coords) {
    double& x = params[p].mutable_value()[i];
    const double saved = x;
    x = saved + opts.eps;
    const double up = f().value().item();
    x = saved - opts.eps;
    const double down = f().value().item();
    x = saved;
    const double numeric = (up - down) / (2.0 * opts.eps);
    const double err = std::abs(analytic[p][i] - numeric) / (std::abs(numeric) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sysmoe::num
