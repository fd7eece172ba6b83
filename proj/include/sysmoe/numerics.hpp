#pragma once

// Dense row-major arrays of doubles and a small tape-based reverse-mode
// differentiation engine. Every op records a closure that maps the output
// gradient onto its inputs; backward() replays them in reverse topological
// order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sysmoe::num {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  // Value of a single-element array.
  double item() const;
  Array reshaped(Shape shape) const;
  void fill(double v);

  bool operator==(const Array& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

bool all_finite(const Array& a);

// ---------------------------------------------------------------------------
// Differentiable values.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Array value;
  Array grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  void accumulate(std::span<const double> g);
  Array& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Array value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Array& value() const { return node_->value; }
  Array& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Gradient accumulated so far; zeros if nothing reached this node.
  Array grad() const;
  void zero_grad();
  bool defined() const noexcept { return static_cast<bool>(node_); }

  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

// While alive, ops on this thread record no backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Array value);

// Elementwise binary ops broadcast numpy-style: shapes are right-aligned and
// every pair of extents must match or one of them must be 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);

Var exp(const Var& a);
Var log(const Var& a);
// tanh approximation of GeLU.
Var gelu(const Var& a);
Var relu(const Var& a);
Var silu(const Var& a);
Var softplus(const Var& a);

enum class OpKind { add, sub, mul, exp, gelu, relu };
Var elementwise(OpKind kind, const Var& a, const Var& b = Var());

// a: [..., k] (leading axes flattened), b: [k, n] -> [..., n].
Var matmul(const Var& a, const Var& b);
// a: [g, m, k], b: [g, k, n] (or [g, n, k] when transpose_b) -> [g, m, n].
Var bmm(const Var& a, const Var& b, bool transpose_b = false);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& order);
Var transpose(const Var& a);  // 2-D only

Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x, std::size_t axis);
// Normalizes along `axis` (variance epsilon 1e-5), then applies gain/bias
// indexed by the position along that axis.
Var layernorm(const Var& x, const Var& gain, const Var& bias, std::size_t axis);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_axis(const Var& a, std::size_t axis);  // keeps the axis with extent 1

Var gather_rows(const Var& table, std::span<const std::size_t> rows);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var broadcast_to(const Var& a, Shape shape);

// Depthwise causal convolution. x: [g, t, c], kernel: [c, w];
// y[g,t,c] = sum_j kernel[c,j] * x[g, t-(w-1)+j, c], zero before t=0.
Var causal_conv1d(const Var& x, const Var& kernel);

// h_t = decay_t * h_{t-1} + drive_t along axis 1 of [g, t, ...], h_{-1} = 0.
Var linear_recurrence(const Var& decay, const Var& drive);

// Diagonal selective scan. x, delta: [g, t, c]; a: [c, n]; b, cm: [g, t, n].
//   h_t = exp(delta_t * a) * h_{t-1} + delta_t * x_t * b_t,  y_t = h_t . cm_t   -> [g, t, c]
// With a readout, each position also takes one extra step from h_t with its own
// inputs, hr_t = exp(dr_t * a) * h_t + dr_t * xr_t * br_t, yr_t = hr_t . cr_t,
// and the result is [2, g, t, c] holding (y, yr). Equivalent to composing
// exp/mul/linear_recurrence/sum_axis without materializing [g, t, c, n] tensors.
struct ScanReadout {
  Var x, delta, b, c;
};
Var selective_scan(const Var& x, const Var& delta, const Var& a, const Var& b, const Var& cm,
                   const ScanReadout* readout = nullptr);

// Inverted dropout with a Bernoulli keep mask; identity when !training or rate == 0.
Var dropout(const Var& x, double rate, bool training, std::mt19937_64& rng);

// Populates gradients of every node reachable from a scalar loss.
void backward(const Var& loss);

// Central-difference check of d f / d params over sampled coordinates.
// Returns max |analytic - numeric| / (|numeric| + 1e-8).
struct FiniteDiffOptions {
  double eps = 1e-4;
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
};
double finite_diff_check(const std::function<Var()>& f, std::vector<Var> params,
                         const FiniteDiffOptions& opts = {});

}  // namespace sysmoe::num
