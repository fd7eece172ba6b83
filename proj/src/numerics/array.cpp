#include "sysmoe/numerics.hpp"

#include <malloc.h>

#include <cmath>
#include <numeric>
#include <sstream>

namespace sysmoe::num {

namespace {

// Tape buffers of a few MB are allocated and freed every step. Serving them
// from the heap instead of fresh mmaps avoids repeated page faults.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1024 << 20);
  return true;
}();

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Array::Array(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("array data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

double Array::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on array of shape " + shape_str(shape_));
  }
  return data_[0];
}

Array Array::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Array(std::move(shape), data_);
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool all_finite(const Array& a) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Node::accumulate(std::span<const double> g) {
  Array& buf = grad_buffer();
  auto d = buf.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
}

Array& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) {
    grad = Array(value.shape(), 0.0);
  }
  return grad;
}

Var::Var(Array value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Array Var::grad() const {
  if (node_->grad.shape() == node_->value.shape() && !node_->grad.empty()) return node_->grad;
  return Array(node_->value.shape(), 0.0);
}

void Var::zero_grad() { node_->grad = Array(); }

}  // namespace sysmoe::num
