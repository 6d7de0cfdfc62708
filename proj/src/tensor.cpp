#include "itsr/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Real* detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), Real(0));
  return grad.data();
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

Tensor::Tensor(Shape shape, Real fill)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto extent : shape) {
    if (extent == 0) {
      throw ShapeError("tensor extents must be positive, got " +
                       shape_string(shape));
    }
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Real> data)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto extent : shape) {
    if (extent == 0) {
      throw ShapeError("tensor extents must be positive, got " +
                       shape_string(shape));
    }
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl)
    : impl_(std::move(impl)) {}

Tensor Tensor::scalar(Real value) { return Tensor({1}, std::vector<Real>{value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<Real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<Real> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<Real> values) {
  return Tensor({values.size()}, std::vector<Real>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape()));
  }
  return impl_->shape[axis];
}

Real& Tensor::at(std::size_t r, std::size_t c) {
  return impl_->data[r * impl_->shape.back() + c];
}

Real Tensor::at(std::size_t r, std::size_t c) const {
  return impl_->data[r * impl_->shape.back() + c];
}

Real Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a one-element tensor, got " +
                     shape_string(shape()));
  }
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::clone() const {
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = impl_->shape;
  copy->data = impl_->data;
  return Tensor(std::move(copy));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_string(this->shape()) + " as " +
                     shape_string(shape));
  }
  auto alias = std::make_shared<detail::TensorImpl>();
  alias->shape = std::move(shape);
  alias->data = impl_->data;
  return Tensor(std::move(alias));
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(),
                     [](Real v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void Tape::record(std::string_view op,
                  std::shared_ptr<detail::TensorImpl> output,
                  std::function<void()> backward) {
  nodes_.push_back({op, std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        shape_string(loss.shape()));
  }
  const auto& root = loss.impl();
  const bool on_tape =
      std::any_of(nodes_.begin(), nodes_.end(),
                  [&](const Node& n) { return n.output == root; });
  if (!on_tape) {
    throw ContractError("backward() loss was not produced on this tape");
  }
  root->grad.assign(1, Real(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // no gradient reached this node
    if (!fault_op_.empty() && it->op == fault_op_) {
      for (auto& g : it->output->grad) g *= fault_factor_;
    }
    it->backward();
  }
}

}  // namespace itsr
