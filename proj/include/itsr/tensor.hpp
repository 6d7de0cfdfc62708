#pragma once

#include "itsr/abi.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace itsr::inline ITSR_ABI {

#ifdef ITSR_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient flows in
  bool requires_grad = false;

  Real* grad_buffer();  // allocates zeros on first use
};

}  // namespace detail

/// Dense row-major array of Real.
///
/// A Tensor is a handle: copies share storage, which is what lets a parameter
/// collect gradients from every use on the tape. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real value);
  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows);
  static Tensor vector(std::initializer_list<Real> values);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }
  bool empty() const { return impl_->data.empty(); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real& operator[](std::size_t i) { return impl_->data[i]; }
  Real operator[](std::size_t i) const { return impl_->data[i]; }
  /// Row-major 2-D accessor.
  Real& at(std::size_t r, std::size_t c);
  Real at(std::size_t r, std::size_t c) const;
  /// Value of a one-element tensor.
  Real item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  /// Same values, fresh storage, never tracked.
  Tensor detach() const { return clone(); }
  /// Untracked copy with a different shape of the same element count.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool all_finite() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations run, so the recording order is already a
/// topological order; backward() replays it in reverse, visiting each node
/// exactly once. A Tape belongs to one thread and is activated with TapeScope.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, std::shared_ptr<detail::TensorImpl> output,
              std::function<void()> backward);

  /// Populates grad() of every tracked tensor reachable from `loss`.
  /// `loss` must be a one-element tensor produced on this tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Test fixture hook: scales the upstream gradient of every node whose op
  /// name matches before running its backward rule.
  void inject_gradient_fault(std::string op, Real factor = Real(1.5)) {
    fault_op_ = std::move(op);
    fault_factor_ = factor;
  }

 private:
  struct Node {
    std::string_view op;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::string fault_op_;
  Real fault_factor_ = Real(1);
};

/// Makes `tape` the recording target for the current thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Tape active on this thread, or nullptr.
Tape* active_tape();

/// Suspends recording on this thread while alive (inference paths).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace itsr
