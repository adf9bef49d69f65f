#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a flat row-major value buffer plus an
// optional same-shape gradient buffer. The operations in ops.hpp compute
// values eagerly and, when a Tape is active and an input participates in
// differentiation, push a backward closure onto that tape. Tape::backward
// seeds the scalar root with 1 and replays the closures in reverse
// execution order; fan-out gradients accumulate additively.
//
// One tape is confined to one thread. Distinct graphs may run on distinct
// threads; tensors that are no longer written are safe to share for reads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "toon/errors.hpp"

namespace toon {

using Real = double;

inline long shape_numel(const std::vector<int>& shape) {
  long n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

struct TensorImpl {
  std::vector<int> shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;

  long size() const { return static_cast<long>(value.size()); }
  bool has_grad() const { return !grad.empty(); }
  std::vector<Real>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : impl_(std::make_shared<TensorImpl>()) {
    const long n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->value.assign(static_cast<size_t>(n), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<Real> values)
      : impl_(std::make_shared<TensorImpl>()) {
    const long n = shape_numel(shape);
    if (n != static_cast<long>(values.size()))
      throw DimensionError("tensor value count does not match its shape");
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, Real v) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
  }

  static Tensor scalar(Real v) {
    Tensor t{std::vector<int>{}};
    t.impl_->value[0] = v;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }

  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  long size() const { return impl_->size(); }

  Real* data() { return impl_->value.data(); }
  const Real* data() const { return impl_->value.data(); }
  std::vector<Real>& values() { return impl_->value; }
  const std::vector<Real>& values() const { return impl_->value; }

  Real operator[](long i) const { return impl_->value[static_cast<size_t>(i)]; }
  Real& operator[](long i) { return impl_->value[static_cast<size_t>(i)]; }

  // Value of a one-element tensor.
  Real item() const {
    if (!impl_ || impl_->size() != 1)
      throw ContractError("item(): tensor is not a scalar");
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }

  // Accumulated gradient; zeros when nothing reached this tensor.
  std::vector<Real> grad() const {
    if (!impl_->has_grad()) return std::vector<Real>(impl_->value.size(), 0.0);
    return impl_->grad;
  }

  void zero_grad() {
    if (impl_ && impl_->has_grad())
      std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  // Copy of the values with no graph participation.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->value = impl_->value;
    return t;
  }

  bool same_shape(const Tensor& o) const { return impl_->shape == o.impl_->shape; }

  bool all_finite() const {
    for (Real v : impl_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class Tape;

namespace detail {
inline Tape*& current_tape() {
  thread_local Tape* cur = nullptr;
  return cur;
}
}  // namespace detail

// Ordered record of executed operations. Construction activates the tape
// for the current thread (stack discipline); destruction restores the
// previous one.
class Tape {
 public:
  Tape() : prev_(detail::current_tape()) { detail::current_tape() = this; }
  ~Tape() { detail::current_tape() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return detail::current_tape(); }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  size_t size() const { return steps_.size(); }

  // Seeds d(root)/d(root) = 1 and replays every recorded operation once,
  // in reverse execution order. Leaves the root's gradient in place so
  // fresh ops recorded afterwards are unaffected.
  void backward(const Tensor& root) {
    if (!root.defined() || root.size() != 1)
      throw ContractError("backward: root must be a scalar tensor");
    if (replayed_) throw ContractError("backward: tape already replayed");
    replayed_ = true;
    auto impl = root.impl();
    impl->ensure_grad();
    impl->grad[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  Tape* prev_;
  bool replayed_ = false;
};

inline void backward(const Tensor& root, Tape& tape) { tape.backward(root); }

// Suspends recording within a scope (forward-only evaluation).
struct NoGrad {
  NoGrad() : prev_(detail::current_tape()) { detail::current_tape() = nullptr; }
  ~NoGrad() { detail::current_tape() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!current_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": operand shapes differ");
}

}  // namespace detail

}  // namespace toon
