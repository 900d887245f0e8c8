#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "ordalign/common.hpp"

namespace ordalign {

template <typename T>
struct StorageT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward first touches it
  bool needs_grad = false;
};

template <typename T>
class TapeT;

// Dense row-major tensor. The handle has shared-ownership value semantics:
// copying a TensorT aliases the same storage, clone() deep-copies. A tensor
// either tracks gradients (needs_grad) or is a plain immutable value that is
// safe to share across threads.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.s_ = std::make_shared<StorageT<T>>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(shape_numel(t.s_->shape), T(0));
    return t;
  }

  static TensorT full(Shape shape, T value) {
    TensorT t = zeros(std::move(shape));
    for (auto& v : t.s_->data) v = value;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    TensorT t;
    t.s_ = std::make_shared<StorageT<T>>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    return t;
  }

  static TensorT scalar(T value) { return from_data({1}, {value}); }

  // Gradient-tracked leaf (a parameter or a grad-check input).
  static TensorT leaf(Shape shape) {
    TensorT t = zeros(std::move(shape));
    t.s_->needs_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape[i]; }
  std::size_t numel() const { return s_->data.size(); }

  std::span<T> data() { return {s_->data.data(), s_->data.size()}; }
  std::span<const T> data() const { return {s_->data.data(), s_->data.size()}; }
  T& at(std::size_t i) { return s_->data[i]; }
  T at(std::size_t i) const { return s_->data[i]; }

  bool needs_grad() const { return s_ && s_->needs_grad; }
  void set_needs_grad(bool v) { s_->needs_grad = v; }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::span<T> grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return {s_->grad.data(), s_->grad.size()};
  }
  std::span<const T> grad() const {
    if (s_->grad.empty())
      throw StateError("tensor: gradient not populated (run backward first)");
    return {s_->grad.data(), s_->grad.size()};
  }
  void zero_grad() {
    if (s_) s_->grad.assign(s_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw UsageError("item: tensor has " + std::to_string(numel()) + " elements");
    return s_->data[0];
  }

  TensorT clone() const {
    TensorT t;
    t.s_ = std::make_shared<StorageT<T>>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(s_->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(s_->data[i]);
    return TensorT<U>::from_data(s_->shape, std::move(out));
  }

  std::shared_ptr<StorageT<T>> storage() const { return s_; }

 private:
  std::shared_ptr<StorageT<T>> s_;
};

// Ordered record of executed ops. Ops append a backward closure while a tape
// is active; backward replays the closures in exact reverse execution order.
// One backward pass per forward recording: a second call without clear() is
// a usage error.
template <typename T>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const TensorT<T>& loss);

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

  static TapeT* current() { return current_; }

 private:
  template <typename U>
  friend class TapeScopeGuard;

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  static inline thread_local TapeT* current_ = nullptr;
};

// RAII activation of a tape on the current thread.
template <typename T>
class TapeScopeGuard {
 public:
  explicit TapeScopeGuard(TapeT<T>& tape) : prev_(TapeT<T>::current_) { TapeT<T>::current_ = &tape; }
  ~TapeScopeGuard() { TapeT<T>::current_ = prev_; }
  TapeScopeGuard(const TapeScopeGuard&) = delete;
  TapeScopeGuard& operator=(const TapeScopeGuard&) = delete;

 private:
  TapeT<T>* prev_;
};

template <typename T>
void TapeT<T>::backward(const TensorT<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward: loss must be a scalar tensor");
  if (nodes_.empty()) throw UsageError("backward: tape is empty");
  if (consumed_) throw UsageError("backward: tape already consumed; run a new forward pass");
  auto s = loss.storage();
  s->grad.assign(1, T(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  consumed_ = true;
}

// Free-function spelling used by call sites that mirror loss.backward().
template <typename T>
void backward(const TensorT<T>& loss) {
  auto* tape = TapeT<T>::current();
  if (!tape) throw UsageError("backward: no active tape");
  tape->backward(loss);
}

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;
using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

/// "OTEN" tensor container: magic, u32 rank, u64 dims[], u8 dtype tag
// (0 = f32, 1 = f64), then the raw little-endian row-major payload.
void write_oten(std::ostream& os, const TensorT<float>& t);
void write_oten(std::ostream& os, const TensorT<double>& t);
void save_oten(const std::string& path, const TensorT<float>& t);
void save_oten(const std::string& path, const TensorT<double>& t);

struct OtenAny {
  int dtype = 0;  // 0 = f32, 1 = f64
  TensorT<float> f32;
  TensorT<double> f64;
};
OtenAny read_oten(std::istream& is);
OtenAny load_oten(const std::string& path);
TensorT<float> load_oten_f32(const std::string& path);    // casts f64 if needed
TensorT<double> load_oten_f64(const std::string& path);   // casts f32 if needed

}  // namespace ordalign
