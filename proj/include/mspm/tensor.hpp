#pragma once

// Dense tensors and the tape that records differentiable operations.
//
// BasicTensor is a shared handle: copies alias the same storage, and the
// graph refers to tensors through these handles. Use detach() for an
// independent copy. Models run on Tensor (f32); TensorD exists so
// finite-difference oracles can evaluate the same functions in f64.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "mspm/errors.hpp"

namespace mspm {

using Shape = std::vector<std::int64_t>;

inline constexpr std::size_t kMaxRank = 4;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

// Vectorized kernels split a reduction differently depending on where a
// buffer starts, so every buffer starts on the same boundary and results
// do not depend on the heap layout of a run.
inline constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlignment}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

// Scalar-independent part of a tensor, as seen by the tape.
struct TensorNode {
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape holding the op that produced this tensor
  std::size_t slot = 0;

  TensorNode() = default;
  TensorNode(const TensorNode&) = delete;
  TensorNode& operator=(const TensorNode&) = delete;
  virtual ~TensorNode() = default;
  virtual bool has_grad() const = 0;
};

template <typename T>
struct TensorImpl final : TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something accumulates into it

  bool has_grad() const override { return !grad.empty(); }

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

inline void validate_shape(const Shape& shape) {
  if (shape.size() > kMaxRank) {
    throw InvalidArgument("tensor rank " + std::to_string(shape.size()) + " exceeds 4");
  }
  for (auto d : shape) {
    if (d < 0) throw InvalidArgument("negative dimension in shape " + to_string(shape));
  }
}

}  // namespace detail

template <typename T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    detail::validate_shape(shape);
    impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    impl_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    detail::validate_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw InvalidArgument("value count " + std::to_string(values.size()) + " does not match shape " +
                            to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(values.begin(), values.end());
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor full(Shape shape, T v) { return BasicTensor(std::move(shape), v); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  // Size along an axis; negative axes count from the back.
  std::int64_t dim(int axis) const { return impl_->shape[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw InvalidArgument("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw InvalidArgument("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return {impl_->grad_buffer(), impl_->data.size()}; }
  void zero_grad() { impl_->grad.clear(); }

  // Independent copy of the values, outside any graph.
  BasicTensor detach() const { return BasicTensor(shape(), std::vector<T>(impl_->data.begin(), impl_->data.end())); }

  // Independent copy converted to another scalar type.
  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape(), std::vector<U>(impl_->data.begin(), impl_->data.end()));
  }

  // True when this tensor is the output of an op still held on a tape.
  bool has_graph() const { return impl_->tape != nullptr; }

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Ordered record of differentiable operations. Every op's inputs were either
// leaves or outputs of earlier records, so reverse record order is a valid
// reverse topological order.
class Tape {
 public:
  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { clear(); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  template <typename T>
  void record(std::string_view op, std::span<const BasicTensor<T>> inputs, const BasicTensor<T>& output,
              std::function<void()> backward) {
    Node n{op, {}, output.impl(), std::move(backward)};
    n.inputs.reserve(inputs.size());
    for (const auto& t : inputs) {
      if (t.defined()) n.inputs.push_back(t.impl());
    }
    output.impl()->requires_grad = true;
    output.impl()->tape = this;
    output.impl()->slot = nodes_.size();
    nodes_.push_back(std::move(n));
  }

  template <typename T>
  void record(std::string_view op, std::initializer_list<BasicTensor<T>> inputs, const BasicTensor<T>& output,
              std::function<void()> backward) {
    record(op, std::span<const BasicTensor<T>>(inputs.begin(), inputs.size()), output, std::move(backward));
  }

  // Runs recorded backward closures from `last` down to the first record,
  // skipping nodes whose output never received a gradient.
  void sweep(std::size_t last) {
    for (std::size_t i = last + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.output->has_grad()) continue;
      node.backward();
    }
  }

  // Drops every record; tensors produced here become detached leaves.
  void clear() {
    for (auto& n : nodes_) {
      if (n.output && n.output->tape == this) n.output->tape = nullptr;
    }
    nodes_.clear();
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

inline thread_local Tape* active_tape = nullptr;

// The tape an op should record on, or nullptr when no input carries gradient
// or no tape is active on this thread.
template <typename T>
Tape* recording_tape(std::span<const BasicTensor<T>> inputs) {
  if (active_tape == nullptr) return nullptr;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return active_tape;
  }
  return nullptr;
}

template <typename T>
Tape* recording_tape(std::initializer_list<BasicTensor<T>> inputs) {
  return recording_tape(std::span<const BasicTensor<T>>(inputs.begin(), inputs.size()));
}

// Gradient buffer of an op input, or nullptr when it does not need one.
template <typename T>
T* grad_sink(TensorImpl<T>* t) {
  return t && t->requires_grad ? t->grad_buffer() : nullptr;
}

template <typename T>
TensorImpl<T>* impl_or_null(const BasicTensor<T>& t) {
  return t.defined() ? t.impl().get() : nullptr;
}

}  // namespace detail

// Makes `tape` the recording target for ops on this thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape) { detail::active_tape = &tape; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope() { detail::active_tape = prev_; }

 private:
  Tape* prev_;
};

// Suspends recording while in scope (evaluation, finite differences).
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape) { detail::active_tape = nullptr; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
  ~NoGradScope() { detail::active_tape = prev_; }

 private:
  Tape* prev_;
};

// Reverse sweep from a scalar loss. Gradients are added to whatever the
// requires_grad tensors already hold; the tape is consumed afterwards.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw InvalidArgument("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  detail::TensorImpl<T>* root = loss.impl().get();
  if (root->tape == nullptr) throw NoGraphError("loss is not connected to a tape");
  Tape& tape = *root->tape;
  root->grad_buffer()[0] += T(1);
  tape.sweep(root->slot);
  tape.clear();
}

}  // namespace mspm
