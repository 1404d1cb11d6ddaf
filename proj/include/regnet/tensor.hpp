#pragma once
// Reverse-mode differentiable tensor.
//
// A BasicTensor is a shared handle to a TensorImpl. Operations in ops.hpp
// create result tensors that remember their inputs and a backward rule; the
// recorded graph is linearised into a ComputationTape when backward() runs.

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace regnet {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Allocator with 64-byte alignment. Vectorised kernels peel loops by
/// address, so aligned storage keeps float summation order independent of
/// where the heap places a buffer and makes repeated runs bit-identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Aligned and left uninitialised on resize; for work space that is fully
/// written before it is read.
template <typename T>
struct ScratchAllocator : AlignedAllocator<T> {
  template <typename U>
  struct rebind {
    using other = ScratchAllocator<U>;
  };

  ScratchAllocator() = default;
  template <typename U>
  ScratchAllocator(const ScratchAllocator<U>&) noexcept {}

  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};

template <typename T>
using Scratch = std::vector<T, ScratchAllocator<T>>;

template <typename T>
struct TensorImpl;

template <typename T>
struct GradNode {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad and accumulates into the grads of its inputs.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> grad_fn;

  bool is_leaf() const { return grad_fn == nullptr; }

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T>
struct ComputationTape {
  // Topologically ordered: every node's inputs precede it; the loss is last.
  std::vector<TensorImpl<T>*> nodes;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  /// Zero-filled tensor.
  explicit BasicTensor(Shape shape) : BasicTensor(shape, false) {}

  // Constrained so that a braced value list never binds to the flag.
  template <std::same_as<bool> Flag>
  BasicTensor(Shape shape, Flag requires_grad)
      : BasicTensor(from_buffer(shape, Buffer<T>(static_cast<std::size_t>(checked_numel(shape)), T{0}),
                                requires_grad)) {}

  BasicTensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
      : BasicTensor(from_buffer(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad)) {}

  static BasicTensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad = false) {
    if (static_cast<Index>(values.size()) != checked_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    BasicTensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = static_cast<std::size_t>(checked_numel(shape));
    return from_buffer(std::move(shape), Buffer<T>(n, value), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  static BasicTensor from_impl(std::shared_ptr<TensorImpl<T>> impl) {
    BasicTensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  Index dim(std::size_t axis) const { return impl_->shape.at(axis); }
  Index numel() const { return static_cast<Index>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  // Direct mutation is reserved for initialisation and optimizer steps.
  std::span<T> mutable_data() { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) {
    if (!impl_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = value;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }

  BasicTensor detach() const { return from_buffer(impl_->shape, impl_->data, false); }

  void backward() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  static Index checked_numel(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (Index d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    return regnet::numel(shape);
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;

/// Linearises the graph reachable from `loss` through nodes that require grad.
template <typename T>
ComputationTape<T> record_tape(const BasicTensor<T>& loss) {
  ComputationTape<T> tape;
  if (!loss.defined() || !loss.requires_grad()) return tape;
  std::unordered_set<const TensorImpl<T>*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn != nullptr && next < fn->inputs.size()) {
      TensorImpl<T>* child = fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.nodes.push_back(node);
    stack.pop_back();
  }
  return tape;
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");
  auto tape = record_tape(*this);
  // Intermediate grads are per-pass; leaf grads accumulate across calls.
  for (auto* node : tape.nodes) {
    if (node->is_leaf()) {
      node->ensure_grad();
    } else {
      node->grad.assign(node->data.size(), T{0});
    }
  }
  impl_->grad[0] += T{1};
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    if ((*it)->grad_fn) (*it)->grad_fn->backward(**it);
  }
}

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const BasicTensor<T>* t) { return t->requires_grad(); });
}

/// Wraps freshly computed data as an op result, recording a node when needed.
template <typename T, typename Backward>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, std::string_view op,
                           std::initializer_list<const BasicTensor<T>*> inputs, Backward&& backward) {
  auto out = BasicTensor<T>::from_buffer(std::move(shape), std::move(data));
  if (grad_enabled() && any_requires_grad<T>(inputs)) {
    auto node = std::make_shared<GradNode<T>>();
    node->op = op;
    for (const auto* in : inputs) node->inputs.push_back(in->impl());
    node->backward = std::forward<Backward>(backward);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
  }
  return out;
}

}  // namespace detail

}  // namespace regnet
