// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace soho {

using Real = double;
using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage, so vectorized kernels see the same alignment
/// (and hence the same summation order) on every run.
namespace detail {
// 64-byte aligned blocks; blocks of 64 KiB and more are kept in a per-thread
// cache for reuse.
void* aligned_acquire(std::size_t bytes);
void aligned_release(void* p, std::size_t bytes) noexcept;
}  // namespace detail

template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(detail::aligned_acquire(n * sizeof(T))); }
  void deallocate(T* p, std::size_t n) noexcept { detail::aligned_release(p, n * sizeof(T)); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One vertex of the define-by-run graph. Parents are only recorded when the
// node takes part in differentiation.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  bool retain_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
};

}  // namespace detail

/// Dense row-major array with reverse-mode differentiation.
///
/// A Tensor is a handle: copies share the same node. Values are fixed once an
/// op has produced them; only leaves (parameters) may be edited in place, and
/// only while no backward pass is running.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<Real> values);
  static Tensor parameter(Shape shape, std::vector<Real> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const Real> data() const;
  /// In-place access for leaves; throws ContractError on op outputs.
  std::span<Real> mutable_data();

  Real item() const;
  Real at(std::size_t flat) const { return data()[flat]; }
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  const char* op_name() const;

  bool has_grad() const;
  /// Accumulated gradient; empty span when no backward pass reached this tensor.
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  /// Zeroes the gradient; a trainable leaf without one gets a zero buffer.
  void zero_grad();
  /// Keep this interior tensor's gradient after backward (for inspection).
  void retain_grad();

  /// Leaf copy with identical values and no graph history.
  Tensor detach() const;
  /// Independent leaf copy that keeps requires_grad.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode differentiation from a scalar. Leaf gradients accumulate
/// across calls; interior gradients are recomputed from zero each call.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

/// Builds an op output. The backward function is attached only when grad mode
/// is on and at least one input requires a gradient.
Tensor make_result(const char* op, Shape shape, Buffer value,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn);
Tensor make_result(const char* op, Shape shape, Buffer value,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

inline bool wants_grad(const Node& n) { return n.requires_grad && !n.grad.empty(); }

}  // namespace detail

}  // namespace soho
