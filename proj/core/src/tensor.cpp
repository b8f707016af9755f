// SPDX-License-Identifier: Apache-2.0
#include "soho/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <vector>
#include <unordered_set>

#include "soho/error.hpp"
#include "soho/random.hpp"

namespace soho {

namespace detail {
namespace {

constexpr std::align_val_t kBlockAlign{64};
constexpr std::size_t kCachedMin = std::size_t(1) << 16;
constexpr std::size_t kCacheCap = std::size_t(1) << 29;

thread_local bool cache_closed = false;

struct BlockCache {
  std::unordered_map<std::size_t, std::vector<void*>> free;
  std::size_t bytes = 0;

  ~BlockCache() {
    cache_closed = true;
    for (auto& [size, blocks] : free)
      for (void* p : blocks) ::operator delete(p, kBlockAlign);
  }
};

BlockCache* block_cache() {
  if (cache_closed) return nullptr;
  thread_local BlockCache cache;
  return &cache;
}

}  // namespace

void* aligned_acquire(std::size_t bytes) {
  BlockCache* cache = bytes >= kCachedMin ? block_cache() : nullptr;
  if (cache != nullptr) {
    auto it = cache->free.find(bytes);
    if (it != cache->free.end() && !it->second.empty()) {
      void* p = it->second.back();
      it->second.pop_back();
      cache->bytes -= bytes;
      return p;
    }
  }
  return ::operator new(bytes, kBlockAlign);
}

void aligned_release(void* p, std::size_t bytes) noexcept {
  BlockCache* cache = p != nullptr && bytes >= kCachedMin ? block_cache() : nullptr;
  if (cache != nullptr && cache->bytes + bytes <= kCacheCap) {
    try {
      cache->free[bytes].push_back(p);
      cache->bytes += bytes;
      return;
    } catch (...) {
    }
  }
  ::operator delete(p, kBlockAlign);
}

}  // namespace detail

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(const std::string& text) {
  std::istringstream is(text);
  is >> engine_;
  if (!is) throw ContractError("rng state text is malformed");
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::span<const Real> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + to_string(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value.assign(values.begin(), values.end());
  n->requires_grad = requires_grad;
  return n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::constant(Shape shape, std::vector<Real> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<Real> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<Real>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(make_leaf({}, std::span<const Real>(&value, 1), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return numel(shape()); }

std::span<const Real> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->is_leaf()) throw ContractError(std::string("cannot edit the output of op ") + node_->op);
  return node_->value;
}

Real Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Real Tensor::at(std::size_t row, std::size_t col) const {
  const auto& s = shape();
  if (s.size() != 2) throw DimensionError("at(row, col) needs a matrix, got " + to_string(s));
  return node_->value[row * s[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->is_leaf(); }
const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->grad;
}

std::span<Real> Tensor::mutable_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->grad;
}

void Tensor::retain_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->retain_grad = true;
}

void Tensor::zero_grad() {
  if (!node_) return;
  if (node_->grad.empty() && node_->requires_grad && node_->is_leaf()) {
    node_->grad.assign(node_->value.size(), 0.0);
  } else {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
}

Tensor Tensor::detach() const { return Tensor(make_leaf(shape(), node_->value, false)); }

Tensor Tensor::clone() const { return Tensor(make_leaf(shape(), node_->value, node_->requires_grad)); }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.size() != 1) throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->is_leaf()) {
      if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  auto* root = loss.node().get();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  // Interior buffers are scratch; leaves keep their accumulators.
  for (auto* n : order) {
    if (!n->is_leaf() && n != root && !n->retain_grad) Buffer().swap(n->grad);
  }
}

namespace detail {

namespace {

Tensor finish(const char* op, Shape shape, Buffer value, bool any_grad,
              std::vector<std::shared_ptr<Node>> parents, BackwardFn fn) {
  if (value.size() != numel(shape)) {
    throw DimensionError(std::string(op) + ": result length does not match shape " + to_string(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (any_grad && g_grad_enabled) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(fn);
  }
  return Tensor(std::move(n));
}

}  // namespace

Tensor make_result(const char* op, Shape shape, Buffer value,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  bool any = false;
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(inputs.size());
  for (const Tensor* t : inputs) {
    if (t && t->defined()) {
      any = any || t->requires_grad();
      parents.push_back(t->node());
    } else {
      parents.push_back(nullptr);
    }
  }
  return finish(op, std::move(shape), std::move(value), any, std::move(parents), std::move(fn));
}

Tensor make_result(const char* op, Shape shape, Buffer value, const std::vector<Tensor>& inputs,
                   BackwardFn fn) {
  bool any = false;
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    any = any || t.requires_grad();
    parents.push_back(t.node());
  }
  return finish(op, std::move(shape), std::move(value), any, std::move(parents), std::move(fn));
}

}  // namespace detail

}  // namespace soho
