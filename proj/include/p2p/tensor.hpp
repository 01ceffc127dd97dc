#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "p2p/common.hpp"

namespace p2p::nn {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

inline uint64_t next_node_id() {
  thread_local uint64_t counter = 0;
  return ++counter;
}

template <class T>
struct TensorNode {
  std::vector<size_t> shape;
  std::vector<T> val;
  std::vector<T> grad;
  bool requires_grad = false;
  uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;
};

template <class T>
inline std::vector<T>& grad_buf(TensorNode<T>& n) {
  if (n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), T(0));
  return n.grad;
}

// Shared-handle tensor: copies refer to the same node, so parameters keep their
// identity when passed around.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<size_t> shape) {
    return full(std::move(shape), T(0));
  }

  static Tensor full(std::vector<size_t> shape, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    size_t total = 1;
    for (size_t d : shape) total *= d;
    n->shape = std::move(shape);
    n->val.assign(total, v);
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<size_t> shape, std::vector<T> data) {
    size_t total = 1;
    for (size_t d : shape) total *= d;
    if (total != data.size()) throw ShapeMismatch("tensor data does not match shape");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<size_t>& shape() const { return node_->shape; }
  size_t ndim() const { return node_->shape.size(); }
  size_t size() const { return node_->val.size(); }
  T* data() { return node_->val.data(); }
  const T* data() const { return node_->val.data(); }
  std::vector<T>& values() { return node_->val; }
  const std::vector<T>& values() const { return node_->val; }

  T item() const {
    if (size() != 1) throw NotScalar("item() on tensor of size " + std::to_string(size()));
    return node_->val[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->val.size(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw MissingGrad("gradient not populated");
    return node_->grad;
  }
  std::vector<T>& mutable_grad() { return grad_buf(*node_); }
  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Builds an op result node. The backward closure is only attached when grad mode
// is on and some parent needs gradients; otherwise the result is detached.
template <class T>
inline Tensor<T> make_op(std::vector<size_t> shape, std::vector<T> val,
                         std::vector<std::shared_ptr<TensorNode<T>>> parents,
                         std::function<void(TensorNode<T>&)> backward_fn) {
  size_t total = 1;
  for (size_t d : shape) total *= d;
  if (total != val.size()) throw ShapeMismatch("op result does not match shape");
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  n->id = next_node_id();
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  if (grad_enabled() && rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

// Reverse-mode sweep from a scalar loss. Nodes are visited in descending creation
// order, which is a topological order for a graph built forward.
template <class T>
inline void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw NotScalar("backward from non-scalar");
  auto root = loss.node();
  if (!root->requires_grad) return;

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::shared_ptr<TensorNode<T>>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });

  grad_buf(*root)[0] += T(1);
  for (auto& n : nodes)
    if (n->backward_fn) n->backward_fn(*n);
}

inline int default_thread_budget() {
  if (const char* env = std::getenv("P2P_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

inline int& thread_budget() {
  static int budget = default_thread_budget();
  return budget;
}

// Splits [0, n) into contiguous chunks, one worker per chunk. Each index is
// processed exactly once in-order within its chunk, so results stay deterministic.
template <class Fn>
inline void parallel_for(size_t n, Fn&& fn) {
  int workers = std::min<int>(thread_budget(), int(n ? n : 1));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  size_t chunk = (n + size_t(workers) - 1) / size_t(workers);
  for (int w = 0; w < workers; ++w) {
    size_t lo = size_t(w) * chunk;
    size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace p2p::nn
