#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "detext/tensor.hpp"

namespace detext {

// Reverse-mode autodiff over Tensor<T>. Graphs are built per forward pass;
// parameters are long-lived leaf nodes reused across steps.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into inputs
  std::string name;                     // set for named parameters
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

// Thread-local switch that disables graph recording (inference / data prep).
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad = false, std::string name = "") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return make_leaf(std::move(value), false);
}

// Copies the value into a fresh leaf, cutting the graph (e.g. the fake image
// fed to the discriminator during its own update).
template <class T>
Var<T> detach(const Var<T>& v) {
  return make_leaf(v->value, false);
}

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool rg = false;
  if (grad_mode_flag()) {
    for (const auto& in : inputs)
      if (in->requires_grad) {
        rg = true;
        break;
      }
  }
  if (rg) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backprop = std::move(fn);
  }
  return n;
}

// Accumulate g into v's gradient if it participates in the graph.
template <class T>
void accum_grad(const Var<T>& v, const Tensor<T>& g) {
  if (!v->requires_grad) return;
  T* dst = v->grad.data.data();
  const T* src = g.data.data();
  for (int64_t i = 0, n = g.numel(); i < n; ++i) dst[i] += src[i];
}

template <class T>
std::vector<Node<T>*> topo_order(const Var<T>& root) {
  std::vector<Node<T>*> order;
  if (!root->requires_grad) return order;
  std::unordered_set<Node<T>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node<T>* child = node->inputs[idx].get();
      ++idx;
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // children before parents
}

// Backpropagate from a scalar root. Gradients of every node reachable in the
// recorded graph are recomputed from scratch (no accumulation across calls).
template <class T>
void backward(const Var<T>& root) {
  DETEXT_CHECK(root->value.numel() == 1, "backward() root must be scalar");
  if (!root->requires_grad) return;
  auto order = topo_order(root);
  for (Node<T>* n : order) {
    n->grad = Tensor<T>::zeros(n->value.shape);
  }
  root->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

}  // namespace detext
