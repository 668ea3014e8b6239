#pragma once

// Dense 2-D tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node holding an Eigen row-major
// matrix, an optional gradient of the same shape, and a closure that
// propagates the node's gradient into its parents. Graphs are rebuilt on
// every forward pass; leaves (parameters) persist across graphs and
// accumulate gradients until zero_grad(). Ownership runs child -> parent
// only, so dropping the loss handle frees the interior of the graph while
// parameter leaves survive.
//
// Scalar type S is float for production paths and double for the
// finite-difference oracles in the tests.

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "capsteer/errors.hpp"

namespace capsteer {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Thread-local gradient mode. Ops record no graph while disabled.
inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_ref(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
struct TensorNode {
  Mat<S> value;
  Mat<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Propagates this node's grad into parents' grads. Receives the node
  // itself so closures never capture a self shared_ptr (no ref cycles).
  std::function<void(TensorNode<S>&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Mat<S>::Zero(value.rows(), value.cols());
    }
  }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Mat<S> m, const char* op = "constant") {
    auto n = std::make_shared<TensorNode<S>>();
    n->value = std::move(m);
    n->op = op;
    if (!n->value.allFinite()) {
      throw NumericError(std::string("non-finite values in ") + op);
    }
    return Tensor(std::move(n));
  }

  static Tensor param(Mat<S> m) {
    Tensor t = constant(std::move(m), "param");
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m), "scalar");
  }

  bool defined() const { return node_ != nullptr; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }

  const Mat<S>& value() const { return node_->value; }
  Mat<S>& value_mut() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() > 0; }

  const Mat<S>& grad() const {
    if (!has_grad()) {
      throw ShapeError("gradient not populated; call backward() first");
    }
    return node_->grad;
  }

  void zero_grad() {
    if (node_->grad.size() > 0) node_->grad.setZero();
  }

  S item() const {
    if (rows() != 1 || cols() != 1) {
      throw ShapeError("item() requires a 1x1 tensor");
    }
    return node_->value(0, 0);
  }

  Tensor detach() const { return constant(node_->value, "detach"); }

  // Reverse-mode accumulation from a scalar root. Repeated calls without
  // zero_grad() accumulate into existing gradients.
  void backward() const {
    if (rows() != 1 || cols() != 1) {
      throw ShapeError("backward() requires a scalar (1x1) loss");
    }
    TensorNode<S>* root = node_.get();
    if (!root->requires_grad) return;

    // Post-order DFS over parent edges; reversed it yields every consumer
    // before its producers, which is the order backprop needs.
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<S>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) {
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    root->ensure_grad();
    root->grad(0, 0) += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<S>* n = *it;
      if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
    }
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode<S>> node_;

  template <class T>
  friend Tensor<T> make_op(const char* name, Mat<T> value,
                           std::vector<Tensor<T>> parents,
                           std::function<void(TensorNode<T>&)> fn);
};

// Shared op constructor: validates finiteness, and only records the graph
// when gradients are enabled and some parent needs them.
template <class S>
Tensor<S> make_op(const char* name, Mat<S> value,
                  std::vector<Tensor<S>> parents,
                  std::function<void(TensorNode<S>&)> fn) {
  auto n = std::make_shared<TensorNode<S>>();
  n->value = std::move(value);
  n->op = name;
  if (!n->value.allFinite()) {
    throw NumericError(std::string("non-finite values in op ") + name);
  }
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Tensor<S>(std::move(n));
}

// Gradient accumulation helper used by op backward closures.
template <class S, class Expr>
void accumulate_grad(TensorNode<S>& parent, const Expr& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  parent.grad += g;
}

}  // namespace capsteer
