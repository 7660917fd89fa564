#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "maproto/tensor.hpp"

namespace maproto {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. `backward` reads `grad` and
/// accumulates into the parents' gradients.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  /// Adds `g` into this node's gradient, allocating it on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

/// Handle to a tape node. Copies share the node, so a parameter held by a
/// layer and the copy captured in a graph are the same object.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient after backward(); zeros of the value shape if none reached it.
  const Tensor& grad() const;
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad();

  const NodePtr& node() const { return node_; }

  /// Builds a result node. Records `backward` only when grad mode is on and a
  /// parent requires gradients.
  static Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

 private:
  explicit Var(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

/// Runs reverse accumulation from a scalar root, seeding d(root)/d(root) = 1.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording within its scope (evaluation, push, metrics).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace maproto
