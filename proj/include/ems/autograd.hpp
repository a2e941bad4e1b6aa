#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ems/tensor.hpp"

namespace ems {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
};

}  // namespace detail

// Differentiable handle onto a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient accumulated by backward(); zeros if none was produced.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }
  const char* op() const { return node_->op; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Creates a non-leaf result of `op`. The backward closure is recorded only
  // when grad mode is on and some input requires grad.
  static Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                         std::function<void(detail::Node&)> backward_fn);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse sweep from a scalar loss. Each reachable node runs its backward
// exactly once, in reverse topological order. Non-leaf nodes are released
// afterwards, so a second call on the same graph is rejected.
void backward(const Var& loss);

}  // namespace ems
