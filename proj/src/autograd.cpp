#include "ems/autograd.hpp"

#include <unordered_set>

#include "ems/error.hpp"

namespace ems {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

Tensor& detail::Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

Var Var::make_result(Tensor value, const char* op, std::vector<Var> inputs,
                     std::function<void(detail::Node&)> backward_fn) {
  Var out;
  out.node_ = std::make_shared<detail::Node>();
  out.node_->value = std::move(value);
  out.node_->op = op;
  out.node_->leaf = false;
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) {
      require(!in.node_->consumed, ErrorCode::kNumeric,
              std::string("op '") + op + "' consumes a node released by a previous backward");
      needs = needs || in.node_->requires_grad;
    }
  }
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

void backward(const Var& loss) {
  require(loss.defined(), ErrorCode::kNumeric, "backward on an undefined value");
  auto root = loss.node();
  require(root->value.numel() == 1, ErrorCode::kNumeric,
          "backward requires a scalar loss, got shape " + shape_str(root->value.shape()));
  require(!root->consumed, ErrorCode::kNumeric,
          "backward called twice on the same graph; re-run the forward pass first");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->leaf || !node->backward_fn) continue;
    node->grad_buffer();
    node->backward_fn(*node);
  }
  for (detail::Node* node : order) {
    if (node->leaf) continue;
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->grad = Tensor();
    node->consumed = true;
  }
}

}  // namespace ems
