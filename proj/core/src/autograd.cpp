#include "diffmap/autograd.hpp"

#include <unordered_set>

#include "diffmap/errors.hpp"

namespace diffmap::ag {

namespace {
thread_local bool g_grad_enabled = true;
}

void Node::accumulate(const Tensor& g) {
  if (grad.empty() && !value.empty()) {
    grad = g;
    return;
  }
  grad += g;
}

void Node::accumulate(Tensor&& g) {
  if (grad.empty() && !value.empty()) {
    grad = std::move(g);
    return;
  }
  grad += g;
}

Tensor& Node::ensure_grad() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::grad() const { return node_->ensure_grad(); }

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_ptr());
  out.node_->backward = std::move(backward);
  return out;
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // children before parents
}

}  // namespace

void backward(const Var& output, const Tensor& seed) {
  if (!output.requires_grad()) return;
  require_same_shape(output.value(), seed, "backward seed");
  Node* root = output.node();
  auto order = topo_order(root);
  root->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad);
  }
  // Release interior gradients; leaves (parameters) keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

void backward(const Var& output) {
  if (output.value().numel() != 1) {
    throw ContractError("backward() without seed requires a scalar output, got " +
                        shape_str(output.shape()));
  }
  backward(output, Tensor(output.shape(), 1.0));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void zero_grads(const ParamList& params) {
  for (const auto& [name, p] : params) {
    (void)name;
    const_cast<Var&>(p).zero_grad();
  }
}

std::size_t param_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) {
    (void)name;
    n += p.value().numel();
  }
  return n;
}

}  // namespace diffmap::ag
