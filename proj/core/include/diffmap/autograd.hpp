#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffmap/tensor.hpp"

namespace diffmap::ag {

struct Node {
  Tensor value;
  Tensor grad;  // lazily allocated, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(const Tensor& grad_out)> backward;

  void accumulate(const Tensor& g);
  void accumulate(Tensor&& g);
  Tensor& ensure_grad();
};

// Handle to a node in the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  // Gradient accumulated by backward(); zeros if none flowed here.
  const Tensor& grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  friend Var make_result(Tensor, std::vector<Var>, std::function<void(const Tensor&)>);
  std::shared_ptr<Node> node_;
};

// Builds an op result. If no input needs a gradient (or grad mode is off) the
// result is a constant and `backward` is dropped.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward);

// Reverse sweep from a scalar output, seeding d(out)/d(out) = 1.
void backward(const Var& output);

// Reverse sweep with an explicit output cotangent.
void backward(const Var& output, const Tensor& seed);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using ParamList = std::vector<std::pair<std::string, Var>>;

void zero_grads(const ParamList& params);
std::size_t param_count(const ParamList& params);

}  // namespace diffmap::ag
