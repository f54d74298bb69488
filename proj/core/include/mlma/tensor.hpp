#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlma/error.hpp"
#include "mlma/precision.hpp"

MLMA_NAMESPACE_BEGIN

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// One node of the reverse-mode computation record. Leaves are created by
/// the user (parameters, inputs); interior nodes are created by ops and
/// carry a backward closure that reads `grad` and accumulates into the
/// grads of `inputs`.
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Real> data() const { return node_->data; }
  std::span<Real> mutable_data() { return node_->data; }
  Real item() const;
  Real at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad();
  /// Release the gradient buffer so has_grad() reports false.
  void drop_grad() { node_->grad.clear(); }

  /// Same values, no history, no gradient requirement.
  Tensor detach() const;
  /// Deep copy of values (and requires_grad flag) into a fresh leaf.
  Tensor clone() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Topologically ordered list of the interior nodes reachable from a root:
/// every node appears after all of its inputs.
using ComputationRecord = std::vector<TensorNode*>;

ComputationRecord record_of(const Tensor& root);

/// Reverse-mode pass from a scalar loss. Gradients accumulate into every
/// requires_grad leaf; callers zero them beforehand.
void backward(const Tensor& loss);

/// Disables graph recording within its scope (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

/// Builds an op result. When recording is on and any input requires a
/// gradient, the result is linked into the graph with `backward`.
Tensor make_result(Shape shape, std::vector<Real> data, std::string_view op,
                   std::vector<Tensor> inputs, std::function<void(TensorNode&)> backward);

}  // namespace detail

MLMA_NAMESPACE_END
