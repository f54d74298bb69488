#include "mlma/tensor.hpp"

#include <sstream>
#include <unordered_set>

MLMA_NAMESPACE_BEGIN

namespace {
thread_local bool g_grad_enabled = true;
}

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Dimension: return "dimension";
    case ErrorCategory::Contract: return "contract";
    case ErrorCategory::Numeric: return "numeric";
    case ErrorCategory::Parse: return "parse";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Io: return "io";
  }
  return "unknown";
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}
}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  check_shape(shape);
  auto node = std::make_shared<TensorNode>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() needs a rank-2 tensor, got " + shape_str(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() needs a rank-2 tensor, got " + shape_str(shape()));
  return node_->shape[1];
}

Real Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = on;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

Tensor Tensor::detach() const { return Tensor::from(shape(), node_->data, false); }

Tensor Tensor::clone() const { return Tensor::from(shape(), node_->data, node_->requires_grad); }

ComputationRecord record_of(const Tensor& root) {
  ComputationRecord order;
  if (!root.defined()) return order;
  std::unordered_set<TensorNode*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf() && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    if (!node->is_leaf()) order.push_back(node);
    stack.pop_back();
  }
  return order;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  TensorNode* root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("backward() on a loss that does not depend on any parameter");
  }
  ComputationRecord order = record_of(loss);
  for (TensorNode* n : order) n->grad.assign(n->data.size(), Real(0));
  root->ensure_grad();
  root->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (!n->backward) continue;
    for (auto& in : n->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<Real> data, std::string_view op, std::vector<Tensor> inputs,
                   std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

MLMA_NAMESPACE_END
