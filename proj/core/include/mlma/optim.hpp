#pragma once

#include <cstdint>
#include <vector>

#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 5.0;
};

/// Adam with bias correction and global-norm clipping. Moment buffers are
/// held per parameter in the order the parameters were registered.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  /// Clips gradients in place, then applies one update. Every parameter must
  /// hold a gradient buffer (call zero_grad() before the backward pass).
  /// Returns the gradient norm measured before clipping.
  double step();
  void zero_grad();

  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamOptions& options() const { return options_; }
  std::uint64_t steps() const { return step_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t step_ = 0;
};

/// Scales all gradients so their joint Euclidean norm is at most max_norm.
/// Returns the norm before scaling.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

MLMA_NAMESPACE_END
