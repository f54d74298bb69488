#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

struct GradCheckOptions {
  double eps = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  /// Second differences at eps and 2 eps agree on smooth functions. Their
  /// gap measures how far a kink within 2 eps shifts the central
  /// difference; a coordinate whose shift exceeds this fraction of the
  /// gradient magnitude is reported as unreliable and not scored.
  double kink_tolerance = 1e-6;
  /// Upper bound on coordinates probed per parameter; 0 probes all.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t unreliable = 0;
  /// Location of the worst scored coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares analytic gradients of `loss_fn` against central differences at
/// eps and 2 eps, combined to fourth order.
/// `loss_fn` must be deterministic (dropout off) and rebuild its graph from
/// the current parameter values on every call.
GradCheckResult gradient_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                               const GradCheckOptions& options = {});

MLMA_NAMESPACE_END
