#pragma once

#include "mlma/rng.hpp"
#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

/// Trainable leaf with entries drawn from U(-bound, bound).
inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// fan_in x fan_out weight with Glorot/Xavier uniform entries.
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init({fan_in, fan_out}, bound, rng);
}

MLMA_NAMESPACE_END
