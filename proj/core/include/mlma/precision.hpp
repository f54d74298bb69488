#pragma once

// Scalar type selection. The core library is compiled twice: once with
// MLMA_DOUBLE=0 (32-bit, used for training runs) and once with MLMA_DOUBLE=1
// (64-bit, used by gradient and oracle checks). Each build lives in its own
// inline namespace so both variants can be linked into one executable.

#ifndef MLMA_DOUBLE
#define MLMA_DOUBLE 0
#endif

#if MLMA_DOUBLE
#define MLMA_PRECISION_NS f64
#else
#define MLMA_PRECISION_NS f32
#endif

#define MLMA_NAMESPACE_BEGIN \
  namespace mlma {           \
  inline namespace MLMA_PRECISION_NS {
#define MLMA_NAMESPACE_END \
  }                        \
  }

MLMA_NAMESPACE_BEGIN

#if MLMA_DOUBLE
using Real = double;
inline constexpr unsigned char kRealDtype = 1;
#else
using Real = float;
inline constexpr unsigned char kRealDtype = 0;
#endif

MLMA_NAMESPACE_END
