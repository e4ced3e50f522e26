#pragma once

// Scalar type selection. The default build trains in 32-bit floats; the
// ATTUNE_REAL_DOUBLE build is used by gradient and oracle checks. The two
// builds live in distinct inline namespaces so they can be linked into the
// same executable without clashing.

#if defined(ATTUNE_REAL_DOUBLE)
#define ATTUNE_ABI f64
#else
#define ATTUNE_ABI f32
#endif

#define ATTUNE_NAMESPACE_BEGIN \
  namespace attune {           \
  inline namespace ATTUNE_ABI {
#define ATTUNE_NAMESPACE_END \
  }                          \
  }

ATTUNE_NAMESPACE_BEGIN

#if defined(ATTUNE_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

inline constexpr bool kDoublePrecision = sizeof(Real) == sizeof(double);

ATTUNE_NAMESPACE_END
