#pragma once

#include <cstdint>

namespace condatlas {

// Dot product with an explicit fixed lane order so results are deterministic
// for a given build. Plain `acc += a[i]*b[i]` loops cannot be vectorized by
// the compiler without relaxing FP associativity globally; this keeps the
// relaxation local and reproducible.
#if defined(__GNUC__) || defined(__clang__)

template <typename T> struct SimdLanes;
template <> struct SimdLanes<float> {
  typedef float Vec __attribute__((vector_size(64)));
  static constexpr int lanes = 16;
};
template <> struct SimdLanes<double> {
  typedef double Vec __attribute__((vector_size(64)));
  static constexpr int lanes = 8;
};

template <typename T> inline T simd_dot(const T *a, const T *b, int64_t n) {
  using L = SimdLanes<T>;
  typename L::Vec acc = {};
  int64_t i = 0;
  for (; i + L::lanes <= n; i += L::lanes) {
    typename L::Vec va, vb;
    __builtin_memcpy(&va, a + i, sizeof(va));
    __builtin_memcpy(&vb, b + i, sizeof(vb));
    acc += va * vb;
  }
  T sum = T(0);
  for (int k = 0; k < L::lanes; ++k)
    sum += acc[k];
  for (; i < n; ++i)
    sum += a[i] * b[i];
  return sum;
}

#else

template <typename T> inline T simd_dot(const T *a, const T *b, int64_t n) {
  T sum = T(0);
  for (int64_t i = 0; i < n; ++i)
    sum += a[i] * b[i];
  return sum;
}

#endif

} // namespace condatlas
