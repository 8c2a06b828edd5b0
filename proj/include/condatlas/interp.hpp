#ifndef CONDATLAS_INTERP_HPP
#define CONDATLAS_INTERP_HPP

#include <array>
#include <cmath>
#include <cstdint>

namespace condatlas {

// Cell lookup for clamp-to-edge multilinear sampling along one axis.
// Coordinates outside [0, n-1] are clamped to the boundary face; a clamped
// coordinate has zero derivative with respect to the query position.
template <typename T> struct AxisSample {
  int i0 = 0;     // lower cell index, in [0, n-2]
  T t = T(0);     // fractional position within the cell
  bool clamped = false;
};

template <typename T> inline AxisSample<T> axis_sample(T q, int n) {
  AxisSample<T> s;
  if (q <= T(0)) {
    s.i0 = 0;
    s.t = T(0);
    s.clamped = q < T(0);
    return s;
  }
  if (q >= T(n - 1)) {
    s.i0 = n - 2;
    s.t = T(1);
    s.clamped = q > T(n - 1);
    return s;
  }
  s.i0 = static_cast<int>(std::floor(q));
  if (s.i0 > n - 2)
    s.i0 = n - 2;
  s.t = q - T(s.i0);
  return s;
}

// Multilinear interpolation of one channel at a continuous coordinate,
// D in {2,3}. `strides` are element strides per axis; `q` in voxel units.
template <typename T, typename S>
inline T interp_channel(const S *chan, const int *dims, const int64_t *strides, int nd, const T *q) {
  std::array<AxisSample<T>, 3> ax;
  for (int d = 0; d < nd; ++d)
    ax[d] = axis_sample(q[d], dims[d]);
  const int ncorner = 1 << nd;
  T acc = T(0);
  for (int m = 0; m < ncorner; ++m) {
    T w = T(1);
    int64_t off = 0;
    for (int d = 0; d < nd; ++d) {
      const int hi = (m >> d) & 1;
      w *= hi ? ax[d].t : (T(1) - ax[d].t);
      off += static_cast<int64_t>(ax[d].i0 + hi) * strides[d];
    }
    acc += w * static_cast<T>(chan[off]);
  }
  return acc;
}

// Same lookup plus the partial derivatives of the interpolated value with
// respect to each query coordinate (zero where the coordinate was clamped).
template <typename T, typename S>
inline T interp_channel_grad(const S *chan, const int *dims, const int64_t *strides, int nd, const T *q, T *dq) {
  std::array<AxisSample<T>, 3> ax;
  for (int d = 0; d < nd; ++d)
    ax[d] = axis_sample(q[d], dims[d]);
  const int ncorner = 1 << nd;
  T acc = T(0);
  for (int d = 0; d < nd; ++d)
    dq[d] = T(0);
  for (int m = 0; m < ncorner; ++m) {
    int64_t off = 0;
    for (int d = 0; d < nd; ++d)
      off += static_cast<int64_t>(ax[d].i0 + ((m >> d) & 1)) * strides[d];
    const T val = static_cast<T>(chan[off]);
    T w = T(1);
    for (int d = 0; d < nd; ++d)
      w *= ((m >> d) & 1) ? ax[d].t : (T(1) - ax[d].t);
    acc += w * val;
    for (int d = 0; d < nd; ++d) {
      if (ax[d].clamped)
        continue;
      T wd = ((m >> d) & 1) ? T(1) : T(-1);
      for (int e = 0; e < nd; ++e) {
        if (e == d)
          continue;
        wd *= ((m >> e) & 1) ? ax[e].t : (T(1) - ax[e].t);
      }
      dq[d] += wd * val;
    }
  }
  return acc;
}

// Row-major element strides for channel-major tensors: last axis is fastest.
inline void row_major_strides(const int *dims, int nd, int64_t *strides) {
  int64_t s = 1;
  for (int d = nd - 1; d >= 0; --d) {
    strides[d] = s;
    s *= dims[d];
  }
}

} // namespace condatlas

#endif
