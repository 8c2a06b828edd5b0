#include "condatlas/field_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "condatlas/interp.hpp"

namespace condatlas {

namespace {

void check_same_grid(const Grid &a, const Grid &b, const char *op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": grid mismatch");
}

// Iterate spatial indices of a grid as (linear, i0, i1[, i2]).
template <typename Fn> void for_each_voxel(const Grid &g, Fn &&fn) {
  const int nd = g.ndim();
  if (nd == 2) {
    int64_t p = 0;
    for (int i = 0; i < g.dims[0]; ++i)
      for (int j = 0; j < g.dims[1]; ++j, ++p)
        fn(p, i, j, 0);
  } else {
    int64_t p = 0;
    for (int i = 0; i < g.dims[0]; ++i)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int k = 0; k < g.dims[2]; ++k, ++p)
          fn(p, i, j, k);
  }
}

} // namespace

Volume interpolate(const Volume &vol, const std::vector<float> &coords) {
  const Grid &g = vol.grid;
  const int nd = g.ndim();
  const int64_t n = g.numel();
  if (static_cast<int64_t>(coords.size()) != nd * n)
    throw std::invalid_argument("interpolate: coords size does not match D x prod(dims)");
  for (float c : coords)
    if (!std::isfinite(c))
      throw std::invalid_argument("interpolate: non-finite coordinate");

  int64_t strides[3];
  row_major_strides(g.dims.data(), nd, strides);
  Volume out(g, vol.channels);
  for (int c = 0; c < vol.channels; ++c) {
    const float *chan = vol.channel(c);
    float *dst = out.channel(c);
    for (int64_t p = 0; p < n; ++p) {
      float q[3];
      for (int d = 0; d < nd; ++d)
        q[d] = coords[d * n + p];
      dst[p] = interp_channel(chan, g.dims.data(), strides, nd, q);
    }
  }
  return out;
}

Volume warp(const Volume &vol, const VectorField &u) {
  check_same_grid(vol.grid, u.grid, "warp");
  if (u.kind != FieldKind::displacement)
    throw std::invalid_argument("warp: field must be a displacement");
  const Grid &g = vol.grid;
  const int nd = g.ndim();
  const int64_t n = g.numel();
  int64_t strides[3];
  row_major_strides(g.dims.data(), nd, strides);

  Volume out(g, vol.channels);
  for (int c = 0; c < vol.channels; ++c) {
    const float *chan = vol.channel(c);
    float *dst = out.channel(c);
    for_each_voxel(g, [&](int64_t p, int i, int j, int k) {
      float q[3] = {static_cast<float>(i) + u.at(0, p), static_cast<float>(j) + u.at(1, p), 0.0f};
      if (nd == 3)
        q[2] = static_cast<float>(k) + u.at(2, p);
      dst[p] = interp_channel(chan, g.dims.data(), strides, nd, q);
    });
  }
  return out;
}

VectorField compose(const VectorField &u_outer, const VectorField &u_inner) {
  check_same_grid(u_outer.grid, u_inner.grid, "compose");
  if (u_outer.kind != FieldKind::displacement || u_inner.kind != FieldKind::displacement)
    throw std::invalid_argument("compose: both fields must be displacements");
  const Grid &g = u_outer.grid;
  const int nd = g.ndim();
  int64_t strides[3];
  row_major_strides(g.dims.data(), nd, strides);

  VectorField out(g, FieldKind::displacement);
  for_each_voxel(g, [&](int64_t p, int i, int j, int k) {
    float q[3] = {static_cast<float>(i) + u_inner.at(0, p), static_cast<float>(j) + u_inner.at(1, p), 0.0f};
    if (nd == 3)
      q[2] = static_cast<float>(k) + u_inner.at(2, p);
    for (int d = 0; d < nd; ++d)
      out.at(d, p) = u_inner.at(d, p) + interp_channel(u_outer.component(d), g.dims.data(), strides, nd, q);
  });
  return out;
}

VectorField integrate_velocity(const VectorField &v, int steps) {
  if (v.kind != FieldKind::velocity)
    throw std::invalid_argument("integrate_velocity: field must be a velocity");
  if (steps < 1)
    throw std::invalid_argument("integrate_velocity: steps must be >= 1");
  VectorField u(v.grid, FieldKind::displacement);
  const float s = std::ldexp(1.0f, -steps); // 1 / 2^steps
  for (size_t i = 0; i < v.data.size(); ++i)
    u.data[i] = v.data[i] * s;
  for (int k = 0; k < steps; ++k)
    u = compose(u, u);
  return u;
}

VectorField invert_velocity(const VectorField &v, int steps) {
  VectorField neg(v.grid, FieldKind::velocity);
  for (size_t i = 0; i < v.data.size(); ++i)
    neg.data[i] = -v.data[i];
  return integrate_velocity(neg, steps);
}

namespace {

// Shared stencil: forward difference, backward at the last index.
void gradient_channel(const float *src, float *dst_base, const Grid &g) {
  const int nd = g.ndim();
  const int64_t n = g.numel();
  int64_t strides[3];
  row_major_strides(g.dims.data(), nd, strides);
  for_each_voxel(g, [&](int64_t p, int i, int j, int k) {
    const int idx[3] = {i, j, k};
    for (int d = 0; d < nd; ++d) {
      float diff;
      if (idx[d] < g.dims[d] - 1)
        diff = src[p + strides[d]] - src[p];
      else
        diff = src[p] - src[p - strides[d]];
      dst_base[d * n + p] = diff;
    }
  });
}

} // namespace

Volume spatial_gradient_volume(const Volume &f) {
  const int nd = f.grid.ndim();
  Volume out(f.grid, f.channels * nd);
  for (int c = 0; c < f.channels; ++c)
    gradient_channel(f.channel(c), out.channel(c * nd), f.grid);
  return out;
}

Volume spatial_gradient_field(const VectorField &f) {
  const int nd = f.grid.ndim();
  Volume out(f.grid, nd * nd);
  for (int c = 0; c < nd; ++c)
    gradient_channel(f.component(c), out.channel(c * nd), f.grid);
  return out;
}

Volume jacobian_determinant(const VectorField &u) {
  if (u.kind != FieldKind::displacement)
    throw std::invalid_argument("jacobian_determinant: field must be a displacement");
  const Grid &g = u.grid;
  const int nd = g.ndim();
  const int64_t n = g.numel();
  const Volume grad = spatial_gradient_field(u); // channel c*nd+d = du_c/dx_d
  Volume out(g, 1);
  if (nd == 2) {
    for (int64_t p = 0; p < n; ++p) {
      const float a = 1.0f + grad.at(0, p), b = grad.at(1, p);
      const float c = grad.at(2, p), d = 1.0f + grad.at(3, p);
      out.data[p] = a * d - b * c;
    }
  } else {
    for (int64_t p = 0; p < n; ++p) {
      const float a = 1.0f + grad.at(0, p), b = grad.at(1, p), c = grad.at(2, p);
      const float d = grad.at(3, p), e = 1.0f + grad.at(4, p), f = grad.at(5, p);
      const float gg = grad.at(6, p), h = grad.at(7, p), i = 1.0f + grad.at(8, p);
      out.data[p] = a * (e * i - f * h) - b * (d * i - f * gg) + c * (d * h - e * gg);
    }
  }
  return out;
}

namespace {

// Replication-pad each axis up to an even size.
std::vector<float> pad_even(const float *src, const Grid &g, std::vector<int> &padded_dims) {
  const int nd = g.ndim();
  padded_dims = g.dims;
  bool any = false;
  for (int d = 0; d < nd; ++d)
    if (padded_dims[d] % 2) {
      padded_dims[d] += 1;
      any = true;
    }
  int64_t pn = 1;
  for (int v : padded_dims)
    pn *= v;
  std::vector<float> out(pn);
  int64_t ss[3], ps[3];
  row_major_strides(g.dims.data(), nd, ss);
  row_major_strides(padded_dims.data(), nd, ps);
  (void)any;
  if (nd == 2) {
    for (int i = 0; i < padded_dims[0]; ++i)
      for (int j = 0; j < padded_dims[1]; ++j) {
        const int si = std::min(i, g.dims[0] - 1), sj = std::min(j, g.dims[1] - 1);
        out[i * ps[0] + j] = src[si * ss[0] + sj];
      }
  } else {
    for (int i = 0; i < padded_dims[0]; ++i)
      for (int j = 0; j < padded_dims[1]; ++j)
        for (int k = 0; k < padded_dims[2]; ++k) {
          const int si = std::min(i, g.dims[0] - 1), sj = std::min(j, g.dims[1] - 1), sk = std::min(k, g.dims[2] - 1);
          out[i * ps[0] + j * ps[1] + k] = src[si * ss[0] + sj * ss[1] + sk];
        }
  }
  return out;
}

void pool_channel(const float *src, const Grid &g, float *dst, const std::vector<int> &odims, PoolKind kind) {
  const int nd = g.ndim();
  std::vector<int> pdims;
  const std::vector<float> padded = pad_even(src, g, pdims);
  int64_t ps[3], os[3];
  row_major_strides(pdims.data(), nd, ps);
  row_major_strides(odims.data(), nd, os);
  const int ncorner = 1 << nd;
  const float inv = 1.0f / static_cast<float>(ncorner);
  if (nd == 2) {
    for (int i = 0; i < odims[0]; ++i)
      for (int j = 0; j < odims[1]; ++j) {
        float acc = kind == PoolKind::max ? -std::numeric_limits<float>::infinity() : 0.0f;
        for (int m = 0; m < ncorner; ++m) {
          const float v = padded[(2 * i + ((m >> 0) & 1)) * ps[0] + (2 * j + ((m >> 1) & 1))];
          acc = kind == PoolKind::max ? std::max(acc, v) : acc + v;
        }
        dst[i * os[0] + j] = kind == PoolKind::max ? acc : acc * inv;
      }
  } else {
    for (int i = 0; i < odims[0]; ++i)
      for (int j = 0; j < odims[1]; ++j)
        for (int k = 0; k < odims[2]; ++k) {
          float acc = kind == PoolKind::max ? -std::numeric_limits<float>::infinity() : 0.0f;
          for (int m = 0; m < ncorner; ++m) {
            const int64_t off = (2 * i + ((m >> 0) & 1)) * ps[0] + (2 * j + ((m >> 1) & 1)) * ps[1] + (2 * k + ((m >> 2) & 1));
            acc = kind == PoolKind::max ? std::max(acc, padded[off]) : acc + padded[off];
          }
          dst[i * os[0] + j * os[1] + k] = kind == PoolKind::max ? acc : acc * inv;
        }
  }
}

void upsample_channel(const float *src, const Grid &g, float *dst, const std::vector<int> &odims) {
  const int nd = g.ndim();
  int64_t ss[3], os[3];
  row_major_strides(g.dims.data(), nd, ss);
  row_major_strides(odims.data(), nd, os);
  if (nd == 2) {
    for (int i = 0; i < odims[0]; ++i)
      for (int j = 0; j < odims[1]; ++j)
        dst[i * os[0] + j] = src[(i / 2) * ss[0] + (j / 2)];
  } else {
    for (int i = 0; i < odims[0]; ++i)
      for (int j = 0; j < odims[1]; ++j)
        for (int k = 0; k < odims[2]; ++k)
          dst[i * os[0] + j * os[1] + k] = src[(i / 2) * ss[0] + (j / 2) * ss[1] + (k / 2)];
  }
}

std::vector<int> half_dims(const std::vector<int> &d) {
  std::vector<int> o(d.size());
  for (size_t i = 0; i < d.size(); ++i)
    o[i] = (d[i] + 1) / 2;
  return o;
}

std::vector<int> double_dims(const std::vector<int> &d) {
  std::vector<int> o(d.size());
  for (size_t i = 0; i < d.size(); ++i)
    o[i] = d[i] * 2;
  return o;
}

} // namespace

Volume resize_down(const Volume &v, PoolKind kind) {
  const std::vector<int> od = half_dims(v.grid.dims);
  Volume out(Grid(od, v.grid.spacing), v.channels);
  for (int c = 0; c < v.channels; ++c)
    pool_channel(v.channel(c), v.grid, out.channel(c), od, kind);
  return out;
}

VectorField resize_down(const VectorField &f) {
  const std::vector<int> od = half_dims(f.grid.dims);
  VectorField out(Grid(od, f.grid.spacing), f.kind);
  for (int d = 0; d < f.grid.ndim(); ++d)
    pool_channel(f.component(d), f.grid, out.component(d), od, PoolKind::mean);
  for (float &x : out.data)
    x *= 0.5f;
  return out;
}

Volume resize_up(const Volume &v) {
  const std::vector<int> od = double_dims(v.grid.dims);
  Volume out(Grid(od, v.grid.spacing), v.channels);
  for (int c = 0; c < v.channels; ++c)
    upsample_channel(v.channel(c), v.grid, out.channel(c), od);
  return out;
}

VectorField resize_up(const VectorField &f) {
  const std::vector<int> od = double_dims(f.grid.dims);
  VectorField out(Grid(od, f.grid.spacing), f.kind);
  for (int d = 0; d < f.grid.ndim(); ++d)
    upsample_channel(f.component(d), f.grid, out.component(d), od);
  for (float &x : out.data)
    x *= 2.0f;
  return out;
}

} // namespace condatlas
