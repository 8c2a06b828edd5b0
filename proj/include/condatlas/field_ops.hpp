#ifndef CONDATLAS_FIELD_OPS_HPP
#define CONDATLAS_FIELD_OPS_HPP

#include "condatlas/grid.hpp"

namespace condatlas {

// Non-learned dense field operations. All of these are pure functions of
// their inputs and safe to call concurrently on shared read-only data.

// Multilinear interpolation of each channel at continuous voxel coordinates.
// `coords` holds D components of size prod(dims), same layout as a field.
// Out-of-grid coordinates are clamped to the boundary face.
Volume interpolate(const Volume &vol, const std::vector<float> &coords);

// output(x) = vol(x + u(x)), clamp-to-edge sampling.
Volume warp(const Volume &vol, const VectorField &u);

// Displacement of the composed map (Id+u_outer) o (Id+u_inner):
// u(x) = u_inner(x) + u_outer(x + u_inner(x)).
VectorField compose(const VectorField &u_outer, const VectorField &u_inner);

// Scaling and squaring: u_0 = v / 2^steps, then u <- compose(u, u) applied
// `steps` times. Returns the displacement of exp(v).
VectorField integrate_velocity(const VectorField &v, int steps = 7);

// integrate_velocity(-v, steps): displacement of the inverse map.
VectorField invert_velocity(const VectorField &v, int steps = 7);

// Forward differences along each axis, backward difference at the last
// index. Output channel (c, axis) is stored at index c * D + axis.
Volume spatial_gradient_volume(const Volume &f);
Volume spatial_gradient_field(const VectorField &f);

// det(I + du/dx) per voxel using the spatial_gradient stencils.
Volume jacobian_determinant(const VectorField &u);

enum class PoolKind { max, mean };

// Factor-2 downsample. Odd dims are padded by replication first.
// Mean pooling of a vector field additionally halves the vectors.
Volume resize_down(const Volume &v, PoolKind kind);
VectorField resize_down(const VectorField &f);

// Factor-2 nearest-neighbor upsample; field vectors are doubled.
Volume resize_up(const Volume &v);
VectorField resize_up(const VectorField &f);

} // namespace condatlas

#endif
