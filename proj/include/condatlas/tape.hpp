#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace condatlas {

// Tensor shape. Volumes use {C, d0, d1[, d2]}; vectors use {n}.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape &s);
bool shape_equal(const Shape &a, const Shape &b);
std::string shape_str(const Shape &s);

// Eager reverse-mode tape. Ops compute values immediately and record a
// backward closure; backward() runs one reverse sweep in creation order, so
// each tape instance supports exactly one backward pass.
template <typename T> class Tape {
public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> adjoint; // allocated on first accumulation
    std::vector<int> parents;
    bool requires_grad = false;
    std::function<void(Tape &)> backward;
  };

  // Leaves.
  int leaf(const Shape &shape, const T *data, bool requires_grad);
  int leaf(const Shape &shape, const std::vector<T> &data, bool requires_grad);
  int constant_fill(const Shape &shape, T fill);

  // Elementwise; operands must share a shape.
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int scale(int a, T alpha);
  int affine(int a, T alpha, T beta); // alpha * x + beta
  int square(int a);
  int log(int a);
  int relu(int a); // gradient at exactly 0 is 0

  // Reductions.
  int reduce_sum(int a);  // -> {1}
  int reduce_mean(int a); // -> {1}
  int channel_sum(int a); // {C, spatial...} -> {C}

  // Structure.
  int reshape(int a, const Shape &shape);
  int concat_channels(int a, int b);
  int softmax_channels(int a); // softmax over axis 0 at each spatial index

  // Layers.
  int dense(int x, int w, int b); // x {in}, w {out, in}, b {out} -> {out}
  int conv3(int x, int w, int b); // x {Cin, sp}, w {Cout, Cin, 3^D}, b {Cout}; zero-pad same
  int max_pool2(int a);           // even spatial dims; ties pick lowest linear index
  int nearest_upsample2(int a);

  // Geometry. Volumes are {C, sp}, displacement/velocity tensors {D, sp},
  // coordinates in voxel units with clamp-to-edge sampling.
  int warp(int vol, int disp);
  int spatial_gradient(int a); // {C, sp} -> {C*D, sp}, channel c*D+axis

  // Composite: scaling and squaring, u0 = v / 2^steps then u <- u o u.
  int compose_disp(int outer, int inner);
  int integrate_velocity(int v, int steps);

  const Shape &shape(int id) const { return nodes_[id].shape; }
  const std::vector<T> &value(int id) const { return nodes_[id].value; }
  // Adjoint after backward(); empty if the node never received gradient.
  const std::vector<T> &adjoint(int id) const { return nodes_[id].adjoint; }
  T scalar(int id) const;

  void backward(int root); // root must be {1}; seeds with 1
  void backward(const std::vector<std::pair<int, std::vector<T>>> &seeds);

  int size() const { return static_cast<int>(nodes_.size()); }
  Node &node(int id) { return nodes_[id]; }

  // Accumulation buffer for a parent's adjoint, allocated zeroed on demand.
  T *grad_buf(int id);

private:
  int push(Node &&n);
  void check_id(int id, const char *op) const;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

} // namespace condatlas
