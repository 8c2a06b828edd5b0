#include "condatlas/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "condatlas/interp.hpp"
#include "condatlas/simd.hpp"

namespace condatlas {

int64_t shape_numel(const Shape &s) {
  int64_t n = 1;
  for (int v : s) {
    if (v <= 0)
      throw std::invalid_argument("shape has non-positive extent");
    n *= v;
  }
  return n;
}

bool shape_equal(const Shape &a, const Shape &b) { return a == b; }

std::string shape_str(const Shape &s) {
  std::ostringstream os;
  os << "{";
  for (size_t i = 0; i < s.size(); ++i)
    os << (i ? "," : "") << s[i];
  os << "}";
  return os.str();
}

namespace {

// Spatial geometry of a {C, d0, d1[, d2]} tensor.
struct Sp {
  int channels;
  int nd;
  int d[3];
  int64_t strides[3];
  int64_t n; // spatial numel
};

Sp spatial_of(const Shape &s, const char *op) {
  if (s.size() < 3 || s.size() > 4)
    throw std::invalid_argument(std::string(op) + ": expected {C, spatial...} tensor, got " + shape_str(s));
  Sp sp;
  sp.channels = s[0];
  sp.nd = static_cast<int>(s.size()) - 1;
  sp.n = 1;
  for (int d = 0; d < sp.nd; ++d) {
    sp.d[d] = s[d + 1];
    sp.n *= s[d + 1];
  }
  row_major_strides(sp.d, sp.nd, sp.strides);
  return sp;
}

void require(bool cond, const char *op, const std::string &msg) {
  if (!cond)
    throw std::invalid_argument(std::string(op) + ": " + msg);
}

// Zero-pads each spatial axis by one voxel on both sides.
template <typename T>
void pad1(const T *src, T *dst, const Sp &sp) {
  if (sp.nd == 2) {
    const int pd1 = sp.d[1] + 2;
    std::memset(dst, 0, sizeof(T) * (sp.d[0] + 2) * pd1);
    for (int i = 0; i < sp.d[0]; ++i)
      std::memcpy(dst + (i + 1) * pd1 + 1, src + i * sp.d[1], sizeof(T) * sp.d[1]);
  } else {
    const int pd1 = sp.d[1] + 2, pd2 = sp.d[2] + 2;
    std::memset(dst, 0, sizeof(T) * (sp.d[0] + 2) * pd1 * pd2);
    for (int i = 0; i < sp.d[0]; ++i)
      for (int j = 0; j < sp.d[1]; ++j)
        std::memcpy(dst + ((i + 1) * pd1 + (j + 1)) * pd2 + 1, src + (i * sp.d[1] + j) * sp.d[2], sizeof(T) * sp.d[2]);
  }
}

} // namespace

template <typename T> int Tape<T>::push(Node &&n) {
  for (int p : n.parents)
    if (nodes_[p].requires_grad)
      n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T> void Tape<T>::check_id(int id, const char *op) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument(std::string(op) + ": bad node id");
}

template <typename T> T *Tape<T>::grad_buf(int id) {
  Node &n = nodes_[id];
  if (n.adjoint.empty())
    n.adjoint.assign(n.value.size(), T(0));
  return n.adjoint.data();
}

template <typename T> T Tape<T>::scalar(int id) const {
  check_id(id, "scalar");
  if (nodes_[id].value.size() != 1)
    throw std::invalid_argument("scalar: node is not {1}");
  return nodes_[id].value[0];
}

template <typename T> int Tape<T>::leaf(const Shape &shape, const T *data, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  Node node;
  node.shape = shape;
  node.value.assign(data, data + n);
  node.requires_grad = requires_grad;
  return push(std::move(node));
}

template <typename T> int Tape<T>::leaf(const Shape &shape, const std::vector<T> &data, bool requires_grad) {
  require(static_cast<int64_t>(data.size()) == shape_numel(shape), "leaf", "data size mismatch");
  return leaf(shape, data.data(), requires_grad);
}

template <typename T> int Tape<T>::constant_fill(const Shape &shape, T fill) {
  Node node;
  node.shape = shape;
  node.value.assign(shape_numel(shape), fill);
  return push(std::move(node));
}

// ---- elementwise ----

template <typename T> int Tape<T>::add(int a, int b) {
  check_id(a, "add");
  check_id(b, "add");
  require(shape_equal(nodes_[a].shape, nodes_[b].shape), "add", "shape mismatch " + shape_str(nodes_[a].shape) + " vs " + shape_str(nodes_[b].shape));
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = nodes_[a].value[i] + nodes_[b].value[i];
  node.parents = {a, b};
  const int self = size();
  node.backward = [a, b, self](Tape &t) {
    const std::vector<T> &g = t.nodes_[self].adjoint;
    if (t.nodes_[a].requires_grad) {
      T *ga = t.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i];
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      for (size_t i = 0; i < g.size(); ++i)
        gb[i] += g[i];
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::sub(int a, int b) {
  check_id(a, "sub");
  check_id(b, "sub");
  require(shape_equal(nodes_[a].shape, nodes_[b].shape), "sub", "shape mismatch");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = nodes_[a].value[i] - nodes_[b].value[i];
  node.parents = {a, b};
  const int self = size();
  node.backward = [a, b, self](Tape &t) {
    const std::vector<T> &g = t.nodes_[self].adjoint;
    if (t.nodes_[a].requires_grad) {
      T *ga = t.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i];
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      for (size_t i = 0; i < g.size(); ++i)
        gb[i] -= g[i];
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::mul(int a, int b) {
  check_id(a, "mul");
  check_id(b, "mul");
  require(shape_equal(nodes_[a].shape, nodes_[b].shape), "mul", "shape mismatch");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = nodes_[a].value[i] * nodes_[b].value[i];
  node.parents = {a, b};
  const int self = size();
  node.backward = [a, b, self](Tape &t) {
    const std::vector<T> &g = t.nodes_[self].adjoint;
    if (t.nodes_[a].requires_grad) {
      T *ga = t.grad_buf(a);
      const std::vector<T> &vb = t.nodes_[b].value;
      for (size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * vb[i];
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      const std::vector<T> &va = t.nodes_[a].value;
      for (size_t i = 0; i < g.size(); ++i)
        gb[i] += g[i] * va[i];
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::div(int a, int b) {
  check_id(a, "div");
  check_id(b, "div");
  require(shape_equal(nodes_[a].shape, nodes_[b].shape), "div", "shape mismatch");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = nodes_[a].value[i] / nodes_[b].value[i];
  node.parents = {a, b};
  const int self = size();
  node.backward = [a, b, self](Tape &t) {
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const std::vector<T> &y = t.nodes_[self].value;
    const std::vector<T> &vb = t.nodes_[b].value;
    if (t.nodes_[a].requires_grad) {
      T *ga = t.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] / vb[i];
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      for (size_t i = 0; i < g.size(); ++i)
        gb[i] -= g[i] * y[i] / vb[i];
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::scale(int a, T alpha) { return affine(a, alpha, T(0)); }

template <typename T> int Tape<T>::affine(int a, T alpha, T beta) {
  check_id(a, "affine");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = alpha * nodes_[a].value[i] + beta;
  node.parents = {a};
  const int self = size();
  node.backward = [a, alpha, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    T *ga = t.grad_buf(a);
    for (size_t i = 0; i < g.size(); ++i)
      ga[i] += alpha * g[i];
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::square(int a) {
  check_id(a, "square");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = nodes_[a].value[i] * nodes_[a].value[i];
  node.parents = {a};
  const int self = size();
  node.backward = [a, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const std::vector<T> &va = t.nodes_[a].value;
    T *ga = t.grad_buf(a);
    for (size_t i = 0; i < g.size(); ++i)
      ga[i] += T(2) * va[i] * g[i];
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::log(int a) {
  check_id(a, "log");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = std::log(nodes_[a].value[i]);
  node.parents = {a};
  const int self = size();
  node.backward = [a, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const std::vector<T> &va = t.nodes_[a].value;
    T *ga = t.grad_buf(a);
    for (size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i] / va[i];
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::relu(int a) {
  check_id(a, "relu");
  Node node;
  node.shape = nodes_[a].shape;
  const size_t n = nodes_[a].value.size();
  node.value.resize(n);
  for (size_t i = 0; i < n; ++i)
    node.value[i] = nodes_[a].value[i] > T(0) ? nodes_[a].value[i] : T(0);
  node.parents = {a};
  const int self = size();
  node.backward = [a, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const std::vector<T> &va = t.nodes_[a].value;
    T *ga = t.grad_buf(a);
    for (size_t i = 0; i < g.size(); ++i)
      ga[i] += va[i] > T(0) ? g[i] : T(0);
  };
  return push(std::move(node));
}

// ---- reductions ----

template <typename T> int Tape<T>::reduce_sum(int a) {
  check_id(a, "reduce_sum");
  Node node;
  node.shape = {1};
  T acc = 0;
  for (T v : nodes_[a].value)
    acc += v;
  node.value = {acc};
  node.parents = {a};
  const int self = size();
  node.backward = [a, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const T g = t.nodes_[self].adjoint[0];
    T *ga = t.grad_buf(a);
    const size_t n = t.nodes_[a].value.size();
    for (size_t i = 0; i < n; ++i)
      ga[i] += g;
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::reduce_mean(int a) {
  check_id(a, "reduce_mean");
  const T inv = T(1) / static_cast<T>(nodes_[a].value.size());
  return scale(reduce_sum(a), inv);
}

template <typename T> int Tape<T>::channel_sum(int a) {
  check_id(a, "channel_sum");
  const Sp sp = spatial_of(nodes_[a].shape, "channel_sum");
  Node node;
  node.shape = {sp.channels};
  node.value.resize(sp.channels);
  for (int c = 0; c < sp.channels; ++c) {
    T acc = 0;
    const T *src = nodes_[a].value.data() + c * sp.n;
    for (int64_t i = 0; i < sp.n; ++i)
      acc += src[i];
    node.value[c] = acc;
  }
  node.parents = {a};
  const int self = size();
  const int64_t n = sp.n;
  const int channels = sp.channels;
  node.backward = [a, self, n, channels](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    T *ga = t.grad_buf(a);
    for (int c = 0; c < channels; ++c) {
      const T gc = g[c];
      T *dst = ga + c * n;
      for (int64_t i = 0; i < n; ++i)
        dst[i] += gc;
    }
  };
  return push(std::move(node));
}

// ---- structure ----

template <typename T> int Tape<T>::reshape(int a, const Shape &shape) {
  check_id(a, "reshape");
  require(shape_numel(shape) == static_cast<int64_t>(nodes_[a].value.size()), "reshape", "numel mismatch");
  Node node;
  node.shape = shape;
  node.value = nodes_[a].value;
  node.parents = {a};
  const int self = size();
  node.backward = [a, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    T *ga = t.grad_buf(a);
    for (size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i];
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::concat_channels(int a, int b) {
  check_id(a, "concat_channels");
  check_id(b, "concat_channels");
  const Sp sa = spatial_of(nodes_[a].shape, "concat_channels");
  const Sp sb = spatial_of(nodes_[b].shape, "concat_channels");
  require(sa.nd == sb.nd && sa.n == sb.n && std::equal(sa.d, sa.d + sa.nd, sb.d), "concat_channels", "spatial mismatch");
  Node node;
  node.shape = nodes_[a].shape;
  node.shape[0] = sa.channels + sb.channels;
  node.value.resize(shape_numel(node.shape));
  std::memcpy(node.value.data(), nodes_[a].value.data(), sizeof(T) * nodes_[a].value.size());
  std::memcpy(node.value.data() + nodes_[a].value.size(), nodes_[b].value.data(), sizeof(T) * nodes_[b].value.size());
  node.parents = {a, b};
  const int self = size();
  node.backward = [a, b, self](Tape &t) {
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const size_t na = t.nodes_[a].value.size();
    if (t.nodes_[a].requires_grad) {
      T *ga = t.grad_buf(a);
      for (size_t i = 0; i < na; ++i)
        ga[i] += g[i];
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      const size_t nb = t.nodes_[b].value.size();
      for (size_t i = 0; i < nb; ++i)
        gb[i] += g[na + i];
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::softmax_channels(int a) {
  check_id(a, "softmax_channels");
  const Sp sp = spatial_of(nodes_[a].shape, "softmax_channels");
  Node node;
  node.shape = nodes_[a].shape;
  node.value.resize(nodes_[a].value.size());
  const T *x = nodes_[a].value.data();
  T *y = node.value.data();
  for (int64_t p = 0; p < sp.n; ++p) {
    T m = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < sp.channels; ++c)
      m = std::max(m, x[c * sp.n + p]);
    T denom = 0;
    for (int c = 0; c < sp.channels; ++c) {
      const T e = std::exp(x[c * sp.n + p] - m);
      y[c * sp.n + p] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (int c = 0; c < sp.channels; ++c)
      y[c * sp.n + p] *= inv;
  }
  node.parents = {a};
  const int self = size();
  const int64_t n = sp.n;
  const int channels = sp.channels;
  node.backward = [a, self, n, channels](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const std::vector<T> &y = t.nodes_[self].value;
    T *ga = t.grad_buf(a);
    for (int64_t p = 0; p < n; ++p) {
      T dot = 0;
      for (int c = 0; c < channels; ++c)
        dot += g[c * n + p] * y[c * n + p];
      for (int c = 0; c < channels; ++c)
        ga[c * n + p] += y[c * n + p] * (g[c * n + p] - dot);
    }
  };
  return push(std::move(node));
}

// ---- layers ----

template <typename T> int Tape<T>::dense(int x, int w, int b) {
  check_id(x, "dense");
  check_id(w, "dense");
  check_id(b, "dense");
  const Shape &xs = nodes_[x].shape, &ws = nodes_[w].shape, &bs = nodes_[b].shape;
  require(xs.size() == 1 && ws.size() == 2 && bs.size() == 1, "dense", "expects x {in}, w {out,in}, b {out}");
  require(ws[1] == xs[0] && ws[0] == bs[0], "dense", "dimension mismatch");
  const int out = ws[0], in = ws[1];
  Node node;
  node.shape = {out};
  node.value.resize(out);
  const T *xv = nodes_[x].value.data();
  const T *wv = nodes_[w].value.data();
  for (int o = 0; o < out; ++o) {
    T acc = nodes_[b].value[o];
    const T *row = wv + static_cast<int64_t>(o) * in;
    for (int i = 0; i < in; ++i)
      acc += row[i] * xv[i];
    node.value[o] = acc;
  }
  node.parents = {x, w, b};
  const int self = size();
  node.backward = [x, w, b, out, in, self](Tape &t) {
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const T *xv = t.nodes_[x].value.data();
    const T *wv = t.nodes_[w].value.data();
    if (t.nodes_[x].requires_grad) {
      T *gx = t.grad_buf(x);
      for (int o = 0; o < out; ++o) {
        const T go = g[o];
        const T *row = wv + static_cast<int64_t>(o) * in;
        for (int i = 0; i < in; ++i)
          gx[i] += go * row[i];
      }
    }
    if (t.nodes_[w].requires_grad) {
      T *gw = t.grad_buf(w);
      for (int o = 0; o < out; ++o) {
        const T go = g[o];
        T *row = gw + static_cast<int64_t>(o) * in;
        for (int i = 0; i < in; ++i)
          row[i] += go * xv[i];
      }
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      for (int o = 0; o < out; ++o)
        gb[o] += g[o];
    }
  };
  return push(std::move(node));
}

namespace {

// Forward/adjoint kernels for the 3^D same convolution, written against a
// zero-padded copy of the input so tap loops have no boundary branches.
template <typename T>
void conv_forward(const T *xpad, const T *w, const T *bias, T *y, const Sp &sp, int cin, int cout) {
  if (sp.nd == 2) {
    const int d0 = sp.d[0], d1 = sp.d[1], pd1 = d1 + 2;
    const int64_t plane = static_cast<int64_t>(d0 + 2) * pd1;
    for (int co = 0; co < cout; ++co) {
      T *dst = y + co * sp.n;
      std::fill(dst, dst + sp.n, bias[co]);
      for (int ci = 0; ci < cin; ++ci) {
        const T *xp = xpad + ci * plane;
        const T *wk = w + (static_cast<int64_t>(co) * cin + ci) * 9;
        for (int a = 0; a < 3; ++a)
          for (int bb = 0; bb < 3; ++bb) {
            const T coef = wk[a * 3 + bb];
            if (coef == T(0))
              continue;
            for (int i = 0; i < d0; ++i) {
              const T *src = xp + (i + a) * pd1 + bb;
              T *row = dst + static_cast<int64_t>(i) * d1;
              for (int j = 0; j < d1; ++j)
                row[j] += coef * src[j];
            }
          }
      }
    }
  } else {
    const int d0 = sp.d[0], d1 = sp.d[1], d2 = sp.d[2], pd1 = d1 + 2, pd2 = d2 + 2;
    const int64_t plane = static_cast<int64_t>(d0 + 2) * pd1 * pd2;
    for (int co = 0; co < cout; ++co) {
      T *dst = y + co * sp.n;
      std::fill(dst, dst + sp.n, bias[co]);
      for (int ci = 0; ci < cin; ++ci) {
        const T *xp = xpad + ci * plane;
        const T *wk = w + (static_cast<int64_t>(co) * cin + ci) * 27;
        for (int a = 0; a < 3; ++a)
          for (int bb = 0; bb < 3; ++bb)
            for (int cc = 0; cc < 3; ++cc) {
              const T coef = wk[(a * 3 + bb) * 3 + cc];
              if (coef == T(0))
                continue;
              for (int i = 0; i < d0; ++i)
                for (int j = 0; j < d1; ++j) {
                  const T *src = xp + ((i + a) * pd1 + (j + bb)) * pd2 + cc;
                  T *row = dst + (static_cast<int64_t>(i) * d1 + j) * d2;
                  for (int k = 0; k < d2; ++k)
                    row[k] += coef * src[k];
                }
            }
      }
    }
  }
}

template <typename T>
void conv_backward_dx(const T *g, const T *w, T *gx, const Sp &sp, int cin, int cout, std::vector<T> &scratch) {
  if (sp.nd == 2) {
    const int d0 = sp.d[0], d1 = sp.d[1], pd1 = d1 + 2;
    const int64_t plane = static_cast<int64_t>(d0 + 2) * pd1;
    scratch.assign(plane, T(0));
    for (int ci = 0; ci < cin; ++ci) {
      std::fill(scratch.begin(), scratch.end(), T(0));
      for (int co = 0; co < cout; ++co) {
        const T *gc = g + co * sp.n;
        const T *wk = w + (static_cast<int64_t>(co) * cin + ci) * 9;
        for (int a = 0; a < 3; ++a)
          for (int bb = 0; bb < 3; ++bb) {
            const T coef = wk[a * 3 + bb];
            if (coef == T(0))
              continue;
            for (int i = 0; i < d0; ++i) {
              T *dst = scratch.data() + (i + a) * pd1 + bb;
              const T *row = gc + static_cast<int64_t>(i) * d1;
              for (int j = 0; j < d1; ++j)
                dst[j] += coef * row[j];
            }
          }
      }
      T *out = gx + ci * sp.n;
      for (int i = 0; i < d0; ++i) {
        const T *src = scratch.data() + (i + 1) * pd1 + 1;
        T *row = out + static_cast<int64_t>(i) * d1;
        for (int j = 0; j < d1; ++j)
          row[j] += src[j];
      }
    }
  } else {
    const int d0 = sp.d[0], d1 = sp.d[1], d2 = sp.d[2], pd1 = d1 + 2, pd2 = d2 + 2;
    const int64_t plane = static_cast<int64_t>(d0 + 2) * pd1 * pd2;
    scratch.assign(plane, T(0));
    for (int ci = 0; ci < cin; ++ci) {
      std::fill(scratch.begin(), scratch.end(), T(0));
      for (int co = 0; co < cout; ++co) {
        const T *gc = g + co * sp.n;
        const T *wk = w + (static_cast<int64_t>(co) * cin + ci) * 27;
        for (int a = 0; a < 3; ++a)
          for (int bb = 0; bb < 3; ++bb)
            for (int cc = 0; cc < 3; ++cc) {
              const T coef = wk[(a * 3 + bb) * 3 + cc];
              if (coef == T(0))
                continue;
              for (int i = 0; i < d0; ++i)
                for (int j = 0; j < d1; ++j) {
                  T *dst = scratch.data() + ((i + a) * pd1 + (j + bb)) * pd2 + cc;
                  const T *row = gc + (static_cast<int64_t>(i) * d1 + j) * d2;
                  for (int k = 0; k < d2; ++k)
                    dst[k] += coef * row[k];
                }
            }
      }
      T *out = gx + ci * sp.n;
      for (int i = 0; i < d0; ++i)
        for (int j = 0; j < d1; ++j) {
          const T *src = scratch.data() + ((i + 1) * pd1 + (j + 1)) * pd2 + 1;
          T *row = out + (static_cast<int64_t>(i) * d1 + j) * d2;
          for (int k = 0; k < d2; ++k)
            row[k] += src[k];
        }
    }
  }
}

template <typename T>
void conv_backward_dw(const T *g, const T *xpad, T *gw, const Sp &sp, int cin, int cout) {
  if (sp.nd == 2) {
    const int d0 = sp.d[0], d1 = sp.d[1], pd1 = d1 + 2;
    const int64_t plane = static_cast<int64_t>(d0 + 2) * pd1;
    for (int co = 0; co < cout; ++co) {
      const T *gc = g + co * sp.n;
      for (int ci = 0; ci < cin; ++ci) {
        const T *xp = xpad + ci * plane;
        T *wk = gw + (static_cast<int64_t>(co) * cin + ci) * 9;
        for (int a = 0; a < 3; ++a)
          for (int bb = 0; bb < 3; ++bb) {
            T acc = 0;
            for (int i = 0; i < d0; ++i)
              acc += simd_dot(xp + (i + a) * pd1 + bb, gc + static_cast<int64_t>(i) * d1, d1);
            wk[a * 3 + bb] += acc;
          }
      }
    }
  } else {
    const int d0 = sp.d[0], d1 = sp.d[1], d2 = sp.d[2], pd1 = d1 + 2, pd2 = d2 + 2;
    const int64_t plane = static_cast<int64_t>(d0 + 2) * pd1 * pd2;
    for (int co = 0; co < cout; ++co) {
      const T *gc = g + co * sp.n;
      for (int ci = 0; ci < cin; ++ci) {
        const T *xp = xpad + ci * plane;
        T *wk = gw + (static_cast<int64_t>(co) * cin + ci) * 27;
        for (int a = 0; a < 3; ++a)
          for (int bb = 0; bb < 3; ++bb)
            for (int cc = 0; cc < 3; ++cc) {
              T acc = 0;
              for (int i = 0; i < d0; ++i)
                for (int j = 0; j < d1; ++j)
                  acc += simd_dot(xp + ((i + a) * pd1 + (j + bb)) * pd2 + cc, gc + (static_cast<int64_t>(i) * d1 + j) * d2, d2);
              wk[(a * 3 + bb) * 3 + cc] += acc;
            }
      }
    }
  }
}

inline int64_t padded_numel(const Sp &sp) {
  int64_t n = 1;
  for (int d = 0; d < sp.nd; ++d)
    n *= sp.d[d] + 2;
  return n;
}

} // namespace

template <typename T> int Tape<T>::conv3(int x, int w, int b) {
  check_id(x, "conv3");
  check_id(w, "conv3");
  check_id(b, "conv3");
  const Sp sp = spatial_of(nodes_[x].shape, "conv3");
  const Shape &ws = nodes_[w].shape, &bs = nodes_[b].shape;
  require(static_cast<int>(ws.size()) == 2 + sp.nd, "conv3", "weight rank mismatch");
  require(ws[1] == sp.channels, "conv3", "weight Cin mismatch");
  for (int d = 0; d < sp.nd; ++d)
    require(ws[2 + d] == 3, "conv3", "kernel extent must be 3");
  require(bs.size() == 1 && bs[0] == ws[0], "conv3", "bias mismatch");
  const int cin = sp.channels, cout = ws[0];

  std::vector<T> xpad(static_cast<int64_t>(cin) * padded_numel(sp));
  {
    const int64_t plane = padded_numel(sp);
    for (int ci = 0; ci < cin; ++ci)
      pad1(nodes_[x].value.data() + ci * sp.n, xpad.data() + ci * plane, sp);
  }
  Node node;
  node.shape = nodes_[x].shape;
  node.shape[0] = cout;
  node.value.resize(cout * sp.n);
  conv_forward(xpad.data(), nodes_[w].value.data(), nodes_[b].value.data(), node.value.data(), sp, cin, cout);
  node.parents = {x, w, b};
  const int self = size();
  node.backward = [x, w, b, sp, cin, cout, self](Tape &t) {
    const T *g = t.nodes_[self].adjoint.data();
    if (t.nodes_[x].requires_grad) {
      std::vector<T> scratch;
      conv_backward_dx(g, t.nodes_[w].value.data(), t.grad_buf(x), sp, cin, cout, scratch);
    }
    if (t.nodes_[w].requires_grad) {
      std::vector<T> xpad(static_cast<int64_t>(cin) * padded_numel(sp));
      const int64_t plane = padded_numel(sp);
      for (int ci = 0; ci < cin; ++ci)
        pad1(t.nodes_[x].value.data() + ci * sp.n, xpad.data() + ci * plane, sp);
      conv_backward_dw(g, xpad.data(), t.grad_buf(w), sp, cin, cout);
    }
    if (t.nodes_[b].requires_grad) {
      T *gb = t.grad_buf(b);
      for (int co = 0; co < cout; ++co) {
        T acc = 0;
        const T *gc = g + co * sp.n;
        for (int64_t i = 0; i < sp.n; ++i)
          acc += gc[i];
        gb[co] += acc;
      }
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::max_pool2(int a) {
  check_id(a, "max_pool2");
  const Sp sp = spatial_of(nodes_[a].shape, "max_pool2");
  for (int d = 0; d < sp.nd; ++d)
    require(sp.d[d] % 2 == 0, "max_pool2", "spatial dims must be even");
  Shape os = nodes_[a].shape;
  for (int d = 0; d < sp.nd; ++d)
    os[1 + d] = sp.d[d] / 2;
  const Sp osp = spatial_of(os, "max_pool2");
  Node node;
  node.shape = os;
  node.value.resize(shape_numel(os));
  std::vector<int64_t> arg(node.value.size());
  const T *x = nodes_[a].value.data();
  T *y = node.value.data();
  const int ncorner = 1 << sp.nd;
  for (int c = 0; c < sp.channels; ++c) {
    const int64_t ibase = c * sp.n, obase = c * osp.n;
    if (sp.nd == 2) {
      for (int i = 0; i < osp.d[0]; ++i)
        for (int j = 0; j < osp.d[1]; ++j) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t bi = -1;
          for (int m = 0; m < ncorner; ++m) {
            const int64_t idx = ibase + static_cast<int64_t>(2 * i + (m >> 1)) * sp.strides[0] + (2 * j + (m & 1));
            if (x[idx] > best) {
              best = x[idx];
              bi = idx;
            }
          }
          const int64_t o = obase + static_cast<int64_t>(i) * osp.strides[0] + j;
          y[o] = best;
          arg[o] = bi;
        }
    } else {
      for (int i = 0; i < osp.d[0]; ++i)
        for (int j = 0; j < osp.d[1]; ++j)
          for (int k = 0; k < osp.d[2]; ++k) {
            T best = -std::numeric_limits<T>::infinity();
            int64_t bi = -1;
            for (int m = 0; m < ncorner; ++m) {
              const int64_t idx = ibase + static_cast<int64_t>(2 * i + (m >> 2)) * sp.strides[0] + static_cast<int64_t>(2 * j + ((m >> 1) & 1)) * sp.strides[1] + (2 * k + (m & 1));
              if (x[idx] > best) {
                best = x[idx];
                bi = idx;
              }
            }
            const int64_t o = obase + static_cast<int64_t>(i) * osp.strides[0] + static_cast<int64_t>(j) * osp.strides[1] + k;
            y[o] = best;
            arg[o] = bi;
          }
    }
  }
  node.parents = {a};
  const int self = size();
  node.backward = [a, self, arg = std::move(arg)](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    T *ga = t.grad_buf(a);
    for (size_t i = 0; i < g.size(); ++i)
      ga[arg[i]] += g[i];
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::nearest_upsample2(int a) {
  check_id(a, "nearest_upsample2");
  const Sp sp = spatial_of(nodes_[a].shape, "nearest_upsample2");
  Shape os = nodes_[a].shape;
  for (int d = 0; d < sp.nd; ++d)
    os[1 + d] = sp.d[d] * 2;
  const Sp osp = spatial_of(os, "nearest_upsample2");
  Node node;
  node.shape = os;
  node.value.resize(shape_numel(os));
  const T *x = nodes_[a].value.data();
  T *y = node.value.data();
  for (int c = 0; c < sp.channels; ++c) {
    const int64_t ibase = c * sp.n, obase = c * osp.n;
    if (sp.nd == 2) {
      for (int i = 0; i < osp.d[0]; ++i)
        for (int j = 0; j < osp.d[1]; ++j)
          y[obase + static_cast<int64_t>(i) * osp.strides[0] + j] = x[ibase + static_cast<int64_t>(i / 2) * sp.strides[0] + j / 2];
    } else {
      for (int i = 0; i < osp.d[0]; ++i)
        for (int j = 0; j < osp.d[1]; ++j)
          for (int k = 0; k < osp.d[2]; ++k)
            y[obase + static_cast<int64_t>(i) * osp.strides[0] + static_cast<int64_t>(j) * osp.strides[1] + k] = x[ibase + static_cast<int64_t>(i / 2) * sp.strides[0] + static_cast<int64_t>(j / 2) * sp.strides[1] + k / 2];
    }
  }
  node.parents = {a};
  const int self = size();
  node.backward = [a, self, sp, osp](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    T *ga = t.grad_buf(a);
    for (int c = 0; c < sp.channels; ++c) {
      const int64_t ibase = c * sp.n, obase = c * osp.n;
      if (sp.nd == 2) {
        for (int i = 0; i < osp.d[0]; ++i)
          for (int j = 0; j < osp.d[1]; ++j)
            ga[ibase + static_cast<int64_t>(i / 2) * sp.strides[0] + j / 2] += g[obase + static_cast<int64_t>(i) * osp.strides[0] + j];
      } else {
        for (int i = 0; i < osp.d[0]; ++i)
          for (int j = 0; j < osp.d[1]; ++j)
            for (int k = 0; k < osp.d[2]; ++k)
              ga[ibase + static_cast<int64_t>(i / 2) * sp.strides[0] + static_cast<int64_t>(j / 2) * sp.strides[1] + k / 2] += g[obase + static_cast<int64_t>(i) * osp.strides[0] + static_cast<int64_t>(j) * osp.strides[1] + k];
      }
    }
  };
  return push(std::move(node));
}

// ---- geometry ----

template <typename T> int Tape<T>::warp(int vol, int disp) {
  check_id(vol, "warp");
  check_id(disp, "warp");
  const Sp sv = spatial_of(nodes_[vol].shape, "warp");
  const Sp sd = spatial_of(nodes_[disp].shape, "warp");
  require(sv.nd == sd.nd && sv.n == sd.n && std::equal(sv.d, sv.d + sv.nd, sd.d), "warp", "spatial mismatch");
  require(sd.channels == sd.nd, "warp", "displacement must have D channels");
  const int nd = sv.nd;

  Node node;
  node.shape = nodes_[vol].shape;
  node.value.resize(nodes_[vol].value.size());
  const T *xv = nodes_[vol].value.data();
  const T *dv = nodes_[disp].value.data();
  T *y = node.value.data();
  {
    int idx[3] = {0, 0, 0};
    for (int64_t p = 0; p < sv.n; ++p) {
      T q[3];
      for (int d = 0; d < nd; ++d)
        q[d] = static_cast<T>(idx[d]) + dv[d * sv.n + p];
      for (int c = 0; c < sv.channels; ++c)
        y[c * sv.n + p] = interp_channel<T, T>(xv + c * sv.n, sv.d, sv.strides, nd, q);
      for (int d = nd - 1; d >= 0; --d) {
        if (++idx[d] < sv.d[d])
          break;
        idx[d] = 0;
      }
    }
  }
  node.parents = {vol, disp};
  const int self = size();
  node.backward = [vol, disp, sv, nd, self](Tape &t) {
    const bool want_vol = t.nodes_[vol].requires_grad;
    const bool want_disp = t.nodes_[disp].requires_grad;
    if (!want_vol && !want_disp)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    const T *xv = t.nodes_[vol].value.data();
    const T *dv = t.nodes_[disp].value.data();
    T *gv = want_vol ? t.grad_buf(vol) : nullptr;
    T *gd = want_disp ? t.grad_buf(disp) : nullptr;
    int idx[3] = {0, 0, 0};
    for (int64_t p = 0; p < sv.n; ++p) {
      AxisSample<T> ax[3];
      for (int d = 0; d < nd; ++d) {
        const T q = static_cast<T>(idx[d]) + dv[d * sv.n + p];
        ax[d] = axis_sample(q, sv.d[d]);
      }
      const int ncorner = 1 << nd;
      for (int m = 0; m < ncorner; ++m) {
        // corner weight and its derivative w.r.t. each coordinate
        T wgt = 1;
        int64_t off = 0;
        for (int d = 0; d < nd; ++d) {
          const int hi = (m >> d) & 1;
          wgt *= hi ? ax[d].t : T(1) - ax[d].t;
          off += static_cast<int64_t>(ax[d].i0 + hi) * sv.strides[d];
        }
        for (int c = 0; c < sv.channels; ++c) {
          const T gc = g[c * sv.n + p];
          if (gc == T(0))
            continue;
          const T src = xv[c * sv.n + off];
          if (want_vol)
            gv[c * sv.n + off] += gc * wgt;
          if (want_disp) {
            for (int d = 0; d < nd; ++d) {
              if (ax[d].clamped)
                continue;
              T dw = (m >> d) & 1 ? T(1) : T(-1);
              for (int e = 0; e < nd; ++e) {
                if (e == d)
                  continue;
                dw *= (m >> e) & 1 ? ax[e].t : T(1) - ax[e].t;
              }
              gd[d * sv.n + p] += gc * dw * src;
            }
          }
        }
      }
      for (int d = nd - 1; d >= 0; --d) {
        if (++idx[d] < sv.d[d])
          break;
        idx[d] = 0;
      }
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::spatial_gradient(int a) {
  check_id(a, "spatial_gradient");
  const Sp sp = spatial_of(nodes_[a].shape, "spatial_gradient");
  const int nd = sp.nd;
  Shape os = nodes_[a].shape;
  os[0] = sp.channels * nd;
  Node node;
  node.shape = os;
  node.value.resize(shape_numel(os));
  const T *x = nodes_[a].value.data();
  T *y = node.value.data();
  {
    int idx[3] = {0, 0, 0};
    for (int64_t p = 0; p < sp.n; ++p) {
      for (int d = 0; d < nd; ++d) {
        const bool last = idx[d] == sp.d[d] - 1;
        const int64_t s = sp.strides[d];
        for (int c = 0; c < sp.channels; ++c) {
          const T *xc = x + c * sp.n;
          y[(c * nd + d) * sp.n + p] = last ? xc[p] - xc[p - s] : xc[p + s] - xc[p];
        }
      }
      for (int d = nd - 1; d >= 0; --d) {
        if (++idx[d] < sp.d[d])
          break;
        idx[d] = 0;
      }
    }
  }
  node.parents = {a};
  const int self = size();
  node.backward = [a, sp, nd, self](Tape &t) {
    if (!t.nodes_[a].requires_grad)
      return;
    const std::vector<T> &g = t.nodes_[self].adjoint;
    T *ga = t.grad_buf(a);
    int idx[3] = {0, 0, 0};
    for (int64_t p = 0; p < sp.n; ++p) {
      for (int d = 0; d < nd; ++d) {
        const bool last = idx[d] == sp.d[d] - 1;
        const int64_t s = sp.strides[d];
        for (int c = 0; c < sp.channels; ++c) {
          const T gv = g[(c * nd + d) * sp.n + p];
          T *gc = ga + c * sp.n;
          if (last) {
            gc[p] += gv;
            gc[p - s] -= gv;
          } else {
            gc[p + s] += gv;
            gc[p] -= gv;
          }
        }
      }
      for (int d = nd - 1; d >= 0; --d) {
        if (++idx[d] < sp.d[d])
          break;
        idx[d] = 0;
      }
    }
  };
  return push(std::move(node));
}

template <typename T> int Tape<T>::compose_disp(int outer, int inner) {
  // (outer o inner)(x) = inner(x) + outer(x + inner(x))
  return add(inner, warp(outer, inner));
}

template <typename T> int Tape<T>::integrate_velocity(int v, int steps) {
  check_id(v, "integrate_velocity");
  require(steps >= 1, "integrate_velocity", "steps must be >= 1");
  const Sp sp = spatial_of(nodes_[v].shape, "integrate_velocity");
  require(sp.channels == sp.nd, "integrate_velocity", "velocity must have D channels");
  int u = scale(v, static_cast<T>(std::ldexp(1.0, -steps)));
  for (int k = 0; k < steps; ++k)
    u = compose_disp(u, u);
  return u;
}

// ---- backward ----

template <typename T> void Tape<T>::backward(int root) {
  check_id(root, "backward");
  require(nodes_[root].value.size() == 1, "backward", "root must be a scalar");
  backward({{root, {T(1)}}});
}

template <typename T> void Tape<T>::backward(const std::vector<std::pair<int, std::vector<T>>> &seeds) {
  if (backward_done_)
    throw std::logic_error("backward: tape already consumed; build a fresh tape");
  backward_done_ = true;
  int maxid = -1;
  for (const auto &[id, seed] : seeds) {
    check_id(id, "backward");
    require(seed.size() == nodes_[id].value.size(), "backward", "seed size mismatch");
    T *g = grad_buf(id);
    for (size_t i = 0; i < seed.size(); ++i)
      g[i] += seed[i];
    maxid = std::max(maxid, id);
  }
  for (int id = maxid; id >= 0; --id) {
    Node &n = nodes_[id];
    if (n.backward && n.requires_grad && !n.adjoint.empty())
      n.backward(*this);
  }
}

template class Tape<float>;
template class Tape<double>;

} // namespace condatlas
