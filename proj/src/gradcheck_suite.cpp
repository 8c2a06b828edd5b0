#include "condatlas/gradcheck_suite.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "condatlas/losses.hpp"
#include "condatlas/models.hpp"
#include "condatlas/optim.hpp"
#include "condatlas/tape.hpp"
#include "condatlas/util.hpp"

namespace condatlas {

namespace {

using T = double;
using Build = std::function<int(Tape<T> &, const ParamStore<T> &, BoundParams<T> &)>;

std::vector<T> randn(std::mt19937_64 &rng, int64_t n, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<T> v(n);
  for (auto &x : v)
    x = d(rng);
  return v;
}

// Normal values pushed away from zero; keeps relu/div/max kinks and
// denominators a safe distance from the finite-difference step.
std::vector<T> randn_away(std::mt19937_64 &rng, int64_t n, double stddev, double min_abs) {
  std::vector<T> v = randn(rng, n, stddev);
  for (auto &x : v)
    if (std::abs(x) < min_abs)
      x = x < 0 ? x - min_abs : x + min_abs;
  return v;
}

// Displacement entries with fractional parts well inside a cell, so no
// sample coordinate sits near an interpolation kink.
std::vector<T> rand_disp(std::mt19937_64 &rng, int64_t n) {
  std::uniform_real_distribution<double> mag(0.25, 0.45);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(n);
  for (auto &x : v)
    x = (sign(rng) ? 1.0 : -1.0) * mag(rng);
  return v;
}

} // namespace

std::vector<GradcheckRow> run_gradcheck_suite(double h, double threshold, uint64_t seed) {
  std::vector<GradcheckRow> rows;
  auto run_case_h = [&](const std::string &name, ParamStore<T> &store, const Build &build, double hc) {
    const GradCheckReport rep = grad_check<T>(build, store, T(hc), 32, threshold, mix_seed(seed, rows.size()));
    rows.push_back({name, rep.max_rel_err, rep.pass});
  };
  auto run_case = [&](const std::string &name, ParamStore<T> &store, const Build &build) {
    run_case_h(name, store, build, h);
  };
  std::mt19937_64 rng = make_rng(seed, 0x47434b53ULL);

  const Shape vol{2, 8, 8};
  const int64_t nv = shape_numel(vol);

  // Weighted-sum root so every output element gets a distinct cotangent.
  auto sum_with = [](Tape<T> &tape, int out, const std::vector<T> &cot) {
    const int c = tape.leaf(tape.shape(out), cot, false);
    return tape.reduce_sum(tape.mul(out, c));
  };

  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    st.add("b", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("add", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.add(b.bind(t, s, "a"), b.bind(t, s, "b")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    st.add("b", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("sub", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.sub(b.bind(t, s, "a"), b.bind(t, s, "b")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    st.add("b", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("mul", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.mul(b.bind(t, s, "a"), b.bind(t, s, "b")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    st.add("b", vol, randn_away(rng, nv, 1.0, 0.5));
    const auto cot = randn(rng, nv, 1.0);
    run_case("div", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.div(b.bind(t, s, "a"), b.bind(t, s, "b")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("scale", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.scale(b.bind(t, s, "a"), T(1.7)), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("affine", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.affine(b.bind(t, s, "a"), T(-0.8), T(0.45)), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("square", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.square(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    std::vector<T> pos = randn(rng, nv, 1.0);
    for (auto &x : pos)
      x = std::abs(x) + 0.5;
    st.add("a", vol, pos);
    const auto cot = randn(rng, nv, 1.0);
    run_case("log", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.log(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn_away(rng, nv, 1.0, 0.3));
    const auto cot = randn(rng, nv, 1.0);
    run_case("relu", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.relu(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    run_case("reduce_sum", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return t.scale(t.reduce_sum(b.bind(t, s, "a")), T(1.3));
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    run_case("reduce_mean", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return t.scale(t.reduce_mean(b.bind(t, s, "a")), T(-2.1));
    });
  }
  {
    const Shape sh{3, 6, 6};
    ParamStore<T> st;
    st.add("a", sh, randn(rng, shape_numel(sh), 1.0));
    const auto cot = randn(rng, 3, 1.0);
    run_case("channel_sum", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.channel_sum(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("reshape", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.reshape(b.bind(t, s, "a"), Shape{4, 4, 8}), cot);
    });
  }
  {
    const Shape sa{2, 6, 6}, sb{3, 6, 6};
    ParamStore<T> st;
    st.add("a", sa, randn(rng, shape_numel(sa), 1.0));
    st.add("b", sb, randn(rng, shape_numel(sb), 1.0));
    const auto cot = randn(rng, shape_numel(sa) + shape_numel(sb), 1.0);
    run_case("concat_channels", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.concat_channels(b.bind(t, s, "a"), b.bind(t, s, "b")), cot);
    });
  }
  {
    const Shape sh{3, 6, 6};
    ParamStore<T> st;
    st.add("a", sh, randn(rng, shape_numel(sh), 1.0));
    const auto cot = randn(rng, shape_numel(sh), 1.0);
    run_case("softmax_channels", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.softmax_channels(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("x", Shape{5}, randn(rng, 5, 1.0));
    st.add("w", Shape{4, 5}, randn(rng, 20, 1.0));
    st.add("b", Shape{4}, randn(rng, 4, 1.0));
    const auto cot = randn(rng, 4, 1.0);
    run_case("dense", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.dense(b.bind(t, s, "x"), b.bind(t, s, "w"), b.bind(t, s, "b")), cot);
    });
  }
  {
    const Shape sx{3, 8, 8}, sw{4, 3, 3, 3}, sb{4}, so{4, 8, 8};
    ParamStore<T> st;
    st.add("x", sx, randn(rng, shape_numel(sx), 1.0));
    st.add("w", sw, randn(rng, shape_numel(sw), 0.5));
    st.add("b", sb, randn(rng, 4, 0.5));
    const auto cot = randn(rng, shape_numel(so), 1.0);
    run_case("conv3_2d", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.conv3(b.bind(t, s, "x"), b.bind(t, s, "w"), b.bind(t, s, "b")), cot);
    });
  }
  {
    const Shape sx{2, 4, 4, 4}, sw{3, 2, 3, 3, 3}, sb{3}, so{3, 4, 4, 4};
    ParamStore<T> st;
    st.add("x", sx, randn(rng, shape_numel(sx), 1.0));
    st.add("w", sw, randn(rng, shape_numel(sw), 0.4));
    st.add("b", sb, randn(rng, 3, 0.5));
    const auto cot = randn(rng, shape_numel(so), 1.0);
    run_case("conv3_3d", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.conv3(b.bind(t, s, "x"), b.bind(t, s, "w"), b.bind(t, s, "b")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("a", vol, randn(rng, nv, 2.0));
    const auto cot = randn(rng, shape_numel(Shape{2, 4, 4}), 1.0);
    run_case("max_pool2", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.max_pool2(b.bind(t, s, "a")), cot);
    });
  }
  {
    const Shape sh{2, 4, 4};
    ParamStore<T> st;
    st.add("a", sh, randn(rng, shape_numel(sh), 1.0));
    const auto cot = randn(rng, nv, 1.0);
    run_case("nearest_upsample2", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.nearest_upsample2(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("vol", vol, randn(rng, nv, 1.0));
    st.add("disp", vol, rand_disp(rng, nv));
    const auto cot = randn(rng, nv, 1.0);
    run_case("warp_2d", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.warp(b.bind(t, s, "vol"), b.bind(t, s, "disp")), cot);
    });
  }
  {
    const Shape sv{2, 4, 4, 4}, sd{3, 4, 4, 4};
    ParamStore<T> st;
    st.add("vol", sv, randn(rng, shape_numel(sv), 1.0));
    st.add("disp", sd, rand_disp(rng, shape_numel(sd)));
    const auto cot = randn(rng, shape_numel(sv), 1.0);
    run_case("warp_3d", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.warp(b.bind(t, s, "vol"), b.bind(t, s, "disp")), cot);
    });
  }
  {
    const Shape sh{2, 6, 6};
    ParamStore<T> st;
    st.add("a", sh, randn(rng, shape_numel(sh), 1.0));
    const auto cot = randn(rng, shape_numel(Shape{4, 6, 6}), 1.0);
    run_case("spatial_gradient", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.spatial_gradient(b.bind(t, s, "a")), cot);
    });
  }
  {
    ParamStore<T> st;
    st.add("outer", vol, rand_disp(rng, nv));
    st.add("inner", vol, rand_disp(rng, nv));
    const auto cot = randn(rng, nv, 1.0);
    run_case("compose_disp", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.compose_disp(b.bind(t, s, "outer"), b.bind(t, s, "inner")), cot);
    });
  }
  {
    ParamStore<T> st;
    std::uniform_real_distribution<double> mag(0.3, 0.8);
    std::bernoulli_distribution sign(0.5);
    std::vector<T> v(nv);
    for (auto &x : v)
      x = (sign(rng) ? 1.0 : -1.0) * mag(rng);
    st.add("v", vol, v);
    const auto cot = randn(rng, nv, 1.0);
    run_case("integrate_velocity", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return sum_with(t, t.integrate_velocity(b.bind(t, s, "v"), 4), cot);
    });
  }

  // Full four-term training loss on a 16x16, three-label instance.
  {
    ModelConfig cfg;
    cfg.dims = {16, 16};
    cfg.n_labels = 3;
    cfg.variant = Variant::cond;
    cfg.attr_dim = 3;
    cfg.int_steps = 7;
    cfg.head_init_std = 0.05;
    ParamStore<T> st;
    register_model_params(st, cfg, mix_seed(seed, 0xF17));
    // Push every warp sample point well off the voxel lattice and make the
    // template nonconstant so image and label terms have real structure.
    {
      std::vector<T> fb = {0.35, -0.3};
      st.named("unet.flow.b").value = fb;
      st.named("tdec.int_head.b").value = {0.1};
      auto &bv = st.named("tdec.bias_vol").value;
      bv = randn(rng, static_cast<int64_t>(bv.size()), 0.3);
    }

    const Grid grid(cfg.dims);
    const int64_t nvox = grid.numel();
    std::vector<Volume> images;
    std::vector<Volume> onehots;
    std::vector<std::vector<T>> attrs = {{0.4, 1.0, 0.0}, {-0.7, 0.0, 1.0}};
    std::mt19937_64 drng = make_rng(seed, 0xDA7AULL);
    std::normal_distribution<double> nimg(0.4, 0.35);
    std::uniform_int_distribution<int> lab(0, cfg.n_labels - 1);
    for (int k = 0; k < 2; ++k) {
      Volume img(grid, 1);
      for (auto &x : img.data)
        x = static_cast<float>(nimg(drng));
      images.push_back(img);
      LabelMap lm(grid);
      for (auto &l : lm.labels)
        l = lab(drng);
      onehots.push_back(one_hot(lm, cfg.n_labels));
    }
    LossWeights lw;
    lw.centrality = CentralityMode::conditional;
    std::vector<SubjectTerm<T>> items(2);
    for (int k = 0; k < 2; ++k) {
      items[k].image = &images[k];
      items[k].onehot = &onehots[k];
      items[k].attr = attrs[k];
      items[k].weight = k == 0 ? T(0.6) : T(0.4);
    }
    // A bias probe shifts thousands of relu pre-activations at once, so the
    // step must be small enough that no probe crosses a kink; h itself is
    // fine for the isolated per-op cases above.
    run_case_h("full_loss", st, [&](Tape<T> &t, const ParamStore<T> &s, BoundParams<T> &b) {
      return build_step_graph(t, s, b, cfg, lw, items).total;
    }, h * 0.1);
  }

  return rows;
}

} // namespace condatlas
