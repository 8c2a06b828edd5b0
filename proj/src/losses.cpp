#include "condatlas/losses.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace condatlas {

SegLossKind parse_seg_loss(const std::string &name) {
  if (name == "soft_dice")
    return SegLossKind::soft_dice;
  if (name == "cross_entropy")
    return SegLossKind::cross_entropy;
  throw std::invalid_argument("unknown seg loss '" + name + "'");
}

std::string seg_loss_name(SegLossKind k) {
  return k == SegLossKind::soft_dice ? "soft_dice" : "cross_entropy";
}

CentralityMode parse_centrality(const std::string &name) {
  if (name == "conditional")
    return CentralityMode::conditional;
  if (name == "lt2019")
    return CentralityMode::lt2019;
  if (name == "off")
    return CentralityMode::off;
  throw std::invalid_argument("unknown centrality mode '" + name + "'");
}

std::string centrality_name(CentralityMode m) {
  switch (m) {
  case CentralityMode::conditional:
    return "conditional";
  case CentralityMode::lt2019:
    return "lt2019";
  case CentralityMode::off:
    return "off";
  }
  throw std::logic_error("bad centrality mode");
}

std::vector<double> kde_self_density(const std::vector<double> &ages, double sigma_d) {
  if (sigma_d <= 0)
    throw std::invalid_argument("kde: sigma_d must be positive");
  const size_t n = ages.size();
  std::vector<double> q(n, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      if (i == j)
        continue;
      const double d = ages[i] - ages[j];
      q[i] += std::exp(-(d * d) / sigma_d);
    }
  return q;
}

std::vector<double> kde_weights(double anchor_age, const std::vector<double> &ages,
                                const std::vector<double> &q, double sigma_kde) {
  if (sigma_kde <= 0)
    throw std::invalid_argument("kde: sigma_kde must be positive");
  if (ages.size() != q.size())
    throw std::invalid_argument("kde: ages/density size mismatch");
  std::vector<double> w(ages.size(), 0.0);
  for (size_t i = 0; i < ages.size(); ++i) {
    const double qi = q[i] > 0 ? q[i] : 1.0; // lone subject: density floor
    const double d = anchor_age - ages[i];
    w[i] = std::exp(-(d * d) / sigma_kde) / qi;
  }
  return w;
}

CentralityState CentralityState::build(const std::vector<AttributeRecord> &records,
                                       const AttributeCodec &codec, const LossWeights &weights) {
  CentralityState st;
  st.sigma_kde = weights.sigma_kde;
  st.ages.reserve(records.size());
  st.group.reserve(records.size());

  std::map<std::string, int> group_ids;
  for (const AttributeRecord &r : records) {
    st.ages.push_back(weights.kde_raw_age ? r.age : codec.normalize_age(r.age));
    std::string key = r.sex;
    for (const std::string &e : r.extras)
      key += "|" + e;
    auto [it, inserted] = group_ids.insert({key, static_cast<int>(group_ids.size())});
    st.group.push_back(it->second);
  }

  // Self density within each categorical group only.
  st.q.assign(records.size(), 0.0);
  for (size_t i = 0; i < records.size(); ++i)
    for (size_t j = 0; j < records.size(); ++j) {
      if (i == j || st.group[i] != st.group[j])
        continue;
      const double d = st.ages[i] - st.ages[j];
      st.q[i] += std::exp(-(d * d) / weights.sigma_d);
    }
  return st;
}

std::vector<double> CentralityState::weights_for_anchor(int anchor) const {
  if (anchor < 0 || anchor >= size())
    throw std::out_of_range("centrality: anchor index out of range");
  std::vector<double> w(ages.size(), 0.0);
  for (size_t i = 0; i < ages.size(); ++i) {
    if (group[i] != group[anchor])
      continue;
    const double qi = q[i] > 0 ? q[i] : 1.0;
    const double d = ages[anchor] - ages[i];
    w[i] = std::exp(-(d * d) / sigma_kde) / qi;
  }
  return w;
}

std::vector<int> sample_without_replacement(const std::vector<double> &weights, int k,
                                            std::mt19937_64 &rng, bool *uniform_fallback) {
  const int n = static_cast<int>(weights.size());
  if (k < 0 || k > n)
    throw std::invalid_argument("sample_without_replacement: k out of range");
  if (uniform_fallback)
    *uniform_fallback = false;
  std::vector<double> w(weights);
  for (double x : w)
    if (!(x >= 0))
      throw std::invalid_argument("sample_without_replacement: negative or non-finite weight");
  std::vector<int> alive(n);
  for (int i = 0; i < n; ++i)
    alive[i] = i;
  std::vector<int> picked;
  picked.reserve(k);
  for (int draw = 0; draw < k; ++draw) {
    double total = 0;
    for (int i : alive)
      total += w[i];
    int chosen_pos = -1;
    if (total <= 0) {
      if (uniform_fallback)
        *uniform_fallback = true;
      std::uniform_int_distribution<int> d(0, static_cast<int>(alive.size()) - 1);
      chosen_pos = d(rng);
    } else {
      std::uniform_real_distribution<double> d(0.0, total);
      double u = d(rng);
      chosen_pos = static_cast<int>(alive.size()) - 1;
      for (size_t p = 0; p < alive.size(); ++p) {
        u -= w[alive[p]];
        if (u <= 0) {
          chosen_pos = static_cast<int>(p);
          break;
        }
      }
    }
    picked.push_back(alive[chosen_pos]);
    alive.erase(alive.begin() + chosen_pos);
  }
  return picked;
}

namespace {

Shape vshape(int channels, const std::vector<int> &dims) {
  Shape s{channels};
  for (int d : dims)
    s.push_back(d);
  return s;
}

template <typename T> std::vector<T> widen(const std::vector<float> &v) {
  return std::vector<T>(v.begin(), v.end());
}

} // namespace

template <typename T>
StepGraph<T> build_step_graph(Tape<T> &tape, const ParamStore<T> &store, BoundParams<T> &bound,
                              const ModelConfig &cfg, const LossWeights &weights,
                              const std::vector<SubjectTerm<T>> &batch) {
  if (batch.empty())
    throw std::invalid_argument("step graph: empty batch");
  const bool seg = variant_has_seg(cfg.variant);
  const bool cond = variant_conditional(cfg.variant);
  const bool central = weights.centrality != CentralityMode::off;
  const int64_t nvox = cfg.voxels();
  const Shape img_shape = vshape(1, cfg.dims);
  const Shape seg_shape = vshape(cfg.n_labels, cfg.dims);

  StepGraph<T> g;
  TemplateGraph<T> shared;
  if (!cond)
    shared = build_template_graph(tape, store, bound, cfg, {});

  int img_sum = -1, seg_sum = -1, smooth_sum = -1, ubar = -1;
  for (const SubjectTerm<T> &item : batch) {
    if (!item.image || item.image->channels != 1 || item.image->grid.dims != cfg.dims)
      throw std::invalid_argument("step graph: subject image missing or wrong shape");
    const TemplateGraph<T> tg = cond ? build_template_graph(tape, store, bound, cfg, item.attr) : shared;
    g.tmpl_intensity.push_back(tg.intensity);

    const int x = tape.leaf(img_shape, widen<T>(item.image->data), false);
    const int v = build_velocity_graph(tape, store, bound, cfg, x, tg.intensity);
    const int u = tape.integrate_velocity(v, cfg.int_steps);
    g.velocity.push_back(v);
    g.disp.push_back(u);

    const int warped_int = tape.warp(tg.intensity, u);
    const int li = tape.scale(tape.reduce_mean(tape.square(tape.sub(x, warped_int))),
                              T(weights.lambda_img / 2));
    img_sum = img_sum < 0 ? li : tape.add(img_sum, li);

    if (seg) {
      if (!item.onehot || item.onehot->channels != cfg.n_labels || item.onehot->grid.dims != cfg.dims)
        throw std::invalid_argument("step graph: subject labels missing or wrong shape");
      const int s = tape.leaf(seg_shape, widen<T>(item.onehot->data), false);
      const int w = tape.warp(tg.seg_prob, u);
      int ls;
      if (weights.seg_loss == SegLossKind::soft_dice) {
        const int num = tape.scale(tape.channel_sum(tape.mul(s, w)), T(2));
        const int den = tape.affine(tape.add(tape.channel_sum(s), tape.channel_sum(w)), T(1), T(1e-5));
        ls = tape.scale(tape.reduce_mean(tape.div(num, den)), T(-weights.lambda_seg));
      } else {
        const int lw = tape.log(tape.affine(w, T(1), T(1e-8)));
        ls = tape.scale(tape.reduce_sum(tape.mul(s, lw)), T(-weights.lambda_seg / double(nvox)));
      }
      seg_sum = seg_sum < 0 ? ls : tape.add(seg_sum, ls);
    }

    const int du = tape.spatial_gradient(u);
    const int lsm = tape.scale(tape.reduce_sum(tape.square(du)),
                               T(weights.lambda_smooth / (2.0 * double(nvox))));
    smooth_sum = smooth_sum < 0 ? lsm : tape.add(smooth_sum, lsm);

    if (central) {
      const int wu = tape.scale(u, item.weight);
      ubar = ubar < 0 ? wu : tape.add(ubar, wu);
    }
  }

  g.img = img_sum;
  g.seg = seg_sum;
  g.smooth = smooth_sum;
  int total = tape.add(img_sum, smooth_sum);
  if (seg_sum >= 0)
    total = tape.add(total, seg_sum);
  if (central) {
    g.central = tape.scale(tape.reduce_sum(tape.square(ubar)), T(weights.lambda_central / double(nvox)));
    total = tape.add(total, g.central);
  }
  g.total = total;
  return g;
}

template StepGraph<float> build_step_graph<float>(Tape<float> &, const ParamStore<float> &,
                                                  BoundParams<float> &, const ModelConfig &,
                                                  const LossWeights &, const std::vector<SubjectTerm<float>> &);
template StepGraph<double> build_step_graph<double>(Tape<double> &, const ParamStore<double> &,
                                                    BoundParams<double> &, const ModelConfig &,
                                                    const LossWeights &, const std::vector<SubjectTerm<double>> &);

} // namespace condatlas
