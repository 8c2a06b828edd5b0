#include "condatlas/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "condatlas/field_ops.hpp"
#include "condatlas/interp.hpp"
#include "condatlas/reportio.hpp"
#include "condatlas/util.hpp"

namespace condatlas {

namespace {

constexpr double qnan = std::numeric_limits<double>::quiet_NaN();

void check_vocab(const LabelMap &lm, int n_labels, const char *who) {
  for (int32_t l : lm.labels)
    if (l < 0 || l >= n_labels)
      throw std::invalid_argument(std::string(who) + ": label " + std::to_string(l) +
                                  " outside [0, " + std::to_string(n_labels) + ")");
}

double mean_of_defined(const std::vector<double> &v) {
  double sum = 0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  return n ? sum / n : qnan;
}

struct Stat {
  double mean = 0, ci = 0;
};

Stat mean_ci(const std::vector<double> &v) {
  Stat s;
  if (v.empty())
    return s;
  double sum = 0;
  for (double x : v)
    sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() < 2)
    return s;
  double ss = 0;
  for (double x : v)
    ss += (x - s.mean) * (x - s.mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  s.ci = 1.96 * sd / std::sqrt(static_cast<double>(v.size()));
  return s;
}

} // namespace

DiceResult dice(const LabelMap &pred, const LabelMap &gt, int n_labels) {
  if (pred.grid != gt.grid)
    throw std::invalid_argument("dice: grids differ");
  check_vocab(pred, n_labels, "dice(pred)");
  check_vocab(gt, n_labels, "dice(gt)");

  std::vector<int64_t> np(n_labels, 0), ng(n_labels, 0), ni(n_labels, 0);
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const int32_t a = pred.labels[i], b = gt.labels[i];
    np[a]++;
    ng[b]++;
    if (a == b)
      ni[a]++;
  }
  DiceResult r;
  r.per_label.assign(n_labels, qnan);
  for (int c = 1; c < n_labels; ++c) {
    if (np[c] + ng[c] == 0)
      continue;
    r.per_label[c] = 2.0 * static_cast<double>(ni[c]) / static_cast<double>(np[c] + ng[c]);
  }
  r.mean = mean_of_defined(r.per_label);
  return r;
}

namespace {

// Boundary voxel coordinates of one label, world units.
std::vector<std::array<double, 3>> boundary_points(const LabelMap &lm, int label) {
  const std::vector<int> &dims = lm.grid.dims;
  const int nd = lm.grid.ndim();
  int64_t strides[3];
  row_major_strides(dims.data(), nd, strides);
  std::vector<double> sp(nd, 1.0);
  for (int a = 0; a < nd && a < static_cast<int>(lm.grid.spacing.size()); ++a)
    sp[a] = lm.grid.spacing[a];

  std::vector<std::array<double, 3>> pts;
  int idx[3] = {0, 0, 0};
  const int64_t n = lm.grid.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (lm.labels[i] == label) {
      bool boundary = false;
      for (int a = 0; a < nd && !boundary; ++a) {
        if (idx[a] > 0 && lm.labels[i - strides[a]] != label)
          boundary = true;
        if (idx[a] < dims[a] - 1 && lm.labels[i + strides[a]] != label)
          boundary = true;
      }
      if (boundary) {
        std::array<double, 3> p = {0, 0, 0};
        for (int a = 0; a < nd; ++a)
          p[a] = idx[a] * sp[a];
        pts.push_back(p);
      }
    }
    for (int a = nd - 1; a >= 0; --a) {
      if (++idx[a] < dims[a])
        break;
      idx[a] = 0;
    }
  }
  return pts;
}

double directed_mean_distance(const std::vector<std::array<double, 3>> &from,
                              const std::vector<std::array<double, 3>> &to) {
  double total = 0;
  for (const auto &p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto &q : to) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(from.size());
}

} // namespace

SurfaceDistanceResult surface_distance(const LabelMap &pred, const LabelMap &gt, int n_labels) {
  if (pred.grid != gt.grid)
    throw std::invalid_argument("surface_distance: grids differ");
  check_vocab(pred, n_labels, "surface_distance(pred)");
  check_vocab(gt, n_labels, "surface_distance(gt)");

  SurfaceDistanceResult r;
  r.per_label.assign(n_labels, qnan);
  for (int c = 1; c < n_labels; ++c) {
    const auto bp = boundary_points(pred, c);
    const auto bg = boundary_points(gt, c);
    if (bp.empty() || bg.empty()) {
      r.any_skipped = true;
      continue;
    }
    r.per_label[c] = 0.5 * (directed_mean_distance(bp, bg) + directed_mean_distance(bg, bp));
  }
  r.mean = mean_of_defined(r.per_label);
  return r;
}

RegularityResult regularity(const VectorField &u) {
  const Volume det = jacobian_determinant(u);
  const std::vector<int> &dims = u.grid.dims;
  const int nd = u.grid.ndim();
  int64_t strides[3];
  row_major_strides(dims.data(), nd, strides);

  RegularityResult r;
  int64_t interior = 0, neg = 0;
  int idx[3] = {0, 0, 0};
  const int64_t n = u.grid.numel();
  for (int64_t i = 0; i < n; ++i) {
    bool inside = true;
    for (int a = 0; a < nd; ++a)
      if (idx[a] >= dims[a] - 1)
        inside = false;
    if (inside) {
      ++interior;
      if (det.data[i] <= 0)
        ++neg;
    }
    for (int a = nd - 1; a >= 0; --a) {
      if (++idx[a] < dims[a])
        break;
      idx[a] = 0;
    }
  }
  r.neg_jac_fraction = interior ? static_cast<double>(neg) / static_cast<double>(interior) : 0.0;

  const Volume g = spatial_gradient_field(u);
  double ss_total = 0;
  for (int64_t i = 0; i < n; ++i) {
    double ss = 0;
    for (int c = 0; c < g.channels; ++c) {
      const double x = g.at(c, i);
      ss += x * x;
    }
    ss_total += std::sqrt(ss);
  }
  r.mean_grad_norm = ss_total / static_cast<double>(n);
  return r;
}

RegistrationOutput register_and_segment(const ParamStore<float> &store, const ModelConfig &cfg,
                                        const AttributeCodec &codec, const Volume &image,
                                        const AttributeRecord &attr, const Volume *seg_override) {
  const TemplateResult tmpl = decode_template(store, cfg, codec, attr, image.grid);
  const Volume *seg = seg_override;
  if (!seg) {
    if (!tmpl.has_seg)
      throw std::invalid_argument("register_and_segment: variant has no template labels; pass an override");
    seg = &tmpl.seg_prob;
  }
  if (seg->grid.dims != cfg.dims)
    throw std::invalid_argument("register_and_segment: label override grid mismatch");

  RegistrationOutput out;
  out.velocity = predict_velocity(store, cfg, image, tmpl.intensity);
  out.disp = integrate_velocity(out.velocity, cfg.int_steps);
  out.pred = argmax_labels(warp(*seg, out.disp));
  return out;
}

Volume posthoc_template_labels(const ParamStore<float> &store, const ModelConfig &cfg,
                               const AttributeCodec &codec,
                               const std::vector<const Subject *> &train_subjects, int n_labels) {
  if (train_subjects.empty())
    throw std::invalid_argument("posthoc_template_labels: empty training set");
  Volume acc;
  for (const Subject *s : train_subjects) {
    const TemplateResult tmpl = decode_template(store, cfg, codec, s->attr, s->image.grid);
    const VectorField v = predict_velocity(store, cfg, s->image, tmpl.intensity);
    const VectorField inv = invert_velocity(v, cfg.int_steps);
    const Volume warped = warp(one_hot(s->seg, n_labels), inv);
    if (acc.data.empty())
      acc = warped;
    else
      for (size_t i = 0; i < acc.data.size(); ++i)
        acc.data[i] += warped.data[i];
  }
  const float inv_n = 1.0f / static_cast<float>(train_subjects.size());
  for (float &x : acc.data)
    x *= inv_n;

  const int64_t nvox = acc.spatial_numel();
  for (int64_t i = 0; i < nvox; ++i) {
    float sum = 0;
    for (int c = 0; c < acc.channels; ++c)
      sum += acc.at(c, i);
    if (sum > 1e-12f)
      for (int c = 0; c < acc.channels; ++c)
        acc.at(c, i) /= sum;
    else
      acc.at(0, i) = 1.0f; // no mass anywhere: call it background
  }
  return acc;
}

MetricReport evaluate_subjects(const ParamStore<float> &store, const ModelConfig &cfg,
                               const AttributeCodec &codec,
                               const std::vector<const Subject *> &subjects, int n_labels,
                               const Volume *seg_override) {
  MetricReport rep;
  rep.subjects.resize(subjects.size());
  parallel_for(static_cast<int64_t>(subjects.size()), worker_threads(), [&](int64_t i) {
    const Subject *s = subjects[i];
    const RegistrationOutput ro = register_and_segment(store, cfg, codec, s->image, s->attr, seg_override);
    const DiceResult d = dice(ro.pred, s->seg, n_labels);
    const SurfaceDistanceResult sd = surface_distance(ro.pred, s->seg, n_labels);
    const RegularityResult rg = regularity(ro.disp);

    SubjectMetrics &m = rep.subjects[i];
    m.id = s->id;
    m.dice_per_label = d.per_label;
    m.dice_mean = d.mean;
    m.surface_dist = sd.mean;
    m.neg_jac_fraction = rg.neg_jac_fraction;
    m.mean_grad_norm = rg.mean_grad_norm;
  });
  std::vector<double> dices, surfs, negs, grads;
  for (const SubjectMetrics &m : rep.subjects) {
    if (std::isfinite(m.dice_mean))
      dices.push_back(m.dice_mean);
    if (std::isfinite(m.surface_dist))
      surfs.push_back(m.surface_dist);
    negs.push_back(m.neg_jac_fraction);
    grads.push_back(m.mean_grad_norm);
  }
  const Stat sd_ = mean_ci(dices), ss = mean_ci(surfs), sn = mean_ci(negs), sg = mean_ci(grads);
  rep.dice_mean = sd_.mean;
  rep.dice_ci = sd_.ci;
  rep.surface_mean = ss.mean;
  rep.surface_ci = ss.ci;
  rep.neg_jac_mean = sn.mean;
  rep.neg_jac_ci = sn.ci;
  rep.grad_norm_mean = sg.mean;
  rep.grad_norm_ci = sg.ci;
  return rep;
}

void write_metrics_csv(const MetricReport &report, int n_labels, const std::string &path) {
  std::string out = csv_row({"subject", "label", "dice", "surface_dist", "neg_jac_fraction", "mean_grad_norm"});
  for (const SubjectMetrics &m : report.subjects) {
    for (int c = 1; c < n_labels; ++c) {
      const double dc = c < static_cast<int>(m.dice_per_label.size()) ? m.dice_per_label[c] : qnan;
      out += csv_row({m.id, std::to_string(c), std::isfinite(dc) ? format_double(dc) : "",
                      "", "", ""});
    }
    out += csv_row({m.id, "mean", format_double(m.dice_mean), format_double(m.surface_dist),
                    format_double(m.neg_jac_fraction), format_double(m.mean_grad_norm)});
  }
  out += csv_row({"aggregate", "mean", format_double(report.dice_mean), format_double(report.surface_mean),
                  format_double(report.neg_jac_mean), format_double(report.grad_norm_mean)});
  out += csv_row({"aggregate", "ci95", format_double(report.dice_ci), format_double(report.surface_ci),
                  format_double(report.neg_jac_ci), format_double(report.grad_norm_ci)});
  write_text_file(path, out);
}

std::vector<double> nw_kde(const std::vector<double> &query_ages, const std::vector<double> &ages,
                           const std::vector<double> &values, double bandwidth) {
  if (ages.size() != values.size())
    throw std::invalid_argument("nw_kde: ages/values size mismatch");
  if (bandwidth <= 0)
    throw std::invalid_argument("nw_kde: bandwidth must be positive");
  std::vector<double> out(query_ages.size(), qnan);
  for (size_t qi = 0; qi < query_ages.size(); ++qi) {
    double num = 0, den = 0;
    for (size_t i = 0; i < ages.size(); ++i) {
      const double d = (query_ages[qi] - ages[i]) / bandwidth;
      const double k = std::exp(-0.5 * d * d);
      num += k * values[i];
      den += k;
    }
    if (den > 0)
      out[qi] = num / den;
  }
  return out;
}

TrendReport trend_analysis(const ParamStore<float> &store, const ModelConfig &cfg,
                           const AttributeCodec &codec,
                           const std::vector<const Subject *> &population, const std::string &sex,
                           const std::vector<double> &ages, double bandwidth, const Grid &grid) {
  if (!variant_has_seg(cfg.variant))
    throw std::invalid_argument("trend_analysis: model has no template labels");
  double voxel_vol = 1.0;
  for (int a = 0; a < grid.ndim(); ++a)
    voxel_vol *= a < static_cast<int>(grid.spacing.size()) ? grid.spacing[a] : 1.0;

  std::vector<double> pop_ages;
  std::vector<std::vector<double>> pop_vols(cfg.n_labels);
  for (const Subject *s : population) {
    if (s->attr.sex != sex)
      continue;
    pop_ages.push_back(s->attr.age);
    for (int c = 0; c < cfg.n_labels; ++c)
      pop_vols[c].push_back(static_cast<double>(s->gt_volumes[c]) * voxel_vol);
  }
  if (pop_ages.empty())
    throw std::invalid_argument("trend_analysis: no subjects of sex " + sex);

  // Template label volumes at each query age.
  std::vector<std::vector<double>> tvol(cfg.n_labels, std::vector<double>(ages.size(), 0.0));
  for (size_t ai = 0; ai < ages.size(); ++ai) {
    AttributeRecord rec;
    rec.age = ages[ai];
    rec.sex = sex;
    const TemplateResult tr = decode_template(store, cfg, codec, rec, grid);
    const LabelMap hard = argmax_labels(tr.seg_prob);
    std::vector<int64_t> counts(cfg.n_labels, 0);
    for (int32_t l : hard.labels)
      counts[l]++;
    for (int c = 0; c < cfg.n_labels; ++c)
      tvol[c][ai] = static_cast<double>(counts[c]) * voxel_vol;
  }

  TrendReport rep;
  rep.sex = sex;
  rep.bandwidth = bandwidth;
  for (int c = 1; c < cfg.n_labels; ++c) {
    TrendCurve cur;
    cur.label = c;
    cur.ages = ages;
    cur.template_vol = tvol[c];
    cur.kde_vol = nw_kde(ages, pop_ages, pop_vols[c], bandwidth);
    cur.rel_err.assign(ages.size(), qnan);
    for (size_t ai = 0; ai < ages.size(); ++ai)
      if (std::isfinite(cur.kde_vol[ai]) && cur.kde_vol[ai] > 0)
        cur.rel_err[ai] = std::abs(cur.template_vol[ai] - cur.kde_vol[ai]) / cur.kde_vol[ai];
    rep.curves.push_back(std::move(cur));
  }
  return rep;
}

void write_trend_csv(const TrendReport &report, const TrendReport *lt2019, const std::string &path) {
  std::string out = csv_row({"age", "structure", "template_vol", "kde_vol", "lt2019_vol", "rel_err"});
  for (size_t ci = 0; ci < report.curves.size(); ++ci) {
    const TrendCurve &cur = report.curves[ci];
    for (size_t ai = 0; ai < cur.ages.size(); ++ai) {
      std::string lt;
      if (lt2019 && ci < lt2019->curves.size() && ai < lt2019->curves[ci].template_vol.size())
        lt = format_double(lt2019->curves[ci].template_vol[ai]);
      out += csv_row({format_double(cur.ages[ai]), phantom_label_name(cur.label),
                      format_double(cur.template_vol[ai]),
                      std::isfinite(cur.kde_vol[ai]) ? format_double(cur.kde_vol[ai]) : "", lt,
                      std::isfinite(cur.rel_err[ai]) ? format_double(cur.rel_err[ai]) : ""});
    }
  }
  write_text_file(path, out);
}

} // namespace condatlas
