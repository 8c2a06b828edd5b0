#pragma once

#include <string>
#include <vector>

#include "condatlas/grid.hpp"
#include "condatlas/models.hpp"
#include "condatlas/synthdata.hpp"

namespace condatlas {

// Hard Dice per label. Background (label 0) is excluded; labels absent
// from both maps get NaN and are excluded from the mean.
struct DiceResult {
  std::vector<double> per_label; // NaN where undefined
  double mean = 0;
};
DiceResult dice(const LabelMap &pred, const LabelMap &gt, int n_labels);

// Mean symmetric surface distance per label in world units. Boundary =
// foreground voxel with a face-adjacent in-grid background neighbor.
// Labels with an empty mask on either side get NaN and are skipped.
struct SurfaceDistanceResult {
  std::vector<double> per_label;
  double mean = 0;
  bool any_skipped = false;
};
SurfaceDistanceResult surface_distance(const LabelMap &pred, const LabelMap &gt, int n_labels);

// neg_jac_fraction: voxels with det(I + du/dx) <= 0 among interior voxels
// (all forward differences in-grid). mean_grad_norm: Frobenius norm of the
// displacement gradient averaged over all voxels.
struct RegularityResult {
  double neg_jac_fraction = 0;
  double mean_grad_norm = 0;
};
RegularityResult regularity(const VectorField &u);

struct RegistrationOutput {
  VectorField velocity;
  VectorField disp;
  LabelMap pred;
};

// Decode the subject's conditioned template, predict its velocity, and
// propagate template labels. seg_override substitutes the template label
// probabilities (required for no-seg variants, e.g. a posthoc map).
RegistrationOutput register_and_segment(const ParamStore<float> &store, const ModelConfig &cfg,
                                        const AttributeCodec &codec, const Volume &image,
                                        const AttributeRecord &attr,
                                        const Volume *seg_override = nullptr);

// Average of every training subject's one-hot labels warped to template
// space through the inverse map, voxelwise normalized.
Volume posthoc_template_labels(const ParamStore<float> &store, const ModelConfig &cfg,
                               const AttributeCodec &codec,
                               const std::vector<const Subject *> &train_subjects, int n_labels);

struct SubjectMetrics {
  std::string id;
  std::vector<double> dice_per_label;
  double dice_mean = 0;
  double surface_dist = 0;
  double neg_jac_fraction = 0;
  double mean_grad_norm = 0;
};

// Aggregate with 95% CI half-widths (1.96 * sd / sqrt(n)).
struct MetricReport {
  std::vector<SubjectMetrics> subjects;
  double dice_mean = 0, dice_ci = 0;
  double surface_mean = 0, surface_ci = 0;
  double neg_jac_mean = 0, neg_jac_ci = 0;
  double grad_norm_mean = 0, grad_norm_ci = 0;
};

MetricReport evaluate_subjects(const ParamStore<float> &store, const ModelConfig &cfg,
                               const AttributeCodec &codec,
                               const std::vector<const Subject *> &subjects, int n_labels,
                               const Volume *seg_override = nullptr);

void write_metrics_csv(const MetricReport &report, int n_labels, const std::string &path);

// Nadaraya-Watson regression of values over ages, Gaussian kernel.
// Returns one estimate per query; a query where every kernel weight
// underflows yields NaN.
std::vector<double> nw_kde(const std::vector<double> &query_ages, const std::vector<double> &ages,
                           const std::vector<double> &values, double bandwidth);

struct TrendCurve {
  int label = 0;
  std::vector<double> ages;
  std::vector<double> template_vol; // world units
  std::vector<double> kde_vol;
  std::vector<double> rel_err; // |template - kde| / kde
};

struct TrendReport {
  std::string sex;
  double bandwidth = 5.0;
  std::vector<TrendCurve> curves; // labels 1..n_labels-1
};

// Template volumes from argmax label counts times voxel volume; population
// curve from ground-truth volumes of same-sex subjects.
TrendReport trend_analysis(const ParamStore<float> &store, const ModelConfig &cfg,
                           const AttributeCodec &codec,
                           const std::vector<const Subject *> &population, const std::string &sex,
                           const std::vector<double> &ages, double bandwidth, const Grid &grid);

// Columns: age, structure, template_vol, kde_vol, lt2019_vol, rel_err.
// The lt2019 report is optional; its cells are empty when absent.
void write_trend_csv(const TrendReport &report, const TrendReport *lt2019, const std::string &path);

} // namespace condatlas
