#pragma once

#include <random>
#include <string>
#include <vector>

#include "condatlas/grid.hpp"
#include "condatlas/models.hpp"
#include "condatlas/optim.hpp"
#include "condatlas/tape.hpp"

namespace condatlas {

enum class SegLossKind { soft_dice, cross_entropy };
SegLossKind parse_seg_loss(const std::string &name);
std::string seg_loss_name(SegLossKind k);

// conditional: KDE weights around the anchor attribute. lt2019: uniform
// weights 1/B (population centrality). off: no centrality term.
enum class CentralityMode { conditional, lt2019, off };
CentralityMode parse_centrality(const std::string &name);
std::string centrality_name(CentralityMode m);

struct LossWeights {
  double lambda_img = 20.0;
  double lambda_seg = 0.2;
  double lambda_smooth = 1.0;
  double lambda_central = 0.1;
  double sigma_kde = 2.0; // divides the squared age distance directly
  double sigma_d = 1.0;
  SegLossKind seg_loss = SegLossKind::soft_dice;
  CentralityMode centrality = CentralityMode::conditional;
  bool kde_raw_age = false; // KDE on raw years instead of normalized age
};

// Q_i = sum_{j != i} exp(-(a_i - a_j)^2 / sigma_d); 0 for a lone subject.
std::vector<double> kde_self_density(const std::vector<double> &ages, double sigma_d);
// w_i = exp(-(anchor - a_i)^2 / sigma_kde) / Q_i.
std::vector<double> kde_weights(double anchor_age, const std::vector<double> &ages,
                                const std::vector<double> &q, double sigma_kde);

// Precomputed KDE state over the training subjects. Categorical attributes
// (sex, extras) act as a delta kernel: weights and self densities are
// restricted to the anchor's categorical group.
struct CentralityState {
  std::vector<double> ages; // normalized or raw per LossWeights::kde_raw_age
  std::vector<int> group;
  std::vector<double> q;
  double sigma_kde = 2.0;

  static CentralityState build(const std::vector<AttributeRecord> &records, const AttributeCodec &codec,
                               const LossWeights &weights);
  std::vector<double> weights_for_anchor(int anchor) const;
  int size() const { return static_cast<int>(ages.size()); }
};

// Sequential weighted draws without replacement. A nonpositive remaining
// total falls back to uniform over the remaining items (flag reported).
std::vector<int> sample_without_replacement(const std::vector<double> &weights, int k,
                                            std::mt19937_64 &rng, bool *uniform_fallback = nullptr);

template <typename T> struct SubjectTerm {
  const Volume *image = nullptr;  // {1, dims}
  const Volume *onehot = nullptr; // {C, dims}; ignored by no-seg variants
  std::vector<T> attr;            // ignored by unconditional variants
  T weight = T(0);                // batch-normalized centrality weight
};

template <typename T> struct StepGraph {
  int total = -1;
  int img = -1;
  int seg = -1;     // -1 for no-seg variants
  int smooth = -1;
  int central = -1; // -1 when centrality is off
  std::vector<int> velocity;
  std::vector<int> disp;
  std::vector<int> tmpl_intensity;
};

// One optimization step's full graph: per-subject conditioned template,
// registration, integration, and every loss term, summed over the batch.
// total = sum_i(img_i + seg_i + smooth_i) + central.
template <typename T>
StepGraph<T> build_step_graph(Tape<T> &tape, const ParamStore<T> &store, BoundParams<T> &bound,
                              const ModelConfig &cfg, const LossWeights &weights,
                              const std::vector<SubjectTerm<T>> &batch);

} // namespace condatlas
