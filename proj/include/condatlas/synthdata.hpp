#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condatlas/grid.hpp"
#include "condatlas/models.hpp"

namespace condatlas {

// Label ids of the canonical phantom. Five classes stand in for a full
// structure set: one grows with age, one shrinks, two stay fixed.
enum PhantomLabel : int {
  label_background = 0,
  label_cortex = 1,     // annulus, age-invariant
  label_ventricle = 2,  // central disc, radius grows with age
  label_hippocampus = 3, // two lateral discs, radius shrinks with age
  label_midline = 4,    // bar, age-invariant
};
constexpr int phantom_n_labels = 5;
std::string phantom_label_name(int label);

// Radii in units of R = 0.5 * min(dims); male anatomy is globally scaled.
struct StructureLaws {
  double cortex_r0 = 0.66, cortex_r1 = 0.80;
  double vent_base = 0.10, vent_slope = 0.22;  // radius = base + slope * age01
  double hip_base = 0.16, hip_slope = -0.08;
  double hip_offset = 0.45;                    // disc centers at +-offset on axis 1
  double bar_halfwidth = 0.05, bar_lo = 0.38, bar_hi = 0.58; // extent on axis 0
  double male_scale = 1.06;
};

struct PopulationSpec {
  int n_subjects = 500;
  std::vector<int> dims = {96, 96};
  std::vector<double> spacing = {1.0, 1.0};
  double age_min = 10.0, age_max = 90.0;
  double male_fraction = 0.5;
  StructureLaws laws;
  double shape_noise = 0.03;     // relative radius jitter std, clamped at 4 sigma
  double deform_amp = 2.0;       // std of the random velocity, voxel units
  double deform_sigma = 8.0;     // smoothing scale of the random velocity
  int int_steps = 7;
  std::vector<double> intensity_mean = {0.05, 0.85, 0.25, 0.65, 0.45};
  double intensity_jitter = 0.02; // per-subject per-label mean shift std
  double image_noise = 0.02;      // voxelwise additive noise std
  double image_blur = 0.6;        // final image smoothing sigma
  uint64_t seed = 1234;

  void validate() const; // throws std::invalid_argument
  Grid grid() const;
  AttributeCodec codec() const;
};

struct Subject {
  std::string id;
  AttributeRecord attr;
  Volume image;   // 1 channel
  LabelMap seg;
  std::vector<int64_t> gt_volumes; // voxel count per label, post-warp
  std::vector<double> true_radii;  // jittered radii actually rasterized
  uint64_t gen_seed = 0;
};

struct Dataset {
  Grid grid;
  int n_labels = phantom_n_labels;
  AttributeCodec codec;
  std::vector<Subject> subjects;
};

// One subject with pinned (age, sex); all per-subject randomness derives
// from gen_seed. With every noise amplitude at zero the output depends on
// (age, sex) only.
Subject make_subject(const PopulationSpec &spec, const std::string &id, double age,
                     const std::string &sex, uint64_t gen_seed);

Dataset generate_population(const PopulationSpec &spec);

struct SplitIndices {
  std::vector<int> train, val, test;
};

// Deterministic disjoint covering split; fractions must sum to 1.
SplitIndices split_dataset(int n, const std::vector<double> &fractions, uint64_t seed);

// Directory layout: manifest.txt (spec echo + file checksums),
// attributes.csv, imgs/<id>.volb, segs/<id>.volb.
void save_dataset(const Dataset &ds, const std::string &dir);
Dataset load_dataset(const std::string &dir); // verifies checksums

// In-place separable Gaussian smoothing, clamp-to-edge, kernel radius
// ceil(3 sigma). sigma <= 0 is a no-op.
void gaussian_blur(std::vector<float> &chan, const std::vector<int> &dims, double sigma);

double pearson(const std::vector<double> &x, const std::vector<double> &y);

} // namespace condatlas
