#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "condatlas/grid.hpp"
#include "condatlas/optim.hpp"
#include "condatlas/tape.hpp"

namespace condatlas {

// Per-subject conditioning data.
struct AttributeRecord {
  double age = 0;
  std::string sex = "F";
  std::vector<std::string> extras;
};

// Maps records to the decoder input vector:
// [age scaled to [-1,1]] ++ one-hot(sex) ++ one-hot(extras...).
struct AttributeCodec {
  double age_min = 10.0;
  double age_max = 90.0;
  std::vector<std::string> sex_vocab = {"F", "M"};
  std::vector<std::pair<std::string, std::vector<std::string>>> extra_vocabs;

  int dim() const;
  std::vector<double> encode(const AttributeRecord &rec) const; // throws on unknown category
  double decode_age(double normalized) const;
  double normalize_age(double age) const;
};

enum class Variant { cond, cond_no_seg, uncond, uncond_no_seg };

bool variant_conditional(Variant v);
bool variant_has_seg(Variant v);
Variant parse_variant(const std::string &name);
std::string variant_name(Variant v);

struct ModelConfig {
  std::vector<int> dims;                                  // spatial extents
  int n_labels = 5;                                       // C, incl. background
  Variant variant = Variant::cond;
  int attr_dim = 3;
  int int_steps = 7;                                      // scaling-and-squaring K
  int dec_base_filters = 16;                              // F0
  int dec_levels = 3;                                     // U upsampling stages
  std::vector<int> enc_filters = {16, 32, 32, 32};        // one pool after each
  std::vector<int> dec_filters = {32, 32, 32, 32, 32, 16, 16};
  double head_init_std = 1e-5;                            // intensity/seg/flow heads

  int ndim() const { return static_cast<int>(dims.size()); }
  int64_t voxels() const;
  void validate() const; // throws std::invalid_argument
};

// Creates every learnable tensor for the configured variant, in a fixed
// order. Conv/dense weights use He init; the three output heads are drawn
// with std head_init_std and zero bias so the initial template equals the
// bias volume and the initial flow is (near) identity.
template <typename T>
void register_model_params(ParamStore<T> &store, const ModelConfig &cfg, uint64_t seed);

template <typename T> struct TemplateGraph {
  int intensity = -1;  // {1, dims}
  int seg_prob = -1;   // {C, dims} after softmax, -1 for no-seg variants
  int seg_logits = -1;
};

// attr is ignored by unconditional variants.
template <typename T>
TemplateGraph<T> build_template_graph(Tape<T> &tape, const ParamStore<T> &store, BoundParams<T> &bound,
                                      const ModelConfig &cfg, const std::vector<T> &attr);

// UNet over concat(template intensity, subject image); returns the
// D-channel stationary velocity node.
template <typename T>
int build_velocity_graph(Tape<T> &tape, const ParamStore<T> &store, BoundParams<T> &bound,
                         const ModelConfig &cfg, int subject_image, int template_intensity);

// Inference wrappers (forward only, float32).
struct TemplateResult {
  Volume intensity;
  Volume seg_prob;
  bool has_seg = false;
};

TemplateResult decode_template(const ParamStore<float> &store, const ModelConfig &cfg,
                               const AttributeCodec &codec, const AttributeRecord &rec,
                               const Grid &grid);
VectorField predict_velocity(const ParamStore<float> &store, const ModelConfig &cfg,
                             const Volume &subject, const Volume &template_intensity);

enum class TemplateInit { zeros, mean_of_n, single_subject };
TemplateInit parse_template_init(const std::string &name);
std::string template_init_name(TemplateInit k);

// Writes the chosen init image into the template bias volume (conditional
// variants) or the direct intensity tensor (unconditional variants).
// mean_of_n samples n subjects without replacement; single_subject samples 1.
void init_template(ParamStore<float> &store, const ModelConfig &cfg,
                   const std::vector<const Volume *> &train_images, TemplateInit kind, int n,
                   std::mt19937_64 &rng);

} // namespace condatlas
