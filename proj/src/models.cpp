#include "condatlas/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "condatlas/util.hpp"

namespace condatlas {

int AttributeCodec::dim() const {
  int d = 1 + static_cast<int>(sex_vocab.size());
  for (const auto &[name, vocab] : extra_vocabs)
    d += static_cast<int>(vocab.size());
  return d;
}

double AttributeCodec::normalize_age(double age) const {
  if (age_max <= age_min)
    return 0.0;
  return 2.0 * (age - age_min) / (age_max - age_min) - 1.0;
}

double AttributeCodec::decode_age(double normalized) const {
  return age_min + (normalized + 1.0) * 0.5 * (age_max - age_min);
}

namespace {
int vocab_index(const std::vector<std::string> &vocab, const std::string &v, const char *what) {
  auto it = std::find(vocab.begin(), vocab.end(), v);
  if (it == vocab.end())
    throw std::invalid_argument(std::string("attribute codec: unknown ") + what + " '" + v + "'");
  return static_cast<int>(it - vocab.begin());
}
} // namespace

std::vector<double> AttributeCodec::encode(const AttributeRecord &rec) const {
  std::vector<double> out;
  out.reserve(dim());
  out.push_back(normalize_age(rec.age));
  const int si = vocab_index(sex_vocab, rec.sex, "sex");
  for (size_t k = 0; k < sex_vocab.size(); ++k)
    out.push_back(k == static_cast<size_t>(si) ? 1.0 : 0.0);
  if (rec.extras.size() != extra_vocabs.size())
    throw std::invalid_argument("attribute codec: extras count mismatch");
  for (size_t e = 0; e < extra_vocabs.size(); ++e) {
    const auto &vocab = extra_vocabs[e].second;
    const int i = vocab_index(vocab, rec.extras[e], extra_vocabs[e].first.c_str());
    for (size_t k = 0; k < vocab.size(); ++k)
      out.push_back(k == static_cast<size_t>(i) ? 1.0 : 0.0);
  }
  return out;
}

bool variant_conditional(Variant v) { return v == Variant::cond || v == Variant::cond_no_seg; }
bool variant_has_seg(Variant v) { return v == Variant::cond || v == Variant::uncond; }

Variant parse_variant(const std::string &name) {
  if (name == "cond")
    return Variant::cond;
  if (name == "cond_no_seg")
    return Variant::cond_no_seg;
  if (name == "uncond")
    return Variant::uncond;
  if (name == "uncond_no_seg")
    return Variant::uncond_no_seg;
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
  case Variant::cond:
    return "cond";
  case Variant::cond_no_seg:
    return "cond_no_seg";
  case Variant::uncond:
    return "uncond";
  case Variant::uncond_no_seg:
    return "uncond_no_seg";
  }
  throw std::logic_error("bad variant");
}

int64_t ModelConfig::voxels() const {
  int64_t n = 1;
  for (int d : dims)
    n *= d;
  return n;
}

void ModelConfig::validate() const {
  if (dims.size() != 2 && dims.size() != 3)
    throw std::invalid_argument("model: dims must be 2D or 3D");
  const int pools = static_cast<int>(enc_filters.size());
  if (pools < 1)
    throw std::invalid_argument("model: need at least one encoder level");
  for (int d : dims) {
    if (d <= 0)
      throw std::invalid_argument("model: nonpositive dim");
    if (d % (1 << pools) != 0)
      throw std::invalid_argument("model: dims must be divisible by 2^" + std::to_string(pools) +
                                  " for the registration encoder");
    if (d % (1 << dec_levels) != 0)
      throw std::invalid_argument("model: dims must be divisible by 2^" + std::to_string(dec_levels) +
                                  " for the template decoder");
  }
  if (static_cast<int>(dec_filters.size()) < pools + 1)
    throw std::invalid_argument("model: decoder needs at least one conv per upsampling stage plus the bottleneck");
  if (n_labels < 2)
    throw std::invalid_argument("model: n_labels must be >= 2");
  if (variant_conditional(variant) && attr_dim < 1)
    throw std::invalid_argument("model: conditional variant needs attr_dim >= 1");
  if (int_steps < 0 || int_steps > 16)
    throw std::invalid_argument("model: int_steps out of range");
  if (dec_base_filters < 1 || dec_levels < 0)
    throw std::invalid_argument("model: bad template decoder size");
  if (head_init_std < 0)
    throw std::invalid_argument("model: head_init_std must be >= 0");
}

namespace {

Shape vol_shape(int channels, const std::vector<int> &dims) {
  Shape s;
  s.push_back(channels);
  for (int d : dims)
    s.push_back(d);
  return s;
}

std::vector<int> coarse_dims(const std::vector<int> &dims, int levels) {
  std::vector<int> c(dims);
  for (int &d : c)
    d >>= levels;
  return c;
}

int taps(const ModelConfig &cfg) { return cfg.ndim() == 2 ? 9 : 27; }

// Conv weight shape {Cout, Cin, 3, 3[, 3]} expected by the tape.
Shape wshape(int cout, int cin, int nd) {
  Shape s{cout, cin};
  for (int d = 0; d < nd; ++d)
    s.push_back(3);
  return s;
}

// Input channel count of decoder conv k (k = 0 is the bottleneck conv, the
// next `pools` convs follow upsample+skip-concat, the rest refine).
int unet_dec_in(const ModelConfig &cfg, int k) {
  const int pools = static_cast<int>(cfg.enc_filters.size());
  if (k == 0)
    return cfg.enc_filters.back();
  if (k <= pools)
    return cfg.dec_filters[k - 1] + cfg.enc_filters[pools - k];
  return cfg.dec_filters[k - 1];
}

} // namespace

template <typename T>
void register_model_params(ParamStore<T> &store, const ModelConfig &cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng = make_rng(seed, 0x4d4f444cULL);
  const int K = taps(cfg);
  const int C = cfg.n_labels;
  const int D = cfg.ndim();
  const bool seg = variant_has_seg(cfg.variant);

  if (variant_conditional(cfg.variant)) {
    const int F0 = cfg.dec_base_filters;
    const std::vector<int> cd = coarse_dims(cfg.dims, cfg.dec_levels);
    int64_t fc_out = F0;
    for (int d : cd)
      fc_out *= d;
    store.add("tdec.fc.w", {static_cast<int>(fc_out), cfg.attr_dim},
              init_he<T>({static_cast<int>(fc_out), cfg.attr_dim}, cfg.attr_dim, rng));
    store.add("tdec.fc.b", {static_cast<int>(fc_out)}, init_zeros<T>({static_cast<int>(fc_out)}));
    for (int u = 0; u < cfg.dec_levels; ++u) {
      const std::string p = "tdec.blk" + std::to_string(u);
      store.add(p + ".w", wshape(F0, F0, D), init_he<T>(wshape(F0, F0, D), int64_t(F0) * K, rng));
      store.add(p + ".b", {F0}, init_zeros<T>({F0}));
    }
    store.add("tdec.int_head.w", wshape(1, F0, D), init_normal<T>(wshape(1, F0, D), T(cfg.head_init_std), rng));
    store.add("tdec.int_head.b", {1}, init_zeros<T>({1}));
    store.add("tdec.bias_vol", vol_shape(1, cfg.dims), init_zeros<T>(vol_shape(1, cfg.dims)));
    if (seg) {
      store.add("tdec.seg_head.w", wshape(C, F0, D), init_normal<T>(wshape(C, F0, D), T(cfg.head_init_std), rng));
      store.add("tdec.seg_head.b", {C}, init_zeros<T>({C}));
    }
  } else {
    store.add("tmpl.intensity", vol_shape(1, cfg.dims), init_zeros<T>(vol_shape(1, cfg.dims)));
    if (seg)
      store.add("tmpl.logits", vol_shape(C, cfg.dims), init_zeros<T>(vol_shape(C, cfg.dims)));
  }

  int in_ch = 2;
  for (size_t i = 0; i < cfg.enc_filters.size(); ++i) {
    const int out_ch = cfg.enc_filters[i];
    const std::string p = "unet.enc" + std::to_string(i);
    store.add(p + ".w", wshape(out_ch, in_ch, D), init_he<T>(wshape(out_ch, in_ch, D), int64_t(in_ch) * K, rng));
    store.add(p + ".b", {out_ch}, init_zeros<T>({out_ch}));
    in_ch = out_ch;
  }
  for (size_t k = 0; k < cfg.dec_filters.size(); ++k) {
    const int din = unet_dec_in(cfg, static_cast<int>(k));
    const int dout = cfg.dec_filters[k];
    const std::string p = "unet.dec" + std::to_string(k);
    store.add(p + ".w", wshape(dout, din, D), init_he<T>(wshape(dout, din, D), int64_t(din) * K, rng));
    store.add(p + ".b", {dout}, init_zeros<T>({dout}));
  }
  store.add("unet.flow.w", wshape(D, cfg.dec_filters.back(), D),
            init_normal<T>(wshape(D, cfg.dec_filters.back(), D), T(cfg.head_init_std), rng));
  store.add("unet.flow.b", {D}, init_zeros<T>({D}));
}

template <typename T>
TemplateGraph<T> build_template_graph(Tape<T> &tape, const ParamStore<T> &store, BoundParams<T> &bound,
                                      const ModelConfig &cfg, const std::vector<T> &attr) {
  TemplateGraph<T> g;
  const bool seg = variant_has_seg(cfg.variant);
  if (!variant_conditional(cfg.variant)) {
    g.intensity = bound.bind(tape, store, "tmpl.intensity");
    if (seg) {
      g.seg_logits = bound.bind(tape, store, "tmpl.logits");
      g.seg_prob = tape.softmax_channels(g.seg_logits);
    }
    return g;
  }
  if (static_cast<int>(attr.size()) != cfg.attr_dim)
    throw std::invalid_argument("template graph: attribute vector has wrong length");
  const int a = tape.leaf({cfg.attr_dim}, attr, false);
  int h = tape.dense(a, bound.bind(tape, store, "tdec.fc.w"), bound.bind(tape, store, "tdec.fc.b"));
  h = tape.relu(h);
  h = tape.reshape(h, vol_shape(cfg.dec_base_filters, coarse_dims(cfg.dims, cfg.dec_levels)));
  for (int u = 0; u < cfg.dec_levels; ++u) {
    const std::string p = "tdec.blk" + std::to_string(u);
    h = tape.relu(tape.conv3(h, bound.bind(tape, store, p + ".w"), bound.bind(tape, store, p + ".b")));
    h = tape.nearest_upsample2(h);
  }
  const int raw = tape.conv3(h, bound.bind(tape, store, "tdec.int_head.w"),
                             bound.bind(tape, store, "tdec.int_head.b"));
  g.intensity = tape.add(raw, bound.bind(tape, store, "tdec.bias_vol"));
  if (seg) {
    g.seg_logits = tape.conv3(h, bound.bind(tape, store, "tdec.seg_head.w"),
                              bound.bind(tape, store, "tdec.seg_head.b"));
    g.seg_prob = tape.softmax_channels(g.seg_logits);
  }
  return g;
}

template <typename T>
int build_velocity_graph(Tape<T> &tape, const ParamStore<T> &store, BoundParams<T> &bound,
                         const ModelConfig &cfg, int subject_image, int template_intensity) {
  const Shape want = vol_shape(1, cfg.dims);
  if (!shape_equal(tape.shape(subject_image), want) || !shape_equal(tape.shape(template_intensity), want))
    throw std::invalid_argument("velocity graph: inputs must be single-channel volumes at model resolution");
  int x = tape.concat_channels(template_intensity, subject_image);
  const int pools = static_cast<int>(cfg.enc_filters.size());
  std::vector<int> skips;
  for (int i = 0; i < pools; ++i) {
    const std::string p = "unet.enc" + std::to_string(i);
    x = tape.relu(tape.conv3(x, bound.bind(tape, store, p + ".w"), bound.bind(tape, store, p + ".b")));
    skips.push_back(x);
    x = tape.max_pool2(x);
  }
  const int nconv = static_cast<int>(cfg.dec_filters.size());
  for (int k = 0; k < nconv; ++k) {
    if (k >= 1 && k <= pools) {
      x = tape.nearest_upsample2(x);
      x = tape.concat_channels(x, skips[pools - k]);
    }
    const std::string p = "unet.dec" + std::to_string(k);
    x = tape.relu(tape.conv3(x, bound.bind(tape, store, p + ".w"), bound.bind(tape, store, p + ".b")));
  }
  return tape.conv3(x, bound.bind(tape, store, "unet.flow.w"), bound.bind(tape, store, "unet.flow.b"));
}

TemplateResult decode_template(const ParamStore<float> &store, const ModelConfig &cfg,
                               const AttributeCodec &codec, const AttributeRecord &rec,
                               const Grid &grid) {
  if (grid.dims != cfg.dims)
    throw std::invalid_argument("decode_template: grid does not match model dims");
  std::vector<float> attr;
  if (variant_conditional(cfg.variant)) {
    const std::vector<double> a = codec.encode(rec);
    attr.assign(a.begin(), a.end());
  }
  Tape<float> tape;
  BoundParams<float> bound;
  const TemplateGraph<float> g = build_template_graph(tape, store, bound, cfg, attr);
  TemplateResult out;
  out.intensity = Volume(grid, 1);
  out.intensity.data = tape.value(g.intensity);
  if (g.seg_prob >= 0) {
    out.seg_prob = Volume(grid, cfg.n_labels);
    out.seg_prob.data = tape.value(g.seg_prob);
    out.has_seg = true;
  }
  return out;
}

VectorField predict_velocity(const ParamStore<float> &store, const ModelConfig &cfg,
                             const Volume &subject, const Volume &template_intensity) {
  if (subject.grid.dims != cfg.dims || subject.channels != 1)
    throw std::invalid_argument("predict_velocity: subject must be a single-channel volume at model dims");
  if (template_intensity.grid.dims != cfg.dims || template_intensity.channels != 1)
    throw std::invalid_argument("predict_velocity: template must be a single-channel volume at model dims");
  Tape<float> tape;
  BoundParams<float> bound;
  const int s = tape.leaf(vol_shape(1, cfg.dims), subject.data, false);
  const int t = tape.leaf(vol_shape(1, cfg.dims), template_intensity.data, false);
  const int v = build_velocity_graph(tape, store, bound, cfg, s, t);
  VectorField f(subject.grid, FieldKind::velocity);
  f.data = tape.value(v);
  return f;
}

TemplateInit parse_template_init(const std::string &name) {
  if (name == "zeros")
    return TemplateInit::zeros;
  if (name == "mean_of_n")
    return TemplateInit::mean_of_n;
  if (name == "single_subject")
    return TemplateInit::single_subject;
  throw std::invalid_argument("unknown template init '" + name + "'");
}

std::string template_init_name(TemplateInit k) {
  switch (k) {
  case TemplateInit::zeros:
    return "zeros";
  case TemplateInit::mean_of_n:
    return "mean_of_n";
  case TemplateInit::single_subject:
    return "single_subject";
  }
  throw std::logic_error("bad template init");
}

void init_template(ParamStore<float> &store, const ModelConfig &cfg,
                   const std::vector<const Volume *> &train_images, TemplateInit kind, int n,
                   std::mt19937_64 &rng) {
  if (kind == TemplateInit::zeros)
    return;
  if (train_images.empty())
    throw std::invalid_argument("init_template: no images");
  if (kind == TemplateInit::single_subject)
    n = 1;
  n = std::min<int>(n, static_cast<int>(train_images.size()));
  if (n < 1)
    throw std::invalid_argument("init_template: n must be >= 1");

  std::vector<int> pool(train_images.size());
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(n);

  const int64_t nvox = cfg.voxels();
  std::vector<float> mean(nvox, 0.0f);
  for (int idx : pool) {
    const Volume &img = *train_images[idx];
    if (img.channels != 1 || img.grid.dims != cfg.dims)
      throw std::invalid_argument("init_template: image does not match model dims");
    for (int64_t i = 0; i < nvox; ++i)
      mean[i] += img.data[i];
  }
  for (int64_t i = 0; i < nvox; ++i)
    mean[i] /= static_cast<float>(n);

  const char *target = variant_conditional(cfg.variant) ? "tdec.bias_vol" : "tmpl.intensity";
  Parameter<float> &p = store.named(target);
  if (static_cast<int64_t>(p.value.size()) != nvox)
    throw std::logic_error("init_template: target parameter has unexpected size");
  p.value = mean;
}

template void register_model_params<float>(ParamStore<float> &, const ModelConfig &, uint64_t);
template void register_model_params<double>(ParamStore<double> &, const ModelConfig &, uint64_t);
template TemplateGraph<float> build_template_graph<float>(Tape<float> &, const ParamStore<float> &,
                                                          BoundParams<float> &, const ModelConfig &,
                                                          const std::vector<float> &);
template TemplateGraph<double> build_template_graph<double>(Tape<double> &, const ParamStore<double> &,
                                                            BoundParams<double> &, const ModelConfig &,
                                                            const std::vector<double> &);
template int build_velocity_graph<float>(Tape<float> &, const ParamStore<float> &, BoundParams<float> &,
                                         const ModelConfig &, int, int);
template int build_velocity_graph<double>(Tape<double> &, const ParamStore<double> &, BoundParams<double> &,
                                          const ModelConfig &, int, int);

} // namespace condatlas
