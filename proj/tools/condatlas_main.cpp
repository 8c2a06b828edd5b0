#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "condatlas/checkpoint.hpp"
#include "condatlas/config.hpp"
#include "condatlas/eval.hpp"
#include "condatlas/field_ops.hpp"
#include "condatlas/gradcheck_suite.hpp"
#include "condatlas/grid.hpp"
#include "condatlas/losses.hpp"
#include "condatlas/models.hpp"
#include "condatlas/reportio.hpp"
#include "condatlas/synthdata.hpp"
#include "condatlas/trainer.hpp"
#include "condatlas/util.hpp"

namespace fs = std::filesystem;
using namespace condatlas;

namespace {

// Keys any command may consume; check_allowed() rejects everything else so
// a typo in a config file fails loudly instead of silently using defaults.
const std::vector<std::string> kAllowedKeys = {
    "command", "seed", "out", "threads", "float64",
    // synth
    "n_subjects", "dims", "spacing", "age_min", "age_max", "male_fraction", "shape_noise",
    "deform_amp", "deform_sigma", "intensity_jitter", "image_noise", "image_blur",
    // train
    "data", "variant", "seg_loss", "centrality", "lambda_img", "lambda_seg", "lambda_smooth",
    "lambda_central", "sigma_kde", "sigma_d", "kde_raw_age", "lr", "batch", "epochs",
    "steps_per_epoch", "early_stop_window", "early_stop_delta", "val_every", "val_cap",
    "checkpoint_every", "max_steps", "init", "init_n", "split", "split_seed", "resume", "verbose",
    // architecture
    "int_steps", "dec_base_filters", "dec_levels", "enc_filters", "dec_filters", "head_init_std",
    // inference / evaluation
    "ckpt", "ages", "sexes", "subject", "subset", "cap", "lt2019", "bandwidth",
    // gradcheck
    "h", "threshold"};

std::string join_doubles(const std::vector<double> &v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? " " : "") + format_double(v[i]);
  return s;
}

std::string join_ints(const std::vector<int> &v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

// Config access that records every resolved value, so the frozen
// run_config.txt reflects exactly what the run used.
struct Settings {
  std::string command;
  Config cfg;
  bool has_cli_seed = false;
  uint64_t cli_seed = 0;
  bool has_cli_out = false;
  std::string cli_out;
  bool has_cli_threads = false;
  int cli_threads = 1;
  bool cli_float64 = false;

  mutable std::vector<std::pair<std::string, std::string>> resolved;

  void note(const std::string &k, const std::string &v) const {
    for (const auto &kv : resolved)
      if (kv.first == k)
        return;
    resolved.push_back({k, v});
  }

  std::string str(const std::string &k, const std::string &fb) const {
    const std::string v = cfg.get_str(k, fb);
    note(k, v);
    return v;
  }
  std::string str_req(const std::string &k) const {
    const std::string v = cfg.get_str(k);
    note(k, v);
    return v;
  }
  int64_t integer(const std::string &k, int64_t fb) const {
    const int64_t v = cfg.get_int(k, fb);
    note(k, std::to_string(v));
    return v;
  }
  double real(const std::string &k, double fb) const {
    const double v = cfg.get_double(k, fb);
    note(k, format_double(v));
    return v;
  }
  bool flag(const std::string &k, bool fb) const {
    const bool v = cfg.get_bool(k, fb);
    note(k, v ? "true" : "false");
    return v;
  }
  std::vector<double> reals(const std::string &k, const std::vector<double> &fb) const {
    const auto v = cfg.get_doubles(k, fb);
    note(k, join_doubles(v));
    return v;
  }
  std::vector<int> ints(const std::string &k, const std::vector<int> &fb) const {
    const auto v = cfg.get_ints(k, fb);
    note(k, join_ints(v));
    return v;
  }

  uint64_t seed() const {
    const uint64_t v = has_cli_seed ? cli_seed : static_cast<uint64_t>(cfg.get_int("seed", 1));
    note("seed", std::to_string(v));
    return v;
  }
  std::string out_dir() const {
    const std::string v = has_cli_out ? cli_out : cfg.get_str("out", "runs/" + command);
    note("out", v);
    return v;
  }
  int threads() const {
    const int v = has_cli_threads ? cli_threads : static_cast<int>(cfg.get_int("threads", 1));
    note("threads", std::to_string(v));
    return v;
  }
  bool float64() const {
    const bool v = cli_float64 || cfg.get_bool("float64", false);
    note("float64", v ? "true" : "false");
    return v;
  }
};

// Relative dataset paths fall back to $AM_DATA_DIR when absent locally.
std::string resolve_data_dir(const std::string &p) {
  const fs::path pp(p);
  if (pp.is_absolute() || fs::exists(pp / "manifest.txt"))
    return pp.string();
  if (const char *root = std::getenv("AM_DATA_DIR")) {
    const fs::path alt = fs::path(root) / pp;
    if (fs::exists(alt / "manifest.txt"))
      return alt.string();
  }
  return pp.string();
}

// Freezes the resolved config and lists every file under out_dir with its
// checksum. Call after all outputs are written.
void write_run_artifacts(const Settings &S, const std::string &out_dir) {
  fs::create_directories(out_dir);
  std::string conf = "command = " + S.command + "\n";
  for (const auto &[k, v] : S.resolved)
    conf += k + " = " + v + "\n";
  write_text_file((fs::path(out_dir) / "run_config.txt").string(), conf);

  std::vector<std::string> rel;
  for (const auto &e : fs::recursive_directory_iterator(out_dir)) {
    if (!e.is_regular_file())
      continue;
    const std::string r = fs::relative(e.path(), out_dir).generic_string();
    if (r != "run_manifest.txt")
      rel.push_back(r);
  }
  std::sort(rel.begin(), rel.end());
  std::string man = "command = " + S.command + "\n";
  for (const auto &r : rel)
    man += "checksum " + r + " = " + hex64(fnv1a64_file((fs::path(out_dir) / r).string())) + "\n";
  write_text_file((fs::path(out_dir) / "run_manifest.txt").string(), man);
}

std::vector<std::string> split_words(const std::string &s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w)
    out.push_back(w);
  return out;
}

struct LoadedModel {
  Checkpoint ck;
  ModelConfig cfg;
  AttributeCodec codec;
  LossWeights loss;
  ParamStore<float> store;
};

LoadedModel load_model(const std::string &path) {
  LoadedModel m;
  m.ck = load_checkpoint(path);
  m.cfg = read_model_config(m.ck);
  m.codec = read_codec(m.ck);
  m.loss = read_loss_weights(m.ck);
  register_model_params(m.store, m.cfg, 0);
  Adam<float> dummy;
  read_params(m.ck, m.store, dummy);
  return m;
}

Volume labels_to_volume(const LabelMap &lm) {
  Volume v(lm.grid, 1);
  for (size_t i = 0; i < lm.labels.size(); ++i)
    v.data[i] = static_cast<float>(lm.labels[i]);
  return v;
}

std::string label_name(int n_labels, int label) {
  if (n_labels == phantom_n_labels)
    return phantom_label_name(label);
  return "label" + std::to_string(label);
}

const Subject &find_subject(const Dataset &ds, const std::string &id) {
  for (const Subject &s : ds.subjects)
    if (s.id == id)
      return s;
  throw std::invalid_argument("subject id not in dataset: " + id);
}

std::vector<const Subject *> subject_ptrs(const Dataset &ds, const std::vector<int> &idx) {
  std::vector<const Subject *> out;
  out.reserve(idx.size());
  for (int i : idx)
    out.push_back(&ds.subjects[i]);
  return out;
}

// ---- commands ----

int cmd_synth(const Settings &S) {
  PopulationSpec spec;
  spec.n_subjects = static_cast<int>(S.integer("n_subjects", spec.n_subjects));
  spec.dims = S.ints("dims", spec.dims);
  std::vector<double> def_spacing(spec.dims.size(), 1.0);
  spec.spacing = S.reals("spacing", def_spacing);
  spec.age_min = S.real("age_min", spec.age_min);
  spec.age_max = S.real("age_max", spec.age_max);
  spec.male_fraction = S.real("male_fraction", spec.male_fraction);
  spec.shape_noise = S.real("shape_noise", spec.shape_noise);
  spec.deform_amp = S.real("deform_amp", spec.deform_amp);
  spec.deform_sigma = S.real("deform_sigma", spec.deform_sigma);
  spec.int_steps = static_cast<int>(S.integer("int_steps", spec.int_steps));
  spec.intensity_jitter = S.real("intensity_jitter", spec.intensity_jitter);
  spec.image_noise = S.real("image_noise", spec.image_noise);
  spec.image_blur = S.real("image_blur", spec.image_blur);
  spec.seed = S.seed();
  spec.validate();

  const std::string out = S.out_dir();
  std::cout << "generating " << spec.n_subjects << " subjects on " << join_ints(spec.dims)
            << " ..." << std::endl;
  const Dataset ds = generate_population(spec);
  save_dataset(ds, out);

  std::vector<const Volume *> prev;
  std::vector<int> chans;
  for (int i = 0; i < std::min<int>(4, static_cast<int>(ds.subjects.size())); ++i) {
    prev.push_back(&ds.subjects[i].image);
    chans.push_back(0);
  }
  if (!prev.empty())
    write_montage_pgm((fs::path(out) / "preview.pgm").string(), prev, chans);

  std::vector<double> ages, vents;
  for (const Subject &s : ds.subjects) {
    ages.push_back(s.attr.age);
    vents.push_back(s.gt_volumes[label_ventricle]);
  }
  const double r = pearson(ages, vents);
  std::cout << "wrote " << ds.subjects.size() << " subjects to " << out << "\n"
            << "pearson(age, ventricle voxels) = " << format_double(r) << std::endl;
  write_run_artifacts(S, out);
  if (static_cast<int>(ds.subjects.size()) >= 200 && r <= 0.8) {
    std::cerr << "error: age/ventricle correlation " << format_double(r)
              << " <= 0.8 on a population of " << ds.subjects.size() << std::endl;
    return 1;
  }
  return 0;
}

int cmd_train(const Settings &S) {
  const std::string data = resolve_data_dir(S.str_req("data"));
  const Dataset ds = load_dataset(data);

  TrainConfig tc;
  tc.model.dims = ds.grid.dims;
  tc.model.n_labels = ds.n_labels;
  tc.model.variant = parse_variant(S.str("variant", "cond"));
  tc.model.attr_dim = ds.codec.dim();
  tc.model.int_steps = static_cast<int>(S.integer("int_steps", tc.model.int_steps));
  tc.model.dec_base_filters = static_cast<int>(S.integer("dec_base_filters", tc.model.dec_base_filters));
  tc.model.dec_levels = static_cast<int>(S.integer("dec_levels", tc.model.dec_levels));
  tc.model.enc_filters = S.ints("enc_filters", tc.model.enc_filters);
  tc.model.dec_filters = S.ints("dec_filters", tc.model.dec_filters);
  tc.model.head_init_std = S.real("head_init_std", tc.model.head_init_std);
  tc.model.validate();

  tc.loss.lambda_img = S.real("lambda_img", tc.loss.lambda_img);
  tc.loss.lambda_seg = S.real("lambda_seg", tc.loss.lambda_seg);
  tc.loss.lambda_smooth = S.real("lambda_smooth", tc.loss.lambda_smooth);
  tc.loss.lambda_central = S.real("lambda_central", tc.loss.lambda_central);
  tc.loss.sigma_kde = S.real("sigma_kde", tc.loss.sigma_kde);
  tc.loss.sigma_d = S.real("sigma_d", tc.loss.sigma_d);
  tc.loss.seg_loss = parse_seg_loss(S.str("seg_loss", "soft_dice"));
  tc.loss.centrality = parse_centrality(S.str("centrality", "conditional"));
  tc.loss.kde_raw_age = S.flag("kde_raw_age", false);

  tc.lr = S.real("lr", tc.lr);
  tc.batch = static_cast<int>(S.integer("batch", tc.batch));
  tc.epochs = static_cast<int>(S.integer("epochs", tc.epochs));
  tc.steps_per_epoch = static_cast<int>(S.integer("steps_per_epoch", tc.steps_per_epoch));
  tc.early_stop_window = static_cast<int>(S.integer("early_stop_window", tc.early_stop_window));
  tc.early_stop_delta = S.real("early_stop_delta", tc.early_stop_delta);
  tc.val_every = static_cast<int>(S.integer("val_every", tc.val_every));
  tc.val_cap = static_cast<int>(S.integer("val_cap", tc.val_cap));
  tc.checkpoint_every = static_cast<int>(S.integer("checkpoint_every", tc.checkpoint_every));
  tc.max_steps = S.integer("max_steps", tc.max_steps);
  tc.init = parse_template_init(S.str("init", "mean_of_n"));
  tc.init_n = static_cast<int>(S.integer("init_n", tc.init_n));
  tc.seed = S.seed();
  tc.float64 = S.float64();
  tc.verbose = S.flag("verbose", false);
  tc.out_dir = S.out_dir();

  const std::vector<double> fr = S.reals("split", {0.8, 0.1, 0.1});
  const uint64_t split_seed = static_cast<uint64_t>(S.integer("split_seed", static_cast<int64_t>(tc.seed)));
  const SplitIndices si = split_dataset(static_cast<int>(ds.subjects.size()), fr, split_seed);
  const std::string resume = S.str("resume", "");

  std::cout << "training " << variant_name(tc.model.variant) << " ("
            << centrality_name(tc.loss.centrality) << " centrality, "
            << seg_loss_name(tc.loss.seg_loss) << ") on " << ds.subjects.size()
            << " subjects, split " << si.train.size() << "/" << si.val.size() << "/"
            << si.test.size() << std::endl;

  auto run_as = [&](auto tag) {
    using T = decltype(tag);
    Trainer<T> tr(ds, si, tc);
    if (!resume.empty())
      tr.resume_from(resume);
    return tr.run();
  };
  const TrainResult res = tc.float64 ? run_as(double{}) : run_as(float{});

  const char *metric = variant_has_seg(tc.model.variant) ? "val dice" : "neg val mse";
  std::cout << "done: " << res.steps << " steps, " << res.epochs_run << " epochs"
            << (res.early_stopped ? " (early stop)" : "") << "\n"
            << "best " << metric << " = " << format_double(res.best_val) << " at epoch "
            << res.best_epoch << "\n"
            << "final checkpoint: " << res.final_checkpoint << std::endl;
  write_run_artifacts(S, tc.out_dir);
  return 0;
}

int cmd_template(const Settings &S) {
  const LoadedModel m = load_model(S.str_req("ckpt"));
  const std::string out = S.out_dir();
  fs::create_directories(out);
  const Grid grid(m.cfg.dims);

  if (variant_conditional(m.cfg.variant)) {
    const std::vector<double> ages = S.reals("ages", {20, 40, 60, 80});
    const std::vector<std::string> sexes = split_words(S.str("sexes", "F M"));
    for (const std::string &sex : sexes) {
      std::vector<Volume> ints, labs;
      for (double age : ages) {
        AttributeRecord rec;
        rec.age = age;
        rec.sex = sex;
        const TemplateResult tr = decode_template(m.store, m.cfg, m.codec, rec, grid);
        const std::string tag = sex + "_age" + format_double(age);
        save_volume(tr.intensity, (fs::path(out) / ("template_int_" + tag + ".volb")).string());
        ints.push_back(tr.intensity);
        if (tr.has_seg) {
          save_volume(tr.seg_prob, (fs::path(out) / ("template_seg_" + tag + ".volb")).string());
          labs.push_back(labels_to_volume(argmax_labels(tr.seg_prob)));
        }
      }
      std::vector<const Volume *> pv;
      std::vector<int> pc;
      for (const Volume &v : ints) {
        pv.push_back(&v);
        pc.push_back(0);
      }
      write_montage_pgm((fs::path(out) / ("montage_int_" + sex + ".pgm")).string(), pv, pc);
      if (!labs.empty()) {
        pv.clear();
        for (const Volume &v : labs)
          pv.push_back(&v);
        write_montage_pgm((fs::path(out) / ("montage_labels_" + sex + ".pgm")).string(), pv, pc);
      }
    }
    std::cout << "wrote templates for ages {" << join_doubles(ages) << "} x sexes {"
              << S.str("sexes", "F M") << "} to " << out << std::endl;
  } else {
    AttributeRecord rec; // ignored by unconditional decoding
    const TemplateResult tr = decode_template(m.store, m.cfg, m.codec, rec, grid);
    save_volume(tr.intensity, (fs::path(out) / "template_int.volb").string());
    write_pgm((fs::path(out) / "template_int.pgm").string(), tr.intensity, 0);
    if (tr.has_seg) {
      save_volume(tr.seg_prob, (fs::path(out) / "template_seg.volb").string());
      write_pgm((fs::path(out) / "template_labels.pgm").string(),
                labels_to_volume(argmax_labels(tr.seg_prob)), 0);
    }
    std::cout << "wrote unconditional template to " << out << std::endl;
  }
  write_run_artifacts(S, out);
  return 0;
}

int cmd_register(const Settings &S) {
  const LoadedModel m = load_model(S.str_req("ckpt"));
  const std::string data = resolve_data_dir(S.str_req("data"));
  const Dataset ds = load_dataset(data);
  if (ds.n_labels != m.cfg.n_labels)
    throw std::invalid_argument("checkpoint labels " + std::to_string(m.cfg.n_labels) +
                                " != dataset labels " + std::to_string(ds.n_labels));
  const std::string sid = S.str("subject", ds.subjects.at(0).id);
  const Subject &s = find_subject(ds, sid);
  const std::string out = S.out_dir();
  fs::create_directories(out);

  Volume posthoc;
  const Volume *seg_override = nullptr;
  if (!variant_has_seg(m.cfg.variant)) {
    const std::vector<double> fr = S.reals("split", {0.8, 0.1, 0.1});
    const uint64_t split_seed = static_cast<uint64_t>(S.integer("split_seed", static_cast<int64_t>(S.seed())));
    const SplitIndices si = split_dataset(static_cast<int>(ds.subjects.size()), fr, split_seed);
    std::cout << "recovering template labels post hoc from " << si.train.size()
              << " training subjects ..." << std::endl;
    posthoc = posthoc_template_labels(m.store, m.cfg, m.codec, subject_ptrs(ds, si.train), ds.n_labels);
    seg_override = &posthoc;
  }

  const RegistrationOutput ro = register_and_segment(m.store, m.cfg, m.codec, s.image, s.attr, seg_override);
  const TemplateResult tr = decode_template(m.store, m.cfg, m.codec, s.attr, ds.grid);
  const Volume warped = warp(tr.intensity, ro.disp);
  const VectorField inv = invert_velocity(ro.velocity, m.cfg.int_steps);
  const Volume jac = jacobian_determinant(ro.disp);
  const DiceResult d = dice(ro.pred, s.seg, ds.n_labels);
  const RegularityResult rg = regularity(ro.disp);

  save_volume(s.image, (fs::path(out) / "subject_image.volb").string());
  save_field(ro.velocity, (fs::path(out) / "velocity.volb").string());
  save_field(ro.disp, (fs::path(out) / "disp.volb").string());
  save_field(inv, (fs::path(out) / "inv_disp.volb").string());
  save_volume(warped, (fs::path(out) / "warped_template.volb").string());
  save_labelmap(ro.pred, (fs::path(out) / "pred_labels.volb").string());
  save_volume(jac, (fs::path(out) / "jacobian.volb").string());

  const Volume predf = labels_to_volume(ro.pred), gtf = labels_to_volume(s.seg);
  write_montage_pgm((fs::path(out) / "panel.pgm").string(),
                    {&s.image, &warped, &predf, &gtf, &jac}, {0, 0, 0, 0, 0});

  std::cout << "subject " << s.id << " (age " << format_double(s.attr.age) << ", " << s.attr.sex
            << ")\n"
            << "dice = " << format_double(d.mean)
            << ", neg-jacobian fraction = " << format_double(rg.neg_jac_fraction) << "\n"
            << "outputs in " << out << std::endl;
  write_run_artifacts(S, out);
  return 0;
}

int cmd_evaluate(const Settings &S) {
  const LoadedModel m = load_model(S.str_req("ckpt"));
  const std::string data = resolve_data_dir(S.str_req("data"));
  const Dataset ds = load_dataset(data);
  if (ds.n_labels != m.cfg.n_labels)
    throw std::invalid_argument("checkpoint labels " + std::to_string(m.cfg.n_labels) +
                                " != dataset labels " + std::to_string(ds.n_labels));

  const std::vector<double> fr = S.reals("split", {0.8, 0.1, 0.1});
  const uint64_t split_seed = static_cast<uint64_t>(S.integer("split_seed", static_cast<int64_t>(S.seed())));
  const SplitIndices si = split_dataset(static_cast<int>(ds.subjects.size()), fr, split_seed);
  const std::string subset = S.str("subset", "test");
  std::vector<int> idx;
  if (subset == "train")
    idx = si.train;
  else if (subset == "val")
    idx = si.val;
  else if (subset == "test")
    idx = si.test;
  else
    throw std::invalid_argument("subset must be train, val, or test: " + subset);
  const int cap = static_cast<int>(S.integer("cap", 0));
  if (cap > 0 && static_cast<int>(idx.size()) > cap)
    idx.resize(cap);

  Volume posthoc;
  const Volume *seg_override = nullptr;
  if (!variant_has_seg(m.cfg.variant)) {
    std::cout << "recovering template labels post hoc from " << si.train.size()
              << " training subjects ..." << std::endl;
    posthoc = posthoc_template_labels(m.store, m.cfg, m.codec, subject_ptrs(ds, si.train), ds.n_labels);
    seg_override = &posthoc;
  }

  const std::string out = S.out_dir();
  fs::create_directories(out);
  const MetricReport rep =
      evaluate_subjects(m.store, m.cfg, m.codec, subject_ptrs(ds, idx), ds.n_labels, seg_override);
  write_metrics_csv(rep, ds.n_labels, (fs::path(out) / "metrics.csv").string());

  std::cout << subset << " subjects: " << idx.size() << "\n"
            << "dice            = " << format_double(rep.dice_mean) << " +- "
            << format_double(rep.dice_ci) << "\n"
            << "surface dist    = " << format_double(rep.surface_mean) << " +- "
            << format_double(rep.surface_ci) << "\n"
            << "neg-jac fract   = " << format_double(rep.neg_jac_mean) << " +- "
            << format_double(rep.neg_jac_ci) << "\n"
            << "mean |grad u|   = " << format_double(rep.grad_norm_mean) << " +- "
            << format_double(rep.grad_norm_ci) << std::endl;
  write_run_artifacts(S, out);
  return 0;
}

int cmd_trend(const Settings &S) {
  const LoadedModel m = load_model(S.str_req("ckpt"));
  const std::string data = resolve_data_dir(S.str_req("data"));
  const Dataset ds = load_dataset(data);
  const std::string lt_path = S.str("lt2019", "");
  std::optional<LoadedModel> lt;
  if (!lt_path.empty())
    lt.emplace(load_model(lt_path));

  const std::vector<double> ages = S.reals("ages", {20, 30, 40, 50, 60, 70, 80});
  const double bw = S.real("bandwidth", 5.0);
  const std::vector<std::string> sexes = split_words(S.str("sexes", "F M"));
  const std::string out = S.out_dir();
  fs::create_directories(out);

  std::vector<const Subject *> all;
  for (const Subject &s : ds.subjects)
    all.push_back(&s);

  for (const std::string &sex : sexes) {
    const TrendReport rep = trend_analysis(m.store, m.cfg, m.codec, all, sex, ages, bw, ds.grid);
    std::optional<TrendReport> ltrep;
    if (lt)
      ltrep = trend_analysis(lt->store, lt->cfg, lt->codec, all, sex, ages, bw, ds.grid);
    write_trend_csv(rep, ltrep ? &*ltrep : nullptr,
                    (fs::path(out) / ("trend_" + sex + ".csv")).string());

    for (size_t ci = 0; ci < rep.curves.size(); ++ci) {
      const TrendCurve &c = rep.curves[ci];
      const std::string name = label_name(m.cfg.n_labels, c.label);
      std::vector<ChartSeries> series;
      series.push_back({"template", c.ages, c.template_vol});
      series.push_back({"population", c.ages, c.kde_vol});
      if (ltrep)
        series.push_back({"lt2019 template", ltrep->curves[ci].ages, ltrep->curves[ci].template_vol});
      write_svg_chart((fs::path(out) / ("trend_" + sex + "_" + name + ".svg")).string(),
                      name + " volume vs age (" + sex + ")", "age (years)", "volume", series);

      double err = 0;
      int n = 0;
      for (double e : c.rel_err)
        if (std::isfinite(e)) {
          err += e;
          ++n;
        }
      std::cout << sex << " " << name << ": mean relative volume error = "
                << format_double(n ? err / n : 0.0) << std::endl;
    }
  }
  std::cout << "trend outputs in " << out << std::endl;
  write_run_artifacts(S, out);
  return 0;
}

int cmd_gradcheck(const Settings &S) {
  const double h = S.real("h", 1e-4);
  const double threshold = S.real("threshold", 1e-4);
  const uint64_t seed = S.seed();
  const std::vector<GradcheckRow> rows = run_gradcheck_suite(h, threshold, seed);

  std::string csv = csv_row({"op", "max_rel_err", "pass"}) + "\n";
  bool all = true;
  std::printf("%-22s %14s  %s\n", "op", "max rel err", "status");
  for (const GradcheckRow &r : rows) {
    std::printf("%-22s %14.4e  %s\n", r.name.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
    csv += csv_row({r.name, format_double(r.max_rel_err), r.pass ? "1" : "0"}) + "\n";
    all = all && r.pass;
  }
  const std::string out = S.out_dir();
  fs::create_directories(out);
  write_text_file((fs::path(out) / "gradcheck.csv").string(), csv);
  write_run_artifacts(S, out);
  std::cout << (all ? "all gradients ok" : "GRADIENT CHECK FAILED") << std::endl;
  return all ? 0 : 1;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"conditional deformable template toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_arg;
  uint64_t seed_arg = 1;
  int threads_arg = 1;
  bool f64_arg = false;
  std::vector<std::string> override_args;

  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"synth", "generate a synthetic labeled population"},
      {"train", "train a template + registration model"},
      {"template", "decode templates for a grid of attributes"},
      {"register", "register one subject and emit field/label maps"},
      {"evaluate", "compute metrics over a dataset split"},
      {"trend", "compare template volumes against population KDE curves"},
      {"gradcheck", "verify analytic gradients against finite differences"}};
  for (const auto &[name, help] : cmds) {
    CLI::App *sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key=value config file");
    sub->add_option("--seed", seed_arg, "RNG seed (overrides config)");
    sub->add_option("--out", out_arg, "output directory (overrides config)");
    sub->add_option("--threads", threads_arg, "worker threads for per-subject evaluation");
    sub->add_flag("--float64", f64_arg, "train in double precision");
    sub->add_option("overrides", override_args, "key=value settings applied after --config");
  }
  CLI11_PARSE(app, argc, argv);
  CLI::App *active = app.get_subcommands().front();

  try {
    Settings S;
    S.command = active->get_name();
    if (active->count("--config"))
      S.cfg = Config::load(config_path);
    for (const std::string &kv : override_args) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must be key=value: " + kv);
      auto trim = [](std::string s) {
        const size_t a = s.find_first_not_of(" \t");
        const size_t b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      S.cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    S.cfg.check_allowed(kAllowedKeys);
    S.has_cli_seed = active->count("--seed") > 0;
    S.cli_seed = seed_arg;
    S.has_cli_out = active->count("--out") > 0;
    S.cli_out = out_arg;
    S.has_cli_threads = active->count("--threads") > 0;
    S.cli_threads = threads_arg;
    S.cli_float64 = active->count("--float64") > 0;
    worker_threads() = std::max(1, S.threads());

    if (S.command == "synth")
      return cmd_synth(S);
    if (S.command == "train")
      return cmd_train(S);
    if (S.command == "template")
      return cmd_template(S);
    if (S.command == "register")
      return cmd_register(S);
    if (S.command == "evaluate")
      return cmd_evaluate(S);
    if (S.command == "trend")
      return cmd_trend(S);
    if (S.command == "gradcheck")
      return cmd_gradcheck(S);
    throw std::logic_error("unhandled command " + S.command);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
