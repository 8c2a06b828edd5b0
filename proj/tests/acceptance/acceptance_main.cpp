// End-to-end acceptance gate. Each numbered criterion prints one PASS/FAIL
// line with the measured values next to its fixed bound. Trained runs are
// cached under --cache-dir keyed by run name, so a warm cache replays the
// whole gate in minutes; a cold cache trains everything first (hours).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

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

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(double v) { return format_double(v); }

struct Gate {
  int passed = 0, failed = 0;
  std::vector<int> only; // empty: run everything
  bool wants(int id) const {
    return only.empty() || std::find(only.begin(), only.end(), id) != only.end();
  }
  void report(int id, const std::string &name, bool pass, const std::string &detail) {
    std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    (pass ? passed : failed) += 1;
  }
  void run(int id, const std::string &name, const std::function<std::pair<bool, std::string>()> &fn) {
    if (!wants(id)) {
      std::printf("[SKIP] %d %s\n", id, name.c_str());
      std::fflush(stdout);
      return;
    }
    try {
      const auto [pass, detail] = fn();
      report(id, name, pass, detail);
    } catch (const std::exception &e) {
      report(id, name, false, std::string("exception: ") + e.what());
    }
  }
};

struct Model {
  ModelConfig cfg;
  AttributeCodec codec;
  LossWeights loss;
  ParamStore<float> store;
};

Model load_model(const std::string &path) {
  Model m;
  const Checkpoint ck = load_checkpoint(path);
  m.cfg = read_model_config(ck);
  m.codec = read_codec(ck);
  m.loss = read_loss_weights(ck);
  register_model_params(m.store, m.cfg, 0);
  Adam<float> scratch;
  read_params(ck, m.store, scratch);
  return m;
}

std::vector<const Subject *> ptrs(const Dataset &ds, const std::vector<int> &idx) {
  std::vector<const Subject *> out;
  out.reserve(idx.size());
  for (int i : idx)
    out.push_back(&ds.subjects.at(i));
  return out;
}

double mean_of(const std::vector<double> &v) {
  double s = 0;
  for (double x : v)
    s += x;
  return s / static_cast<double>(v.size());
}

double stdev_of(const std::vector<double> &v) {
  const double m = mean_of(v);
  double s = 0;
  for (double x : v)
    s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------- dataset

constexpr uint64_t kDataSeed = 1234;
constexpr uint64_t kSplitSeed = 1234;

Dataset ensure_dataset(const fs::path &cache) {
  const fs::path dir = cache / "ds500";
  if (!fs::exists(dir / "manifest.txt")) {
    PopulationSpec spec; // desk-scale defaults: 500 subjects on a 96x96 grid
    spec.seed = kDataSeed;
    std::printf("generating %d-subject population ...\n", spec.n_subjects);
    std::fflush(stdout);
    const Dataset ds = generate_population(spec);
    const fs::path tmp = cache / "ds500.part";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    save_dataset(ds, tmp.string());
    fs::rename(tmp, dir);
    return ds;
  }
  return load_dataset(dir.string());
}

// ------------------------------------------------------------------- runs

struct RunSpec {
  std::string name;
  Variant variant = Variant::cond;
  CentralityMode centrality = CentralityMode::conditional;
  TemplateInit init = TemplateInit::mean_of_n;
  uint64_t seed = 1;
  int epochs = 12;
};

struct RunInfo {
  fs::path dir;
  std::string best_ckpt;
  double train_seconds = 0;
};

TrainConfig run_train_config(const Dataset &ds, const RunSpec &r, const std::string &out) {
  TrainConfig tc;
  tc.model.dims = ds.grid.dims;
  tc.model.n_labels = ds.n_labels;
  tc.model.variant = r.variant;
  tc.model.attr_dim = ds.codec.dim();
  tc.loss.centrality = r.centrality;
  tc.lr = 1e-3;
  tc.batch = 3;
  tc.epochs = r.epochs;
  tc.early_stop_window = 0;
  tc.val_cap = 16;
  tc.init = r.init;
  tc.init_n = 100;
  tc.seed = r.seed;
  tc.out_dir = out;
  return tc;
}

RunInfo ensure_run(const fs::path &cache, const Dataset &ds, const SplitIndices &split,
                   const RunSpec &r) {
  RunInfo info;
  info.dir = cache / "runs" / r.name;
  const fs::path secs = info.dir / "train_seconds.txt";
  if (!fs::exists(info.dir / "final.ckpt")) {
    fs::remove_all(info.dir);
    fs::create_directories(info.dir);
    const TrainConfig tc = run_train_config(ds, r, info.dir.string());
    const double t0 = now_s();
    Trainer<float> tr(ds, split, tc);
    tr.run();
    std::ofstream(secs) << fmt(now_s() - t0) << "\n";
  }
  info.best_ckpt = (info.dir / "best.ckpt").string();
  if (fs::exists(secs))
    std::ifstream(secs) >> info.train_seconds;
  return info;
}

std::vector<RunSpec> run_table() {
  std::vector<RunSpec> specs;
  for (uint64_t s = 1; s <= 3; ++s) {
    specs.push_back({"cond-kde-mean-s" + std::to_string(s), Variant::cond,
                     CentralityMode::conditional, TemplateInit::mean_of_n, s});
    specs.push_back({"noseg-kde-mean-s" + std::to_string(s), Variant::cond_no_seg,
                     CentralityMode::conditional, TemplateInit::mean_of_n, s});
    specs.push_back({"uncond-lt-mean-s" + std::to_string(s), Variant::uncond,
                     CentralityMode::lt2019, TemplateInit::mean_of_n, s});
    specs.push_back({"cond-lt-mean-s" + std::to_string(s), Variant::cond,
                     CentralityMode::lt2019, TemplateInit::mean_of_n, s});
    specs.push_back({"cond-kde-single-s" + std::to_string(s), Variant::cond,
                     CentralityMode::conditional, TemplateInit::single_subject, s});
  }
  return specs;
}

void warm_runs(const fs::path &cache, const Dataset &ds, const SplitIndices &split,
               const std::vector<RunSpec> &specs, int jobs) {
  std::atomic<size_t> next{0};
  std::mutex io;
  auto worker = [&] {
    for (size_t i; (i = next.fetch_add(1)) < specs.size();) {
      const bool cached = fs::exists(cache / "runs" / specs[i].name / "final.ckpt");
      const RunInfo info = ensure_run(cache, ds, split, specs[i]);
      std::lock_guard<std::mutex> lk(io);
      std::printf("  run %-20s %s (%.0fs)\n", specs[i].name.c_str(),
                  cached ? "cached" : "trained", info.train_seconds);
      std::fflush(stdout);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::max(1, jobs); ++t)
    pool.emplace_back(worker);
  for (auto &t : pool)
    t.join();
}

// ------------------------------------------------------- cached run metrics

struct RunEval {
  double dice = 0;
  double neg_jac = 0;
};

RunEval eval_run(const Dataset &ds, const SplitIndices &split, const RunInfo &info) {
  const fs::path f = info.dir / "accept_eval.txt";
  if (fs::exists(f)) {
    const Config c = Config::load(f.string());
    return {c.get_double("dice"), c.get_double("neg_jac")};
  }
  const Model m = load_model(info.best_ckpt);
  Volume posthoc;
  const Volume *seg_override = nullptr;
  if (!variant_has_seg(m.cfg.variant)) {
    posthoc = posthoc_template_labels(m.store, m.cfg, m.codec, ptrs(ds, split.train), ds.n_labels);
    seg_override = &posthoc;
  }
  const MetricReport rep =
      evaluate_subjects(m.store, m.cfg, m.codec, ptrs(ds, split.test), ds.n_labels, seg_override);
  std::ofstream(f) << "dice = " << fmt(rep.dice_mean) << "\nneg_jac = " << fmt(rep.neg_jac_mean)
                   << "\n";
  return {rep.dice_mean, rep.neg_jac_mean};
}

// Mean relative ventricle-volume error against the population KDE curve,
// averaged over ages 20..80 and both sexes.
double vent_trend_err(const Dataset &ds, const RunInfo &info) {
  const fs::path f = info.dir / "accept_trend.txt";
  if (fs::exists(f))
    return Config::load(f.string()).get_double("vent_rel_err");
  const Model m = load_model(info.best_ckpt);
  std::vector<const Subject *> all;
  for (const Subject &s : ds.subjects)
    all.push_back(&s);
  const std::vector<double> ages = {20, 30, 40, 50, 60, 70, 80};
  std::vector<double> errs;
  for (const std::string sex : {"F", "M"}) {
    const TrendReport rep = trend_analysis(m.store, m.cfg, m.codec, all, sex, ages, 5.0, ds.grid);
    for (const TrendCurve &c : rep.curves)
      if (c.label == label_ventricle)
        for (double e : c.rel_err)
          if (std::isfinite(e))
            errs.push_back(e);
  }
  const double err = mean_of(errs);
  std::ofstream(f) << "vent_rel_err = " << fmt(err) << "\n";
  return err;
}

std::vector<int64_t> template_label_counts(const Model &m, const Grid &grid, double age,
                                           const std::string &sex) {
  AttributeRecord rec;
  rec.age = age;
  rec.sex = sex;
  const TemplateResult tr = decode_template(m.store, m.cfg, m.codec, rec, grid);
  std::vector<int64_t> counts(m.cfg.n_labels, 0);
  for (int64_t i = 0; i < grid.numel(); ++i) {
    int best = 0;
    for (int c = 1; c < m.cfg.n_labels; ++c)
      if (tr.seg_prob.at(c, i) > tr.seg_prob.at(best, i))
        best = c;
    counts[best] += 1;
  }
  return counts;
}

// ------------------------------------------------------ closed-loop fixture

// Population warped out of one fixed noise-free template by smooth random
// flows; the no-seg pipeline must recover that template's labels post hoc.
struct ClosedLoop {
  Dataset ds;
  LabelMap truth;
};

ClosedLoop build_closed_loop() {
  PopulationSpec spec;
  spec.dims = {64, 64};
  spec.shape_noise = 0;
  spec.deform_amp = 0;
  spec.intensity_jitter = 0;
  spec.image_noise = 0;
  const Subject tmpl = make_subject(spec, "tmpl", 50.0, "F", 4242);

  ClosedLoop out;
  out.truth = tmpl.seg;
  out.ds.grid = spec.grid();
  out.ds.n_labels = phantom_n_labels;
  out.ds.codec = spec.codec();

  const Grid g = spec.grid();
  Volume onehot(g, phantom_n_labels);
  for (int64_t i = 0; i < g.numel(); ++i)
    onehot.at(tmpl.seg.labels[i], i) = 1.f;

  for (int k = 0; k < 60; ++k) {
    std::mt19937_64 rng = make_rng(4242, 0xC10D + static_cast<uint64_t>(k));
    std::normal_distribution<float> nrm(0.f, 1.f);
    VectorField v(g, FieldKind::velocity);
    for (auto &x : v.data)
      x = nrm(rng);
    for (int d = 0; d < g.ndim(); ++d) {
      std::vector<float> chan(v.component(d), v.component(d) + g.numel());
      gaussian_blur(chan, g.dims, 8.0);
      std::copy(chan.begin(), chan.end(), v.component(d));
    }
    double rms = 0;
    for (float x : v.data)
      rms += double(x) * x;
    rms = std::sqrt(rms / static_cast<double>(v.data.size()));
    for (auto &x : v.data)
      x = static_cast<float>(x * 2.0 / rms);

    const VectorField u = integrate_velocity(v, 7);
    Subject s;
    char id[8];
    std::snprintf(id, sizeof(id), "c%03d", k);
    s.id = id;
    s.attr.age = 50.0;
    s.attr.sex = "F";
    s.image = warp(tmpl.image, u);
    const Volume wh = warp(onehot, u);
    s.seg = LabelMap(g);
    s.gt_volumes.assign(phantom_n_labels, 0);
    for (int64_t i = 0; i < g.numel(); ++i) {
      int best = 0;
      for (int c = 1; c < phantom_n_labels; ++c)
        if (wh.at(c, i) > wh.at(best, i))
          best = c;
      s.seg.labels[i] = best;
      s.gt_volumes[best] += 1;
    }
    s.gen_seed = static_cast<uint64_t>(k);
    out.ds.subjects.push_back(std::move(s));
  }
  return out;
}

} // namespace

int main(int argc, char **argv) {
  std::string cache_str = "acceptance_cache";
  int jobs = std::max(1, std::min(4, static_cast<int>(std::thread::hardware_concurrency())));
  if (const char *env = std::getenv("ACCEPT_JOBS"))
    jobs = std::max(1, std::atoi(env));
  Gate gate;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cache-dir" && i + 1 < argc) {
      cache_str = argv[++i];
    } else if (a == "--jobs" && i + 1 < argc) {
      jobs = std::max(1, std::atoi(argv[++i]));
    } else if (a == "--only" && i + 1 < argc) {
      std::istringstream in(argv[++i]);
      std::string tok;
      while (std::getline(in, tok, ','))
        gate.only.push_back(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: %s [--cache-dir DIR] [--jobs N] [--only 1,2,...]\n", argv[0]);
      return 2;
    }
  }
  const fs::path cache = fs::absolute(cache_str);
  fs::create_directories(cache / "runs");
  worker_threads() = jobs;

  // 1. Analytic gradients vs central finite differences, every op plus the
  //    full four-term loss on a 16x16 three-label instance, float64.
  gate.run(1, "gradient correctness", [&]() -> std::pair<bool, std::string> {
    const double t0 = now_s();
    const auto rows = run_gradcheck_suite(1e-4, 1e-4, 1);
    const double secs = now_s() - t0;
    double worst = 0;
    std::string worst_name = "-";
    bool all = true;
    for (const auto &r : rows) {
      all = all && r.pass;
      if (r.max_rel_err > worst) {
        worst = r.max_rel_err;
        worst_name = r.name;
      }
    }
    const bool pass = all && secs < 120.0;
    return {pass, "max rel err " + fmt(worst) + " (" + worst_name + ", bound 1e-4) over " +
                      std::to_string(rows.size()) + " cases, " + fmt(secs) + "s (limit 120s)"};
  });

  // 2. Flow-integration oracles: constant field exactness, the closed-form
  //    exponential law for a linear field, and inverse consistency.
  gate.run(2, "flow oracles", [&]() -> std::pair<bool, std::string> {
    const double t0 = now_s();

    double const_err = 0;
    for (int nd = 2; nd <= 3; ++nd) {
      const Grid g(nd == 2 ? std::vector<int>{12, 10} : std::vector<int>{8, 6, 6});
      VectorField v(g, FieldKind::velocity);
      for (int d = 0; d < nd; ++d)
        for (int64_t i = 0; i < g.numel(); ++i)
          v.at(d, i) = 0.4f * (d + 1);
      const VectorField u = integrate_velocity(v, 7);
      for (size_t i = 0; i < u.data.size(); ++i)
        const_err = std::max(const_err, double(std::abs(u.data[i] - v.data[i])));
    }

    const Grid gl({24, 24});
    const double a = 0.05, c0 = 11.5;
    VectorField vl(gl, FieldKind::velocity);
    for (int i0 = 0; i0 < 24; ++i0)
      for (int i1 = 0; i1 < 24; ++i1) {
        const int64_t i = i0 * 24 + i1;
        vl.at(0, i) = static_cast<float>(a * (i0 - c0));
        vl.at(1, i) = static_cast<float>(a * (i1 - c0));
      }
    const VectorField ul = integrate_velocity(vl, 7);
    const double kexp = std::exp(a) - 1;
    double lin_err = 0;
    for (int i0 = 2; i0 < 22; ++i0)
      for (int i1 = 2; i1 < 22; ++i1) {
        const int64_t i = i0 * 24 + i1;
        lin_err = std::max(lin_err, std::abs(ul.at(0, i) - kexp * (i0 - c0)));
        lin_err = std::max(lin_err, std::abs(ul.at(1, i) - kexp * (i1 - c0)));
      }

    const Grid gi({32, 32});
    VectorField vi(gi, FieldKind::velocity);
    std::mt19937_64 rng = make_rng(5, 0x5F1E1D);
    std::normal_distribution<float> nrm(0.f, 1.f);
    for (auto &x : vi.data)
      x = nrm(rng);
    for (int d = 0; d < 2; ++d) {
      std::vector<float> chan(vi.component(d), vi.component(d) + gi.numel());
      gaussian_blur(chan, gi.dims, 4.0);
      std::copy(chan.begin(), chan.end(), vi.component(d));
    }
    float mx = 0;
    for (float x : vi.data)
      mx = std::max(mx, std::abs(x));
    for (auto &x : vi.data)
      x = x * 2.0f / mx; // ||v||_inf = 2
    const VectorField uf = integrate_velocity(vi, 7);
    const VectorField ub = invert_velocity(vi, 7);
    const VectorField round = compose(uf, ub); // phi o phi^{-1}
    double inv_res = 0;
    for (int i0 = 4; i0 < 28; ++i0)
      for (int i1 = 4; i1 < 28; ++i1)
        for (int d = 0; d < 2; ++d)
          inv_res = std::max(inv_res, double(std::abs(round.at(d, i0 * 32 + i1))));

    const double secs = now_s() - t0;
    const bool pass = const_err < 1e-6 && lin_err < 1e-3 && inv_res < 0.05 && secs < 60.0;
    return {pass, "const " + fmt(const_err) + " (<1e-6), linear " + fmt(lin_err) +
                      " (<1e-3), inverse " + fmt(inv_res) + " (<0.05), " + fmt(secs) +
                      "s (limit 60s)"};
  });

  // Shared dataset, split, and trained runs for criteria 3..8.
  Dataset ds;
  SplitIndices split;
  std::vector<RunSpec> specs;
  std::vector<RunInfo> infos;
  bool runs_ready = false;
  bool needs_runs = false;
  for (int id : {3, 4, 5, 6, 7, 8})
    needs_runs = needs_runs || gate.wants(id);
  if (needs_runs)
    try {
      ds = ensure_dataset(cache);
      split = split_dataset(static_cast<int>(ds.subjects.size()), {0.8, 0.1, 0.1}, kSplitSeed);
      specs = run_table();
      warm_runs(cache, ds, split, specs, jobs);
      for (const RunSpec &r : specs)
        infos.push_back(ensure_run(cache, ds, split, r));
      runs_ready = true;
    } catch (const std::exception &e) {
      std::printf("run preparation failed: %s\n", e.what());
    }
  auto info_for = [&](const std::string &name) -> const RunInfo & {
    for (size_t i = 0; i < specs.size(); ++i)
      if (specs[i].name == name)
        return infos[i];
    throw std::runtime_error("missing run " + name);
  };
  auto dice_over_seeds = [&](const std::string &prefix) {
    std::vector<double> out;
    for (int s = 1; s <= 3; ++s)
      out.push_back(eval_run(ds, split, info_for(prefix + std::to_string(s))).dice);
    return out;
  };

  // 3. Deformation regularity of the trained default model on the test
  //    split: negative-Jacobian fraction below 0.5% for every seed.
  gate.run(3, "regularity at convergence", [&]() -> std::pair<bool, std::string> {
    if (!runs_ready)
      throw std::runtime_error("trained runs unavailable");
    double worst = 0;
    for (int s = 1; s <= 3; ++s)
      worst = std::max(worst,
                       eval_run(ds, split, info_for("cond-kde-mean-s" + std::to_string(s))).neg_jac);
    return {worst < 0.005, "max neg-Jacobian fraction over 3 seeds " + fmt(worst) + " (<0.005)"};
  });

  // 4. Ablation ordering of mean test Dice over 3 seeds, margins >= 0.01,
  //    with per-variant training time under 30 minutes.
  gate.run(4, "ablation ordering", [&]() -> std::pair<bool, std::string> {
    if (!runs_ready)
      throw std::runtime_error("trained runs unavailable");
    const double cond = mean_of(dice_over_seeds("cond-kde-mean-s"));
    const double noseg = mean_of(dice_over_seeds("noseg-kde-mean-s"));
    const double uncond = mean_of(dice_over_seeds("uncond-lt-mean-s"));
    double max_secs = 0;
    for (const RunInfo &i : infos)
      max_secs = std::max(max_secs, i.train_seconds);
    const bool pass =
        cond - noseg >= 0.01 && cond - uncond >= 0.01 && max_secs < 1800.0;
    return {pass, "dice cond " + fmt(cond) + ", no-seg " + fmt(noseg) + ", uncond " +
                      fmt(uncond) + "; margins " + fmt(cond - noseg) + "/" + fmt(cond - uncond) +
                      " (>=0.01); max train " + fmt(max_secs) + "s (limit 1800s)"};
  });

  // 5. Conditional centrality tracks the population ventricle curve better
  //    than the global-centrality baseline, and within 15% itself.
  gate.run(5, "trend centrality", [&]() -> std::pair<bool, std::string> {
    if (!runs_ready)
      throw std::runtime_error("trained runs unavailable");
    std::vector<double> kde, lt;
    for (int s = 1; s <= 3; ++s) {
      kde.push_back(vent_trend_err(ds, info_for("cond-kde-mean-s" + std::to_string(s))));
      lt.push_back(vent_trend_err(ds, info_for("cond-lt-mean-s" + std::to_string(s))));
    }
    const double ek = mean_of(kde), el = mean_of(lt);
    return {ek < el && ek < 0.15, "ventricle rel err: conditional " + fmt(ek) +
                                      " vs lt2019 " + fmt(el) + " (< baseline and <0.15)"};
  });

  // 6. Template volume trends: ventricle strictly grows and hippocampus
  //    strictly shrinks over ages 20/50/80 for both sexes.
  gate.run(6, "monotone trend reproduction", [&]() -> std::pair<bool, std::string> {
    if (!runs_ready)
      throw std::runtime_error("trained runs unavailable");
    const Model m = load_model(info_for("cond-kde-mean-s1").best_ckpt);
    std::string detail;
    bool pass = true;
    for (const std::string sex : {"F", "M"}) {
      std::vector<int64_t> vent, hip;
      for (double age : {20.0, 50.0, 80.0}) {
        const auto counts = template_label_counts(m, ds.grid, age, sex);
        vent.push_back(counts[label_ventricle]);
        hip.push_back(counts[label_hippocampus]);
      }
      pass = pass && vent[0] < vent[1] && vent[1] < vent[2];
      pass = pass && hip[0] > hip[1] && hip[1] > hip[2];
      detail += sex + " vent " + std::to_string(vent[0]) + "/" + std::to_string(vent[1]) + "/" +
                std::to_string(vent[2]) + " hip " + std::to_string(hip[0]) + "/" +
                std::to_string(hip[1]) + "/" + std::to_string(hip[2]) + "  ";
    }
    return {pass, detail + "(vent strictly up, hip strictly down)"};
  });

  // 7. Template initialization: the 100-subject mean beats a single random
  //    subject on mean test Dice and on across-seed stability.
  gate.run(7, "initialization study", [&]() -> std::pair<bool, std::string> {
    if (!runs_ready)
      throw std::runtime_error("trained runs unavailable");
    const std::vector<double> mean100 = dice_over_seeds("cond-kde-mean-s");
    const std::vector<double> single = dice_over_seeds("cond-kde-single-s");
    const double m1 = mean_of(mean100), m2 = mean_of(single);
    const double s1 = stdev_of(mean100), s2 = stdev_of(single);
    return {m1 > m2 && s1 < s2, "dice mean-of-100 " + fmt(m1) + " +- " + fmt(s1) +
                                    " vs single-subject " + fmt(m2) + " +- " + fmt(s2) +
                                    " (higher mean, lower std)"};
  });

  // 8. Invariant suite: simplex templates, Dice identities, the zero-flow
  //    loss decomposition, KDE weight-scaling invariance, dataset
  //    round-trips, and seeded reproducibility.
  gate.run(8, "invariant suites", [&]() -> std::pair<bool, std::string> {
    std::vector<std::string> bad;

    { // trained template probabilities form a simplex
      if (!runs_ready)
        throw std::runtime_error("trained runs unavailable");
      const Model m = load_model(info_for("cond-kde-mean-s1").best_ckpt);
      AttributeRecord rec;
      rec.age = 35;
      rec.sex = "F";
      const TemplateResult tr = decode_template(m.store, m.cfg, m.codec, rec, ds.grid);
      double worst = 0;
      double min_p = 1;
      for (int64_t i = 0; i < ds.grid.numel(); ++i) {
        double s = 0;
        for (int c = 0; c < m.cfg.n_labels; ++c) {
          s += tr.seg_prob.at(c, i);
          min_p = std::min(min_p, double(tr.seg_prob.at(c, i)));
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
      if (worst > 1e-5 || min_p < -1e-7)
        bad.push_back("simplex");
    }

    { // Dice identities on 1 / 0 / 0.5 fixtures
      LabelMap a(Grid({4, 4})), b(Grid({4, 4})), c(Grid({4, 4})), h(Grid({4, 4}));
      a.labels[5] = a.labels[6] = 1;
      b.labels = a.labels;
      c.labels[9] = c.labels[10] = 1;
      h.labels[6] = h.labels[7] = 1;
      const bool ok = dice(a, b, 2).per_label[1] == 1.0 && dice(a, c, 2).per_label[1] == 0.0 &&
                      dice(a, h, 2).per_label[1] == 0.5;
      if (!ok)
        bad.push_back("dice-identities");
    }

    { // zero-flow step 0: smooth and central vanish, total = img + seg
      ModelConfig cfg;
      cfg.dims = {16, 16};
      cfg.n_labels = 3;
      cfg.attr_dim = 3;
      cfg.head_init_std = 0;
      ParamStore<float> st;
      register_model_params(st, cfg, 11);
      std::mt19937_64 rng = make_rng(11, 77);
      std::normal_distribution<float> nrm(0.5f, 0.3f);
      Volume img(Grid(cfg.dims), 1), onehot(Grid(cfg.dims), 3);
      std::uniform_int_distribution<int> lab(0, 2);
      for (auto &x : img.data)
        x = nrm(rng);
      for (int64_t i = 0; i < img.grid.numel(); ++i)
        onehot.at(lab(rng), i) = 1.f;
      LossWeights lw;
      std::vector<SubjectTerm<float>> batch(2);
      for (auto &t : batch) {
        t.image = &img;
        t.onehot = &onehot;
        t.attr = {0.4f, 1.f, 0.f};
        t.weight = 0.5f;
      }
      Tape<float> tape;
      BoundParams<float> bound;
      const StepGraph<float> g = build_step_graph(tape, st, bound, cfg, lw, batch);
      if (!(tape.scalar(g.smooth) == 0.0 && tape.scalar(g.central) == 0.0 &&
            std::abs(tape.scalar(g.total) - tape.scalar(g.img) - tape.scalar(g.seg)) < 1e-9))
        bad.push_back("zero-flow-decomposition");

      // scaling every KDE weight by a constant leaves the normalized mean
      // displacement, and so the centrality term, unchanged
      auto &fb = st.named("unet.flow.b").value;
      fb[0] = 0.25f;
      fb[1] = -0.5f;
      auto central_for = [&](float w1, float w2) {
        std::vector<SubjectTerm<float>> b2 = batch;
        b2[0].weight = w1 / (w1 + w2);
        b2[1].weight = w2 / (w1 + w2);
        Tape<float> t2;
        BoundParams<float> bo2;
        return t2.scalar(build_step_graph(t2, st, bo2, cfg, lw, b2).central);
      };
      if (std::abs(central_for(0.6f, 0.4f) - central_for(6.f, 4.f)) > 1e-12)
        bad.push_back("kde-scale-invariance");
    }

    { // dataset round-trip is bit-exact
      PopulationSpec spec;
      spec.n_subjects = 8;
      spec.dims = {32, 32};
      spec.seed = 77;
      const Dataset d0 = generate_population(spec);
      const fs::path dir = cache / "roundtrip_ds";
      fs::remove_all(dir);
      fs::create_directories(dir);
      save_dataset(d0, dir.string());
      const Dataset d1 = load_dataset(dir.string());
      bool ok = d0.subjects.size() == d1.subjects.size();
      for (size_t i = 0; ok && i < d0.subjects.size(); ++i) {
        const Subject &x = d0.subjects[i], &y = d1.subjects[i];
        ok = x.id == y.id && x.attr.age == y.attr.age && x.attr.sex == y.attr.sex &&
             x.image.data == y.image.data && x.seg.labels == y.seg.labels &&
             x.gt_volumes == y.gt_volumes;
      }
      if (!ok)
        bad.push_back("dataset-roundtrip");
    }

    { // the same seed replays the same training trajectory bit for bit
      PopulationSpec spec;
      spec.n_subjects = 8;
      spec.dims = {32, 32};
      spec.seed = 77;
      const Dataset d0 = generate_population(spec);
      const SplitIndices si = split_dataset(8, {0.5, 0.25, 0.25}, 5);
      TrainConfig tc;
      tc.model.dims = {32, 32};
      tc.model.n_labels = d0.n_labels;
      tc.model.attr_dim = d0.codec.dim();
      tc.lr = 1e-3;
      tc.batch = 2;
      tc.epochs = 1;
      tc.max_steps = 4;
      tc.init_n = 4;
      tc.seed = 5;
      Trainer<float> t1(d0, si, tc), t2(d0, si, tc);
      t1.run();
      t2.run();
      bool ok = true;
      for (int p = 0; p < t1.params().count(); ++p)
        ok = ok && t1.params().at(p).value == t2.params().at(p).value;
      if (!ok)
        bad.push_back("seeded-reproducibility");
    }

    if (bad.empty())
      return {true, "simplex, dice identities, zero-flow decomposition, KDE scaling, "
                    "dataset round-trip, seeded reproducibility all hold"};
    std::string d = "failed:";
    for (const auto &b : bad)
      d += " " + b;
    return {false, d};
  });

  // 9. No-seg post-hoc label recovery on the closed-loop fixture.
  gate.run(9, "posthoc label recovery", [&]() -> std::pair<bool, std::string> {
    const ClosedLoop cl = build_closed_loop();
    const SplitIndices si = split_dataset(static_cast<int>(cl.ds.subjects.size()), {0.8, 0.1, 0.1}, 1);

    RunInfo info;
    info.dir = cache / "closedloop";
    const fs::path secs = info.dir / "train_seconds.txt";
    if (!fs::exists(info.dir / "final.ckpt")) {
      fs::remove_all(info.dir);
      fs::create_directories(info.dir);
      TrainConfig tc;
      tc.model.dims = cl.ds.grid.dims;
      tc.model.n_labels = cl.ds.n_labels;
      tc.model.variant = Variant::uncond_no_seg;
      tc.model.attr_dim = cl.ds.codec.dim();
      tc.loss.centrality = CentralityMode::lt2019;
      tc.lr = 1e-3;
      tc.batch = 3;
      tc.epochs = 20;
      tc.early_stop_window = 0;
      tc.val_cap = 6;
      tc.init_n = static_cast<int>(si.train.size());
      tc.seed = 1;
      tc.out_dir = info.dir.string();
      const double t0 = now_s();
      Trainer<float> tr(cl.ds, si, tc);
      tr.run();
      std::ofstream(secs) << fmt(now_s() - t0) << "\n";
    }
    info.best_ckpt = (info.dir / "best.ckpt").string();

    const Model m = load_model(info.best_ckpt);
    const Volume probs =
        posthoc_template_labels(m.store, m.cfg, m.codec, ptrs(cl.ds, si.train), cl.ds.n_labels);
    LabelMap hard(cl.ds.grid);
    for (int64_t i = 0; i < cl.ds.grid.numel(); ++i) {
      int best = 0;
      for (int c = 1; c < cl.ds.n_labels; ++c)
        if (probs.at(c, i) > probs.at(best, i))
          best = c;
      hard.labels[i] = best;
    }
    const DiceResult d = dice(hard, cl.truth, cl.ds.n_labels);
    return {d.mean > 0.9, "posthoc vs generating template dice " + fmt(d.mean) + " (>0.9)"};
  });

  std::printf("%d of %d criteria passed\n", gate.passed, gate.passed + gate.failed);
  return gate.failed == 0 ? 0 : 1;
}
