#include "condatlas/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <type_traits>

#include "condatlas/eval.hpp"
#include "condatlas/field_ops.hpp"
#include "condatlas/reportio.hpp"
#include "condatlas/util.hpp"

namespace fs = std::filesystem;

namespace condatlas {

namespace {
constexpr uint64_t step_stream_base = 0x1000000000ULL;
constexpr double qnan = std::numeric_limits<double>::quiet_NaN();
} // namespace

template <typename T>
Trainer<T>::Trainer(const Dataset &ds, const SplitIndices &split, const TrainConfig &cfg)
    : ds_(ds), cfg_(cfg), train_idx_(split.train), val_idx_(split.val) {
  cfg_.model.validate();
  if (train_idx_.empty())
    throw std::invalid_argument("trainer: empty training split");
  for (int i : train_idx_)
    if (i < 0 || i >= static_cast<int>(ds.subjects.size()))
      throw std::invalid_argument("trainer: train index out of range");
  if (cfg_.batch < 1)
    throw std::invalid_argument("trainer: batch must be >= 1");
  if (variant_conditional(cfg_.model.variant) && cfg_.model.attr_dim != ds.codec.dim())
    throw std::invalid_argument("trainer: model attr_dim does not match the dataset codec");
  if (variant_has_seg(cfg_.model.variant) && cfg_.model.n_labels != ds.n_labels)
    throw std::invalid_argument("trainer: model n_labels does not match the dataset");

  register_model_params(store_, cfg_.model, cfg_.seed);
  if (cfg_.init != TemplateInit::zeros) {
    std::vector<const Volume *> imgs;
    imgs.reserve(train_idx_.size());
    for (int i : train_idx_)
      imgs.push_back(&ds.subjects[i].image);
    std::mt19937_64 rng = make_rng(cfg_.seed, 0x494e4954ULL);
    if constexpr (std::is_same_v<T, float>) {
      init_template(store_, cfg_.model, imgs, cfg_.init, cfg_.init_n, rng);
    } else {
      // Share one float code path, then widen.
      ParamStore<float> fstore;
      register_model_params(fstore, cfg_.model, cfg_.seed);
      init_template(fstore, cfg_.model, imgs, cfg_.init, cfg_.init_n, rng);
      const char *target = variant_conditional(cfg_.model.variant) ? "tdec.bias_vol" : "tmpl.intensity";
      const Parameter<float> &src = fstore.named(target);
      Parameter<T> &dst = store_.named(target);
      dst.value.assign(src.value.begin(), src.value.end());
    }
  }

  AdamConfig<T> ac;
  ac.lr = T(cfg_.lr);
  adam_ = Adam<T>(ac);

  if (cfg_.loss.centrality == CentralityMode::conditional) {
    std::vector<AttributeRecord> recs;
    recs.reserve(train_idx_.size());
    for (int i : train_idx_)
      recs.push_back(ds.subjects[i].attr);
    centrality_ = CentralityState::build(recs, ds.codec, cfg_.loss);
  }

  if (variant_conditional(cfg_.model.variant)) {
    attr_cache_.reserve(train_idx_.size());
    for (int i : train_idx_) {
      const std::vector<double> a = ds.codec.encode(ds.subjects[i].attr);
      attr_cache_.emplace_back(a.begin(), a.end());
    }
  }

  best_val_ = -std::numeric_limits<double>::infinity();
  if (!cfg_.out_dir.empty())
    fs::create_directories(cfg_.out_dir);
}

template <typename T> int Trainer<T>::steps_per_epoch() const {
  if (cfg_.steps_per_epoch > 0)
    return cfg_.steps_per_epoch;
  const int n = static_cast<int>(train_idx_.size());
  return (n + cfg_.batch - 1) / cfg_.batch;
}

template <typename T> StepInfo Trainer<T>::step() {
  std::mt19937_64 rng = make_rng(cfg_.seed, step_stream_base + static_cast<uint64_t>(step_));
  const int n_train = static_cast<int>(train_idx_.size());
  const int B = std::min(cfg_.batch, n_train);
  const bool cond_mode = cfg_.loss.centrality == CentralityMode::conditional;

  StepInfo info;
  info.step = step_;
  info.anchor_age = qnan;

  std::vector<int> chosen;
  std::vector<double> batch_w(B, 1.0 / B);
  if (cond_mode) {
    std::uniform_int_distribution<int> anchor_d(0, n_train - 1);
    const int anchor = anchor_d(rng);
    info.anchor_age = ds_.subjects[train_idx_[anchor]].attr.age;
    const std::vector<double> w = centrality_.weights_for_anchor(anchor);
    chosen = sample_without_replacement(w, B, rng, &info.uniform_fallback);
    double s = 0;
    for (int k : chosen)
      s += w[k];
    if (s > 0)
      for (int k = 0; k < B; ++k)
        batch_w[k] = w[chosen[k]] / s;
  } else {
    const std::vector<double> ones(n_train, 1.0);
    chosen = sample_without_replacement(ones, B, rng, &info.uniform_fallback);
  }
  if (info.uniform_fallback && !warned_fallback_) {
    std::fprintf(stderr, "trainer: centrality weights vanished at step %lld, sampling uniformly\n",
                 static_cast<long long>(step_));
    warned_fallback_ = true;
  }

  const bool seg = variant_has_seg(cfg_.model.variant);
  std::vector<Volume> onehots(B);
  std::vector<SubjectTerm<T>> items(B);
  for (int k = 0; k < B; ++k) {
    const Subject &s = ds_.subjects[train_idx_[chosen[k]]];
    items[k].image = &s.image;
    if (seg) {
      onehots[k] = one_hot(s.seg, cfg_.model.n_labels);
      items[k].onehot = &onehots[k];
    }
    if (variant_conditional(cfg_.model.variant))
      items[k].attr = attr_cache_[chosen[k]];
    items[k].weight = T(batch_w[k]);
  }

  Tape<T> tape;
  BoundParams<T> bound;
  const StepGraph<T> g = build_step_graph(tape, store_, bound, cfg_.model, cfg_.loss, items);
  info.img = tape.scalar(g.img);
  info.seg = g.seg >= 0 ? tape.scalar(g.seg) : 0.0;
  info.smooth = tape.scalar(g.smooth);
  info.central = g.central >= 0 ? tape.scalar(g.central) : 0.0;
  info.total = tape.scalar(g.total);
  if (!std::isfinite(info.total)) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "training aborted at step %lld: non-finite loss (img=%g seg=%g smooth=%g central=%g)",
                  static_cast<long long>(step_), info.img, info.seg, info.smooth, info.central);
    throw std::runtime_error(buf);
  }

  tape.backward(g.total);
  bound.harvest(tape, store_);
  adam_.step(store_);
  ++step_;
  append_loss_row(info);
  return info;
}

template <typename T> ParamStore<float> Trainer<T>::snapshot_float() const {
  ParamStore<float> out;
  for (int i = 0; i < store_.count(); ++i) {
    const Parameter<T> &p = store_.at(i);
    out.add(p.name, p.shape, std::vector<float>(p.value.begin(), p.value.end()));
  }
  return out;
}

template <typename T> double Trainer<T>::validate() {
  if (val_idx_.empty())
    return 0.0;
  const ParamStore<float> fstore = snapshot_float();
  const int n = std::min<int>(cfg_.val_cap, static_cast<int>(val_idx_.size()));
  const bool seg = variant_has_seg(cfg_.model.variant);
  double sum = 0;
  for (int k = 0; k < n; ++k) {
    const Subject &s = ds_.subjects[val_idx_[k]];
    if (seg) {
      const RegistrationOutput ro = register_and_segment(fstore, cfg_.model, ds_.codec, s.image, s.attr);
      sum += dice(ro.pred, s.seg, cfg_.model.n_labels).mean;
    } else {
      const TemplateResult tr = decode_template(fstore, cfg_.model, ds_.codec, s.attr, s.image.grid);
      const VectorField v = predict_velocity(fstore, cfg_.model, s.image, tr.intensity);
      const VectorField u = integrate_velocity(v, cfg_.model.int_steps);
      const Volume warped = warp(tr.intensity, u);
      double mse = 0;
      for (size_t i = 0; i < warped.data.size(); ++i) {
        const double d = double(s.image.data[i]) - warped.data[i];
        mse += d * d;
      }
      sum += -mse / static_cast<double>(warped.data.size());
    }
  }
  return sum / n;
}

template <typename T> void Trainer<T>::save_to(const std::string &path) const {
  Checkpoint ck;
  ck.set_meta("step", std::to_string(step_));
  ck.set_meta("epoch", std::to_string(epoch_));
  ck.set_meta("best_val", format_double(best_val_));
  ck.set_meta("best_epoch", std::to_string(best_epoch_));
  ck.set_meta("train.lr", format_double(cfg_.lr));
  ck.set_meta("train.batch", std::to_string(cfg_.batch));
  ck.set_meta("train.seed", std::to_string(cfg_.seed));
  ck.set_meta("train.init", template_init_name(cfg_.init));
  write_model_meta(ck, cfg_.model, ds_.codec, cfg_.loss);
  write_params(ck, store_, adam_);
  save_checkpoint(ck, path);
}

template <typename T> void Trainer<T>::resume_from(const std::string &path) {
  const Checkpoint ck = load_checkpoint(path);
  const ModelConfig saved = read_model_config(ck);
  if (variant_name(saved.variant) != variant_name(cfg_.model.variant) || saved.dims != cfg_.model.dims ||
      saved.n_labels != cfg_.model.n_labels || saved.attr_dim != cfg_.model.attr_dim)
    throw std::runtime_error("resume: checkpoint model does not match the configured model");
  read_params(ck, store_, adam_);
  step_ = std::stoll(ck.meta_value("step"));
  epoch_ = std::stoi(ck.meta_value("epoch"));
  best_val_ = std::stod(ck.meta_value("best_val"));
  best_epoch_ = std::stoi(ck.meta_value("best_epoch"));
  val_history_.clear();
}

template <typename T> void Trainer<T>::append_loss_row(const StepInfo &info) {
  if (cfg_.out_dir.empty())
    return;
  const std::string path = (fs::path(cfg_.out_dir) / "loss.csv").string();
  const bool fresh = !fs::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f)
    throw std::runtime_error("trainer: cannot write " + path);
  if (fresh)
    f << csv_row({"step", "epoch", "img", "seg", "smooth", "central", "total", "anchor_age"});
  f << csv_row({std::to_string(info.step), std::to_string(epoch_), format_double(info.img),
                format_double(info.seg), format_double(info.smooth), format_double(info.central),
                format_double(info.total),
                std::isfinite(info.anchor_age) ? format_double(info.anchor_age) : ""});
}

template <typename T> TrainResult Trainer<T>::run() {
  TrainResult res;
  const int spe = steps_per_epoch();
  bool stop = false;
  while (epoch_ < cfg_.epochs && !stop) {
    for (int s = 0; s < spe; ++s) {
      if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) {
        stop = true;
        break;
      }
      step();
    }
    ++epoch_;
    const bool last = epoch_ >= cfg_.epochs || stop;
    if (epoch_ % cfg_.val_every == 0 || last) {
      const double metric = validate();
      val_history_.push_back({epoch_, metric});
      if (metric > best_val_) {
        best_val_ = metric;
        best_epoch_ = epoch_;
        if (!cfg_.out_dir.empty())
          save_to((fs::path(cfg_.out_dir) / "best.ckpt").string());
      }
      if (cfg_.verbose)
        std::fprintf(stderr, "epoch %d step %lld val %.5f best %.5f\n", epoch_,
                     static_cast<long long>(step_), metric, best_val_);
      if (cfg_.early_stop_window > 0) {
        double best_before = -std::numeric_limits<double>::infinity();
        bool covered = false;
        for (const auto &[e, m] : val_history_)
          if (e <= epoch_ - cfg_.early_stop_window) {
            covered = true;
            best_before = std::max(best_before, m);
          }
        if (covered && best_val_ - best_before < cfg_.early_stop_delta) {
          res.early_stopped = true;
          stop = true;
        }
      }
    }
    if (!cfg_.out_dir.empty() && cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0)
      save_to((fs::path(cfg_.out_dir) / "last.ckpt").string());
  }

  if (!cfg_.out_dir.empty()) {
    res.final_checkpoint = (fs::path(cfg_.out_dir) / "final.ckpt").string();
    save_to(res.final_checkpoint);
    const std::string best = (fs::path(cfg_.out_dir) / "best.ckpt").string();
    if (fs::exists(best))
      res.best_checkpoint = best;
  }
  res.steps = step_;
  res.epochs_run = epoch_;
  res.best_val = best_val_;
  res.best_epoch = best_epoch_;
  return res;
}

template class Trainer<float>;
template class Trainer<double>;

TrainResult train_model(const Dataset &ds, const SplitIndices &split, const TrainConfig &cfg) {
  if (cfg.float64) {
    Trainer<double> t(ds, split, cfg);
    return t.run();
  }
  Trainer<float> t(ds, split, cfg);
  return t.run();
}

} // namespace condatlas
