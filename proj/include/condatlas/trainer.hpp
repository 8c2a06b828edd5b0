#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condatlas/checkpoint.hpp"
#include "condatlas/losses.hpp"
#include "condatlas/models.hpp"
#include "condatlas/optim.hpp"
#include "condatlas/synthdata.hpp"

namespace condatlas {

struct TrainConfig {
  ModelConfig model;
  LossWeights loss;
  double lr = 1e-4;
  int batch = 3;
  int epochs = 300;
  int steps_per_epoch = 0;    // 0: ceil(n_train / batch)
  int early_stop_window = 20; // epochs without val improvement; 0 disables
  double early_stop_delta = 1e-3;
  int val_every = 1;          // epochs between validation passes
  int val_cap = 16;           // validation subjects for the early-stop metric
  int checkpoint_every = 0;   // epochs; 0: only best + final
  int64_t max_steps = 0;      // 0: unlimited
  TemplateInit init = TemplateInit::mean_of_n;
  int init_n = 100;
  uint64_t seed = 1;
  std::string out_dir; // loss.csv + checkpoints; empty: keep everything in memory
  bool float64 = false;
  bool verbose = false;
};

struct StepInfo {
  int64_t step = 0;
  double img = 0, seg = 0, smooth = 0, central = 0, total = 0;
  double anchor_age = 0; // NaN when the mode draws no anchor
  bool uniform_fallback = false;
};

struct TrainResult {
  int64_t steps = 0;
  int epochs_run = 0;
  double best_val = 0;
  int best_epoch = -1;
  bool early_stopped = false;
  std::string final_checkpoint, best_checkpoint;
};

// Joint template + registration training. Each step draws its RNG stream
// from (seed, global step), so a resumed run replays the exact schedule of
// an uninterrupted one.
template <typename T> class Trainer {
public:
  Trainer(const Dataset &ds, const SplitIndices &split, const TrainConfig &cfg);

  StepInfo step();
  double validate(); // mean val Dice, or negated image MSE for no-seg variants
  TrainResult run();

  void save_to(const std::string &path) const;
  void resume_from(const std::string &path);

  ParamStore<T> &params() { return store_; }
  const ParamStore<T> &params() const { return store_; }
  ParamStore<float> snapshot_float() const;
  int64_t global_step() const { return step_; }
  int epoch() const { return epoch_; }
  int steps_per_epoch() const;

private:
  void append_loss_row(const StepInfo &info);

  const Dataset &ds_;
  TrainConfig cfg_;
  std::vector<int> train_idx_, val_idx_;
  ParamStore<T> store_;
  Adam<T> adam_;
  CentralityState centrality_;
  std::vector<std::vector<T>> attr_cache_; // per train subject
  int64_t step_ = 0;
  int epoch_ = 0;
  double best_val_ = 0;
  int best_epoch_ = -1;
  bool warned_fallback_ = false;
  std::vector<std::pair<int, double>> val_history_; // (epoch, metric)
};

extern template class Trainer<float>;
extern template class Trainer<double>;

// Dispatches on cfg.float64.
TrainResult train_model(const Dataset &ds, const SplitIndices &split, const TrainConfig &cfg);

} // namespace condatlas
