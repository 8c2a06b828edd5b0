#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "condatlas/tape.hpp"

namespace condatlas {

// Named learnable tensor with its accumulated gradient.
template <typename T> struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
};

template <typename T> class ParamStore {
public:
  int add(const std::string &name, const Shape &shape, std::vector<T> init);
  int find(const std::string &name) const; // -1 if absent
  int index_of(const std::string &name) const; // throws if absent
  Parameter<T> &at(int i) { return params_[i]; }
  const Parameter<T> &at(int i) const { return params_[i]; }
  Parameter<T> &named(const std::string &name) { return params_[index_of(name)]; }
  const Parameter<T> &named(const std::string &name) const { return params_[index_of(name)]; }
  int count() const { return static_cast<int>(params_.size()); }
  int64_t scalar_count() const;
  void zero_grads();

private:
  std::vector<Parameter<T>> params_;
};

// Records which tape leaf holds each bound parameter so adjoints can be
// pulled back into Parameter::grad after backward().
template <typename T> struct BoundParams {
  std::vector<std::pair<int, int>> binds; // (param index, node id)

  int bind(Tape<T> &tape, const ParamStore<T> &store, int idx) {
    for (const auto &[pi, id] : binds)
      if (pi == idx)
        return id; // one leaf per parameter; adjoints accumulate there
    const Parameter<T> &p = store.at(idx);
    const int id = tape.leaf(p.shape, p.value, true);
    binds.push_back({idx, id});
    return id;
  }
  int bind(Tape<T> &tape, const ParamStore<T> &store, const std::string &name) {
    return bind(tape, store, store.index_of(name));
  }
  // grad += adjoint for every bound parameter that received gradient.
  void harvest(const Tape<T> &tape, ParamStore<T> &store) const {
    for (const auto &[idx, id] : binds) {
      const std::vector<T> &adj = tape.adjoint(id);
      if (adj.empty())
        continue;
      std::vector<T> &g = store.at(idx).grad;
      for (size_t i = 0; i < adj.size(); ++i)
        g[i] += adj[i];
    }
  }
};

template <typename T> std::vector<T> init_zeros(const Shape &s);
template <typename T> std::vector<T> init_normal(const Shape &s, T stddev, std::mt19937_64 &rng);
// He initialization for relu layers: normal with std sqrt(2 / fan_in).
template <typename T> std::vector<T> init_he(const Shape &s, int64_t fan_in, std::mt19937_64 &rng);

template <typename T> struct AdamConfig {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Bias-corrected Adam. step() consumes Parameter::grad and zeroes it.
// A non-finite gradient aborts the step, naming the offending parameter.
template <typename T> class Adam {
public:
  explicit Adam(AdamConfig<T> cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T> &store);
  int64_t step_count() const { return t_; }

  AdamConfig<T> &config() { return cfg_; }
  const AdamConfig<T> &config() const { return cfg_; }

  // Serialized state: step count plus per-parameter moment tensors.
  std::vector<std::vector<T>> &moments1() { return m_; }
  std::vector<std::vector<T>> &moments2() { return v_; }
  const std::vector<std::vector<T>> &moments1() const { return m_; }
  const std::vector<std::vector<T>> &moments2() const { return v_; }
  void restore(int64_t t, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v);

private:
  void ensure_state(const ParamStore<T> &store);
  AdamConfig<T> cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct GradCheckEntry {
  std::string param;
  int64_t coord = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries; // worst entry per parameter
  double max_rel_err = 0;
  bool pass = false;
};

// Central-difference check of a scalar graph. `build` must be a pure
// function of the store contents and return the loss root. Relative error
// uses |a - n| / max(floor, |a| + |n|) with floor 1e-8.
template <typename T>
GradCheckReport grad_check(const std::function<int(Tape<T> &, const ParamStore<T> &, BoundParams<T> &)> &build,
                           ParamStore<T> &store, T h, int coords_per_param, double threshold, uint64_t seed);

} // namespace condatlas
