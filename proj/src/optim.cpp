#include "condatlas/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace condatlas {

template <typename T> int ParamStore<T>::add(const std::string &name, const Shape &shape, std::vector<T> init) {
  if (find(name) >= 0)
    throw std::invalid_argument("param store: duplicate name " + name);
  const int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(init.size()) != n)
    throw std::invalid_argument("param store: init size mismatch for " + name);
  Parameter<T> p;
  p.name = name;
  p.shape = shape;
  p.value = std::move(init);
  p.grad.assign(n, T(0));
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

template <typename T> int ParamStore<T>::find(const std::string &name) const {
  for (size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name)
      return static_cast<int>(i);
  return -1;
}

template <typename T> int ParamStore<T>::index_of(const std::string &name) const {
  const int i = find(name);
  if (i < 0)
    throw std::invalid_argument("param store: no parameter named " + name);
  return i;
}

template <typename T> int64_t ParamStore<T>::scalar_count() const {
  int64_t n = 0;
  for (const auto &p : params_)
    n += static_cast<int64_t>(p.value.size());
  return n;
}

template <typename T> void ParamStore<T>::zero_grads() {
  for (auto &p : params_)
    std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T> std::vector<T> init_zeros(const Shape &s) {
  return std::vector<T>(shape_numel(s), T(0));
}

template <typename T> std::vector<T> init_normal(const Shape &s, T stddev, std::mt19937_64 &rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  std::vector<T> out(shape_numel(s));
  for (auto &v : out)
    v = static_cast<T>(dist(rng));
  return out;
}

template <typename T> std::vector<T> init_he(const Shape &s, int64_t fan_in, std::mt19937_64 &rng) {
  return init_normal<T>(s, static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in))), rng);
}

template <typename T> void Adam<T>::ensure_state(const ParamStore<T> &store) {
  if (static_cast<int>(m_.size()) == store.count())
    return;
  if (!m_.empty())
    throw std::logic_error("adam: parameter count changed after state was created");
  m_.resize(store.count());
  v_.resize(store.count());
  for (int i = 0; i < store.count(); ++i) {
    m_[i].assign(store.at(i).value.size(), T(0));
    v_[i].assign(store.at(i).value.size(), T(0));
  }
}

template <typename T> void Adam<T>::step(ParamStore<T> &store) {
  for (int i = 0; i < store.count(); ++i)
    for (T g : store.at(i).grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw std::runtime_error("adam: non-finite gradient in parameter " + store.at(i).name);
  ensure_state(store);
  ++t_;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_)));
  for (int i = 0; i < store.count(); ++i) {
    Parameter<T> &p = store.at(i);
    T *m = m_[i].data();
    T *v = v_[i].data();
    for (size_t k = 0; k < p.value.size(); ++k) {
      const T g = p.grad[k];
      m[k] = cfg_.beta1 * m[k] + (T(1) - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (T(1) - cfg_.beta2) * g * g;
      const T mhat = m[k] / bc1;
      const T vhat = v[k] / bc2;
      p.value[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
}

template <typename T> void Adam<T>::restore(int64_t t, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v) {
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

template <typename T>
GradCheckReport grad_check(const std::function<int(Tape<T> &, const ParamStore<T> &, BoundParams<T> &)> &build,
                           ParamStore<T> &store, T h, int coords_per_param, double threshold, uint64_t seed) {
  store.zero_grads();
  {
    Tape<T> tape;
    BoundParams<T> bound;
    const int root = build(tape, store, bound);
    tape.backward(root);
    bound.harvest(tape, store);
  }
  auto eval = [&](void) -> double {
    Tape<T> tape;
    BoundParams<T> bound;
    const int root = build(tape, store, bound);
    return static_cast<double>(tape.scalar(root));
  };

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (int pi = 0; pi < store.count(); ++pi) {
    Parameter<T> &p = store.at(pi);
    const int64_t n = static_cast<int64_t>(p.value.size());
    std::vector<int64_t> coords;
    if (n <= coords_per_param) {
      coords.resize(n);
      for (int64_t i = 0; i < n; ++i)
        coords[i] = i;
    } else {
      std::uniform_int_distribution<int64_t> dist(0, n - 1);
      coords.resize(coords_per_param);
      for (auto &c : coords)
        c = dist(rng);
    }
    GradCheckEntry worst;
    worst.param = p.name;
    for (int64_t c : coords) {
      const T orig = p.value[c];
      p.value[c] = orig + h;
      const double lp = eval();
      p.value[c] = orig - h;
      const double lm = eval();
      p.value[c] = orig;
      const double numeric = (lp - lm) / (2.0 * static_cast<double>(h));
      const double analytic = static_cast<double>(p.grad[c]);
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (rel >= worst.rel_err) {
        worst.coord = c;
        worst.analytic = analytic;
        worst.numeric = numeric;
        worst.rel_err = rel;
      }
    }
    report.entries.push_back(worst);
    report.max_rel_err = std::max(report.max_rel_err, worst.rel_err);
  }
  report.pass = report.max_rel_err < threshold;
  return report;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Adam<float>;
template class Adam<double>;
template std::vector<float> init_zeros<float>(const Shape &);
template std::vector<double> init_zeros<double>(const Shape &);
template std::vector<float> init_normal<float>(const Shape &, float, std::mt19937_64 &);
template std::vector<double> init_normal<double>(const Shape &, double, std::mt19937_64 &);
template std::vector<float> init_he<float>(const Shape &, int64_t, std::mt19937_64 &);
template std::vector<double> init_he<double>(const Shape &, int64_t, std::mt19937_64 &);
template GradCheckReport grad_check<float>(const std::function<int(Tape<float> &, const ParamStore<float> &, BoundParams<float> &)> &,
                                           ParamStore<float> &, float, int, double, uint64_t);
template GradCheckReport grad_check<double>(const std::function<int(Tape<double> &, const ParamStore<double> &, BoundParams<double> &)> &,
                                            ParamStore<double> &, double, int, double, uint64_t);

} // namespace condatlas
