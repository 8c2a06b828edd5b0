#include "condatlas/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "condatlas/reportio.hpp"

namespace condatlas {

void Checkpoint::set_meta(const std::string &key, const std::string &value) {
  for (auto &[k, v] : meta)
    if (k == key) {
      v = value;
      return;
    }
  meta.push_back({key, value});
}

bool Checkpoint::has_meta(const std::string &key) const {
  for (const auto &[k, v] : meta)
    if (k == key)
      return true;
  return false;
}

std::string Checkpoint::meta_value(const std::string &key) const {
  for (const auto &[k, v] : meta)
    if (k == key)
      return v;
  throw std::runtime_error("checkpoint: missing meta key '" + key + "'");
}

void Checkpoint::add_tensor(const std::string &name, const Shape &shape, const std::string &dtype,
                            std::vector<double> data) {
  if (dtype != "f32" && dtype != "f64")
    throw std::invalid_argument("checkpoint: dtype must be f32 or f64");
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("checkpoint: tensor '" + name + "' size does not match shape");
  if (name.find_first_of(" \t\n") != std::string::npos)
    throw std::invalid_argument("checkpoint: tensor name must not contain whitespace");
  tensors.push_back({name, shape, dtype, std::move(data)});
}

const Checkpoint::Tensor *Checkpoint::find(const std::string &name) const {
  for (const Tensor &t : tensors)
    if (t.name == name)
      return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint &ck, const std::string &path) {
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f << "AMCKPT01\n";
  for (const auto &[k, v] : ck.meta)
    f << "meta " << k << " = " << v << "\n";
  for (const Checkpoint::Tensor &t : ck.tensors) {
    f << "tensor " << t.name << ' ' << t.dtype << ' ' << t.shape.size();
    for (int d : t.shape)
      f << ' ' << d;
    f << "\n";
  }
  f << "end\n";
  for (const Checkpoint::Tensor &t : ck.tensors) {
    if (t.dtype == "f32") {
      std::vector<float> buf(t.data.begin(), t.data.end());
      f.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    } else {
      f.write(reinterpret_cast<const char *>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
    }
  }
  if (!f)
    throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "AMCKPT01")
    throw std::runtime_error("checkpoint: bad magic in " + path);

  Checkpoint ck;
  while (std::getline(f, line)) {
    if (line == "end")
      break;
    if (line.rfind("meta ", 0) == 0) {
      const size_t eq = line.find(" = ");
      if (eq == std::string::npos)
        throw std::runtime_error("checkpoint: malformed meta line in " + path);
      ck.meta.push_back({line.substr(5, eq - 5), line.substr(eq + 3)});
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ss(line.substr(7));
      Checkpoint::Tensor t;
      size_t rank = 0;
      if (!(ss >> t.name >> t.dtype >> rank))
        throw std::runtime_error("checkpoint: malformed tensor line in " + path);
      t.shape.resize(rank);
      for (size_t i = 0; i < rank; ++i)
        if (!(ss >> t.shape[i]))
          throw std::runtime_error("checkpoint: malformed tensor dims in " + path);
      ck.tensors.push_back(std::move(t));
    } else {
      throw std::runtime_error("checkpoint: unexpected manifest line '" + line + "' in " + path);
    }
  }
  if (line != "end")
    throw std::runtime_error("checkpoint: truncated manifest in " + path);

  for (Checkpoint::Tensor &t : ck.tensors) {
    const int64_t n = shape_numel(t.shape);
    t.data.resize(n);
    if (t.dtype == "f32") {
      std::vector<float> buf(n);
      f.read(reinterpret_cast<char *>(buf.data()), n * 4);
      for (int64_t i = 0; i < n; ++i)
        t.data[i] = buf[i];
    } else if (t.dtype == "f64") {
      f.read(reinterpret_cast<char *>(t.data.data()), n * 8);
    } else {
      throw std::runtime_error("checkpoint: unknown dtype '" + t.dtype + "' in " + path);
    }
    if (!f)
      throw std::runtime_error("checkpoint: truncated payload for '" + t.name + "' in " + path);
  }
  return ck;
}

namespace {

std::string join_ints(const std::vector<int> &v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_ints(const std::string &s) {
  std::istringstream in(s);
  std::vector<int> out;
  int x;
  while (in >> x)
    out.push_back(x);
  return out;
}

std::string join_strs(const std::vector<std::string> &v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? " " : "") + v[i];
  return s;
}

std::vector<std::string> parse_strs(const std::string &s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string x;
  while (in >> x)
    out.push_back(x);
  return out;
}

} // namespace

void write_model_meta(Checkpoint &ck, const ModelConfig &cfg, const AttributeCodec &codec,
                      const LossWeights &loss) {
  ck.set_meta("model.variant", variant_name(cfg.variant));
  ck.set_meta("model.dims", join_ints(cfg.dims));
  ck.set_meta("model.n_labels", std::to_string(cfg.n_labels));
  ck.set_meta("model.attr_dim", std::to_string(cfg.attr_dim));
  ck.set_meta("model.int_steps", std::to_string(cfg.int_steps));
  ck.set_meta("model.dec_base_filters", std::to_string(cfg.dec_base_filters));
  ck.set_meta("model.dec_levels", std::to_string(cfg.dec_levels));
  ck.set_meta("model.enc_filters", join_ints(cfg.enc_filters));
  ck.set_meta("model.dec_filters", join_ints(cfg.dec_filters));
  ck.set_meta("model.head_init_std", format_double(cfg.head_init_std));
  ck.set_meta("codec.age_min", format_double(codec.age_min));
  ck.set_meta("codec.age_max", format_double(codec.age_max));
  ck.set_meta("codec.sex_vocab", join_strs(codec.sex_vocab));
  std::vector<std::string> extra_names;
  for (const auto &[name, vocab] : codec.extra_vocabs) {
    extra_names.push_back(name);
    ck.set_meta("codec.extra." + name, join_strs(vocab));
  }
  ck.set_meta("codec.extras", join_strs(extra_names));
  ck.set_meta("loss.lambda_img", format_double(loss.lambda_img));
  ck.set_meta("loss.lambda_seg", format_double(loss.lambda_seg));
  ck.set_meta("loss.lambda_smooth", format_double(loss.lambda_smooth));
  ck.set_meta("loss.lambda_central", format_double(loss.lambda_central));
  ck.set_meta("loss.sigma_kde", format_double(loss.sigma_kde));
  ck.set_meta("loss.sigma_d", format_double(loss.sigma_d));
  ck.set_meta("loss.seg_loss", seg_loss_name(loss.seg_loss));
  ck.set_meta("loss.centrality", centrality_name(loss.centrality));
  ck.set_meta("loss.kde_raw_age", loss.kde_raw_age ? "true" : "false");
}

ModelConfig read_model_config(const Checkpoint &ck) {
  ModelConfig cfg;
  cfg.variant = parse_variant(ck.meta_value("model.variant"));
  cfg.dims = parse_ints(ck.meta_value("model.dims"));
  cfg.n_labels = std::stoi(ck.meta_value("model.n_labels"));
  cfg.attr_dim = std::stoi(ck.meta_value("model.attr_dim"));
  cfg.int_steps = std::stoi(ck.meta_value("model.int_steps"));
  cfg.dec_base_filters = std::stoi(ck.meta_value("model.dec_base_filters"));
  cfg.dec_levels = std::stoi(ck.meta_value("model.dec_levels"));
  cfg.enc_filters = parse_ints(ck.meta_value("model.enc_filters"));
  cfg.dec_filters = parse_ints(ck.meta_value("model.dec_filters"));
  cfg.head_init_std = std::stod(ck.meta_value("model.head_init_std"));
  cfg.validate();
  return cfg;
}

AttributeCodec read_codec(const Checkpoint &ck) {
  AttributeCodec c;
  c.age_min = std::stod(ck.meta_value("codec.age_min"));
  c.age_max = std::stod(ck.meta_value("codec.age_max"));
  c.sex_vocab = parse_strs(ck.meta_value("codec.sex_vocab"));
  c.extra_vocabs.clear();
  if (ck.has_meta("codec.extras"))
    for (const std::string &name : parse_strs(ck.meta_value("codec.extras")))
      c.extra_vocabs.emplace_back(name, parse_strs(ck.meta_value("codec.extra." + name)));
  return c;
}

LossWeights read_loss_weights(const Checkpoint &ck) {
  LossWeights w;
  w.lambda_img = std::stod(ck.meta_value("loss.lambda_img"));
  w.lambda_seg = std::stod(ck.meta_value("loss.lambda_seg"));
  w.lambda_smooth = std::stod(ck.meta_value("loss.lambda_smooth"));
  w.lambda_central = std::stod(ck.meta_value("loss.lambda_central"));
  w.sigma_kde = std::stod(ck.meta_value("loss.sigma_kde"));
  w.sigma_d = std::stod(ck.meta_value("loss.sigma_d"));
  w.seg_loss = parse_seg_loss(ck.meta_value("loss.seg_loss"));
  w.centrality = parse_centrality(ck.meta_value("loss.centrality"));
  w.kde_raw_age = ck.meta_value("loss.kde_raw_age") == "true";
  return w;
}

template <typename T>
void write_params(Checkpoint &ck, const ParamStore<T> &store, const Adam<T> &adam) {
  const char *dtype = sizeof(T) == 4 ? "f32" : "f64";
  for (int i = 0; i < store.count(); ++i) {
    const Parameter<T> &p = store.at(i);
    ck.add_tensor("param." + p.name, p.shape, dtype, std::vector<double>(p.value.begin(), p.value.end()));
  }
  ck.set_meta("adam.t", std::to_string(adam.step_count()));
  if (!adam.moments1().empty()) {
    if (static_cast<int>(adam.moments1().size()) != store.count())
      throw std::logic_error("checkpoint: optimizer state does not match parameter count");
    for (int i = 0; i < store.count(); ++i) {
      const Parameter<T> &p = store.at(i);
      ck.add_tensor("adam_m." + p.name, p.shape, dtype,
                    std::vector<double>(adam.moments1()[i].begin(), adam.moments1()[i].end()));
      ck.add_tensor("adam_v." + p.name, p.shape, dtype,
                    std::vector<double>(adam.moments2()[i].begin(), adam.moments2()[i].end()));
    }
  }
}

template <typename T>
void read_params(const Checkpoint &ck, ParamStore<T> &store, Adam<T> &adam) {
  for (int i = 0; i < store.count(); ++i) {
    Parameter<T> &p = store.at(i);
    const Checkpoint::Tensor *t = ck.find("param." + p.name);
    if (!t)
      throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
    if (!shape_equal(t->shape, p.shape))
      throw std::runtime_error("checkpoint: shape mismatch for parameter '" + p.name + "'");
    p.value.assign(t->data.begin(), t->data.end());
  }
  const int64_t t_step = std::stoll(ck.meta_value("adam.t"));
  if (ck.find("adam_m." + store.at(0).name)) {
    std::vector<std::vector<T>> m(store.count()), v(store.count());
    for (int i = 0; i < store.count(); ++i) {
      const Parameter<T> &p = store.at(i);
      const Checkpoint::Tensor *tm = ck.find("adam_m." + p.name);
      const Checkpoint::Tensor *tv = ck.find("adam_v." + p.name);
      if (!tm || !tv)
        throw std::runtime_error("checkpoint: incomplete optimizer state for '" + p.name + "'");
      m[i].assign(tm->data.begin(), tm->data.end());
      v[i].assign(tv->data.begin(), tv->data.end());
    }
    adam.restore(t_step, std::move(m), std::move(v));
  } else if (t_step != 0) {
    throw std::runtime_error("checkpoint: adam.t nonzero but moment tensors absent");
  }
}

template void write_params<float>(Checkpoint &, const ParamStore<float> &, const Adam<float> &);
template void write_params<double>(Checkpoint &, const ParamStore<double> &, const Adam<double> &);
template void read_params<float>(const Checkpoint &, ParamStore<float> &, Adam<float> &);
template void read_params<double>(const Checkpoint &, ParamStore<double> &, Adam<double> &);

} // namespace condatlas
