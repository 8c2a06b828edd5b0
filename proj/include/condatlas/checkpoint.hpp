#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condatlas/losses.hpp"
#include "condatlas/models.hpp"
#include "condatlas/tape.hpp"

namespace condatlas {

// Binary checkpoint: magic "AMCKPT01", a text manifest (meta key/values and
// tensor declarations) terminated by an "end" line, then the tensor
// payloads in declaration order as little-endian f32 or f64.
struct Checkpoint {
  struct Tensor {
    std::string name;
    Shape shape;
    std::string dtype; // "f32" or "f64"
    std::vector<double> data;
  };

  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Tensor> tensors;

  void set_meta(const std::string &key, const std::string &value);
  bool has_meta(const std::string &key) const;
  std::string meta_value(const std::string &key) const; // throws if missing
  void add_tensor(const std::string &name, const Shape &shape, const std::string &dtype,
                  std::vector<double> data);
  const Tensor *find(const std::string &name) const; // nullptr if absent
};

void save_checkpoint(const Checkpoint &ck, const std::string &path);
Checkpoint load_checkpoint(const std::string &path);

// Model/codec/loss echo so tools can rebuild the exact setup from a
// checkpoint alone.
void write_model_meta(Checkpoint &ck, const ModelConfig &cfg, const AttributeCodec &codec,
                      const LossWeights &loss);
ModelConfig read_model_config(const Checkpoint &ck);
AttributeCodec read_codec(const Checkpoint &ck);
LossWeights read_loss_weights(const Checkpoint &ck);

// Parameter and optimizer payload helpers used by the trainer and tools.
template <typename T>
void write_params(Checkpoint &ck, const ParamStore<T> &store, const Adam<T> &adam);
template <typename T>
void read_params(const Checkpoint &ck, ParamStore<T> &store, Adam<T> &adam); // shapes must match

} // namespace condatlas
