#ifndef CONDATLAS_GRID_HPP
#define CONDATLAS_GRID_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace condatlas {

// Dense voxel grid, D in {2,3}. All coordinates are in voxel units;
// spacing only enters surface-distance evaluation.
struct Grid {
  std::vector<int> dims;       // voxels per axis
  std::vector<double> spacing; // world units per voxel, default 1.0

  Grid() = default;
  explicit Grid(std::vector<int> d, std::vector<double> sp = {});

  int ndim() const { return static_cast<int>(dims.size()); }
  int64_t numel() const;
  bool operator==(const Grid &o) const { return dims == o.dims; }
  bool operator!=(const Grid &o) const { return !(*this == o); }
};

// Multi-channel scalar field on a grid. Channel-major storage,
// row-major within each channel (matches the VOLB file layout).
struct Volume {
  Grid grid;
  int channels = 0;
  std::vector<float> data;

  Volume() = default;
  Volume(Grid g, int c);

  int64_t spatial_numel() const { return grid.numel(); }
  float *channel(int c) { return data.data() + c * grid.numel(); }
  const float *channel(int c) const { return data.data() + c * grid.numel(); }
  float &at(int c, int64_t i) { return data[c * grid.numel() + i]; }
  float at(int c, int64_t i) const { return data[c * grid.numel() + i]; }
};

// Hard per-voxel label assignment; label 0 is background.
struct LabelMap {
  Grid grid;
  std::vector<int32_t> labels;

  LabelMap() = default;
  explicit LabelMap(Grid g);
};

enum class FieldKind : uint8_t { velocity = 0, displacement = 1 };

// D-component field on a grid, component-major storage.
struct VectorField {
  Grid grid;
  FieldKind kind = FieldKind::displacement;
  std::vector<float> data;

  VectorField() = default;
  VectorField(Grid g, FieldKind k);

  float *component(int d) { return data.data() + d * grid.numel(); }
  const float *component(int d) const { return data.data() + d * grid.numel(); }
  float &at(int d, int64_t i) { return data[d * grid.numel() + i]; }
  float at(int d, int64_t i) const { return data[d * grid.numel() + i]; }
};

// One-hot expansion of a label map into an n_labels-channel volume.
Volume one_hot(const LabelMap &lm, int n_labels);

// Argmax over channels; ties resolved to the lowest label index.
LabelMap argmax_labels(const Volume &prob);

// ---- VOLB tensor files ----
// Magic "VOLB0001", little-endian u32 {D, C, dims[D]}, then C * prod(dims)
// float32 values, channel-major. Vector fields carry a kind byte right
// after the magic and store C = D components.
void save_volume(const Volume &v, const std::string &path);
Volume load_volume(const std::string &path);
void save_field(const VectorField &f, const std::string &path);
VectorField load_field(const std::string &path);
void save_labelmap(const LabelMap &lm, const std::string &path);
LabelMap load_labelmap(const std::string &path);

} // namespace condatlas

#endif
