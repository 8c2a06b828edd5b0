#include "condatlas/grid.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace condatlas {

Grid::Grid(std::vector<int> d, std::vector<double> sp) : dims(std::move(d)), spacing(std::move(sp)) {
  const int nd = ndim();
  if (nd != 2 && nd != 3)
    throw std::invalid_argument("Grid: D must be 2 or 3, got " + std::to_string(nd));
  for (int v : dims)
    if (v < 4)
      throw std::invalid_argument("Grid: every dim must be >= 4, got " + std::to_string(v));
  if (spacing.empty())
    spacing.assign(nd, 1.0);
  if (static_cast<int>(spacing.size()) != nd)
    throw std::invalid_argument("Grid: spacing size mismatch");
  for (double s : spacing)
    if (!(s > 0.0))
      throw std::invalid_argument("Grid: spacing must be positive");
}

int64_t Grid::numel() const {
  int64_t n = 1;
  for (int v : dims)
    n *= v;
  return n;
}

Volume::Volume(Grid g, int c) : grid(std::move(g)), channels(c) {
  if (c <= 0)
    throw std::invalid_argument("Volume: channels must be positive");
  data.assign(static_cast<size_t>(channels) * grid.numel(), 0.0f);
}

LabelMap::LabelMap(Grid g) : grid(std::move(g)) { labels.assign(grid.numel(), 0); }

VectorField::VectorField(Grid g, FieldKind k) : grid(std::move(g)), kind(k) {
  data.assign(static_cast<size_t>(grid.ndim()) * grid.numel(), 0.0f);
}

Volume one_hot(const LabelMap &lm, int n_labels) {
  Volume out(lm.grid, n_labels);
  const int64_t n = lm.grid.numel();
  for (int64_t i = 0; i < n; ++i) {
    const int32_t l = lm.labels[i];
    if (l < 0 || l >= n_labels)
      throw std::invalid_argument("one_hot: label out of range");
    out.at(l, i) = 1.0f;
  }
  return out;
}

LabelMap argmax_labels(const Volume &prob) {
  LabelMap out(prob.grid);
  const int64_t n = prob.grid.numel();
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    float bv = prob.at(0, i);
    for (int c = 1; c < prob.channels; ++c) {
      const float v = prob.at(c, i);
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out.labels[i] = best;
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'V', 'O', 'L', 'B', '0', '0', '0', '1'};

void write_u32(std::ostream &os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char *>(b), 4);
}

uint32_t read_u32(std::istream &is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char *>(b), 4);
  if (!is)
    throw std::runtime_error("VOLB: truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_payload(std::ostream &os, uint32_t d, uint32_t c, const std::vector<int> &dims,
                   const std::vector<float> &data) {
  write_u32(os, d);
  write_u32(os, c);
  for (int v : dims)
    write_u32(os, static_cast<uint32_t>(v));
  // assumes little-endian host, as does the rest of the I/O layer
  os.write(reinterpret_cast<const char *>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

struct Header {
  uint32_t d = 0, c = 0;
  std::vector<int> dims;
};

Header read_header(std::istream &is, const std::string &path) {
  Header h;
  h.d = read_u32(is);
  h.c = read_u32(is);
  if (h.d != 2 && h.d != 3)
    throw std::runtime_error("VOLB: bad dimensionality in " + path);
  for (uint32_t i = 0; i < h.d; ++i)
    h.dims.push_back(static_cast<int>(read_u32(is)));
  return h;
}

void read_data(std::istream &is, std::vector<float> &data, const std::string &path) {
  is.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!is)
    throw std::runtime_error("VOLB: truncated payload in " + path);
  for (float v : data)
    if (!std::isfinite(v))
      throw std::runtime_error("VOLB: non-finite value in " + path);
}

void check_magic(std::istream &is, const std::string &path) {
  char m[8];
  is.read(m, 8);
  if (!is || std::memcmp(m, kMagic, 8) != 0)
    throw std::runtime_error("VOLB: bad magic in " + path);
}

} // namespace

void save_volume(const Volume &v, const std::string &path) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("VOLB: cannot open " + path + " for writing");
  os.write(kMagic, 8);
  write_payload(os, static_cast<uint32_t>(v.grid.ndim()), static_cast<uint32_t>(v.channels), v.grid.dims, v.data);
  if (!os)
    throw std::runtime_error("VOLB: write failed for " + path);
}

Volume load_volume(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("VOLB: cannot open " + path);
  check_magic(is, path);
  const Header h = read_header(is, path);
  Volume out(Grid(h.dims), static_cast<int>(h.c));
  read_data(is, out.data, path);
  return out;
}

void save_field(const VectorField &f, const std::string &path) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("VOLB: cannot open " + path + " for writing");
  os.write(kMagic, 8);
  const char kind = static_cast<char>(f.kind);
  os.write(&kind, 1);
  write_payload(os, static_cast<uint32_t>(f.grid.ndim()), static_cast<uint32_t>(f.grid.ndim()), f.grid.dims, f.data);
  if (!os)
    throw std::runtime_error("VOLB: write failed for " + path);
}

VectorField load_field(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("VOLB: cannot open " + path);
  check_magic(is, path);
  char kind = 0;
  is.read(&kind, 1);
  if (!is || (kind != 0 && kind != 1))
    throw std::runtime_error("VOLB: bad field kind byte in " + path);
  const Header h = read_header(is, path);
  if (h.c != h.d)
    throw std::runtime_error("VOLB: field must store D components in " + path);
  VectorField out(Grid(h.dims), static_cast<FieldKind>(kind));
  read_data(is, out.data, path);
  return out;
}

void save_labelmap(const LabelMap &lm, const std::string &path) {
  Volume v(lm.grid, 1);
  for (int64_t i = 0; i < lm.grid.numel(); ++i)
    v.data[i] = static_cast<float>(lm.labels[i]);
  save_volume(v, path);
}

LabelMap load_labelmap(const std::string &path) {
  const Volume v = load_volume(path);
  if (v.channels != 1)
    throw std::runtime_error("label map must be single-channel: " + path);
  LabelMap lm(v.grid);
  for (int64_t i = 0; i < v.grid.numel(); ++i) {
    const float f = v.data[i];
    const int32_t l = static_cast<int32_t>(std::lround(f));
    if (std::fabs(f - l) > 1e-3f || l < 0)
      throw std::runtime_error("label map holds non-integer values: " + path);
    lm.labels[i] = l;
  }
  return lm;
}

} // namespace condatlas
