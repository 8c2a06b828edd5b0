#include "condatlas/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "condatlas/field_ops.hpp"
#include "condatlas/interp.hpp"
#include "condatlas/reportio.hpp"
#include "condatlas/util.hpp"

namespace fs = std::filesystem;

namespace condatlas {

std::string phantom_label_name(int label) {
  switch (label) {
  case label_background:
    return "background";
  case label_cortex:
    return "cortex";
  case label_ventricle:
    return "ventricle";
  case label_hippocampus:
    return "hippocampus";
  case label_midline:
    return "midline";
  }
  throw std::invalid_argument("unknown phantom label " + std::to_string(label));
}

Grid PopulationSpec::grid() const { return Grid(dims, spacing); }

AttributeCodec PopulationSpec::codec() const {
  AttributeCodec c;
  c.age_min = age_min;
  c.age_max = age_max;
  c.sex_vocab = {"F", "M"};
  return c;
}

void PopulationSpec::validate() const {
  if (dims.size() != 2 && dims.size() != 3)
    throw std::invalid_argument("population: dims must be 2D or 3D");
  for (int d : dims)
    if (d < 16)
      throw std::invalid_argument("population: dims must be >= 16");
  if (!spacing.empty() && spacing.size() != dims.size())
    throw std::invalid_argument("population: spacing rank mismatch");
  if (n_subjects < 1)
    throw std::invalid_argument("population: n_subjects must be >= 1");
  if (!(age_min < age_max))
    throw std::invalid_argument("population: need age_min < age_max");
  if (male_fraction < 0 || male_fraction > 1)
    throw std::invalid_argument("population: male_fraction out of [0,1]");
  if (laws.vent_slope <= 0)
    throw std::invalid_argument("population: ventricle radius law must increase with age");
  if (laws.hip_slope >= 0)
    throw std::invalid_argument("population: hippocampus radius law must decrease with age");
  if (laws.vent_base <= 0 || laws.hip_base + laws.hip_slope <= 0)
    throw std::invalid_argument("population: structure radius nonpositive inside the age range");
  if (!(0 < laws.cortex_r0 && laws.cortex_r0 < laws.cortex_r1))
    throw std::invalid_argument("population: cortex annulus radii out of order");
  if (!(0 < laws.bar_halfwidth && 0 < laws.bar_lo && laws.bar_lo < laws.bar_hi))
    throw std::invalid_argument("population: midline bar extents out of order");
  if (shape_noise < 0 || deform_amp < 0 || intensity_jitter < 0 || image_noise < 0 || image_blur < 0)
    throw std::invalid_argument("population: negative noise amplitude");
  if (deform_amp > 0 && deform_sigma <= 0)
    throw std::invalid_argument("population: deform_sigma must be positive when deforming");
  if (int_steps < 0 || int_steps > 16)
    throw std::invalid_argument("population: int_steps out of range");
  if (static_cast<int>(intensity_mean.size()) != phantom_n_labels)
    throw std::invalid_argument("population: need one intensity mean per label");
  const double maxjit = 1.0 + std::min(0.2, 4.0 * shape_noise);
  if (laws.cortex_r1 * laws.male_scale * maxjit > 0.99)
    throw std::invalid_argument("population: cortex annulus can exceed the grid");
  if ((laws.hip_offset + laws.hip_base * maxjit) * laws.male_scale > 0.99)
    throw std::invalid_argument("population: hippocampus discs can exceed the grid");
}

void gaussian_blur(std::vector<float> &chan, const std::vector<int> &dims, double sigma) {
  if (sigma <= 0)
    return;
  const int nd = static_cast<int>(dims.size());
  int64_t strides[3];
  row_major_strides(dims.data(), nd, strides);
  int64_t n = 1;
  for (int d : dims)
    n *= d;
  if (static_cast<int64_t>(chan.size()) != n)
    throw std::invalid_argument("gaussian_blur: size mismatch");

  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(2 * r + 1);
  double wsum = 0;
  for (int k = -r; k <= r; ++k) {
    w[k + r] = std::exp(-0.5 * k * k / (sigma * sigma));
    wsum += w[k + r];
  }
  for (double &x : w)
    x /= wsum;

  std::vector<float> tmp(chan.size());
  for (int a = 0; a < nd; ++a) {
    const int na = dims[a];
    const int64_t sa = strides[a];
    for (int64_t i = 0; i < n; ++i) {
      const int ia = static_cast<int>((i / sa) % na);
      const int64_t base = i - static_cast<int64_t>(ia) * sa;
      double acc = 0;
      for (int k = -r; k <= r; ++k) {
        const int j = std::clamp(ia + k, 0, na - 1);
        acc += w[k + r] * chan[base + static_cast<int64_t>(j) * sa];
      }
      tmp[i] = static_cast<float>(acc);
    }
    chan.swap(tmp);
  }
}

double pearson(const std::vector<double> &x, const std::vector<double> &y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("pearson: need two same-length series");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0)
    return 0;
  return sxy / std::sqrt(sxx * syy);
}

namespace {

struct Radii {
  double cortex_r0, cortex_r1, vent_r, hip_r, bar_halfwidth, bar_lo, bar_hi;
  double hip_offset;
};

LabelMap rasterize_phantom(const Grid &grid, const Radii &r) {
  LabelMap lm(grid);
  const int nd = grid.ndim();
  const std::vector<int> &dims = grid.dims;
  double center[3] = {0, 0, 0};
  for (int a = 0; a < nd; ++a)
    center[a] = (dims[a] - 1) / 2.0;

  int idx[3] = {0, 0, 0};
  const int64_t n = grid.numel();
  for (int64_t i = 0; i < n; ++i) {
    double p[3] = {0, 0, 0};
    for (int a = 0; a < nd; ++a)
      p[a] = idx[a] - center[a];
    double r2 = 0;
    for (int a = 0; a < nd; ++a)
      r2 += p[a] * p[a];
    const double rad = std::sqrt(r2);

    int label = label_background;
    if (rad >= r.cortex_r0 && rad <= r.cortex_r1)
      label = label_cortex;
    if (rad <= r.vent_r)
      label = label_ventricle;
    double hl = 0, hr = 0;
    for (int a = 0; a < nd; ++a) {
      const double dl = a == 1 ? p[a] + r.hip_offset : p[a];
      const double dr = a == 1 ? p[a] - r.hip_offset : p[a];
      hl += dl * dl;
      hr += dr * dr;
    }
    if (hl <= r.hip_r * r.hip_r || hr <= r.hip_r * r.hip_r)
      label = label_hippocampus;
    bool in_bar = p[0] >= r.bar_lo && p[0] <= r.bar_hi && std::abs(p[1]) <= r.bar_halfwidth;
    if (nd == 3)
      in_bar = in_bar && std::abs(p[2]) <= r.bar_halfwidth;
    if (in_bar)
      label = label_midline;
    lm.labels[i] = label;

    for (int a = nd - 1; a >= 0; --a) {
      if (++idx[a] < dims[a])
        break;
      idx[a] = 0;
    }
  }
  return lm;
}

} // namespace

Subject make_subject(const PopulationSpec &spec, const std::string &id, double age,
                     const std::string &sex, uint64_t gen_seed) {
  const Grid grid = spec.grid();
  const int nd = grid.ndim();
  const int64_t nvox = grid.numel();
  std::mt19937_64 rng = make_rng(gen_seed, 0x53554248ULL);

  Subject s;
  s.id = id;
  s.attr.age = age;
  s.attr.sex = sex;
  s.gen_seed = gen_seed;

  const double g = sex == "M" ? spec.laws.male_scale : 1.0;
  const double R = 0.5 * *std::min_element(grid.dims.begin(), grid.dims.end());
  double an = (age - spec.age_min) / (spec.age_max - spec.age_min);
  an = std::clamp(an, 0.0, 1.0);

  auto jitter = [&]() {
    if (spec.shape_noise <= 0)
      return 1.0;
    std::normal_distribution<double> d(0.0, spec.shape_noise);
    const double cap = std::min(0.2, 4.0 * spec.shape_noise);
    return 1.0 + std::clamp(d(rng), -cap, cap);
  };
  const double jc = jitter(), jv = jitter(), jh = jitter(), jb = jitter();

  Radii r;
  r.cortex_r0 = spec.laws.cortex_r0 * R * g * jc;
  r.cortex_r1 = spec.laws.cortex_r1 * R * g * jc;
  r.vent_r = (spec.laws.vent_base + spec.laws.vent_slope * an) * R * g * jv;
  r.hip_r = (spec.laws.hip_base + spec.laws.hip_slope * an) * R * g * jh;
  r.bar_halfwidth = spec.laws.bar_halfwidth * R * g * jb;
  r.bar_lo = spec.laws.bar_lo * R * g * jb;
  r.bar_hi = spec.laws.bar_hi * R * g * jb;
  r.hip_offset = spec.laws.hip_offset * R * g;
  s.true_radii = {r.cortex_r0, r.cortex_r1, r.vent_r, r.hip_r, r.bar_halfwidth, r.bar_lo, r.bar_hi};

  LabelMap canonical = rasterize_phantom(grid, r);

  if (spec.deform_amp > 0) {
    VectorField v(grid, FieldKind::velocity);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (float &x : v.data)
      x = static_cast<float>(unit(rng));
    for (int d = 0; d < nd; ++d) {
      std::vector<float> comp(v.component(d), v.component(d) + nvox);
      gaussian_blur(comp, grid.dims, spec.deform_sigma);
      std::copy(comp.begin(), comp.end(), v.component(d));
    }
    double ss = 0;
    for (float x : v.data)
      ss += double(x) * x;
    const double rms = std::sqrt(ss / static_cast<double>(v.data.size()));
    const float scale = rms > 1e-12 ? static_cast<float>(spec.deform_amp / rms) : 0.0f;
    for (float &x : v.data)
      x *= scale;

    const VectorField u = integrate_velocity(v, spec.int_steps);
    const Volume warped = warp(one_hot(canonical, phantom_n_labels), u);
    s.seg = argmax_labels(warped);
  } else {
    s.seg = canonical;
  }

  s.gt_volumes.assign(phantom_n_labels, 0);
  for (int32_t lab : s.seg.labels)
    s.gt_volumes[lab] += 1;

  std::vector<double> tint(spec.intensity_mean);
  if (spec.intensity_jitter > 0) {
    std::normal_distribution<double> d(0.0, spec.intensity_jitter);
    for (double &m : tint)
      m += d(rng);
  }
  s.image = Volume(grid, 1);
  for (int64_t i = 0; i < nvox; ++i)
    s.image.data[i] = static_cast<float>(tint[s.seg.labels[i]]);
  gaussian_blur(s.image.data, grid.dims, spec.image_blur);
  if (spec.image_noise > 0) {
    std::normal_distribution<double> d(0.0, spec.image_noise);
    for (float &x : s.image.data)
      x += static_cast<float>(d(rng));
  }
  return s;
}

Dataset generate_population(const PopulationSpec &spec) {
  spec.validate();
  Dataset ds;
  ds.grid = spec.grid();
  ds.n_labels = phantom_n_labels;
  ds.codec = spec.codec();
  ds.subjects.reserve(spec.n_subjects);

  std::mt19937_64 pop_rng = make_rng(spec.seed, 0x504f5055ULL);
  std::uniform_real_distribution<double> age_d(spec.age_min, spec.age_max);
  std::bernoulli_distribution male_d(spec.male_fraction);
  for (int i = 0; i < spec.n_subjects; ++i) {
    const double age = age_d(pop_rng);
    const std::string sex = male_d(pop_rng) ? "M" : "F";
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%04d", i);
    ds.subjects.push_back(make_subject(spec, buf, age, sex, mix_seed(spec.seed, 0x100000ULL + i)));
  }
  return ds;
}

SplitIndices split_dataset(int n, const std::vector<double> &fractions, uint64_t seed) {
  if (fractions.size() != 3)
    throw std::invalid_argument("split: need {train, val, test} fractions");
  double total = 0;
  for (double f : fractions) {
    if (f < 0)
      throw std::invalid_argument("split: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions must sum to 1");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng = make_rng(seed, 0x53504c49ULL);
  std::shuffle(order.begin(), order.end(), rng);

  int n_train = static_cast<int>(std::lround(fractions[0] * n));
  int n_val = static_cast<int>(std::lround(fractions[1] * n));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);

  SplitIndices sp;
  sp.train.assign(order.begin(), order.begin() + n_train);
  sp.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  sp.test.assign(order.begin() + n_train + n_val, order.end());
  return sp;
}

namespace {

std::string join_ints(const std::vector<int> &v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i)
      s += ' ';
    s += std::to_string(v[i]);
  }
  return s;
}

std::string join_doubles(const std::vector<double> &v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i)
      s += ' ';
    s += format_double(v[i]);
  }
  return s;
}

constexpr int n_radii = 7;

} // namespace

void save_dataset(const Dataset &ds, const std::string &dir) {
  fs::create_directories(fs::path(dir) / "imgs");
  fs::create_directories(fs::path(dir) / "segs");

  std::ostringstream csv;
  std::vector<std::string> header = {"id", "age", "sex", "gen_seed"};
  for (int c = 0; c < ds.n_labels; ++c)
    header.push_back("vol_" + std::to_string(c));
  for (int k = 0; k < n_radii; ++k)
    header.push_back("radius_" + std::to_string(k));
  csv << csv_row(header);

  std::vector<std::string> rel_files;
  for (const Subject &s : ds.subjects) {
    if (static_cast<int>(s.gt_volumes.size()) != ds.n_labels)
      throw std::invalid_argument("dataset: subject " + s.id + " has wrong volume count");
    const std::string img_rel = "imgs/" + s.id + ".volb";
    const std::string seg_rel = "segs/" + s.id + ".volb";
    save_volume(s.image, (fs::path(dir) / img_rel).string());
    save_labelmap(s.seg, (fs::path(dir) / seg_rel).string());
    rel_files.push_back(img_rel);
    rel_files.push_back(seg_rel);

    std::vector<std::string> row = {s.id, format_double(s.attr.age), s.attr.sex, std::to_string(s.gen_seed)};
    for (int64_t v : s.gt_volumes)
      row.push_back(std::to_string(v));
    std::vector<double> radii(s.true_radii);
    radii.resize(n_radii, 0.0);
    for (double rv : radii)
      row.push_back(format_double(rv));
    csv << csv_row(row);
  }
  write_text_file((fs::path(dir) / "attributes.csv").string(), csv.str());

  std::ostringstream man;
  man << "format = condatlas-dataset-1\n";
  man << "n_subjects = " << ds.subjects.size() << "\n";
  man << "n_labels = " << ds.n_labels << "\n";
  man << "dims = " << join_ints(ds.grid.dims) << "\n";
  man << "spacing = " << join_doubles(ds.grid.spacing) << "\n";
  man << "age_min = " << format_double(ds.codec.age_min) << "\n";
  man << "age_max = " << format_double(ds.codec.age_max) << "\n";
  man << "checksum attributes.csv = " << hex64(fnv1a64_file((fs::path(dir) / "attributes.csv").string()))
      << "\n";
  for (const std::string &rel : rel_files)
    man << "checksum " << rel << " = " << hex64(fnv1a64_file((fs::path(dir) / rel).string())) << "\n";
  write_text_file((fs::path(dir) / "manifest.txt").string(), man.str());
}

namespace {

std::map<std::string, std::string> parse_kv_lines(const std::string &text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    const size_t eq = line.find(" = ");
    if (eq == std::string::npos)
      continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

} // namespace

Dataset load_dataset(const std::string &dir) {
  const std::string man_path = (fs::path(dir) / "manifest.txt").string();
  const std::string man = read_text_file(man_path);
  auto kv = parse_kv_lines(man);
  if (kv["format"] != "condatlas-dataset-1")
    throw std::runtime_error("dataset: bad or missing manifest format at " + man_path);

  // Verify every checksum line before trusting any file.
  {
    std::istringstream in(man);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("checksum ", 0) != 0)
        continue;
      const size_t eq = line.rfind(" = ");
      if (eq == std::string::npos)
        throw std::runtime_error("dataset: malformed checksum line in " + man_path);
      const std::string rel = line.substr(9, eq - 9);
      const std::string want = line.substr(eq + 3);
      const std::string got = hex64(fnv1a64_file((fs::path(dir) / rel).string()));
      if (got != want)
        throw std::runtime_error("dataset: checksum mismatch for " + rel + " (expected " + want +
                                 ", got " + got + ")");
    }
  }

  Dataset ds;
  {
    std::istringstream dd(kv.at("dims"));
    int d;
    while (dd >> d)
      ds.grid.dims.push_back(d);
    std::istringstream sp(kv.at("spacing"));
    double s;
    while (sp >> s)
      ds.grid.spacing.push_back(s);
  }
  ds.n_labels = std::stoi(kv.at("n_labels"));
  ds.codec.age_min = std::stod(kv.at("age_min"));
  ds.codec.age_max = std::stod(kv.at("age_max"));
  const size_t n_expect = std::stoul(kv.at("n_subjects"));

  const std::string csv = read_text_file((fs::path(dir) / "attributes.csv").string());
  std::istringstream rows(csv);
  std::string line;
  if (!std::getline(rows, line))
    throw std::runtime_error("dataset: empty attributes.csv");
  while (std::getline(rows, line)) {
    if (line.empty())
      continue;
    const std::vector<std::string> cells = split_csv_row(line);
    if (static_cast<int>(cells.size()) != 4 + ds.n_labels + n_radii)
      throw std::runtime_error("dataset: bad attributes row '" + line + "'");
    Subject s;
    s.id = cells[0];
    s.attr.age = std::stod(cells[1]);
    s.attr.sex = cells[2];
    s.gen_seed = std::stoull(cells[3]);
    for (int c = 0; c < ds.n_labels; ++c)
      s.gt_volumes.push_back(std::stoll(cells[4 + c]));
    for (int k = 0; k < n_radii; ++k)
      s.true_radii.push_back(std::stod(cells[4 + ds.n_labels + k]));
    s.image = load_volume((fs::path(dir) / "imgs" / (s.id + ".volb")).string());
    s.seg = load_labelmap((fs::path(dir) / "segs" / (s.id + ".volb")).string());
    if (s.image.grid.dims != ds.grid.dims || s.seg.grid.dims != ds.grid.dims)
      throw std::runtime_error("dataset: subject " + s.id + " grid mismatch");
    ds.subjects.push_back(std::move(s));
  }
  if (ds.subjects.size() != n_expect)
    throw std::runtime_error("dataset: manifest subject count mismatch");
  return ds;
}

} // namespace condatlas
