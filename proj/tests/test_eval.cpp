#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "condatlas/eval.hpp"
#include "condatlas/util.hpp"

using namespace condatlas;

namespace {

LabelMap map_from(const std::vector<int32_t> &rows, int w) {
  const int h = static_cast<int>(rows.size()) / w;
  LabelMap lm(Grid({h, w}));
  lm.labels = rows;
  return lm;
}

} // namespace

TEST_CASE("hard dice fixtures") {
  // 4x4, one foreground label
  LabelMap a = map_from({0, 0, 0, 0,
                         0, 1, 1, 0,
                         0, 1, 1, 0,
                         0, 0, 0, 0}, 4);
  SUBCASE("identical maps score 1") {
    const DiceResult r = dice(a, a, 2);
    CHECK(r.per_label[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.mean == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("disjoint maps score 0") {
    LabelMap b = map_from({1, 1, 0, 0,
                           1, 1, 0, 0,
                           0, 0, 0, 0,
                           0, 0, 0, 0}, 4);
    // overlap of label 1: pred has 4 at top-left, gt has 4 in center; one
    // shared voxel at (1,1)
    const DiceResult r = dice(b, a, 2);
    CHECK(r.per_label[1] == doctest::Approx(2.0 * 1 / (4 + 4)).epsilon(1e-12));
  }
  SUBCASE("half overlap scores two thirds") {
    LabelMap b = map_from({0, 0, 0, 0,
                           0, 1, 1, 0,
                           0, 0, 0, 0,
                           0, 0, 0, 0}, 4);
    const DiceResult r = dice(b, a, 2);
    CHECK(r.per_label[1] == doctest::Approx(2.0 * 2 / (2 + 4)).epsilon(1e-12));
  }
  SUBCASE("labels absent from both maps are excluded from the mean") {
    const DiceResult r = dice(a, a, 4);
    CHECK(std::isnan(r.per_label[2]));
    CHECK(std::isnan(r.per_label[3]));
    CHECK(r.mean == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("grid mismatch throws") {
    LabelMap b(Grid({4, 8}));
    CHECK_THROWS_AS(dice(a, b, 2), std::invalid_argument);
  }
  SUBCASE("labels outside the vocabulary throw") {
    LabelMap b = a;
    b.labels[5] = 7;
    CHECK_THROWS_AS(dice(b, a, 2), std::invalid_argument);
  }
}

TEST_CASE("dice mean is invariant to label renumbering") {
  std::mt19937_64 rng = make_rng(5, 5);
  std::uniform_int_distribution<int> d(0, 3);
  LabelMap a(Grid({8, 8})), b(Grid({8, 8}));
  for (auto &l : a.labels)
    l = d(rng);
  for (auto &l : b.labels)
    l = d(rng);
  const DiceResult r1 = dice(a, b, 4);
  // permute labels 1<->3 in both maps
  auto perm = [](int32_t l) { return l == 1 ? 3 : l == 3 ? 1 : l; };
  LabelMap ap = a, bp = b;
  for (auto &l : ap.labels)
    l = perm(l);
  for (auto &l : bp.labels)
    l = perm(l);
  const DiceResult r2 = dice(ap, bp, 4);
  CHECK(r1.mean == doctest::Approx(r2.mean).epsilon(1e-12));
  CHECK(r1.per_label[1] == doctest::Approx(r2.per_label[3]).epsilon(1e-12));
}

TEST_CASE("surface distance matches a hand-computed fixture") {
  // 6x6: 3x3 blocks shifted by one column. Every boundary voxel of one mask
  // is 0 or 1 away from the other boundary; the mean one-sided distance is
  // 0.5 in both directions.
  LabelMap a(Grid({6, 6})), b(Grid({6, 6}));
  for (int i = 1; i <= 3; ++i)
    for (int j = 1; j <= 3; ++j)
      a.labels[i * 6 + j] = 1;
  for (int i = 1; i <= 3; ++i)
    for (int j = 2; j <= 4; ++j)
      b.labels[i * 6 + j] = 1;
  const SurfaceDistanceResult r = surface_distance(a, b, 2);
  CHECK(r.per_label[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_FALSE(r.any_skipped);

  // identical masks: zero distance
  const SurfaceDistanceResult same = surface_distance(a, a, 2);
  CHECK(same.per_label[1] == doctest::Approx(0.0).epsilon(1e-12));

  // distances scale linearly with voxel spacing
  LabelMap a2 = a, b2 = b;
  a2.grid = Grid({6, 6}, {2.0, 2.0});
  b2.grid = a2.grid;
  const SurfaceDistanceResult r2 = surface_distance(a2, b2, 2);
  CHECK(r2.per_label[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("surface distance skips labels with an empty side") {
  LabelMap a(Grid({5, 5})), b(Grid({5, 5}));
  a.labels[12] = 1; // pred has label 1, gt does not
  const SurfaceDistanceResult r = surface_distance(a, b, 2);
  CHECK(std::isnan(r.per_label[1]));
  CHECK(r.any_skipped);
}

TEST_CASE("regularity of simple fields") {
  const Grid grid({12, 12});
  SUBCASE("identity map is perfectly regular") {
    VectorField u(grid, FieldKind::displacement);
    const RegularityResult r = regularity(u);
    CHECK(r.neg_jac_fraction == 0.0);
    CHECK(r.mean_grad_norm == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("a global fold flips every interior determinant") {
    VectorField u(grid, FieldKind::displacement);
    for (int64_t i = 0; i < grid.numel(); ++i) {
      const int64_t row = i / 12;
      u.at(0, i) = float(-1.5 * double(row)); // dy/dr = -1.5, det = -0.5
    }
    const RegularityResult r = regularity(u);
    CHECK(r.neg_jac_fraction == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.mean_grad_norm > 0);
  }
}

TEST_CASE("nadaraya-watson regression matches a direct double loop") {
  std::mt19937_64 rng = make_rng(3, 3);
  std::uniform_real_distribution<double> da(20.0, 80.0), dv(0.0, 10.0);
  std::vector<double> ages(40), vals(40);
  for (size_t i = 0; i < ages.size(); ++i) {
    ages[i] = da(rng);
    vals[i] = dv(rng);
  }
  const std::vector<double> queries = {25.0, 40.0, 55.0, 70.0};
  const double bw = 5.0;
  const std::vector<double> got = nw_kde(queries, ages, vals, bw);
  REQUIRE(got.size() == queries.size());
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    double num = 0, den = 0;
    for (size_t i = 0; i < ages.size(); ++i) {
      const double d = (queries[qi] - ages[i]) / bw;
      const double w = std::exp(-0.5 * d * d);
      num += w * vals[i];
      den += w;
    }
    CHECK(got[qi] == doctest::Approx(num / den).epsilon(1e-9));
  }

  // a query far outside the data underflows every weight
  const std::vector<double> far = nw_kde({1e6}, ages, vals, bw);
  CHECK(std::isnan(far[0]));
}

namespace {

// Trained-free fixture: zero-head model => zero flow, template = bias_vol,
// uniform seg probabilities.
struct ZeroFlowEval {
  ModelConfig cfg;
  ParamStore<float> store;
  AttributeCodec codec;
  Grid grid;

  ZeroFlowEval() : grid({16, 16}) {
    cfg.dims = {16, 16};
    cfg.n_labels = 3;
    cfg.variant = Variant::cond;
    cfg.attr_dim = 3;
    cfg.head_init_std = 0;
    register_model_params(store, cfg, 2);
  }
};

} // namespace

TEST_CASE("zero-flow registration reproduces the template labels") {
  ZeroFlowEval fx;
  // carve a deterministic template: left half label 1, right half label 2
  // via the segmentation head bias (logits constant per channel won't vary
  // spatially, so use seg_override instead)
  Volume seg(fx.grid, 3);
  for (int64_t i = 0; i < fx.grid.numel(); ++i) {
    const int col = int(i % 16);
    seg.at(col < 8 ? 1 : 2, i) = 1.f;
  }
  Volume img(fx.grid, 1);
  AttributeRecord rec;
  rec.age = 50;
  const RegistrationOutput out =
      register_and_segment(fx.store, fx.cfg, fx.codec, img, rec, &seg);
  CHECK(out.velocity.kind == FieldKind::velocity);
  CHECK(out.disp.kind == FieldKind::displacement);
  for (float x : out.disp.data)
    CHECK(x == 0.f);
  for (int64_t i = 0; i < fx.grid.numel(); ++i) {
    const int col = int(i % 16);
    CHECK(out.pred.labels[i] == (col < 8 ? 1 : 2));
  }
}

TEST_CASE("posthoc labels at zero flow average the training maps") {
  ZeroFlowEval fx;
  // two synthetic subjects with known label maps
  Subject s1, s2;
  s1.attr.age = 30;
  s2.attr.age = 70;
  s1.image = Volume(fx.grid, 1);
  s2.image = Volume(fx.grid, 1);
  s1.seg = LabelMap(fx.grid);
  s2.seg = LabelMap(fx.grid);
  for (int64_t i = 0; i < fx.grid.numel(); ++i) {
    s1.seg.labels[i] = i % 16 < 8 ? 1 : 0;
    s2.seg.labels[i] = i % 16 < 8 ? 2 : 0;
  }
  const std::vector<const Subject *> train = {&s1, &s2};
  const Volume post = posthoc_template_labels(fx.store, fx.cfg, fx.codec, train, 3);
  REQUIRE(post.channels == 3);
  for (int64_t i = 0; i < fx.grid.numel(); ++i) {
    double sum = 0;
    for (int c = 0; c < 3; ++c) {
      CHECK(post.at(c, i) >= 0.f);
      sum += post.at(c, i);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    if (i % 16 < 8) {
      // half the subjects say 1, half say 2
      CHECK(post.at(1, i) == doctest::Approx(0.5).epsilon(1e-5));
      CHECK(post.at(2, i) == doctest::Approx(0.5).epsilon(1e-5));
    } else {
      CHECK(post.at(0, i) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("subject evaluation aggregates and serializes") {
  ZeroFlowEval fx;
  Subject s1, s2;
  s1.id = "a";
  s2.id = "b";
  s1.attr.age = 30;
  s2.attr.age = 60;
  s1.image = Volume(fx.grid, 1);
  s2.image = Volume(fx.grid, 1);
  s1.seg = LabelMap(fx.grid);
  s2.seg = LabelMap(fx.grid);
  Volume seg(fx.grid, 3);
  for (int64_t i = 0; i < fx.grid.numel(); ++i) {
    const int lab = i % 16 < 8 ? 1 : 2;
    seg.at(lab, i) = 1.f;
    s1.seg.labels[i] = lab;
    s2.seg.labels[i] = lab;
  }
  const std::vector<const Subject *> subjects = {&s1, &s2};
  const MetricReport rep = evaluate_subjects(fx.store, fx.cfg, fx.codec, subjects, 3, &seg);
  REQUIRE(rep.subjects.size() == 2);
  // zero flow + override == ground truth everywhere
  CHECK(rep.dice_mean == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.dice_ci == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rep.neg_jac_mean == 0.0);
  CHECK(rep.subjects[0].id == "a");
  CHECK(rep.subjects[0].dice_per_label[1] == doctest::Approx(1.0).epsilon(1e-12));

  const auto path = std::filesystem::temp_directory_path() / "condatlas_test_metrics.csv";
  write_metrics_csv(rep, 3, path.string());
  std::ifstream f(path);
  REQUIRE(f.good());
  std::string line;
  int rows = 0;
  std::getline(f, line);
  CHECK(line.find("dice") != std::string::npos);
  CHECK(line.find("surface_dist") != std::string::npos);
  while (std::getline(f, line))
    if (!line.empty())
      rows++;
  // two labels + one mean row per subject, plus two aggregate rows
  CHECK(rows == 2 * 3 + 2);
  std::filesystem::remove(path);
}

TEST_CASE("evaluation respects the worker thread setting") {
  ZeroFlowEval fx;
  std::vector<Subject> pool(5);
  std::mt19937_64 rng = make_rng(4, 4);
  std::uniform_int_distribution<int> dl(0, 2);
  Volume seg(fx.grid, 3);
  for (int64_t i = 0; i < fx.grid.numel(); ++i)
    seg.at(dl(rng), i) = 1.f;
  std::vector<const Subject *> subjects;
  for (size_t k = 0; k < pool.size(); ++k) {
    pool[k].id = "s" + std::to_string(k);
    pool[k].attr.age = 20.0 + 10.0 * double(k);
    pool[k].image = Volume(fx.grid, 1);
    pool[k].seg = LabelMap(fx.grid);
    for (int64_t i = 0; i < fx.grid.numel(); ++i)
      pool[k].seg.labels[i] = dl(rng);
    subjects.push_back(&pool[k]);
  }
  const int saved = worker_threads();
  worker_threads() = 1;
  const MetricReport serial = evaluate_subjects(fx.store, fx.cfg, fx.codec, subjects, 3, &seg);
  worker_threads() = 4;
  const MetricReport parallel = evaluate_subjects(fx.store, fx.cfg, fx.codec, subjects, 3, &seg);
  worker_threads() = saved;
  REQUIRE(serial.subjects.size() == parallel.subjects.size());
  CHECK(serial.dice_mean == parallel.dice_mean);
  for (size_t i = 0; i < serial.subjects.size(); ++i) {
    CHECK(serial.subjects[i].id == parallel.subjects[i].id);
    CHECK(serial.subjects[i].dice_mean == parallel.subjects[i].dice_mean);
    CHECK(serial.subjects[i].surface_dist == parallel.subjects[i].surface_dist);
  }
}

TEST_CASE("trend analysis emits one curve per foreground label") {
  ZeroFlowEval fx;
  std::vector<Subject> pool(12);
  std::vector<const Subject *> pop;
  std::mt19937_64 rng = make_rng(6, 6);
  for (size_t k = 0; k < pool.size(); ++k) {
    pool[k].attr.age = 20.0 + 5.0 * double(k);
    pool[k].attr.sex = k % 2 == 0 ? "F" : "M";
    pool[k].gt_volumes = {200, 30, int64_t(10 + k), 8, 4}; // fake counts
    pop.push_back(&pool[k]);
  }
  ModelConfig cfg5 = fx.cfg;
  cfg5.n_labels = 5;
  ParamStore<float> st5;
  register_model_params(st5, cfg5, 3);
  const TrendReport rep =
      trend_analysis(st5, cfg5, fx.codec, pop, "F", {30.0, 50.0}, 5.0, fx.grid);
  CHECK(rep.sex == "F");
  REQUIRE(rep.curves.size() == 4); // labels 1..4
  for (const TrendCurve &c : rep.curves) {
    CHECK(c.ages == std::vector<double>{30.0, 50.0});
    REQUIRE(c.template_vol.size() == 2);
    REQUIRE(c.kde_vol.size() == 2);
    REQUIRE(c.rel_err.size() == 2);
  }
  // population curve for the growing fake label uses F subjects only
  const TrendCurve &vent = rep.curves[1];
  CHECK(vent.label == 2);
  CHECK(vent.kde_vol[0] > 0);
  CHECK(vent.kde_vol[1] > vent.kde_vol[0]); // counts increase with age

  const auto path = std::filesystem::temp_directory_path() / "condatlas_test_trend.csv";
  write_trend_csv(rep, nullptr, path.string());
  std::ifstream f(path);
  REQUIRE(f.good());
  std::string line;
  std::getline(f, line);
  CHECK(line.find("template_vol") != std::string::npos);
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty())
      rows++;
  CHECK(rows == 8); // 4 labels x 2 ages
  std::filesystem::remove(path);
}
