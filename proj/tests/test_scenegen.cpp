#include <doctest.h>

#include <map>

#include "constellation/errors.hpp"
#include "constellation/rng.hpp"
#include "constellation/scenegen.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace constellation;

namespace {

RelationalFactors factors(double cx, double cy, double orientation, double curviness, int count) {
  RelationalFactors f;
  f.center_x = cx;
  f.center_y = cy;
  f.orientation = orientation;
  f.curviness = curviness;
  f.count = count;
  return f;
}

double dist(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

TEST_CASE("straight line of three points") {
  const auto p = realize_positions(factors(0, 0, 0, 0, 3), 1.0);
  REQUIRE(p.size() == 3);
  CHECK(p[0].x == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(p[1].x == doctest::Approx(0.0));
  CHECK(p[2].x == doctest::Approx(0.5).epsilon(1e-12));
  for (const auto& q : p) CHECK(std::abs(q.y) < 1e-15);
}

TEST_CASE("closed circle of four points is equidistant from a fitted center") {
  const auto p = realize_positions(factors(0.1, -0.2, 0.3, 1.0, 4), 1.0);
  const auto fit = oracle::fit_circle(p);
  CHECK(fit.rms_residual < 1e-9);
  CHECK(fit.r == doctest::Approx(1.0 / (2.0 * M_PI)).epsilon(1e-9));
  // Equal chords means equal angular gaps, including the wrap-around one.
  for (int i = 0; i < 4; ++i) CHECK(dist(p[i], p[(i + 1) % 4]) == doctest::Approx(dist(p[0], p[1])).epsilon(1e-9));
}

TEST_CASE("arc-length spacing is constant and the centroid sits at the center") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(u(rng) * 5);
    const auto f = factors(u(rng) - 0.5, u(rng) - 0.5, u(rng) * 6.0, u(rng), n);
    const auto p = realize_positions(f, 1.0);
    REQUIRE(p.size() == static_cast<std::size_t>(n));
    for (int i = 1; i + 1 < n; ++i) CHECK(dist(p[i], p[i + 1]) == doctest::Approx(dist(p[0], p[1])).epsilon(1e-9));
    double mx = 0.0, my = 0.0;
    for (const auto& q : p) {
      mx += q.x;
      my += q.y;
    }
    CHECK(mx / n == doctest::Approx(f.center_x).epsilon(1e-12).scale(1.0));
    CHECK(my / n == doctest::Approx(f.center_y).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("centroid circle residual: zero on a closed circle, positive on a line") {
  CHECK(oracle::centroid_circle_residual(realize_positions(factors(0.2, 0.1, 1.0, 1.0, 5), 1.0)) < 1e-12);
  // 3 evenly spaced points on a unit segment: distances 0.5, 0, 0.5 -> spread sqrt(2)/6
  const auto line = realize_positions(factors(0, 0, 0, 0, 3), 1.0);
  CHECK(oracle::centroid_circle_residual(line) == doctest::Approx(std::sqrt(2.0) / 6.0).epsilon(1e-12));
}

TEST_CASE("rotation preserves pairwise distances") {
  const auto a = realize_positions(factors(0, 0, 0.4, 0.6, 5), 1.0);
  const auto b = realize_positions(factors(0, 0, 1.9, 0.6, 5), 1.0);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) CHECK(std::abs(dist(a[i], a[j]) - dist(b[i], b[j])) < 1e-12);
  }
}

TEST_CASE("no jump at the straight-line switch") {
  const auto curved = realize_positions(factors(0, 0, 0.7, 1e-4, 6), 1.0);
  const auto straight = realize_positions(factors(0, 0, 0.7, 0.0, 6), 1.0);
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(curved[i].x - straight[i].x) < 1e-3);
    CHECK(std::abs(curved[i].y - straight[i].y) < 1e-3);
  }
}

TEST_CASE("realize_positions domain errors") {
  CHECK_THROWS_AS(realize_positions(factors(0, 0, 0, 0, 1), 1.0), DomainError);
  CHECK_THROWS_AS(realize_positions(factors(0, 0, 0, 0, 3), 0.0), DomainError);
}

TEST_CASE("sampled scenes are deterministic, in range and inside the box") {
  GenConfig config;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng a(seed), b(seed);
    const auto s = sample_scene_spec(a, config);
    const auto t = sample_scene_spec(b, config);
    CHECK(s.relational.count == t.relational.count);
    CHECK(s.objects.size() == t.objects.size());
    CHECK(s.objects.front().position.x == t.objects.front().position.x);
    CHECK(s.relational.count >= 2);
    CHECK(s.relational.count <= 6);
    const auto pos = realize_positions(s.relational, config.arc_length);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      CHECK(std::abs(s.objects[i].position.x) <= 1.0);
      CHECK(std::abs(s.objects[i].position.y) <= 1.0);
      CHECK(std::abs(s.objects[i].position.x - pos[i].x) < 1e-9);
      const auto& ap = s.objects[i].appearance;
      CHECK(ap.size >= 0.05);
      CHECK(ap.size <= 0.2);
      CHECK(ap.hue >= 0.0);
      CHECK(ap.hue <= 1.0);
    }
  }
}

TEST_CASE("object count is uniform (chi-square, p > 0.01)") {
  GenConfig config;
  std::map<int, int> hist;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    Rng rng(static_cast<std::uint64_t>(i));
    ++hist[sample_scene_spec(rng, config).relational.count];
  }
  REQUIRE(hist.size() == 5);
  double chi2 = 0.0;
  const double expected = n / 5.0;
  for (const auto& [count, seen] : hist) chi2 += (seen - expected) * (seen - expected) / expected;
  // 99th percentile of chi-square with 4 degrees of freedom.
  CHECK(chi2 < 13.2767);
}

TEST_CASE("invalid generator ranges are configuration errors") {
  GenConfig c;
  c.size = {0.3, 0.1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  GenConfig d;
  d.count_min = 1;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  GenConfig e;
  e.slots = 4;
  CHECK_THROWS_AS(e.validate(), ConfigError);
}

TEST_CASE("whitening stats match a two-pass computation") {
  GenConfig config;
  std::vector<SceneSpec> corpus;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    Rng rng(s);
    corpus.push_back(sample_scene_spec(rng, config));
  }
  const auto stats = compute_whiten_stats(corpus);
  SlotRow mean{}, var{};
  std::size_t n = 0;
  for (const auto& spec : corpus) {
    for (const auto& o : spec.objects) {
      const auto r = raw_features(o);
      for (std::size_t j = 0; j < slot::dim; ++j) mean[j] += r[j];
      ++n;
    }
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (const auto& spec : corpus) {
    for (const auto& o : spec.objects) {
      const auto r = raw_features(o);
      for (std::size_t j = 0; j < slot::dim; ++j) var[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
    }
  }
  for (std::size_t j = 0; j < slot::dim; ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(n));
    CHECK(std::abs(stats.mean[j] - mean[j]) <= 1e-10 * std::max(1.0, std::abs(mean[j])));
    CHECK(std::abs(stats.std[j] - sd) <= 1e-10 * sd);
  }
}

TEST_CASE("whitened dataset has zero mean and unit variance on non-empty slots") {
  const auto data = generate_dataset(GenConfig{}, 2000, 7);
  SlotRow sum{}, sq{};
  std::size_t n = 0;
  for (const auto& rec : data.records) {
    CHECK(rec.slots.object_count() == static_cast<std::size_t>(rec.spec.relational.count));
    for (std::size_t i = 0; i < rec.slots.slots(); ++i) {
      const auto row = rec.slots.row(i);
      if (rec.slots.empty[i]) {
        for (double v : row) CHECK(v == 0.0);
        continue;
      }
      ++n;
      for (std::size_t j = 0; j < slot::dim; ++j) {
        sum[j] += row[j];
        sq[j] += row[j] * row[j];
      }
    }
  }
  for (std::size_t j = 0; j < slot::dim; ++j) {
    const double m = sum[j] / static_cast<double>(n);
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(sq[j] / static_cast<double>(n) - m * m - 1.0) < 1e-6);
  }
}

TEST_CASE("constant features floor the std and whitening inverts exactly") {
  GenConfig config;
  Rng rng(1);
  const auto spec = sample_scene_spec(rng, config);
  const auto stats = compute_whiten_stats({spec, spec, spec});
  // Every object in one scene has a distinct position but shapes may coincide;
  // a repeated single-object corpus makes every feature constant.
  SceneSpec single = spec;
  single.objects.resize(1);
  const auto flat = compute_whiten_stats({single, single});
  for (double s : flat.std) CHECK(s == WhitenStats::min_std);
  for (const auto& o : spec.objects) {
    const auto raw = raw_features(o);
    const auto back = stats.un_whiten(stats.whiten(raw));
    for (std::size_t j = 0; j < slot::dim; ++j) CHECK(std::abs(back[j] - raw[j]) < 1e-12);
  }
}

TEST_CASE("two-valued feature gives mean 1 std 1") {
  SceneSpec a, b;
  SceneObject o;
  o.position = {0.0, 0.0};
  a.objects = {o};
  o.position = {2.0, 0.0};
  b.objects = {o};
  const auto stats = compute_whiten_stats({a, b});
  CHECK(stats.mean[slot::x] == doctest::Approx(1.0));
  CHECK(stats.std[slot::x] == doctest::Approx(1.0));
  CHECK_THROWS_AS(compute_whiten_stats({}), DomainError);
}

TEST_CASE("slot matrix capacity and full scenes") {
  GenConfig config;
  Rng rng(3);
  auto spec = sample_scene_spec(rng, config);
  const auto stats = compute_whiten_stats({spec});
  Rng order(9);
  CHECK_THROWS_AS(to_slot_matrix(spec, spec.objects.size() - 1, stats, order), CapacityError);
  const auto full = to_slot_matrix(spec, spec.objects.size(), stats, order);
  for (bool e : full.empty) CHECK_FALSE(e);
}

TEST_CASE("slot rows are shuffled across records") {
  const auto data = generate_dataset(GenConfig{}, 400, 1);
  std::size_t first_slot_used = 0;
  for (const auto& rec : data.records) first_slot_used += !rec.slots.empty[0];
  // With random placement about count/K of scenes use slot 0.
  CHECK(first_slot_used > 100);
  CHECK(first_slot_used < 300);
}

TEST_CASE("rendering: empty scene, symmetric square, pixel coverage") {
  const int res = 64;
  const auto blank = render_objects({}, res);
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) CHECK(blank.at(x, y) == blank.at(0, 0));
  }

  SceneObject sq;
  sq.appearance.shape = Sprite::square;
  sq.appearance.size = 0.2;
  sq.appearance.value = 1.0;
  sq.appearance.saturation = 1.0;
  const auto img = render_objects({sq}, res);
  int covered = 0;
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const bool on = !(img.at(x, y) == blank.at(x, y));
      covered += on;
      CHECK(on == !(img.at(res - 1 - x, y) == blank.at(res - 1 - x, y)));
      CHECK(on == !(img.at(x, res - 1 - y) == blank.at(x, res - 1 - y)));
    }
  }

  const int big = 256;
  sq.appearance.size = 0.2;
  const auto hi = render_objects({sq}, big);
  const auto hi_blank = render_objects({}, big);
  int n = 0;
  for (int y = 0; y < big; ++y) {
    for (int x = 0; x < big; ++x) n += !(hi.at(x, y) == hi_blank.at(x, y));
  }
  const double expected = std::pow(0.2 / 2.0, 2) * big * big / 4.0;
  CHECK(std::abs(n - expected) / expected < 0.15);
  CHECK(covered > 0);
  CHECK_THROWS_AS(render_objects({}, 8), DomainError);
}

TEST_CASE("dataset round trip, determinism and format errors") {
  testutil::TempDir dir("dataset");
  const auto data = generate_dataset(GenConfig{}, 100, 5);
  write_dataset(dir.path / "a.jsonl", data);
  write_dataset(dir.path / "b.jsonl", generate_dataset(GenConfig{}, 100, 5));
  CHECK(testutil::slurp(dir.path / "a.jsonl") == testutil::slurp(dir.path / "b.jsonl"));

  const auto back = read_dataset(dir.path / "a.jsonl");
  REQUIRE(back.records.size() == 100);
  for (std::size_t r = 0; r < 100; ++r) {
    const auto& x = data.records[r];
    const auto& y = back.records[r];
    CHECK(x.seed == y.seed);
    CHECK(x.spec.relational.count == y.spec.relational.count);
    CHECK(x.slots.empty == y.slots.empty);
    CHECK(diff::max_abs_diff(x.slots.features, y.slots.features) <= 1e-12);
    CHECK(std::abs(x.spec.relational.curviness - y.spec.relational.curviness) <= 1e-12);
  }
  for (std::size_t j = 0; j < slot::dim; ++j) CHECK(std::abs(back.header.stats.std[j] - data.header.stats.std[j]) <= 1e-12);

  // Truncated: drop the last line.
  auto text = testutil::slurp(dir.path / "a.jsonl");
  text.erase(text.rfind('\n', text.size() - 2) + 1);
  { std::ofstream(dir.path / "t.jsonl") << text; }
  CHECK_THROWS_AS(read_dataset(dir.path / "t.jsonl"), FormatError);

  // Wrong schema version.
  auto bad = testutil::slurp(dir.path / "a.jsonl");
  bad.replace(bad.find("\"schema_version\":1"), 18, "\"schema_version\":9");
  { std::ofstream(dir.path / "v.jsonl") << bad; }
  CHECK_THROWS_AS(read_dataset(dir.path / "v.jsonl"), FormatError);

  // Header K disagreeing with the records names the first bad record.
  auto wrong_k = testutil::slurp(dir.path / "a.jsonl");
  wrong_k.replace(wrong_k.find("\"K\":8"), 5, "\"K\":7");
  { std::ofstream(dir.path / "k.jsonl") << wrong_k; }
  try {
    read_dataset(dir.path / "k.jsonl");
    FAIL("K mismatch accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("record 0") != std::string::npos);
  }

  CHECK_THROWS_AS(generate_dataset(GenConfig{}, 0, 1), ConfigError);
}

TEST_CASE("file size is within 2x of the per-record estimate") {
  testutil::TempDir dir("size");
  const auto small = generate_dataset(GenConfig{}, 50, 1);
  write_dataset(dir.path / "s.jsonl", small);
  const double per_record = static_cast<double>(std::filesystem::file_size(dir.path / "s.jsonl")) / 50.0;
  const auto big = generate_dataset(GenConfig{}, 2000, 1);
  write_dataset(dir.path / "b.jsonl", big);
  const double actual = static_cast<double>(std::filesystem::file_size(dir.path / "b.jsonl"));
  CHECK(actual < 2.0 * per_record * 2000);
  CHECK(actual > 0.5 * per_record * 2000);
}
