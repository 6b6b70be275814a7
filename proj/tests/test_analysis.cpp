#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "constellation/analysis.hpp"
#include "constellation/errors.hpp"
#include "constellation/imagine.hpp"
#include "helpers.hpp"

using namespace constellation;
using namespace constellation::analysis;
using diff::Shape;
using diff::Tensor;

namespace {

// H(a) + H(b) - H(a, b) from a dense joint table.
double mi_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  const int na = *std::max_element(a.begin(), a.end()) + 1, nb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> joint(static_cast<std::size_t>(na * nb), 0.0), pa(na, 0.0), pb(nb, 0.0);
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(a[i] * nb + b[i])] += 1.0 / n;
    pa[a[i]] += 1.0 / n;
    pb[b[i]] += 1.0 / n;
  }
  auto h = [](const std::vector<double>& p) {
    double s = 0.0;
    for (double v : p) {
      if (v > 0) s -= v * std::log(v);
    }
    return s;
  };
  return h(pa) + h(pb) - h(joint);
}

}  // namespace

TEST_CASE("entropy of known distributions") {
  std::vector<int> uniform;
  for (int k = 0; k < 7; ++k) uniform.insert(uniform.end(), 3, k);
  CHECK(entropy(uniform) == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  CHECK(entropy(std::vector<int>(10, 4)) == 0.0);
  // p = (1/2, 1/4, 1/4)
  CHECK(entropy({0, 0, 1, 2}) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("mutual information against the entropy identity") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 50 + rng() % 500;
    const int ka = 1 + static_cast<int>(rng() % 6), kb = 1 + static_cast<int>(rng() % 6);
    std::vector<int> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng() % static_cast<unsigned>(ka));
      b[i] = rng() % 3 == 0 ? a[i] % kb : static_cast<int>(rng() % static_cast<unsigned>(kb));
    }
    const double mi = mutual_information(a, b);
    const double want = mi_oracle(a, b);
    CHECK(std::abs(mi - std::max(0.0, want)) < 1e-12 + 1e-9 * std::abs(want));
    CHECK(mi >= 0.0);
    CHECK(mi <= std::min(entropy(a), entropy(b)) + 1e-12);
    CHECK(mutual_information(a, a) == doctest::Approx(entropy(a)).epsilon(1e-12));
    CHECK(mi == doctest::Approx(mutual_information(b, a)).epsilon(1e-12));
  }
  // An exact product table has zero information.
  std::vector<int> a, b;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 5; ++j) {
      a.push_back(i);
      b.push_back(j);
    }
  }
  CHECK(std::abs(mutual_information(a, b)) < 1e-15);
  CHECK_THROWS_AS(mutual_information({0, 1}, {0}), DimensionError);
}

TEST_CASE("binning rules") {
  std::vector<double> v(1000);
  std::iota(v.begin(), v.end(), 0.0);
  std::mt19937_64 rng(3);
  std::shuffle(v.begin(), v.end(), rng);
  const auto mass = equal_mass_bins(v, 20);
  std::vector<int> counts(20, 0);
  for (int b : mass) ++counts.at(static_cast<std::size_t>(b));
  for (int c : counts) CHECK(c == 50);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(mass[i] == static_cast<int>(v[i]) / 50);

  // Ties never straddle a bin edge.
  std::vector<double> tied(300);
  for (std::size_t i = 0; i < tied.size(); ++i) tied[i] = static_cast<double>(i % 4);
  const auto tb = equal_mass_bins(tied, 10);
  for (std::size_t i = 0; i < tied.size(); ++i) CHECK(tb[i] == tb[i % 4]);

  const auto w = equal_width_bins({0.0, 0.049, 0.05, 0.5, 0.999, 1.0}, 20);
  CHECK(w == std::vector<int>{0, 0, 1, 10, 19, 19});
  CHECK(equal_width_bins({3.0, 3.0}, 5) == std::vector<int>{0, 0});
  CHECK(discrete_bins({6.0, 2.0, 4.0, 2.0}) == std::vector<int>{2, 0, 1, 0});
  CHECK_THROWS_AS(equal_mass_bins(v, 0), DomainError);
}

TEST_CASE("latent binning is invariant to monotone transforms") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> lat(2000), warped(2000);
  std::vector<FactorRow> f(2000);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    f[i] = {n(rng), n(rng), n(rng), n(rng), static_cast<double>(2 + rng() % 5)};
    lat[i] = {f[i][0] + 0.3 * n(rng), f[i][4] + n(rng), n(rng)};
    warped[i] = {std::exp(lat[i][0]), std::pow(lat[i][1], 3.0), 5.0 * lat[i][2] - 2.0};
  }
  const auto a = mutual_info_matrix(lat, f), b = mutual_info_matrix(warped, f);
  CHECK(a.mi.data() == b.mi.data());
  // The informative dims are found.
  CHECK(a.mi.at(0, 0) > 5 * a.mi.at(2, 0));
  CHECK(a.mi.at(1, 4) > 5 * a.mi.at(2, 4));
  CHECK(a.factor_entropy[4] == doctest::Approx(std::log(5.0)).epsilon(0.01));
  lat.resize(999);
  f.resize(999);
  CHECK_THROWS_AS(mutual_info_matrix(lat, f), DomainError);
}

TEST_CASE("MIG on hand-built matrices") {
  Tensor mi(Shape{3, 2}, 0.0);
  mi.at(0, 0) = 0.6;
  mi.at(1, 0) = 0.2;
  mi.at(2, 0) = 0.1;
  mi.at(0, 1) = 0.3;
  mi.at(1, 1) = 0.3;
  CHECK(mig_score(mi, {1.0, 0.5}) == doctest::Approx(0.2).epsilon(1e-12));
  std::vector<std::size_t> skipped;
  CHECK(mig_score(mi, {2.0, 0.0}, &skipped) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(skipped == std::vector<std::size_t>{1});
  // A perfectly disentangled code scores 1.
  Tensor diag(Shape{5, 5}, 0.0);
  for (std::size_t k = 0; k < 5; ++k) diag.at(k, k) = 1.3;
  CHECK(mig_score(diag, std::vector<double>(5, 1.3)) == doctest::Approx(1.0));
  CHECK_THROWS_AS(mig_score(mi, {1.0}), DimensionError);
}

TEST_CASE("ordering score") {
  Rng rng(1);
  std::vector<Point> line;
  for (int i = 0; i < 6; ++i) line.push_back({0.1 * i, 0.0});
  const auto s = ordering_score(line, rng, 20000);
  REQUIRE(s);
  // Exact mean over all 720 permutations of six evenly spaced points.
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  double total = 0.0;
  int count = 0;
  do {
    double len = 0.0;
    for (int i = 0; i + 1 < 6; ++i) len += 0.1 * std::abs(perm[i + 1] - perm[i]);
    total += len;
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  CHECK(*s == doctest::Approx(0.5 / (total / count)).epsilon(0.02));
  CHECK(*s < 1.0);

  Rng r2(1), r3(1);
  auto reversed = line;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(ordering_score(reversed, r2, 500) == ordering_score(line, r3, 500));
  CHECK_FALSE(ordering_score({{0, 0}, {1, 1}}, rng));
  CHECK(ordering_score(std::vector<Point>(4, Point{0.2, 0.2}), rng) == 1.0);
}

TEST_CASE("decoded order is a permutation of the scene positions") {
  model::ModelConfig config;
  const model::Model m(config, model::init_params(config, 3));
  GenConfig gen;
  std::vector<SceneSpec> specs;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    specs.push_back(sample_scene_spec(rng, gen));
  }
  const auto stats = compute_whiten_stats(specs);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Rng rng(i);
    const auto slots = to_slot_matrix(specs[i], 8, stats, rng);
    const auto order = decoded_order(m, slots, stats);
    REQUIRE(order.size() == specs[i].objects.size());
    for (const auto& obj : specs[i].objects) {
      const bool found = std::any_of(order.begin(), order.end(), [&](const Point& p) {
        return std::abs(p.x - obj.position.x) < 1e-9 && std::abs(p.y - obj.position.y) < 1e-9;
      });
      CHECK(found);
    }
  }
}

TEST_CASE("traversal values and decoded traversals") {
  const auto v = traversal_values(0.0);
  REQUIRE(v.size() == 4);
  CHECK(v[0] == doctest::Approx(-2.5));
  CHECK(v[1] == doctest::Approx(-2.5 / 3.0));
  CHECK(v[3] == doctest::Approx(2.5));
  CHECK(traversal_values(1.0, 1.0, 1) == std::vector<double>{1.0});

  model::ModelConfig config;
  const model::Model m(config, model::init_params(config, 5));
  GenConfig gen;
  Rng rng(1);
  std::vector<SceneSpec> specs{sample_scene_spec(rng, gen)};
  const auto stats = compute_whiten_stats(specs);
  const auto slots = to_slot_matrix(specs[0], 8, stats, rng);
  const auto t = latent_traversal(m, slots, 2, v, 0.05);
  CHECK(t.size() == v.size());
  CHECK(t[0].features == latent_traversal(m, slots, 2, v, 0.05)[0].features);
  CHECK_THROWS_AS(latent_traversal(m, slots, config.latent_dim, v, 0.05), DomainError);
}

TEST_CASE("figures are written with a manifest") {
  testutil::TempDir dir("figs");
  FigureInputs in;
  in.mask = {0.3, 0.3, 0.1, 0.1, 0.05, 0.05, 0.025, 0.025, 0.025, 0.025};
  Tensor mi(Shape{3, 5}, 0.1);
  in.mi = mi;
  in.metrics = {{{"step", 0}, {"rec", 1.0}, {"reg", 2.0}}, {{"step", 10}, {"rec", 0.5}, {"reg", 1.0}}};
  in.traversal = {{Image(8, 8, Rgb{0, 0, 0}), Image(8, 8, Rgb{10, 10, 10})}, {Image(8, 8, Rgb{0, 0, 0})}};
  const auto files = emit_figures(dir.path, in);
  CHECK(files == std::vector<std::string>{"mask.svg", "mutual_info.svg", "loss_curves.svg", "traversal.png"});
  for (const auto& f : files) CHECK(std::filesystem::file_size(dir.path / f) > 0);
  CHECK(testutil::slurp(dir.path / "mask.svg").find("<svg") != std::string::npos);
  CHECK(testutil::slurp(dir.path / "traversal.png").substr(1, 3) == "PNG");
  const auto manifest = nlohmann::json::parse(testutil::slurp(dir.path / "manifest.json"));
  CHECK(manifest.at("figures").size() == 4);

  const Image grid = image_grid(in.traversal);
  CHECK(grid.width == 2 * (8 + 2) + 2);
  CHECK(grid.height == 2 * (8 + 2) + 2);
  CHECK(grid.at(2 + 10, 2).r == 10);
}

TEST_CASE("MIG worked example and degenerate columns") {
  Tensor mi(Shape{3, 2}, 0.0);
  mi.at(0, 0) = 1.0;
  mi.at(1, 1) = 0.5;
  mi.at(2, 0) = 0.2;
  CHECK(mig_score(mi, {1.0, 1.0}) == doctest::Approx(0.65).epsilon(1e-12));
  CHECK(mig_score(Tensor(Shape{4, 5}, 0.3), std::vector<double>(5, 1.0)) == 0.0);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int t = 0; t < 200; ++t) {
    Tensor m(Shape{6, 5});
    for (double& v : m.values()) v = u(rng);
    std::vector<double> h(5);
    for (double& v : h) v = 0.1 + u(rng);
    const double s = mig_score(m, h);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("MI of a copied discrete factor and of independent noise") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n;
  const std::size_t N = 10000;
  std::vector<std::vector<double>> lat(N);
  std::vector<FactorRow> f(N);
  for (std::size_t i = 0; i < N; ++i) {
    f[i] = {n(rng), n(rng), n(rng), n(rng), static_cast<double>(2 + rng() % 5)};
    lat[i] = {f[i][4], n(rng)};
  }
  const auto r = mutual_info_matrix(lat, f);
  CHECK(r.mi.at(0, 4) == doctest::Approx(r.factor_entropy[4]).epsilon(1e-12));
  for (std::size_t k = 0; k < kFactorCount; ++k) CHECK(r.mi.at(1, k) < 0.05);
  // Relabelling factor bins leaves MI unchanged.
  std::vector<int> a(N), b(N), b2(N);
  for (std::size_t i = 0; i < N; ++i) {
    a[i] = static_cast<int>(rng() % 4);
    b[i] = (a[i] + static_cast<int>(rng() % 2)) % 4;
    b2[i] = 3 - b[i];
  }
  CHECK(mutual_information(a, b) == doctest::Approx(mutual_information(a, b2)).epsilon(1e-12));
}

TEST_CASE("line order beats random permutations in almost every trial") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  int failures = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 3 + rng() % 4;
    std::vector<double> s(n);
    for (double& v : s) v = u(rng);
    std::sort(s.begin(), s.end());
    const double angle = u(rng) * 3.0;
    std::vector<Point> pts;
    for (double v : s) pts.push_back({v * std::cos(angle), v * std::sin(angle)});
    auto shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    // Shuffles that keep line order tie; the margin covers the noise of the
    // random-order denominator (about 0.5% at 5000 trials).
    Rng r1(t), r2(t);
    failures += *ordering_score(pts, r1, 5000) > 1.03 * *ordering_score(shuffled, r2, 5000);
  }
  CHECK(failures < 10);
}

TEST_CASE("traversal at the encoded value reproduces the reconstruction") {
  model::ModelConfig config;
  const model::Model m(config, model::init_params(config, 6));
  GenConfig gen;
  Rng rng(4);
  std::vector<SceneSpec> specs{sample_scene_spec(rng, gen)};
  const auto stats = compute_whiten_stats(specs);
  const auto slots = to_slot_matrix(specs[0], 8, stats, rng);
  const auto mu = m.encode(slots).mu;
  const auto t = latent_traversal(m, slots, 3, {mu[3]}, 0.05);
  const auto direct = imagine::fill_in(m.decode(mu), slots, m.mask(), 0.05);
  CHECK(t.at(0).features == direct.features);
}
