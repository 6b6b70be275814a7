#include <doctest.h>

#include <Eigen/Dense>

#include "constellation/diff/grad_check.hpp"
#include "constellation/errors.hpp"
#include "constellation/model.hpp"
#include "constellation/objective.hpp"
#include "helpers.hpp"

using namespace constellation;
using namespace constellation::diff;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::RowVectorXd;

namespace {

Mat to_eigen(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

// Straightforward dense re-implementation used as the reference forward pass.
struct Reference {
  const ParamSet& p;

  Vec layer(const Vec& x, const std::string& name, bool act) const {
    Vec y = x * to_eigen(p.at(name + "/w")) + to_eigen(p.at(name + "/b"));
    return act ? Vec(y.array().tanh()) : y;
  }
  Vec mlp(Vec x, const std::string& prefix, int layers, bool act_final) const {
    for (int l = 0; l < layers; ++l) x = layer(x, prefix + "/" + std::to_string(l), l + 1 < layers || act_final);
    return x;
  }

  // One scene: K x d_o abstract slots -> (mu, sigma).
  std::pair<Vec, Vec> encode(const Mat& a) const {
    const auto K = a.rows();
    std::vector<Vec> h(static_cast<std::size_t>(K));
    for (Eigen::Index i = 0; i < K; ++i) h[i] = a.row(i);
    for (int r = 0; r < 2; ++r) {
      const std::string pre = "enc/round" + std::to_string(r);
      std::vector<Vec> next(h.size());
      for (Eigen::Index j = 0; j < K; ++j) {
        Vec msg = Vec::Zero(64);
        for (Eigen::Index i = 0; i < K; ++i) {
          if (i == j) continue;
          Vec e(h[i].size() + h[j].size());
          e << h[i], h[j];
          msg += mlp(e, pre + "/edge", 2, true);
        }
        Vec in(h[j].size() + 64);
        in << h[j], msg;
        next[j] = mlp(in, pre + "/node", 2, true);
      }
      h = next;
    }
    Vec agg = Vec::Zero(h[0].size());
    for (const auto& v : h) agg += v;
    const Vec g = mlp(agg, "enc/global", 3, false);
    const auto dz = g.size() / 2;
    Vec sigma(dz);
    for (Eigen::Index k = 0; k < dz; ++k) sigma(k) = std::log1p(std::exp(g(dz + k))) + 1e-6;
    return {g.head(dz), sigma};
  }

  Mat decode(const Vec& z, int K) const {
    const Vec x = mlp(z, "dec/g", 3, true);
    const Mat wx = to_eigen(p.at("dec/lstm/wx")), wh = to_eigen(p.at("dec/lstm/wh"));
    const Vec b = to_eigen(p.at("dec/lstm/b"));
    Vec h = Vec::Zero(64), c = Vec::Zero(64);
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    Mat out(K, 10);
    for (int t = 0; t < K; ++t) {
      const Vec g = x * wx + h * wh + b;
      for (int u = 0; u < 64; ++u) {
        c(u) = sig(g(64 + u)) * c(u) + sig(g(u)) * std::tanh(g(128 + u));
        h(u) = sig(g(192 + u)) * std::tanh(c(u));
      }
      out.row(t) = mlp(h, "dec/f", 2, false);
    }
    return out;
  }
};

SlotMatrix random_scene(std::mt19937_64& rng, std::size_t K, std::size_t objects) {
  SlotMatrix s{testutil::random_tensor(rng, {K, slot::dim}), std::vector<bool>(K, false)};
  for (std::size_t i = objects; i < K; ++i) {
    s.empty[i] = true;
    for (std::size_t j = 0; j < slot::dim; ++j) s.features.at(i, j) = 0.0;
  }
  return s;
}

ParamSet perturbed_params(const model::ModelConfig& c, std::uint64_t seed) {
  auto p = model::init_params(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.5);
  for (double& v : p["mask/logits"].values()) v = n(rng);
  for (auto& [name, t] : p) {
    if (name.size() > 2 && name.substr(name.size() - 2) == "/b") {
      for (double& v : t.values()) v = 0.1 * n(rng);
    }
  }
  return p;
}

}  // namespace

TEST_CASE("apply_mask multiplies elementwise") {
  Tape tape;
  const Var a = model::apply_mask(tape.leaf(Tensor::matrix({{1, 2, 4}})), tape.leaf(Tensor::vector({0.5, 0.25, 0.25})));
  CHECK(a.value() == Tensor::matrix({{0.5, 0.5, 1.0}}));
  CHECK_THROWS_AS(model::apply_mask(tape.leaf(Tensor::matrix({{1, 2}})), tape.leaf(Tensor::vector({1, 0, 0}))),
                  DimensionError);
}

TEST_CASE("fresh mask is uniform and lies on the simplex") {
  model::ModelConfig c;
  const model::Model m(c, model::init_params(c, 3));
  double total = 0.0;
  for (double v : m.mask()) {
    CHECK(v == doctest::Approx(0.1).epsilon(1e-15));
    total += v;
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("gradient of the masked sum w.r.t. the logits") {
  std::mt19937_64 rng(4);
  const Tensor slots = testutil::random_tensor(rng, {3, 10});
  ScalarFunction fn = [&](Tape& tape, std::span<const Var> v) {
    return sum(model::apply_mask(tape.constant(slots), softmax(v[0])));
  };
  CHECK(grad_check(fn, {testutil::random_tensor(rng, {10})}).max_rel_error < 1e-6);
}

TEST_CASE("encoder and decoder match an independent dense forward pass") {
  model::ModelConfig c;
  c.slots = 4;
  const auto params = perturbed_params(c, 9);
  const model::Model m(c, params);
  const Reference ref{params};
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto scene = random_scene(rng, 4, 3);
    Mat a = to_eigen(scene.features);
    const auto mask = m.mask();
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (Eigen::Index j = 0; j < a.cols(); ++j) a(r, j) *= mask[static_cast<std::size_t>(j)];
    const auto [mu, sigma] = ref.encode(a);
    const auto post = m.encode(scene);
    for (int k = 0; k < 8; ++k) {
      CHECK(post.mu[k] == doctest::Approx(mu(k)).epsilon(1e-10));
      CHECK(post.sigma[k] == doctest::Approx(sigma(k)).epsilon(1e-10));
    }
    const Tensor dec = m.decode(post.mu);
    Vec z(8);
    for (int k = 0; k < 8; ++k) z(k) = post.mu[k];
    const Mat expected = ref.decode(z, 4);
    for (int t = 0; t < 4; ++t)
      for (int j = 0; j < 10; ++j) CHECK(dec.at(t, j) == doctest::Approx(expected(t, j)).epsilon(1e-10));
  }
}

TEST_CASE("single slot: no edges, zero message, well-defined output") {
  model::ModelConfig c;
  c.slots = 1;
  const auto params = perturbed_params(c, 5);
  const model::Model m(c, params);
  std::mt19937_64 rng(1);
  const auto scene = random_scene(rng, 1, 1);
  Mat a = to_eigen(scene.features);
  const auto mask = m.mask();
  for (int j = 0; j < 10; ++j) a(0, j) *= mask[j];
  const auto [mu, sigma] = Reference{params}.encode(a);
  const auto post = m.encode(scene);
  for (int k = 0; k < 8; ++k) {
    CHECK(std::isfinite(post.mu[k]));
    CHECK(post.mu[k] == doctest::Approx(mu(k)).epsilon(1e-10));
  }
}

TEST_CASE("encoder is invariant to slot shuffles") {
  model::ModelConfig c;
  const model::Model m(c, perturbed_params(c, 1));
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    auto scene = random_scene(rng, 8, 2 + trial % 5);
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    SlotMatrix shuffled{Tensor(Shape{8, slot::dim}), std::vector<bool>(8)};
    for (std::size_t i = 0; i < 8; ++i) {
      shuffled.set_row(i, scene.row(perm[i]));
      shuffled.empty[i] = scene.empty[perm[i]];
    }
    const auto a = m.encode(scene), b = m.encode(shuffled);
    for (int k = 0; k < 8; ++k) {
      worst = std::max(worst, std::abs(a.mu[k] - b.mu[k]));
      worst = std::max(worst, std::abs(a.sigma[k] - b.sigma[k]));
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("zero weights make the encoder ignore its input") {
  model::ModelConfig c;
  auto params = perturbed_params(c, 2);
  for (auto& [name, t] : params) {
    if (name.rfind("enc/", 0) == 0 && name.back() == 'w') t.fill(0.0);
  }
  const model::Model m(c, params);
  std::mt19937_64 rng(3);
  const auto a = m.encode(random_scene(rng, 8, 3)), b = m.encode(random_scene(rng, 8, 5));
  CHECK(a.mu == b.mu);
  // The globals head then outputs its last bias.
  for (int k = 0; k < 8; ++k) CHECK(a.mu[k] == doctest::Approx(params["enc/global/2/b"][k]));
}

TEST_CASE("zero decoder weights give the output bias on every step") {
  model::ModelConfig c;
  auto params = perturbed_params(c, 2);
  for (auto& [name, t] : params) {
    if (name.rfind("dec/", 0) == 0 && name.back() != 'b') t.fill(0.0);
  }
  const model::Model m(c, params);
  const Tensor out = m.decode(std::vector<double>(8, 0.7));
  REQUIRE(out.rows() == 8);
  REQUIRE(out.cols() == 10);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t j = 0; j < 10; ++j) CHECK(out.at(t, j) == doctest::Approx(params["dec/f/1/b"][j]));
}

TEST_CASE("decoder output shape is K x d_o for any latent size") {
  for (std::size_t dz : {1u, 3u, 12u}) {
    model::ModelConfig c;
    c.latent_dim = dz;
    c.slots = 5;
    const model::Model m(c, model::init_params(c, 1));
    const Tensor out = m.decode(std::vector<double>(dz, 0.1));
    CHECK(out.rows() == 5);
    CHECK(out.cols() == 10);
    CHECK(out == m.decode(std::vector<double>(dz, 0.1)));
  }
}

TEST_CASE("reparameterized sample") {
  Tape tape;
  model::RelationalPosterior p{tape.leaf(Tensor::matrix({{1.0, -2.0}})), tape.leaf(Tensor::matrix({{0.5, 1e-6}}))};
  const Tensor mu = p.mu.value();
  const Tensor at_zero = model::sample(p, tape.constant(Tensor(Shape{1, 2}, 0.0))).value();
  CHECK(at_zero == mu);
  const Tensor z = model::sample(p, tape.constant(Tensor::matrix({{2.0, 3.0}}))).value();
  CHECK(z.at(0, 0) == doctest::Approx(2.0));
  CHECK(std::abs(z.at(0, 1) + 2.0) < 1e-5);
}

TEST_CASE("Monte Carlo mean of reparameterized samples") {
  const std::size_t draws = 100000;
  std::mt19937_64 rng(1);
  Tape tape;
  model::RelationalPosterior p{tape.constant(Tensor(Shape{draws, 1}, 1.0)), tape.constant(Tensor(Shape{draws, 1}, 0.5))};
  const Tensor z = model::sample(p, tape.constant(testutil::random_tensor(rng, {draws, 1}))).value();
  double acc = 0.0;
  for (double v : z.values()) acc += v;
  CHECK(std::abs(acc / draws - 1.0) < 3.0 * 0.5 / std::sqrt(static_cast<double>(draws)));
}

TEST_CASE("prior samples are standard normal and deterministic") {
  std::mt19937_64 rng(5);
  const int n = 100000, d = 4;
  Eigen::MatrixXd s(n, d);
  for (int i = 0; i < n; ++i) {
    const auto z = model::prior_sample(rng, d);
    for (int k = 0; k < d; ++k) s(i, k) = z[k];
  }
  const Eigen::RowVectorXd mean = s.colwise().mean();
  const Eigen::MatrixXd centered = s.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / n;
  for (int k = 0; k < d; ++k) {
    CHECK(std::abs(mean(k)) < 0.02);
    for (int l = 0; l < d; ++l) CHECK(std::abs(cov(k, l) - (k == l ? 1.0 : 0.0)) < 0.02);
  }
  std::mt19937_64 a(9), b(9);
  CHECK(model::prior_sample(a, 8) == model::prior_sample(b, 8));
}

TEST_CASE("decoder gradient w.r.t. z through the LSTM unroll") {
  model::ModelConfig c;
  c.slots = 3;
  const auto params = perturbed_params(c, 4);
  std::mt19937_64 rng(6);
  ScalarFunction fn = [&](Tape& tape, std::span<const Var> v) {
    BoundParams p(tape, params);
    return sum(model::decode(v[0], 3, p));
  };
  CHECK(grad_check(fn, {testutil::random_tensor(rng, {2, 8})}).max_rel_error < 1e-5);
}

TEST_CASE("model errors") {
  Tape tape;
  model::ModelConfig c;
  BoundParams p(tape, model::init_params(c, 1));
  CHECK_THROWS_AS(model::encode(tape.constant(Tensor(Shape{0, 10})), 1, 0, p), DomainError);
  CHECK_THROWS_AS(model::decode(tape.constant(Tensor(Shape{1, 8})), 0, p), DomainError);
}

TEST_CASE("init is fan-in scaled uniform with zero biases and logits") {
  model::ModelConfig c;
  const auto p = model::init_params(c, 11);
  for (const auto& [name, t] : p) {
    if (name.back() == 'b' || name == "mask/logits" || name == "objective/gamma") {
      for (double v : t.values()) CHECK(v == 0.0);
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t.rows()));
      for (double v : t.values()) CHECK(std::abs(v) <= bound);
    }
  }
  CHECK(model::init_params(c, 11) == p);
}
