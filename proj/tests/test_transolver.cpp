#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "pfem/transolver.hpp"

using namespace pfem;
using namespace pfem::op;
using ad::Tensor;

namespace {

Tensor random_cloud(std::size_t n, std::size_t f, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor t = Tensor::zeros(n, f);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& p) {
  Tensor y = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) y(i, c) = x(p[i], c);
  return y;
}

TransolverConfig tiny() {
  TransolverConfig c;
  c.num_layers = 1;
  c.channels = 8;
  c.num_tokens = 4;
  c.heads = 2;
  c.in_features = 3;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  TransolverConfig c;
  c.channels = 10;
  c.heads = 4;
  CHECK_THROWS(c.validate());
  c = TransolverConfig{};
  c.num_tokens = 0;
  CHECK_THROWS(c.validate());
  CHECK(config_from_json(to_json(tiny())) == tiny());
}

TEST_CASE("embedding is pointwise") {
  std::mt19937_64 rng(1);
  Transolver net(tiny(), 3);
  Tensor x = random_cloud(6, 3, rng);
  for (std::size_t c = 0; c < 3; ++c) x(4, c) = x(1, c);
  ad::Tape t;
  const auto p = net.bind(t);
  const auto e = net.embed(p, t.constant(x)).value();
  for (std::size_t c = 0; c < e.cols(); ++c) CHECK(e(1, c) == e(4, c));
  CHECK_THROWS_AS(net.embed(p, t.constant(Tensor::zeros(2, 5))), ad::ShapeError);
}

TEST_CASE("one-hot slice weights give token means") {
  ad::Tape t;
  const Tensor U = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  const Tensor M = Tensor::matrix({{1, 0}, {0, 1}, {1, 0}, {1, 0}});
  const auto Z = slice_tokens(t.constant(U), t.constant(M)).value();
  CHECK(Z(0, 0) == doctest::Approx((1 + 5 + 7) / 3.0));
  CHECK(Z(0, 1) == doctest::Approx((2 + 6 + 8) / 3.0));
  CHECK(Z(1, 0) == 3);
  CHECK(Z(1, 1) == 4);
  const auto X = deslice(t.constant(Z), t.constant(M)).value();
  CHECK(X(1, 0) == 3);
  CHECK(X(2, 1) == Z(0, 1));
}

TEST_CASE("single token broadcasts one row") {
  std::mt19937_64 rng(2);
  TransolverConfig c = tiny();
  c.num_tokens = 1;
  Transolver net(c, 4);
  ad::Tape t;
  const auto p = net.bind(t);
  const auto y = net.physics_attention(p, 0, t.constant(random_cloud(9, 8, rng))).value();
  for (std::size_t r = 1; r < 9; ++r)
    for (std::size_t k = 0; k < 8; ++k) CHECK(y(r, k) == y(0, k));
}

TEST_CASE("permutation equivariance is bitwise") {
  std::mt19937_64 rng(3);
  TransolverConfig c;
  c.channels = 16;
  c.num_tokens = 8;
  c.heads = 2;
  c.in_features = 4;
  Transolver net(c, 5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_cloud(37, 4, rng);
    std::vector<std::size_t> perm(37);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(net.predict(permute(x, perm)) == permute(net.predict(x), perm));

    const Tensor h = random_cloud(37, 16, rng);
    ad::Tape t;
    const auto p = net.bind(t);
    const auto a = net.physics_attention(p, 1, t.constant(permute(h, perm))).value();
    const auto b = net.physics_attention(p, 1, t.constant(h)).value();
    CHECK(a == permute(b, perm));
  }
}

TEST_CASE("forward time is linear in the number of points") {
  std::mt19937_64 rng(8);
  Transolver net(TransolverConfig{}, 1);
  auto best = [&](std::size_t n) {
    const Tensor x = random_cloud(n, 7, rng);
    double t = 1e300;
    for (int rep = 0; rep < 5; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto y = net.predict(x);
      const auto t1 = std::chrono::steady_clock::now();
      CHECK(y.rows() == n);
      t = std::min(t, std::chrono::duration<double>(t1 - t0).count());
    }
    return t;
  };
  const double t1 = best(2000), t2 = best(4000);
  CHECK(t2 <= 2.5 * t1);
}

TEST_CASE("slice weights are normalized in every layer") {
  std::mt19937_64 rng(4);
  TransolverConfig c;
  c.channels = 16;
  c.heads = 4;
  c.in_features = 4;
  Transolver net(c, 6);
  AttentionTrace trace;
  ad::Tape t;
  net.forward(t, random_cloud(50, 4, rng), &trace);
  CHECK(trace.slice_weights.size() == static_cast<std::size_t>(c.num_layers * c.heads));
  for (const auto& M : trace.slice_weights)
    for (std::size_t r = 0; r < M.rows(); ++r) {
      double s = 0;
      for (std::size_t k = 0; k < M.cols(); ++k) s += M(r, k);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("degenerate and duplicated inputs") {
  std::mt19937_64 rng(5);
  Transolver net(tiny(), 7);
  const auto y = net.predict(random_cloud(1, 3, rng));
  CHECK(y.rows() == 1);
  CHECK(y.cols() == 2);
  const Tensor x = random_cloud(12, 3, rng);
  CHECK(net.predict(x) == net.predict(x));
  TransolverConfig zero;
  zero.num_layers = 0;
  zero.channels = 1;
  zero.heads = 1;
  zero.num_tokens = 1;
  zero.in_features = 3;
  CHECK(Transolver(zero, 1).predict(x).rows() == 12);
}

TEST_CASE("parameter gradients match finite differences on a tiny network") {
  std::mt19937_64 rng(8);
  Transolver net(tiny(), 9);
  const Tensor x = random_cloud(25, 3, rng);
  const Tensor w = random_cloud(25, 2, rng);
  auto loss = [&](ad::Tape& t) { return ad::sum(ad::mul(net.forward(t, x), t.constant(w))); };
  ad::Tape t;
  const auto g = t.backward(loss(t), net.params().flat_size());
  std::size_t good = 0;
  double worst = 0;
  auto& flat = net.params().flat();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double keep = flat[i], h = 1e-6;
    flat[i] = keep + h;
    ad::Tape tp;
    const double fp = loss(tp).value().item();
    flat[i] = keep - h;
    ad::Tape tm;
    const double fm = loss(tm).value().item();
    flat[i] = keep;
    const double fd = (fp - fm) / (2 * h);
    const double rel = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6});
    worst = std::max(worst, rel);
    if (rel <= 1e-4) ++good;
  }
  CHECK(static_cast<double>(good) >= 0.95 * static_cast<double>(flat.size()));
  CHECK(worst <= 1e-3);
}

TEST_CASE("parameters can be adopted from a store") {
  Transolver a(tiny(), 11);
  Transolver b(tiny(), a.params());
  CHECK(b.params().flat() == a.params().flat());
  TransolverConfig other = tiny();
  other.channels = 4;
  CHECK_THROWS(Transolver(other, a.params()));
}
