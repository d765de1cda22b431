#include <doctest.h>

#include <cmath>
#include <random>

#include "pfem/grf.hpp"

using namespace pfem::grf;

TEST_CASE("zero amplitude gives the mean") {
  GrfSpec s;
  s.amplitude = 0.0;
  s.mean = 3.5;
  const auto f = sample(s, 1);
  CHECK(f({0.1, 0.7}) == 3.5);
  CHECK(f({0.9, 0.2}) == 3.5);
}

TEST_CASE("determinism by seed") {
  GrfSpec s;
  s.dimension = 2;
  const auto a = sample(s, 17), b = sample(s, 17);
  std::vector<Point> pts{{0.1, 0.2}, {0.5, 0.5}, {0.93, 0.01}};
  CHECK(a.evaluate(pts) == b.evaluate(pts));
  CHECK(sample(s, 18).evaluate(pts) != a.evaluate(pts));
}

TEST_CASE("monte carlo mean at a point") {
  GrfSpec s;
  s.alpha = 2.0;
  double m = 0;
  const int n = 10000;
  for (int k = 0; k < n; ++k) m += sample(s, static_cast<std::uint64_t>(k))({0.5, 0.0});
  CHECK(std::abs(m / n) < 0.05);
}

TEST_CASE("clipping holds everywhere") {
  GrfSpec s;
  s.dimension = 2;
  s.mean = 100;
  s.amplitude = 2000;
  s.lo = 50;
  s.hi = 150;
  const auto f = sample(s, 5);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  int clipped = 0;
  for (int k = 0; k < 100000; ++k) {
    const Point x{u(rng), u(rng)};
    const double v = f(x), r = f.raw(x);
    REQUIRE(v >= 50);
    REQUIRE(v <= 150);
    if (r < 50 || r > 150) {
      REQUIRE(v == (r < 50 ? 50.0 : 150.0));
      ++clipped;
    } else {
      REQUIRE(v == r);
    }
  }
  CHECK(clipped > 0);
}

TEST_CASE("lipschitz bound from coefficients") {
  GrfSpec s;
  s.dimension = 2;
  s.alpha = 1.5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = sample(s, seed);
    const double C = f.lipschitz_bound();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 0.99);
    const double h = 1e-3;
    for (int k = 0; k < 200; ++k) {
      const Point x{u(rng), u(rng)};
      CHECK(std::abs(f(x) - f({x[0] + h, x[1]})) <= C * h + 1e-15);
      CHECK(std::abs(f(x) - f({x[0], x[1] + h})) <= C * h + 1e-15);
    }
  }
}

TEST_CASE("distinct seeds are uncorrelated on average") {
  GrfSpec s;
  s.dimension = 2;
  s.alpha = 1.0;
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Point> pts(1000);
  for (auto& p : pts) p = {u(rng), u(rng)};
  // a single pair of smooth fields can correlate by chance; the mean over pairs cannot
  double mean_rho = 0;
  const int pairs = 100;
  for (int k = 0; k < pairs; ++k) {
    const auto a = sample(s, 1000 + 2 * k).evaluate(pts), b = sample(s, 1001 + 2 * k).evaluate(pts);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= pts.size();
    mb /= pts.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    mean_rho += sab / std::sqrt(saa * sbb);
  }
  CHECK(std::abs(mean_rho / pairs) < 0.1);
}

TEST_CASE("json round trip and validation") {
  GrfSpec s;
  s.lo = -1;
  const auto f = sample(s, 3);
  const auto g = field_from_json(to_json(f));
  CHECK(g.coefficients == f.coefficients);
  CHECK(g.phases == f.phases);
  CHECK(g({0.3, 0}) == f({0.3, 0}));
  CHECK(std::isinf(g.spec.hi));
  GrfSpec bad;
  bad.modes = 0;
  CHECK_THROWS(bad.validate());
  bad = GrfSpec{};
  bad.lo = 2;
  bad.hi = 1;
  CHECK_THROWS(bad.validate());
}
