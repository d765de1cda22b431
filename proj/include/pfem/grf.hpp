#pragma once

// Seeded random fields built from a truncated cosine series:
//   f(x) = mean + amplitude * sum_k c_k cos(pi k.x + phi_k) / (1 + |k|^2)^alpha
// with c_k ~ N(0,1), phi_k ~ U[0, 2pi), then clipped to [lo, hi].
// Points are expected in the unit box; callers normalize.

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <json.hpp>

namespace pfem::grf {

using Point = std::array<double, 2>;

struct GrfSpec {
  int dimension = 1;  // 1 uses only x[0]
  int modes = 8;      // per axis, wavenumbers 0..modes-1
  double alpha = 2.0;
  double mean = 0.0;
  double amplitude = 1.0;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();

  void validate() const;
};

struct FieldSample {
  GrfSpec spec;
  std::uint64_t seed = 0;
  std::vector<std::array<int, 2>> wavenumbers;
  std::vector<double> coefficients;
  std::vector<double> phases;

  double operator()(const Point& x) const;
  // Unclipped series value.
  double raw(const Point& x) const;
  std::vector<double> evaluate(std::span<const Point> points) const;
  // Upper bound on |grad f| from the coefficient magnitudes (valid after clipping too).
  double lipschitz_bound() const;
};

FieldSample sample(const GrfSpec& spec, std::uint64_t seed);

nlohmann::json to_json(const GrfSpec& spec);
GrfSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FieldSample& field);
FieldSample field_from_json(const nlohmann::json& j);

}  // namespace pfem::grf
