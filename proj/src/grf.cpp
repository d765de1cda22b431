#include "pfem/grf.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace pfem::grf {

void GrfSpec::validate() const {
  if (dimension != 1 && dimension != 2) throw std::invalid_argument("grf: dimension must be 1 or 2");
  if (modes < 1) throw std::invalid_argument("grf: modes must be >= 1");
  if (!(amplitude >= 0.0)) throw std::invalid_argument("grf: amplitude must be >= 0");
  if (!(lo < hi)) throw std::invalid_argument("grf: clip range needs lo < hi");
}

FieldSample sample(const GrfSpec& spec, std::uint64_t seed) {
  spec.validate();
  FieldSample f;
  f.spec = spec;
  f.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * std::numbers::pi);
  const int ny = spec.dimension == 2 ? spec.modes : 1;
  for (int ky = 0; ky < ny; ++ky)
    for (int kx = 0; kx < spec.modes; ++kx) {
      f.wavenumbers.push_back({kx, ky});
      f.coefficients.push_back(normal(rng));
      f.phases.push_back(uniform(rng));
    }
  return f;
}

namespace {

double decay(const std::array<int, 2>& k, double alpha) {
  return std::pow(1.0 + static_cast<double>(k[0] * k[0] + k[1] * k[1]), -alpha);
}

}  // namespace

double FieldSample::raw(const Point& x) const {
  if (spec.amplitude == 0.0) return spec.mean;
  double s = 0.0;
  for (std::size_t i = 0; i < coefficients.size(); ++i) {
    const auto& k = wavenumbers[i];
    const double arg = std::numbers::pi * (k[0] * x[0] + k[1] * x[1]) + phases[i];
    s += coefficients[i] * std::cos(arg) * decay(k, spec.alpha);
  }
  return spec.mean + spec.amplitude * s;
}

double FieldSample::operator()(const Point& x) const { return std::clamp(raw(x), spec.lo, spec.hi); }

std::vector<double> FieldSample::evaluate(std::span<const Point> points) const {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back((*this)(p));
  return out;
}

double FieldSample::lipschitz_bound() const {
  double b = 0.0;
  for (std::size_t i = 0; i < coefficients.size(); ++i) {
    const auto& k = wavenumbers[i];
    b += std::abs(coefficients[i]) * std::numbers::pi * std::hypot(k[0], k[1]) * decay(k, spec.alpha);
  }
  return spec.amplitude * b;
}

namespace {

nlohmann::json bound_to_json(double v) {
  if (std::isinf(v)) return nullptr;
  return v;
}

double bound_from_json(const nlohmann::json& j, double fallback) { return j.is_null() ? fallback : j.get<double>(); }

}  // namespace

nlohmann::json to_json(const GrfSpec& s) {
  return {{"dimension", s.dimension}, {"modes", s.modes}, {"alpha", s.alpha}, {"mean", s.mean},
          {"amplitude", s.amplitude}, {"lo", bound_to_json(s.lo)}, {"hi", bound_to_json(s.hi)}};
}

GrfSpec spec_from_json(const nlohmann::json& j) {
  GrfSpec s;
  s.dimension = j.value("dimension", s.dimension);
  s.modes = j.value("modes", s.modes);
  s.alpha = j.value("alpha", s.alpha);
  s.mean = j.value("mean", s.mean);
  s.amplitude = j.value("amplitude", s.amplitude);
  if (j.contains("lo")) s.lo = bound_from_json(j["lo"], s.lo);
  if (j.contains("hi")) s.hi = bound_from_json(j["hi"], s.hi);
  s.validate();
  return s;
}

nlohmann::json to_json(const FieldSample& f) {
  return {{"spec", to_json(f.spec)},
          {"seed", f.seed},
          {"wavenumbers", f.wavenumbers},
          {"coefficients", f.coefficients},
          {"phases", f.phases}};
}

FieldSample field_from_json(const nlohmann::json& j) {
  FieldSample f;
  f.spec = spec_from_json(j.at("spec"));
  f.seed = j.at("seed").get<std::uint64_t>();
  f.wavenumbers = j.at("wavenumbers").get<std::vector<std::array<int, 2>>>();
  f.coefficients = j.at("coefficients").get<std::vector<double>>();
  f.phases = j.at("phases").get<std::vector<double>>();
  if (f.coefficients.size() != f.wavenumbers.size() || f.phases.size() != f.wavenumbers.size())
    throw std::invalid_argument("grf: coefficient, phase and wavenumber counts differ");
  return f;
}

}  // namespace pfem::grf
