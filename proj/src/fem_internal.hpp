#pragma once

#include <span>
#include <string>
#include <vector>

#include "pfem/fem.hpp"

namespace pfem::fem::detail {

inline double interpolate(const std::vector<double>& field, std::span<const int> nodes, const mesh::ShapeEval& s) {
  if (field.size() == 1) return field[0];
  double v = 0.0;
  for (int i = 0; i < s.count; ++i) v += s.N[i] * field.at(static_cast<std::size_t>(nodes[i]));
  return v;
}

inline mesh::Vec2 position(const mesh::Mesh& m, std::span<const int> nodes, const mesh::ShapeEval& s) {
  mesh::Vec2 x{0, 0};
  for (int i = 0; i < s.count; ++i) {
    x[0] += s.N[i] * m.nodes[static_cast<std::size_t>(nodes[i])][0];
    x[1] += s.N[i] * m.nodes[static_cast<std::size_t>(nodes[i])][1];
  }
  return x;
}

void check_field_size(const std::vector<double>& field, std::size_t nodes, const char* name);

// E and nu at a quadrature point, validated; throws AssemblyError naming the element.
void elastic_parameters(const Material& mat, std::span<const int> nodes, const mesh::ShapeEval& s, std::size_t element,
                        double& E, double& nu);

}  // namespace pfem::fem::detail
