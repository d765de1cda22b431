#pragma once

// 2D meshes (T3, Q4, Q8), isoparametric shape functions, Gauss rules and
// structured mesh generation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace pfem::mesh {

using Vec2 = std::array<double, 2>;

enum class ElementType { T3, Q4, Q8 };

std::string to_string(ElementType type);
ElementType element_type_from_string(const std::string& name);
int nodes_per_element(ElementType type);
// Nodes per element edge: 2 for T3/Q4, 3 for Q8 (ends first, midside last).
int nodes_per_edge(ElementType type);

class MeshError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DirichletBc {
  int node = 0;
  std::optional<double> ux;
  std::optional<double> uy;
  bool operator==(const DirichletBc&) const = default;
};

struct NeumannEdge {
  std::vector<int> nodes;  // n0, n1 (, midside)
  double tx = 0.0;
  double ty = 0.0;
  bool operator==(const NeumannEdge&) const = default;
};

struct Mesh {
  ElementType element_type = ElementType::Q4;
  std::vector<Vec2> nodes;
  std::vector<int> connectivity;  // flat, nodes_per_element entries per element
  std::vector<DirichletBc> dirichlet;
  std::vector<NeumannEdge> neumann;
  // Named boundary edge lists ("left", "right", "bottom", "top" for structured meshes).
  std::map<std::string, std::vector<std::vector<int>>> boundary_edges;

  std::size_t num_nodes() const { return nodes.size(); }
  std::size_t num_elements() const { return connectivity.size() / static_cast<std::size_t>(nodes_per_element(element_type)); }
  std::span<const int> element(std::size_t e) const {
    const auto n = static_cast<std::size_t>(nodes_per_element(element_type));
    return std::span<const int>(connectivity).subspan(e * n, n);
  }
  // Sorted unique node ids on a named boundary.
  std::vector<int> boundary_nodes(const std::string& name) const;

  bool operator==(const Mesh&) const = default;
};

// ---------------------------------------------------------------------------
// Shape functions and quadrature

constexpr int kMaxNodes = 8;

struct ShapeEval {
  int count = 0;
  std::array<double, kMaxNodes> N{};
  std::array<Vec2, kMaxNodes> dN{};  // reference gradients dN/dxi, dN/deta
};

ShapeEval shape_functions(ElementType type, Vec2 xi);
// Reference coordinates of the element's nodes.
std::span<const Vec2> reference_nodes(ElementType type);

struct QuadratureRule {
  std::vector<Vec2> points;
  std::vector<double> weights;
};

QuadratureRule gauss_rule(ElementType type);
// 1D Gauss-Legendre on [-1, 1].
struct LineRule {
  std::vector<double> points;
  std::vector<double> weights;
};
LineRule gauss_line(int npoints);

struct PhysicalGradients {
  double detJ = 0.0;
  ShapeEval shape;
  std::array<Vec2, kMaxNodes> dNdX{};
};

// Throws MeshError naming the element when detJ <= 0.
PhysicalGradients physical_gradients(const Mesh& mesh, std::size_t element, Vec2 xi);

// Edge shape values at s in [-1,1] and the length scale |dx/ds|.
struct EdgeEval {
  int count = 0;
  std::array<double, 3> N{};
  double jacobian = 0.0;
  Vec2 point{};
};
EdgeEval edge_shape(const Mesh& mesh, std::span<const int> edge_nodes, double s);
LineRule edge_rule(ElementType type);

// ---------------------------------------------------------------------------
// Construction

using CornerMap = std::function<Vec2(Vec2)>;

CornerMap rectangle_map(double x0, double y0, double x1, double y1);
// Bilinear (transfinite with straight edges) map of the unit square onto the
// quadrilateral with corners p00, p10, p11, p01 (counter-clockwise).
CornerMap bilinear_map(Vec2 p00, Vec2 p10, Vec2 p11, Vec2 p01);

Mesh build_structured_mesh(int nx, int ny, ElementType type, const CornerMap& map);

struct CookGeometry {
  // Tapered panel corners, counter-clockwise from bottom-left.
  Vec2 p00{0.0, 0.0};
  Vec2 p10{48.0, 44.0};
  Vec2 p11{48.0, 60.0};
  Vec2 p01{0.0, 44.0};
  // Left edge clamped from the bottom up to this fraction of its length.
  double clamped_fraction = 1.0;
  // Traction segment on the right edge, as fractions of its length from the bottom.
  double traction_start = 0.0;
  double traction_length = 1.0;

  void validate() const;
  CornerMap map() const { return bilinear_map(p00, p10, p11, p01); }
};

// Edges of `side` whose parametric midpoint along the side lies in [begin, end].
std::vector<std::vector<int>> edges_in_segment(const Mesh& mesh, const std::string& side, double begin, double end);

// ---------------------------------------------------------------------------
// Validation and I/O

// Checks connectivity bounds, positive Jacobians at all quadrature points and
// boundary-condition consistency. Throws MeshError with the location.
void validate(const Mesh& mesh);

double area(const Mesh& mesh);
std::array<Vec2, 2> bounding_box(const Mesh& mesh);

nlohmann::json to_json(const Mesh& mesh);
Mesh mesh_from_json(const nlohmann::json& j);
void save_mesh(const Mesh& mesh, const std::filesystem::path& path);
Mesh load_mesh(const std::filesystem::path& path);

}  // namespace pfem::mesh
