#include "pfem/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace pfem::mesh {

std::string to_string(ElementType type) {
  switch (type) {
    case ElementType::T3: return "T3";
    case ElementType::Q4: return "Q4";
    case ElementType::Q8: return "Q8";
  }
  return "?";
}

ElementType element_type_from_string(const std::string& name) {
  if (name == "T3") return ElementType::T3;
  if (name == "Q4") return ElementType::Q4;
  if (name == "Q8") return ElementType::Q8;
  throw MeshError("unknown element type '" + name + "'");
}

int nodes_per_element(ElementType type) {
  switch (type) {
    case ElementType::T3: return 3;
    case ElementType::Q4: return 4;
    case ElementType::Q8: return 8;
  }
  throw MeshError("unknown element type");
}

int nodes_per_edge(ElementType type) { return type == ElementType::Q8 ? 3 : 2; }

std::vector<int> Mesh::boundary_nodes(const std::string& name) const {
  std::set<int> ids;
  auto it = boundary_edges.find(name);
  if (it != boundary_edges.end())
    for (const auto& e : it->second) ids.insert(e.begin(), e.end());
  return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------
// Shape functions

namespace {

constexpr std::array<Vec2, 3> kT3Ref{{{0, 0}, {1, 0}, {0, 1}}};
constexpr std::array<Vec2, 4> kQ4Ref{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};
constexpr std::array<Vec2, 8> kQ8Ref{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}, {0, -1}, {1, 0}, {0, 1}, {-1, 0}}};

}  // namespace

std::span<const Vec2> reference_nodes(ElementType type) {
  switch (type) {
    case ElementType::T3: return kT3Ref;
    case ElementType::Q4: return kQ4Ref;
    case ElementType::Q8: return kQ8Ref;
  }
  throw MeshError("unknown element type");
}

ShapeEval shape_functions(ElementType type, Vec2 xi) {
  ShapeEval s;
  const double x = xi[0], y = xi[1];
  switch (type) {
    case ElementType::T3:
      s.count = 3;
      s.N = {1.0 - x - y, x, y};
      s.dN[0] = {-1.0, -1.0};
      s.dN[1] = {1.0, 0.0};
      s.dN[2] = {0.0, 1.0};
      return s;
    case ElementType::Q4:
      s.count = 4;
      for (int i = 0; i < 4; ++i) {
        const double xi_i = kQ4Ref[i][0], eta_i = kQ4Ref[i][1];
        s.N[i] = 0.25 * (1.0 + x * xi_i) * (1.0 + y * eta_i);
        s.dN[i] = {0.25 * xi_i * (1.0 + y * eta_i), 0.25 * eta_i * (1.0 + x * xi_i)};
      }
      return s;
    case ElementType::Q8:
      s.count = 8;
      for (int i = 0; i < 8; ++i) {
        const double xi_i = kQ8Ref[i][0], eta_i = kQ8Ref[i][1];
        if (i < 4) {
          s.N[i] = 0.25 * (1.0 + x * xi_i) * (1.0 + y * eta_i) * (x * xi_i + y * eta_i - 1.0);
          s.dN[i] = {0.25 * xi_i * (1.0 + y * eta_i) * (2.0 * x * xi_i + y * eta_i),
                     0.25 * eta_i * (1.0 + x * xi_i) * (x * xi_i + 2.0 * y * eta_i)};
        } else if (xi_i == 0.0) {
          s.N[i] = 0.5 * (1.0 - x * x) * (1.0 + y * eta_i);
          s.dN[i] = {-x * (1.0 + y * eta_i), 0.5 * (1.0 - x * x) * eta_i};
        } else {
          s.N[i] = 0.5 * (1.0 + x * xi_i) * (1.0 - y * y);
          s.dN[i] = {0.5 * xi_i * (1.0 - y * y), -y * (1.0 + x * xi_i)};
        }
      }
      return s;
  }
  throw MeshError("unknown element type");
}

LineRule gauss_line(int npoints) {
  switch (npoints) {
    case 1: return {{0.0}, {2.0}};
    case 2: {
      const double a = 1.0 / std::sqrt(3.0);
      return {{-a, a}, {1.0, 1.0}};
    }
    case 3: {
      const double a = std::sqrt(0.6);
      return {{-a, 0.0, a}, {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0}};
    }
    default: throw std::invalid_argument("gauss_line: supported orders are 1..3");
  }
}

QuadratureRule gauss_rule(ElementType type) {
  QuadratureRule q;
  if (type == ElementType::T3) {
    q.points = {{1.0 / 6.0, 1.0 / 6.0}, {2.0 / 3.0, 1.0 / 6.0}, {1.0 / 6.0, 2.0 / 3.0}};
    q.weights = {1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0};
    return q;
  }
  const LineRule line = gauss_line(type == ElementType::Q4 ? 2 : 3);
  for (std::size_t j = 0; j < line.points.size(); ++j)
    for (std::size_t i = 0; i < line.points.size(); ++i) {
      q.points.push_back({line.points[i], line.points[j]});
      q.weights.push_back(line.weights[i] * line.weights[j]);
    }
  return q;
}

LineRule edge_rule(ElementType type) { return gauss_line(type == ElementType::Q8 ? 3 : 2); }

PhysicalGradients physical_gradients(const Mesh& mesh, std::size_t element, Vec2 xi) {
  PhysicalGradients g;
  g.shape = shape_functions(mesh.element_type, xi);
  const auto nodes = mesh.element(element);
  double J00 = 0, J01 = 0, J10 = 0, J11 = 0;  // J_ab = dX_a / dxi_b
  for (int i = 0; i < g.shape.count; ++i) {
    const Vec2& X = mesh.nodes[static_cast<std::size_t>(nodes[i])];
    J00 += X[0] * g.shape.dN[i][0];
    J01 += X[0] * g.shape.dN[i][1];
    J10 += X[1] * g.shape.dN[i][0];
    J11 += X[1] * g.shape.dN[i][1];
  }
  g.detJ = J00 * J11 - J01 * J10;
  if (!(g.detJ > 0.0)) {
    std::ostringstream os;
    os << "element " << element << ": non-positive Jacobian determinant " << g.detJ << " at (" << xi[0] << ", "
       << xi[1] << ")";
    throw MeshError(os.str());
  }
  const double inv = 1.0 / g.detJ;
  // dN/dX = J^{-T} dN/dxi
  for (int i = 0; i < g.shape.count; ++i) {
    const double a = g.shape.dN[i][0], b = g.shape.dN[i][1];
    g.dNdX[i] = {inv * (J11 * a - J10 * b), inv * (-J01 * a + J00 * b)};
  }
  return g;
}

EdgeEval edge_shape(const Mesh& mesh, std::span<const int> edge_nodes, double s) {
  EdgeEval e;
  std::array<double, 3> dN{};
  if (edge_nodes.size() == 2) {
    e.count = 2;
    e.N = {0.5 * (1.0 - s), 0.5 * (1.0 + s), 0.0};
    dN = {-0.5, 0.5, 0.0};
  } else if (edge_nodes.size() == 3) {
    e.count = 3;
    e.N = {0.5 * s * (s - 1.0), 0.5 * s * (s + 1.0), 1.0 - s * s};
    dN = {s - 0.5, s + 0.5, -2.0 * s};
  } else {
    throw MeshError("edge must have 2 or 3 nodes");
  }
  Vec2 d{0, 0};
  for (int i = 0; i < e.count; ++i) {
    const Vec2& X = mesh.nodes.at(static_cast<std::size_t>(edge_nodes[i]));
    e.point[0] += e.N[i] * X[0];
    e.point[1] += e.N[i] * X[1];
    d[0] += dN[i] * X[0];
    d[1] += dN[i] * X[1];
  }
  e.jacobian = std::hypot(d[0], d[1]);
  return e;
}

// ---------------------------------------------------------------------------
// Construction

CornerMap rectangle_map(double x0, double y0, double x1, double y1) {
  return [=](Vec2 p) { return Vec2{x0 + (x1 - x0) * p[0], y0 + (y1 - y0) * p[1]}; };
}

CornerMap bilinear_map(Vec2 p00, Vec2 p10, Vec2 p11, Vec2 p01) {
  return [=](Vec2 p) {
    const double s = p[0], t = p[1];
    Vec2 out{};
    for (int k = 0; k < 2; ++k)
      out[k] = (1 - s) * (1 - t) * p00[k] + s * (1 - t) * p10[k] + s * t * p11[k] + (1 - s) * t * p01[k];
    return out;
  };
}

Mesh build_structured_mesh(int nx, int ny, ElementType type, const CornerMap& map) {
  if (nx < 1 || ny < 1) throw MeshError("structured mesh needs nx, ny >= 1");
  Mesh m;
  m.element_type = type;
  const bool quadratic = type == ElementType::Q8;
  const int sx = quadratic ? 2 * nx + 1 : nx + 1;
  const int sy = quadratic ? 2 * ny + 1 : ny + 1;
  std::vector<int> id(static_cast<std::size_t>(sx * sy), -1);
  auto at = [&](int i, int j) -> int& { return id[static_cast<std::size_t>(j * sx + i)]; };
  for (int j = 0; j < sy; ++j)
    for (int i = 0; i < sx; ++i) {
      if (quadratic && i % 2 == 1 && j % 2 == 1) continue;
      at(i, j) = static_cast<int>(m.nodes.size());
      m.nodes.push_back(map({static_cast<double>(i) / (sx - 1), static_cast<double>(j) / (sy - 1)}));
    }

  for (int ey = 0; ey < ny; ++ey)
    for (int ex = 0; ex < nx; ++ex) {
      if (quadratic) {
        const int i = 2 * ex, j = 2 * ey;
        for (int v : {at(i, j), at(i + 2, j), at(i + 2, j + 2), at(i, j + 2), at(i + 1, j), at(i + 2, j + 1),
                      at(i + 1, j + 2), at(i, j + 1)})
          m.connectivity.push_back(v);
      } else {
        const int a = at(ex, ey), b = at(ex + 1, ey), c = at(ex + 1, ey + 1), d = at(ex, ey + 1);
        if (type == ElementType::Q4) {
          m.connectivity.insert(m.connectivity.end(), {a, b, c, d});
        } else {
          m.connectivity.insert(m.connectivity.end(), {a, b, c, a, c, d});
        }
      }
    }

  const int step = quadratic ? 2 : 1;
  auto edge = [&](int i0, int j0, int i1, int j1) {
    std::vector<int> e{at(i0, j0), at(i1, j1)};
    if (quadratic) e.push_back(at((i0 + i1) / 2, (j0 + j1) / 2));
    return e;
  };
  for (int i = 0; i + step < sx; i += step) {
    m.boundary_edges["bottom"].push_back(edge(i, 0, i + step, 0));
    m.boundary_edges["top"].push_back(edge(i, sy - 1, i + step, sy - 1));
  }
  for (int j = 0; j + step < sy; j += step) {
    m.boundary_edges["left"].push_back(edge(0, j, 0, j + step));
    m.boundary_edges["right"].push_back(edge(sx - 1, j, sx - 1, j + step));
  }

  const QuadratureRule q = gauss_rule(type);
  for (std::size_t e = 0; e < m.num_elements(); ++e)
    for (const auto& p : q.points) physical_gradients(m, e, p);
  return m;
}

void CookGeometry::validate() const {
  if (clamped_fraction <= 0.0 || clamped_fraction > 1.0) throw MeshError("cook: clamped fraction must be in (0, 1]");
  if (traction_length <= 0.0 || traction_start < 0.0 || traction_start + traction_length > 1.0 + 1e-12)
    throw MeshError("cook: traction segment must lie within the right edge");
  const Mesh probe = build_structured_mesh(1, 1, ElementType::Q4, map());
  (void)probe;
}

std::vector<std::vector<int>> edges_in_segment(const Mesh& mesh, const std::string& side, double begin, double end) {
  std::vector<std::vector<int>> out;
  auto it = mesh.boundary_edges.find(side);
  if (it == mesh.boundary_edges.end()) throw MeshError("mesh has no boundary named '" + side + "'");
  const auto& edges = it->second;
  const double n = static_cast<double>(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const double mid = (static_cast<double>(k) + 0.5) / n;
    if (mid >= begin - 1e-12 && mid <= end + 1e-12) out.push_back(edges[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation and I/O

void validate(const Mesh& mesh) {
  const int npe = nodes_per_element(mesh.element_type);
  const auto nn = static_cast<int>(mesh.nodes.size());
  if (mesh.connectivity.size() % static_cast<std::size_t>(npe) != 0)
    throw MeshError("connectivity length is not a multiple of " + std::to_string(npe));
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto el = mesh.element(e);
    for (int k = 0; k < npe; ++k)
      if (el[k] < 0 || el[k] >= nn)
        throw MeshError("elements[" + std::to_string(e) + "][" + std::to_string(k) + "]: node index " +
                        std::to_string(el[k]) + " out of range (node count " + std::to_string(nn) + ")");
  }
  const QuadratureRule q = gauss_rule(mesh.element_type);
  for (std::size_t e = 0; e < mesh.num_elements(); ++e)
    for (const auto& p : q.points) physical_gradients(mesh, e, p);

  std::map<int, std::array<bool, 2>> constrained;
  for (std::size_t k = 0; k < mesh.dirichlet.size(); ++k) {
    const auto& d = mesh.dirichlet[k];
    if (d.node < 0 || d.node >= nn)
      throw MeshError("dirichlet[" + std::to_string(k) + "]: node " + std::to_string(d.node) + " out of range");
    auto& c = constrained[d.node];
    c[0] = c[0] || d.ux.has_value();
    c[1] = c[1] || d.uy.has_value();
  }
  for (std::size_t k = 0; k < mesh.neumann.size(); ++k) {
    const auto& edge = mesh.neumann[k];
    if (edge.nodes.size() != 2 && edge.nodes.size() != 3)
      throw MeshError("neumann[" + std::to_string(k) + "]: edge must list 2 or 3 nodes");
    for (int v : edge.nodes)
      if (v < 0 || v >= nn) throw MeshError("neumann[" + std::to_string(k) + "]: node " + std::to_string(v) + " out of range");
    for (int comp = 0; comp < 2; ++comp) {
      const double t = comp == 0 ? edge.tx : edge.ty;
      if (t == 0.0) continue;
      const bool all_fixed = std::all_of(edge.nodes.begin(), edge.nodes.end(), [&](int v) {
        auto it = constrained.find(v);
        return it != constrained.end() && it->second[static_cast<std::size_t>(comp)];
      });
      if (all_fixed)
        throw MeshError("neumann[" + std::to_string(k) + "]: traction component " + std::to_string(comp) +
                        " applied on a Dirichlet-constrained segment");
    }
  }
}

double area(const Mesh& mesh) {
  const QuadratureRule q = gauss_rule(mesh.element_type);
  double a = 0.0;
  for (std::size_t e = 0; e < mesh.num_elements(); ++e)
    for (std::size_t k = 0; k < q.points.size(); ++k) a += q.weights[k] * physical_gradients(mesh, e, q.points[k]).detJ;
  return a;
}

std::array<Vec2, 2> bounding_box(const Mesh& mesh) {
  if (mesh.nodes.empty()) throw MeshError("empty mesh has no bounding box");
  Vec2 lo = mesh.nodes[0], hi = mesh.nodes[0];
  for (const auto& p : mesh.nodes)
    for (int k = 0; k < 2; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  return {lo, hi};
}

nlohmann::json to_json(const Mesh& mesh) {
  using nlohmann::json;
  json j;
  j["element_type"] = to_string(mesh.element_type);
  j["nodes"] = json::array();
  for (const auto& p : mesh.nodes) j["nodes"].push_back({p[0], p[1]});
  j["elements"] = json::array();
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto el = mesh.element(e);
    j["elements"].push_back(std::vector<int>(el.begin(), el.end()));
  }
  j["dirichlet"] = json::array();
  for (const auto& d : mesh.dirichlet) {
    json r{{"node", d.node}};
    r["ux"] = d.ux ? json(*d.ux) : json(nullptr);
    r["uy"] = d.uy ? json(*d.uy) : json(nullptr);
    j["dirichlet"].push_back(r);
  }
  j["neumann"] = json::array();
  for (const auto& n : mesh.neumann) j["neumann"].push_back({{"edge", n.nodes}, {"tx", n.tx}, {"ty", n.ty}});
  if (!mesh.boundary_edges.empty()) j["boundary_edges"] = mesh.boundary_edges;
  return j;
}

namespace {

const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw MeshError(where + ": missing key '" + key + "'");
  return j[key];
}

double number(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number()) throw MeshError(where + ": expected a number");
  return j.get<double>();
}

int integer(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number_integer()) throw MeshError(where + ": expected an integer");
  return j.get<int>();
}

std::optional<double> maybe_number(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return number(j[key], where + "." + key);
}

}  // namespace

Mesh mesh_from_json(const nlohmann::json& j) {
  Mesh m;
  const auto& type = require(j, "element_type", "mesh");
  if (!type.is_string()) throw MeshError("mesh.element_type: expected a string");
  m.element_type = element_type_from_string(type.get<std::string>());
  const int npe = nodes_per_element(m.element_type);

  const auto& nodes = require(j, "nodes", "mesh");
  if (!nodes.is_array()) throw MeshError("mesh.nodes: expected an array");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string where = "nodes[" + std::to_string(i) + "]";
    if (!nodes[i].is_array() || nodes[i].size() != 2) throw MeshError(where + ": expected [x, y]");
    m.nodes.push_back({number(nodes[i][0], where), number(nodes[i][1], where)});
  }
  const auto& elements = require(j, "elements", "mesh");
  if (!elements.is_array()) throw MeshError("mesh.elements: expected an array");
  for (std::size_t e = 0; e < elements.size(); ++e) {
    const std::string where = "elements[" + std::to_string(e) + "]";
    if (!elements[e].is_array() || static_cast<int>(elements[e].size()) != npe)
      throw MeshError(where + ": expected " + std::to_string(npe) + " node indices");
    for (std::size_t k = 0; k < elements[e].size(); ++k) {
      const int v = integer(elements[e][k], where);
      if (v < 0 || v >= static_cast<int>(m.nodes.size()))
        throw MeshError(where + "[" + std::to_string(k) + "]: node index " + std::to_string(v) +
                        " out of range (node count " + std::to_string(m.nodes.size()) + ")");
      m.connectivity.push_back(v);
    }
  }
  if (j.contains("dirichlet")) {
    const auto& list = j["dirichlet"];
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string where = "dirichlet[" + std::to_string(k) + "]";
      DirichletBc d;
      d.node = integer(require(list[k], "node", where), where + ".node");
      d.ux = maybe_number(list[k], "ux", where);
      d.uy = maybe_number(list[k], "uy", where);
      m.dirichlet.push_back(d);
    }
  }
  if (j.contains("neumann")) {
    const auto& list = j["neumann"];
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string where = "neumann[" + std::to_string(k) + "]";
      NeumannEdge n;
      const auto& edge = require(list[k], "edge", where);
      if (!edge.is_array()) throw MeshError(where + ".edge: expected an array");
      for (const auto& v : edge) n.nodes.push_back(integer(v, where + ".edge"));
      n.tx = list[k].contains("tx") ? number(list[k]["tx"], where + ".tx") : 0.0;
      n.ty = list[k].contains("ty") ? number(list[k]["ty"], where + ".ty") : 0.0;
      m.neumann.push_back(std::move(n));
    }
  }
  if (j.contains("boundary_edges"))
    m.boundary_edges = j["boundary_edges"].get<std::map<std::string, std::vector<std::vector<int>>>>();
  validate(m);
  return m;
}

void save_mesh(const Mesh& mesh, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw MeshError("cannot write mesh file " + path.string());
  os << to_json(mesh).dump() << "\n";
}

Mesh load_mesh(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MeshError("cannot open mesh file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw MeshError(path.string() + ": malformed JSON: " + e.what());
  }
  return mesh_from_json(j);
}

}  // namespace pfem::mesh
