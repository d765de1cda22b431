#include <cmath>
#include <sstream>

#include "fem_internal.hpp"

namespace pfem::fem {

std::string to_string(MaterialKind kind) {
  switch (kind) {
    case MaterialKind::PlaneStress: return "plane_stress";
    case MaterialKind::PlaneStrain: return "plane_strain";
    case MaterialKind::NeoHookeanPlaneStrain: return "neo_hookean";
    case MaterialKind::Poisson: return "poisson";
  }
  return "?";
}

MaterialKind material_kind_from_string(const std::string& name) {
  if (name == "plane_stress") return MaterialKind::PlaneStress;
  if (name == "plane_strain") return MaterialKind::PlaneStrain;
  if (name == "neo_hookean") return MaterialKind::NeoHookeanPlaneStrain;
  if (name == "poisson") return MaterialKind::Poisson;
  throw std::invalid_argument("unknown material '" + name + "' (plane_stress, plane_strain, neo_hookean, poisson)");
}

int components(MaterialKind kind) { return kind == MaterialKind::Poisson ? 1 : 2; }

Lame lame(double E, double nu) {
  return {E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), E / (2.0 * (1.0 + nu))};
}

Eigen::Matrix3d elasticity_matrix(MaterialKind kind, double E, double nu) {
  Eigen::Matrix3d D = Eigen::Matrix3d::Zero();
  if (kind == MaterialKind::PlaneStress) {
    const double c = E / (1.0 - nu * nu);
    D << c, c * nu, 0, c * nu, c, 0, 0, 0, c * 0.5 * (1.0 - nu);
  } else if (kind == MaterialKind::PlaneStrain || kind == MaterialKind::NeoHookeanPlaneStrain) {
    const auto [lambda, mu] = lame(E, nu);
    D << lambda + 2 * mu, lambda, 0, lambda, lambda + 2 * mu, 0, 0, 0, mu;
  } else {
    throw std::invalid_argument("elasticity_matrix: not an elastic material");
  }
  return D;
}

namespace detail {

void check_field_size(const std::vector<double>& field, std::size_t nodes, const char* name) {
  if (field.size() != 1 && field.size() != nodes)
    throw AssemblyError(std::string("material field '") + name + "' has " + std::to_string(field.size()) +
                        " values, expected 1 or " + std::to_string(nodes));
}

void elastic_parameters(const Material& mat, std::span<const int> nodes, const mesh::ShapeEval& s, std::size_t element,
                        double& E, double& nu) {
  E = interpolate(mat.E, nodes, s);
  nu = interpolate(mat.nu, nodes, s);
  if (!(E > 0.0) || !(nu >= 0.0 && nu < 0.5)) {
    std::ostringstream os;
    os << "element " << element << ": invalid material E=" << E << ", nu=" << nu;
    throw AssemblyError(os.str());
  }
}

}  // namespace detail

namespace {

void check_material(const mesh::Mesh& m, const Material& mat) {
  if (mat.kind == MaterialKind::Poisson) {
    detail::check_field_size(mat.conductivity, m.num_nodes(), "conductivity");
    if (!mat.source_fn) detail::check_field_size(mat.source, m.num_nodes(), "source");
  } else {
    detail::check_field_size(mat.E, m.num_nodes(), "E");
    detail::check_field_size(mat.nu, m.num_nodes(), "nu");
  }
}

}  // namespace

VectorXd external_force(const mesh::Mesh& m, const Material& mat) {
  check_material(m, mat);
  const int nc = components(mat.kind);
  VectorXd F = VectorXd::Zero(static_cast<Eigen::Index>(m.num_nodes()) * nc);
  const bool scalar = nc == 1;
  const bool has_body = !scalar && (mat.body_force[0] != 0.0 || mat.body_force[1] != 0.0);
  const auto q = mesh::gauss_rule(m.element_type);
  if (scalar || has_body) {
    for (std::size_t e = 0; e < m.num_elements(); ++e) {
      const auto nodes = m.element(e);
      for (std::size_t k = 0; k < q.points.size(); ++k) {
        const auto g = mesh::physical_gradients(m, e, q.points[k]);
        const double w = q.weights[k] * g.detJ;
        if (scalar) {
          const double f = mat.source_fn ? mat.source_fn(detail::position(m, nodes, g.shape))
                                         : detail::interpolate(mat.source, nodes, g.shape);
          for (int i = 0; i < g.shape.count; ++i) F[nodes[i]] += g.shape.N[i] * f * w;
        } else {
          for (int i = 0; i < g.shape.count; ++i)
            for (int c = 0; c < 2; ++c) F[2 * nodes[i] + c] += g.shape.N[i] * mat.body_force[c] * w;
        }
      }
    }
  }
  const auto line = mesh::edge_rule(m.element_type);
  for (const auto& edge : m.neumann) {
    for (std::size_t k = 0; k < line.points.size(); ++k) {
      const auto ev = mesh::edge_shape(m, edge.nodes, line.points[k]);
      const double w = line.weights[k] * ev.jacobian;
      for (int i = 0; i < ev.count; ++i) {
        if (scalar) {
          F[edge.nodes[i]] += ev.N[i] * edge.tx * w;
        } else {
          F[2 * edge.nodes[i]] += ev.N[i] * edge.tx * w;
          F[2 * edge.nodes[i] + 1] += ev.N[i] * edge.ty * w;
        }
      }
    }
  }
  return F;
}

LinearSystem assemble_linear_elasticity(const mesh::Mesh& m, const Material& mat) {
  if (mat.kind != MaterialKind::PlaneStress && mat.kind != MaterialKind::PlaneStrain &&
      mat.kind != MaterialKind::NeoHookeanPlaneStrain)
    throw AssemblyError("assemble_linear_elasticity: material kind " + to_string(mat.kind) + " is not elastic");
  check_material(m, mat);
  const auto q = mesh::gauss_rule(m.element_type);
  const int npe = mesh::nodes_per_element(m.element_type);
  std::vector<Triplet> t;
  t.reserve(m.num_elements() * static_cast<std::size_t>(4 * npe * npe));
  Eigen::MatrixXd B(3, 2 * npe), Ke(2 * npe, 2 * npe);
  for (std::size_t e = 0; e < m.num_elements(); ++e) {
    const auto nodes = m.element(e);
    Ke.setZero();
    for (std::size_t k = 0; k < q.points.size(); ++k) {
      const auto g = mesh::physical_gradients(m, e, q.points[k]);
      double E, nu;
      detail::elastic_parameters(mat, nodes, g.shape, e, E, nu);
      const Eigen::Matrix3d D = elasticity_matrix(mat.kind, E, nu);
      B.setZero();
      for (int i = 0; i < npe; ++i) {
        B(0, 2 * i) = g.dNdX[i][0];
        B(1, 2 * i + 1) = g.dNdX[i][1];
        B(2, 2 * i) = g.dNdX[i][1];
        B(2, 2 * i + 1) = g.dNdX[i][0];
      }
      Ke.noalias() += B.transpose() * D * B * (q.weights[k] * g.detJ);
    }
    for (int a = 0; a < 2 * npe; ++a)
      for (int b = 0; b < 2 * npe; ++b)
        t.push_back({2 * nodes[a / 2] + a % 2, 2 * nodes[b / 2] + b % 2, Ke(a, b)});
  }
  LinearSystem s;
  s.K = CsrMatrix::from_triplets(static_cast<int>(2 * m.num_nodes()), std::move(t));
  s.F = external_force(m, mat);
  return s;
}

LinearSystem assemble_poisson(const mesh::Mesh& m, const Material& mat) {
  if (mat.kind != MaterialKind::Poisson) throw AssemblyError("assemble_poisson: material kind must be poisson");
  check_material(m, mat);
  const auto q = mesh::gauss_rule(m.element_type);
  const int npe = mesh::nodes_per_element(m.element_type);
  std::vector<Triplet> t;
  t.reserve(m.num_elements() * static_cast<std::size_t>(npe * npe));
  Eigen::MatrixXd Ke(npe, npe);
  for (std::size_t e = 0; e < m.num_elements(); ++e) {
    const auto nodes = m.element(e);
    Ke.setZero();
    for (std::size_t k = 0; k < q.points.size(); ++k) {
      const auto g = mesh::physical_gradients(m, e, q.points[k]);
      const double kc = detail::interpolate(mat.conductivity, nodes, g.shape);
      if (!(kc > 0.0))
        throw AssemblyError("element " + std::to_string(e) + ": non-positive conductivity " + std::to_string(kc));
      const double w = q.weights[k] * g.detJ * kc;
      for (int a = 0; a < npe; ++a)
        for (int b = 0; b < npe; ++b)
          Ke(a, b) += w * (g.dNdX[a][0] * g.dNdX[b][0] + g.dNdX[a][1] * g.dNdX[b][1]);
    }
    for (int a = 0; a < npe; ++a)
      for (int b = 0; b < npe; ++b) t.push_back({nodes[a], nodes[b], Ke(a, b)});
  }
  LinearSystem s;
  s.K = CsrMatrix::from_triplets(static_cast<int>(m.num_nodes()), std::move(t));
  s.F = external_force(m, mat);
  return s;
}

VectorXd lumped_mass(const mesh::Mesh& m) {
  VectorXd M = VectorXd::Zero(static_cast<Eigen::Index>(m.num_nodes()));
  const auto q = mesh::gauss_rule(m.element_type);
  for (std::size_t e = 0; e < m.num_elements(); ++e) {
    const auto nodes = m.element(e);
    for (std::size_t k = 0; k < q.points.size(); ++k) {
      const auto g = mesh::physical_gradients(m, e, q.points[k]);
      for (int i = 0; i < g.shape.count; ++i) M[nodes[i]] += g.shape.N[i] * q.weights[k] * g.detJ;
    }
  }
  return M;
}

std::vector<Constraint> dirichlet_constraints(const mesh::Mesh& m, int nc) {
  if (nc != 1 && nc != 2) throw std::invalid_argument("dirichlet_constraints: components must be 1 or 2");
  std::vector<Constraint> out;
  for (const auto& d : m.dirichlet) {
    if (d.ux) out.push_back({nc * d.node, *d.ux});
    if (nc == 2 && d.uy) out.push_back({2 * d.node + 1, *d.uy});
  }
  return out;
}

}  // namespace pfem::fem
