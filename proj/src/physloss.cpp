#include "pfem/physloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace pfem::loss {

VectorXd BcAnsatz::apply(const ad::Tensor& raw) const {
  if (static_cast<Eigen::Index>(raw.size()) != multiplier.size() || raw.cols() != static_cast<std::size_t>(components))
    throw ad::ShapeError("ansatz: raw output " + ad::shape_string(raw.shape()) + " does not match " +
                         std::to_string(multiplier.size() / components) + " nodes x " + std::to_string(components));
  VectorXd U(multiplier.size());
  for (Eigen::Index i = 0; i < U.size(); ++i) U[i] = multiplier[i] * raw.data()[static_cast<std::size_t>(i)];
  return U;
}

ad::Tensor BcAnsatz::pullback(const VectorXd& dLdU) const {
  if (dLdU.size() != multiplier.size()) throw ad::ShapeError("ansatz: gradient length mismatch");
  const auto n = static_cast<std::size_t>(multiplier.size() / components);
  ad::Tensor g = ad::Tensor::zeros(n, static_cast<std::size_t>(components));
  for (Eigen::Index i = 0; i < dLdU.size(); ++i) g.data()[static_cast<std::size_t>(i)] = multiplier[i] * dLdU[i];
  return g;
}

namespace {

double segment_distance(const mesh::Vec2& p, const mesh::Vec2& a, const mesh::Vec2& b) {
  const double ex = b[0] - a[0], ey = b[1] - a[1];
  const double len2 = ex * ex + ey * ey;
  double t = len2 > 0.0 ? ((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p[0] - a[0] - t * ex, p[1] - a[1] - t * ey);
}

}  // namespace

BcAnsatz build_ansatz(const mesh::Mesh& m, int components, double length, double output_scale) {
  if (components != 1 && components != 2) throw std::invalid_argument("ansatz: components must be 1 or 2");
  if (!(length > 0.0)) throw std::invalid_argument("ansatz: characteristic length must be positive");
  BcAnsatz a;
  a.components = components;
  a.length = length;
  a.output_scale = output_scale;
  const std::size_t n = m.num_nodes();
  a.multiplier = VectorXd::Constant(static_cast<Eigen::Index>(n * components), output_scale);

  for (int c = 0; c < components; ++c) {
    std::set<int> fixed;
    for (const auto& d : m.dirichlet) {
      const auto& v = c == 0 ? d.ux : d.uy;
      if (!v) continue;
      if (*v != 0.0)
        throw std::invalid_argument("ansatz: node " + std::to_string(d.node) +
                                    " has an inhomogeneous Dirichlet value; the distance ansatz only encodes u = 0");
      fixed.insert(d.node);
    }
    if (fixed.empty()) continue;
    std::vector<std::array<int, 2>> segments;
    for (const auto& [name, edges] : m.boundary_edges)
      for (const auto& e : edges)
        if (fixed.count(e[0]) && fixed.count(e[1])) segments.push_back({e[0], e[1]});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = m.nodes[i];
      double dist = std::numeric_limits<double>::infinity();
      if (fixed.count(static_cast<int>(i))) {
        dist = 0.0;
      } else {
        for (int f : fixed) dist = std::min(dist, std::hypot(p[0] - m.nodes[f][0], p[1] - m.nodes[f][1]));
        for (const auto& s : segments) dist = std::min(dist, segment_distance(p, m.nodes[s[0]], m.nodes[s[1]]));
      }
      a.multiplier[static_cast<Eigen::Index>(i * components + c)] = output_scale * dist / length;
    }
  }
  return a;
}

LossBundle energy_loss_linear(const fem::LinearSystem& sys, const std::vector<fem::Constraint>& constraints,
                              const VectorXd& U) {
  if (U.size() != sys.F.size()) throw std::invalid_argument("energy_loss_linear: state length mismatch");
  LossBundle b;
  const VectorXd KU = sys.K * U;
  b.value = 0.5 * U.dot(KU) - U.dot(sys.F);
  b.grad = KU - sys.F;
  for (const auto& c : constraints) b.grad[c.dof] = 0.0;
  return b;
}

LossBundle energy_loss_linear(const mesh::Mesh& m, const fem::Material& mat, const VectorXd& U) {
  return energy_loss_linear(fem::assemble_linear_elasticity(m, mat), fem::dirichlet_constraints(m, 2), U);
}

LossBundle energy_loss_neohookean(const mesh::Mesh& m, const fem::Material& mat, const VectorXd& U) {
  LossBundle b;
  const VectorXd fext = fem::external_force(m, mat);
  b.value = fem::strain_energy(m, mat, U) - fext.dot(U);
  b.grad = fem::internal_force_neohookean(m, mat, U) - fext;
  for (const auto& c : fem::dirichlet_constraints(m, 2)) b.grad[c.dof] = 0.0;
  return b;
}

namespace {

VectorXd boundary_length(const mesh::Mesh& m) {
  VectorXd l = VectorXd::Zero(static_cast<Eigen::Index>(m.num_nodes()));
  const auto line = mesh::edge_rule(m.element_type);
  for (const auto& edge : m.neumann)
    for (std::size_t k = 0; k < line.points.size(); ++k) {
      const auto ev = mesh::edge_shape(m, edge.nodes, line.points[k]);
      for (int i = 0; i < ev.count; ++i) l[edge.nodes[i]] += ev.N[i] * line.weights[k] * ev.jacobian;
    }
  return l;
}

}  // namespace

LossBundle poisson_loss(const mesh::Mesh& m, const fem::Material& mat, const VectorXd& T, PoissonLossKind kind,
                        const PoissonStrongWeights& w) {
  const fem::LinearSystem sys = fem::assemble_poisson(m, mat);
  if (T.size() != sys.F.size()) throw std::invalid_argument("poisson_loss: state length mismatch");
  const auto constraints = fem::dirichlet_constraints(m, 1);
  if (kind == PoissonLossKind::Variational) return energy_loss_linear(sys, constraints, T);

  const auto n = static_cast<std::size_t>(T.size());
  std::vector<char> role(n, 'i');  // interior, dirichlet, neumann
  for (const auto& e : m.neumann)
    for (int v : e.nodes) role[static_cast<std::size_t>(v)] = 'n';
  for (const auto& c : constraints) role[static_cast<std::size_t>(c.dof)] = 'd';
  const VectorXd mass = fem::lumped_mass(m);
  const VectorXd len = boundary_length(m);
  const VectorXd R = sys.K * T - sys.F;

  LossBundle b;
  b.grad = VectorXd::Zero(T.size());
  VectorXd weighted = VectorXd::Zero(T.size());  // W a, pulled back through K below
  std::size_t ni = 0, nn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (role[i] == 'i') ++ni;
    if (role[i] == 'n') ++nn;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto I = static_cast<Eigen::Index>(i);
    if (role[i] == 'i') {
      const double a = R[I] / mass[I];
      b.value += a * a / static_cast<double>(ni);
      weighted[I] = 2.0 * a / mass[I] / static_cast<double>(ni);
    } else if (role[i] == 'n') {
      const double a = R[I] / len[I];
      b.value += w.neumann * a * a / static_cast<double>(nn);
      weighted[I] = w.neumann * 2.0 * a / len[I] / static_cast<double>(nn);
    }
  }
  b.grad = sys.K * weighted;  // K symmetric
  if (!constraints.empty()) {
    const double nd = static_cast<double>(constraints.size());
    for (const auto& c : constraints) {
      const double diff = T[c.dof] - c.value;
      b.value += w.dirichlet * diff * diff / nd;
      b.grad[c.dof] += w.dirichlet * 2.0 * diff / nd;
    }
  }
  return b;
}

LossBundle data_loss(const VectorXd& U, const VectorXd& ref) {
  if (U.size() != ref.size() || U.size() == 0) throw std::invalid_argument("data_loss: length mismatch");
  LossBundle b;
  const VectorXd d = U - ref;
  b.value = d.squaredNorm() / static_cast<double>(d.size());
  b.grad = 2.0 * d / static_cast<double>(d.size());
  return b;
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::LinearEnergy: return "linear_energy";
    case LossKind::NeoHookeanEnergy: return "neo_hookean_energy";
    case LossKind::PoissonVariational: return "poisson_variational";
    case LossKind::PoissonStrong: return "poisson_strong";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  for (auto k : {LossKind::LinearEnergy, LossKind::NeoHookeanEnergy, LossKind::PoissonVariational, LossKind::PoissonStrong})
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown loss kind '" + name + "'");
}

void PhysicsProblem::prepare() {
  if (kind == LossKind::LinearEnergy) {
    system = fem::assemble_linear_elasticity(mesh, material);
    constraints = fem::dirichlet_constraints(mesh, 2);
  }
}

LossBundle PhysicsProblem::evaluate(const VectorXd& U) const {
  switch (kind) {
    case LossKind::LinearEnergy:
      if (system.F.size() == 0) return energy_loss_linear(mesh, material, U);
      return energy_loss_linear(system, constraints, U);
    case LossKind::NeoHookeanEnergy: return energy_loss_neohookean(mesh, material, U);
    case LossKind::PoissonVariational: return poisson_loss(mesh, material, U, PoissonLossKind::Variational);
    case LossKind::PoissonStrong: return poisson_loss(mesh, material, U, PoissonLossKind::Strong);
  }
  throw std::logic_error("unknown loss kind");
}

BackpropResult backprop_through_loss(const op::Transolver& net, const ad::Tensor& features, const PhysicsProblem& problem) {
  ad::Tape tape;
  const ad::Var raw = net.forward(tape, features);
  BackpropResult out;
  out.U = problem.ansatz.apply(raw.value());
  out.loss = problem.evaluate(out.U);
  out.grad_params = tape.backward(raw, problem.ansatz.pullback(out.loss.grad), net.params().flat_size());
  return out;
}

}  // namespace pfem::loss
