#include <cmath>
#include <sstream>

#include "fem_internal.hpp"

namespace pfem::fem {

InversionError::InversionError(std::size_t e, int q, double j)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << "element inversion: element " << e << ", quadrature point " << q << ", J = " << j;
        return os.str();
      }()),
      element(e),
      qp(q),
      J(j) {}

Kinematics neohookean_state(const Eigen::Matrix2d& F, double lambda, double mu, std::size_t element, int qp) {
  Kinematics k;
  k.F = F;
  k.J = F.determinant();
  if (!(k.J > 0.0)) throw InversionError(element, qp, k.J);
  k.C = F.transpose() * F;
  k.I1 = k.C.trace();
  const Eigen::Matrix2d Cinv = k.C.inverse();
  const double lnJ = std::log(k.J);
  k.S = mu * (Eigen::Matrix2d::Identity() - Cinv) + lambda * lnJ * Cinv;
  k.psi = 0.5 * lambda * lnJ * lnJ - mu * lnJ + 0.5 * mu * (k.I1 - 2.0);
  return k;
}

Eigen::Matrix3d neohookean_tangent_voigt(const Kinematics& k, double lambda, double mu) {
  const Eigen::Matrix2d Ci = k.C.inverse();
  const double c = mu - lambda * std::log(k.J);
  static constexpr int I[3] = {0, 1, 0}, J[3] = {0, 1, 1};
  Eigen::Matrix3d D;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const int i = I[a], j = J[a], kk = I[b], l = J[b];
      D(a, b) = lambda * Ci(i, j) * Ci(kk, l) + c * (Ci(i, kk) * Ci(j, l) + Ci(i, l) * Ci(j, kk));
    }
  return D;
}

namespace {

struct QpState {
  mesh::PhysicalGradients g;
  Kinematics kin;
  double lambda, mu, w;
};

void check_vector(const mesh::Mesh& m, const VectorXd& U) {
  if (U.size() != static_cast<Eigen::Index>(2 * m.num_nodes()))
    throw std::invalid_argument("displacement vector has length " + std::to_string(U.size()) + ", expected " +
                                std::to_string(2 * m.num_nodes()));
}

template <class Fn>
void for_each_qp(const mesh::Mesh& m, const Material& mat, const VectorXd& U, Fn&& fn) {
  check_vector(m, U);
  detail::check_field_size(mat.E, m.num_nodes(), "E");
  detail::check_field_size(mat.nu, m.num_nodes(), "nu");
  const auto q = mesh::gauss_rule(m.element_type);
  for (std::size_t e = 0; e < m.num_elements(); ++e) {
    const auto nodes = m.element(e);
    for (std::size_t k = 0; k < q.points.size(); ++k) {
      QpState s;
      s.g = mesh::physical_gradients(m, e, q.points[k]);
      double E, nu;
      detail::elastic_parameters(mat, nodes, s.g.shape, e, E, nu);
      const auto l = lame(E, nu);
      s.lambda = l.lambda;
      s.mu = l.mu;
      s.w = q.weights[k] * s.g.detJ;
      Eigen::Matrix2d F = Eigen::Matrix2d::Identity();
      for (int a = 0; a < s.g.shape.count; ++a)
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) F(i, j) += U[2 * nodes[a] + i] * s.g.dNdX[a][j];
      s.kin = neohookean_state(F, s.lambda, s.mu, e, static_cast<int>(k));
      fn(e, nodes, s);
    }
  }
}

}  // namespace

double strain_energy(const mesh::Mesh& m, const Material& mat, const VectorXd& U) {
  double W = 0.0;
  for_each_qp(m, mat, U, [&](std::size_t, std::span<const int>, const QpState& s) { W += s.w * s.kin.psi; });
  return W;
}

VectorXd internal_force_neohookean(const mesh::Mesh& m, const Material& mat, const VectorXd& U) {
  VectorXd f = VectorXd::Zero(U.size());
  for_each_qp(m, mat, U, [&](std::size_t, std::span<const int> nodes, const QpState& s) {
    const Eigen::Matrix2d P = s.kin.F * s.kin.S;
    for (int a = 0; a < s.g.shape.count; ++a)
      for (int i = 0; i < 2; ++i) f[2 * nodes[a] + i] += s.w * (P(i, 0) * s.g.dNdX[a][0] + P(i, 1) * s.g.dNdX[a][1]);
  });
  return f;
}

CsrMatrix tangent_neohookean(const mesh::Mesh& m, const Material& mat, const VectorXd& U, TangentParts* parts) {
  const int npe = mesh::nodes_per_element(m.element_type);
  const int nd = 2 * npe;
  std::vector<Triplet> total, tmat, tgeo;
  total.reserve(m.num_elements() * static_cast<std::size_t>(nd * nd));
  Eigen::MatrixXd B(3, nd), Km(nd, nd), Kg(nd, nd);
  std::size_t current = static_cast<std::size_t>(-1);
  std::vector<int> current_nodes;

  auto flush = [&] {
    if (current == static_cast<std::size_t>(-1)) return;
    for (int a = 0; a < nd; ++a)
      for (int b = 0; b < nd; ++b) {
        const int r = 2 * current_nodes[a / 2] + a % 2, c = 2 * current_nodes[b / 2] + b % 2;
        total.push_back({r, c, Km(a, b) + Kg(a, b)});
        if (parts) {
          tmat.push_back({r, c, Km(a, b)});
          tgeo.push_back({r, c, Kg(a, b)});
        }
      }
  };

  for_each_qp(m, mat, U, [&](std::size_t e, std::span<const int> nodes, const QpState& s) {
    if (e != current) {
      flush();
      current = e;
      current_nodes.assign(nodes.begin(), nodes.end());
      Km.setZero();
      Kg.setZero();
    }
    const Eigen::Matrix2d& F = s.kin.F;
    for (int a = 0; a < npe; ++a) {
      const double dx = s.g.dNdX[a][0], dy = s.g.dNdX[a][1];
      for (int i = 0; i < 2; ++i) {
        B(0, 2 * a + i) = F(i, 0) * dx;
        B(1, 2 * a + i) = F(i, 1) * dy;
        B(2, 2 * a + i) = F(i, 0) * dy + F(i, 1) * dx;
      }
    }
    const Eigen::Matrix3d D = neohookean_tangent_voigt(s.kin, s.lambda, s.mu);
    Km.noalias() += B.transpose() * D * B * s.w;
    const Eigen::Matrix2d& S = s.kin.S;
    for (int a = 0; a < npe; ++a)
      for (int b = 0; b < npe; ++b) {
        const Eigen::Vector2d ga(s.g.dNdX[a][0], s.g.dNdX[a][1]), gb(s.g.dNdX[b][0], s.g.dNdX[b][1]);
        const double v = s.w * ga.dot(S * gb);
        Kg(2 * a, 2 * b) += v;
        Kg(2 * a + 1, 2 * b + 1) += v;
      }
  });
  flush();
  const int n = static_cast<int>(2 * m.num_nodes());
  if (parts) {
    parts->material = CsrMatrix::from_triplets(n, std::move(tmat));
    parts->geometric = CsrMatrix::from_triplets(n, std::move(tgeo));
  }
  return CsrMatrix::from_triplets(n, std::move(total));
}

Residual residual(const mesh::Mesh& m, const Material& mat, const VectorXd& U) {
  Residual out;
  const int nc = components(mat.kind);
  if (mat.kind == MaterialKind::NeoHookeanPlaneStrain) {
    out.r = internal_force_neohookean(m, mat, U) - external_force(m, mat);
  } else {
    const LinearSystem sys = mat.kind == MaterialKind::Poisson ? assemble_poisson(m, mat) : assemble_linear_elasticity(m, mat);
    if (U.size() != sys.F.size()) throw std::invalid_argument("residual: state vector length mismatch");
    out.r = sys.K * U - sys.F;
  }
  for (const auto& c : dirichlet_constraints(m, nc)) out.r[c.dof] = 0.0;
  out.norm = out.r.norm();
  return out;
}

namespace {

VectorXd solve_linear(const CsrMatrix& K, const VectorXd& b, const NewtonOptions& opt) {
  switch (opt.linear_solver) {
    case LinearSolverKind::Dense: return dense_direct_solve(K, b);
    case LinearSolverKind::Cg: {
      auto res = cg_solve(K, b, VectorXd::Zero(b.size()), opt.cg_tol, 20 * static_cast<int>(b.size()) + 100);
      if (!res.report.converged) throw std::runtime_error("inner CG failed: " + res.report.message);
      return res.U;
    }
    case LinearSolverKind::SparseLdlt: {
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(K.to_eigen());
      if (ldlt.info() != Eigen::Success) throw SingularMatrixError("tangent factorization failed");
      return ldlt.solve(b);
    }
  }
  throw std::logic_error("unknown linear solver");
}

}  // namespace

SolveResult newton_solve(const mesh::Mesh& m, const Material& mat, const VectorXd& U0, const NewtonOptions& opt) {
  if (mat.kind != MaterialKind::NeoHookeanPlaneStrain) throw std::invalid_argument("newton_solve: material must be neo_hookean");
  if (opt.load_steps < 1) throw std::invalid_argument("newton_solve: load_steps must be >= 1");
  check_vector(m, U0);
  SolveResult out{U0, {}};
  auto& rep = out.report;
  rep.solver = "newton";
  rep.tol = opt.tol;
  rep.initial_guess_label = opt.initial_guess_label;

  const auto cons = dirichlet_constraints(m, 2);
  std::vector<Constraint> homogeneous;
  for (const auto& c : cons) homogeneous.push_back({c.dof, 0.0});
  const VectorXd fext = external_force(m, mat);
  VectorXd& U = out.U;

  try {
    for (int step = 1; step <= opt.load_steps; ++step) {
      const double factor = static_cast<double>(step) / opt.load_steps;
      for (const auto& c : cons) U[c.dof] = factor * c.value;
      const double scale = opt.relative && fext.norm() > 0.0 ? 1.0 / (factor * fext.norm()) : 1.0;
      int growth = 0;
      bool step_converged = false;
      while (true) {
        VectorXd r = internal_force_neohookean(m, mat, U) - factor * fext;
        for (const auto& c : cons) r[c.dof] = 0.0;
        const double norm = r.norm() * scale;
        if (!rep.residual_history.empty() && norm > rep.residual_history.back()) ++growth;
        else growth = 0;
        rep.residual_history.push_back(norm);
        if (!std::isfinite(norm)) {
          rep.message = "non-finite residual";
          break;
        }
        if (norm <= opt.tol) {
          step_converged = true;
          break;
        }
        if (growth >= 5) {
          rep.message = "diverged: residual grew for 5 consecutive iterations";
          break;
        }
        if (rep.iterations >= opt.max_iter) {
          rep.message = "max_iter reached";
          break;
        }
        const CsrMatrix K = tangent_neohookean(m, mat, U);
        const ReducedSystem rs = apply_dirichlet(K, -r, homogeneous);
        const VectorXd du = solve_linear(rs.K, rs.F, opt);
        U += rs.reconstruct(du);
        ++rep.iterations;
      }
      if (!step_converged) {
        rep.converged = false;
        if (opt.load_steps > 1) rep.message += " (load step " + std::to_string(step) + ")";
        return out;
      }
    }
    rep.converged = true;
  } catch (const InversionError& e) {
    rep.converged = false;
    rep.message = e.what();
  } catch (const SingularMatrixError& e) {
    rep.converged = false;
    rep.message = e.what();
  }
  return out;
}

}  // namespace pfem::fem
