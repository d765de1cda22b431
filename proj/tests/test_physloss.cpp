#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pfem/physloss.hpp"

using namespace pfem;
using namespace pfem::loss;
using fem::MaterialKind;
using mesh::ElementType;

namespace {

mesh::Mesh clamped_plate(int nx, int ny, double w, double h, double ty = 0.3) {
  auto m = mesh::build_structured_mesh(nx, ny, ElementType::Q4, mesh::rectangle_map(0, 0, w, h));
  for (int v : m.boundary_nodes("left")) m.dirichlet.push_back({v, 0.0, 0.0});
  for (const auto& e : m.boundary_edges.at("right")) m.neumann.push_back({e, 1.0, ty});
  return m;
}

fem::Material material(MaterialKind k) {
  fem::Material mat;
  mat.kind = k;
  return mat;
}

VectorXd random_state(const mesh::Mesh& m, std::mt19937_64& rng, double s) {
  std::normal_distribution<double> d(0, s);
  VectorXd U(2 * static_cast<Eigen::Index>(m.num_nodes()));
  for (auto& v : U) v = d(rng);
  for (const auto& c : fem::dirichlet_constraints(m, 2)) U[c.dof] = 0;
  return U;
}

double fd_directional(const std::function<double(const VectorXd&)>& f, const VectorXd& U, const VectorXd& d, double h) {
  return (f(U + h * d) - f(U - h * d)) / (2 * h);
}

}  // namespace

TEST_CASE("ansatz") {
  const auto m = clamped_plate(4, 4, 5, 5);
  const auto a = build_ansatz(m, 2, 5.0);
  ad::Tensor raw = ad::Tensor::filled(m.num_nodes(), 2, 3.7);
  const VectorXd U = a.apply(raw);
  for (int v : m.boundary_nodes("left")) {
    CHECK(U[2 * v] == 0.0);
    CHECK(U[2 * v + 1] == 0.0);
  }
  // d(x) = x for a clamped left edge
  for (std::size_t i = 0; i < m.num_nodes(); ++i) CHECK(a.multiplier[2 * i] == doctest::Approx(m.nodes[i][0] / 5.0));

  auto free = mesh::build_structured_mesh(2, 2, ElementType::Q4, mesh::rectangle_map(0, 0, 1, 1));
  const auto id = build_ansatz(free, 2, 1.0);
  CHECK(id.apply(raw.rows() == free.num_nodes() ? raw : ad::Tensor::filled(free.num_nodes(), 2, 3.7)) ==
        VectorXd::Constant(18, 3.7));

  auto bad = m;
  bad.dirichlet[0].ux = 0.1;
  CHECK_THROWS(build_ansatz(bad, 2, 5.0));
}

TEST_CASE("linear energy loss") {
  auto m = clamped_plate(4, 4, 1, 1);
  const auto mat = material(MaterialKind::PlaneStress);
  const auto sys = fem::assemble_linear_elasticity(m, mat);
  const auto cons = fem::dirichlet_constraints(m, 2);
  const VectorXd zero = VectorXd::Zero(sys.F.size());
  auto b0 = energy_loss_linear(sys, cons, zero);
  CHECK(b0.value == 0.0);
  VectorXd mF = -sys.F;
  for (const auto& c : cons) mF[c.dof] = 0;
  CHECK((b0.grad - mF).norm() == 0.0);

  const auto rs = fem::apply_dirichlet(sys.K, sys.F, cons);
  const VectorXd Us = rs.reconstruct(fem::dense_direct_solve(rs.K, rs.F));
  const auto bs = energy_loss_linear(sys, cons, Us);
  CHECK(bs.grad.norm() < 1e-9);
  CHECK(bs.value == doctest::Approx(-0.5 * Us.dot(sys.F)));

  std::mt19937_64 rng(1);
  const VectorXd U = random_state(m, rng, 0.01);
  const auto b = energy_loss_linear(sys, cons, U);
  auto f = [&](const VectorXd& x) { return energy_loss_linear(sys, cons, x).value; };
  for (int k = 0; k < 5; ++k) {
    const VectorXd d = random_state(m, rng, 1.0);
    const double fd = fd_directional(f, U, d, 1e-4);
    CHECK(std::abs(fd - b.grad.dot(d)) <= 1e-8 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("neo-hookean energy loss") {
  auto m = clamped_plate(4, 4, 1, 1, 0.0);
  m.neumann.clear();
  const auto mat = material(MaterialKind::NeoHookeanPlaneStrain);
  const Eigen::Index n = 2 * static_cast<Eigen::Index>(m.num_nodes());
  CHECK(energy_loss_neohookean(m, mat, VectorXd::Zero(n)).value == 0.0);
  auto free = mesh::build_structured_mesh(2, 2, ElementType::Q4, mesh::rectangle_map(0, 0, 1, 1));
  VectorXd shift(18);
  for (Eigen::Index i = 0; i < 18; ++i) shift[i] = i % 2 ? 0.2 : -0.4;
  CHECK(std::abs(energy_loss_neohookean(free, mat, shift).value) < 1e-12);

  m = clamped_plate(4, 4, 1, 1);
  std::mt19937_64 rng(2);
  const VectorXd U = random_state(m, rng, 0.02);
  const auto b = energy_loss_neohookean(m, mat, U);
  VectorXd r = fem::internal_force_neohookean(m, mat, U) - fem::external_force(m, mat);
  for (const auto& c : fem::dirichlet_constraints(m, 2)) r[c.dof] = 0;
  CHECK((b.grad - r).cwiseAbs().maxCoeff() <= 1e-10);
  auto f = [&](const VectorXd& x) { return energy_loss_neohookean(m, mat, x).value; };
  const VectorXd d = random_state(m, rng, 1.0);
  const double fd = fd_directional(f, U, d, 1e-5);
  CHECK(std::abs(fd - b.grad.dot(d)) <= 1e-6 * std::abs(fd));
}

TEST_CASE("poisson losses") {
  const double pi = std::numbers::pi;
  auto square = [](int n) {
    auto m = mesh::build_structured_mesh(n, n, ElementType::Q4, mesh::rectangle_map(0, 0, 1, 1));
    for (const auto& side : {"left", "right", "bottom", "top"})
      for (int v : m.boundary_nodes(side)) m.dirichlet.push_back({v, 0.0, std::nullopt});
    return m;
  };
  SUBCASE("harmonic linear field: interior terms vanish") {
    auto m = mesh::build_structured_mesh(5, 5, ElementType::Q4, mesh::rectangle_map(0, 0, 1, 1));
    for (int v : m.boundary_nodes("left")) m.dirichlet.push_back({v, 0.0, std::nullopt});
    for (int v : m.boundary_nodes("right")) m.dirichlet.push_back({v, 1.0, std::nullopt});
    for (const auto& side : {"bottom", "top"})
      for (const auto& e : m.boundary_edges.at(side)) m.neumann.push_back({e, 0.0, 0.0});
    fem::Material mat = material(MaterialKind::Poisson);
    VectorXd T(static_cast<Eigen::Index>(m.num_nodes()));
    for (std::size_t i = 0; i < m.num_nodes(); ++i) T[i] = m.nodes[i][0];
    CHECK(poisson_loss(m, mat, T, PoissonLossKind::Strong).value < 1e-24);
    CHECK(poisson_loss(m, mat, T, PoissonLossKind::Variational).grad.norm() < 1e-12);
  }
  SUBCASE("variational gradient vanishes at the FEM solution") {
    auto m = square(6);
    fem::Material mat = material(MaterialKind::Poisson);
    mat.source = {1.0};
    const auto sys = fem::assemble_poisson(m, mat);
    const auto rs = fem::apply_dirichlet(sys.K, sys.F, fem::dirichlet_constraints(m, 1));
    const VectorXd T = rs.reconstruct(fem::dense_direct_solve(rs.K, rs.F));
    CHECK(poisson_loss(m, mat, T, PoissonLossKind::Variational).grad.norm() < 1e-12);
  }
  SUBCASE("strong form is O(h^2) on the manufactured solution") {
    std::vector<double> rms;
    for (int n : {8, 16, 32}) {
      auto m = square(n);
      fem::Material mat = material(MaterialKind::Poisson);
      mat.source_fn = [pi](const mesh::Vec2& p) { return 2 * pi * pi * std::sin(pi * p[0]) * std::sin(pi * p[1]); };
      VectorXd T(static_cast<Eigen::Index>(m.num_nodes()));
      for (std::size_t i = 0; i < m.num_nodes(); ++i) T[i] = std::sin(pi * m.nodes[i][0]) * std::sin(pi * m.nodes[i][1]);
      const auto b = poisson_loss(m, mat, T, PoissonLossKind::Strong);
      rms.push_back(std::sqrt(b.value));
    }
    CHECK(rms[0] / rms[1] > 3.5);
    CHECK(rms[1] / rms[2] > 3.5);
  }
  SUBCASE("dirichlet penalty and gradient") {
    auto m = square(4);
    fem::Material mat = material(MaterialKind::Poisson);
    mat.source = {3.0};
    std::mt19937_64 rng(3);
    std::normal_distribution<double> d(0, 1);
    VectorXd T(static_cast<Eigen::Index>(m.num_nodes()));
    for (auto& v : T) v = d(rng);
    const auto b = poisson_loss(m, mat, T, PoissonLossKind::Strong);
    auto f = [&](const VectorXd& x) { return poisson_loss(m, mat, x, PoissonLossKind::Strong).value; };
    VectorXd dir(T.size());
    for (auto& v : dir) v = d(rng);
    const double fd = fd_directional(f, T, dir, 1e-5);
    CHECK(std::abs(fd - b.grad.dot(dir)) <= 1e-6 * std::abs(fd));
  }
}

TEST_CASE("backprop through the loss") {
  auto m = clamped_plate(4, 4, 1, 1);
  PhysicsProblem prob;
  prob.mesh = m;
  prob.material = material(MaterialKind::PlaneStress);
  prob.kind = LossKind::LinearEnergy;
  prob.ansatz = build_ansatz(m, 2, 1.0, 0.01);
  prob.prepare();
  op::TransolverConfig c;
  c.num_layers = 1;
  c.channels = 8;
  c.num_tokens = 4;
  c.heads = 2;
  c.in_features = 2;
  op::Transolver net(c, 3);
  ad::Tensor x = ad::Tensor::zeros(m.num_nodes(), 2);
  for (std::size_t i = 0; i < m.num_nodes(); ++i) {
    x(i, 0) = m.nodes[i][0];
    x(i, 1) = m.nodes[i][1];
  }
  const auto res = backprop_through_loss(net, x, prob);
  auto& flat = net.params().flat();
  int checked = 0;
  for (std::size_t i = 0; i < flat.size(); i += 7) {
    const double keep = flat[i], h = 1e-6;
    flat[i] = keep + h;
    const double fp = prob.evaluate(prob.ansatz.apply(net.predict(x))).value;
    flat[i] = keep - h;
    const double fm = prob.evaluate(prob.ansatz.apply(net.predict(x))).value;
    flat[i] = keep;
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(fd - res.grad_params[i]) <= 1e-4 * std::max(std::abs(fd), 1e-8));
    ++checked;
  }
  CHECK(checked > 10);

  // exact solution injected: zero nodal gradient gives zero parameter gradient
  ad::Tape t;
  const auto raw = net.forward(t, x);
  const auto g = t.backward(raw, prob.ansatz.pullback(VectorXd::Zero(res.U.size())), net.params().flat_size());
  CHECK(std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("gradient descent on nodal values approaches the FEM solution") {
  auto m = clamped_plate(4, 4, 1, 1);
  const auto mat = material(MaterialKind::PlaneStress);
  const auto sys = fem::assemble_linear_elasticity(m, mat);
  const auto cons = fem::dirichlet_constraints(m, 2);
  const auto rs = fem::apply_dirichlet(sys.K, sys.F, cons);
  const VectorXd Us = rs.reconstruct(fem::dense_direct_solve(rs.K, rs.F));
  VectorXd U = VectorXd::Zero(sys.F.size());
  const double step = 1.0 / sys.K.to_dense().norm();
  const double e0 = (U - Us).norm();
  for (int it = 0; it < 20000; ++it) U -= step * energy_loss_linear(sys, cons, U).grad;
  CHECK((U - Us).norm() < 0.05 * e0);
}

TEST_CASE("data loss") {
  VectorXd a(3), b(3);
  a << 1, 2, 3;
  b << 1, 2, 5;
  const auto d = data_loss(a, b);
  CHECK(d.value == doctest::Approx(4.0 / 3));
  CHECK(d.grad[2] == doctest::Approx(-4.0 / 3));
}
