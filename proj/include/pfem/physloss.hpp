#pragma once

// Physics losses evaluated through the finite element discretization. Every
// loss returns its exact gradient with respect to the nodal unknowns, so the
// network gradient is one tape sweep seeded with (dL/dU) * (dU/dH).

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfem/fem.hpp"
#include "pfem/mesh.hpp"
#include "pfem/transolver.hpp"

namespace pfem::loss {

using Eigen::VectorXd;

// Hard Dirichlet ansatz: U_c(x) = scale * d_c(x) / L * H_c(x), where d_c is the
// distance to the nodes/edges on which component c is constrained (d_c = 1 when
// component c is unconstrained).
struct BcAnsatz {
  int components = 2;
  double length = 1.0;
  double output_scale = 1.0;
  VectorXd multiplier;  // interleaved, one entry per nodal dof

  // raw is N x components; returns interleaved nodal values.
  VectorXd apply(const ad::Tensor& raw) const;
  // dL/dH from dL/dU, shaped like raw.
  ad::Tensor pullback(const VectorXd& dLdU) const;
};

// Throws std::invalid_argument for inhomogeneous Dirichlet values.
BcAnsatz build_ansatz(const mesh::Mesh& mesh, int components, double length, double output_scale = 1.0);

struct LossBundle {
  double value = 0.0;
  VectorXd grad;  // full nodal length; zero on constrained dofs
  int sample_id = -1;
  std::string mesh_id;
};

// 1/2 U'KU - U'F
LossBundle energy_loss_linear(const fem::LinearSystem& sys, const std::vector<fem::Constraint>& constraints,
                              const VectorXd& U);
LossBundle energy_loss_linear(const mesh::Mesh& mesh, const fem::Material& material, const VectorXd& U);
// W(U) - f_ext'U; throws fem::InversionError.
LossBundle energy_loss_neohookean(const mesh::Mesh& mesh, const fem::Material& material, const VectorXd& U);

enum class PoissonLossKind { Variational, Strong };

struct PoissonStrongWeights {
  double dirichlet = 1.0;
  double neumann = 1.0;
};

// Variational: 1/2 T'KT - T'F. Strong: mean of squared nodal residuals
// ((K T)_I - F_I) / m_I over interior nodes (m_I lumped mass), plus the mean
// squared Dirichlet mismatch and the mean squared boundary flux mismatch
// ((K T - F)_I / l_I, l_I lumped boundary length) on Neumann nodes.
LossBundle poisson_loss(const mesh::Mesh& mesh, const fem::Material& material, const VectorXd& T, PoissonLossKind kind,
                        const PoissonStrongWeights& weights = {});

// Optional supervised term: mean squared nodal error.
LossBundle data_loss(const VectorXd& U, const VectorXd& reference);

enum class LossKind { LinearEnergy, NeoHookeanEnergy, PoissonVariational, PoissonStrong };
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

// Everything needed to evaluate the physics loss of one sample.
struct PhysicsProblem {
  mesh::Mesh mesh;
  fem::Material material;
  LossKind kind = LossKind::LinearEnergy;
  BcAnsatz ansatz;
  // cached for linear kinds
  fem::LinearSystem system;
  std::vector<fem::Constraint> constraints;

  void prepare();  // assembles the cached system when relevant
  LossBundle evaluate(const VectorXd& U) const;
};

struct BackpropResult {
  LossBundle loss;
  std::vector<double> grad_params;
  VectorXd U;
};

// Forward the operator, map through the ansatz, evaluate the FE loss and its
// nodal gradient, then sweep the tape once with the chained seed.
BackpropResult backprop_through_loss(const op::Transolver& net, const ad::Tensor& features, const PhysicsProblem& problem);

}  // namespace pfem::loss
