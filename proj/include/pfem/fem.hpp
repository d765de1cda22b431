#pragma once

// Finite element assembly and solvers: CSR matrices, linear elasticity and
// Poisson assembly, Dirichlet elimination, conjugate gradients, dense direct
// solves and total-Lagrangian Newton for plane-strain Neo-Hookean solids.
//
// Vector dofs are interleaved per node (2*node + component). Scalar (Poisson)
// problems have one dof per node; their Dirichlet value is read from
// DirichletBc::ux and their boundary flux from NeumannEdge::tx.

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <json.hpp>

#include "pfem/mesh.hpp"

namespace pfem::fem {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Sparse storage

struct Triplet {
  int row = 0;
  int col = 0;
  double value = 0.0;
};

class CsrMatrix {
 public:
  CsrMatrix() = default;
  // Sums duplicate entries; column indices sorted per row.
  static CsrMatrix from_triplets(int n, std::vector<Triplet> entries);
  static CsrMatrix from_dense(const MatrixXd& dense);

  int rows() const { return n_; }
  std::size_t nnz() const { return values_.size(); }
  const std::vector<int>& row_offsets() const { return row_ptr_; }
  const std::vector<int>& column_indices() const { return col_idx_; }
  const std::vector<double>& values() const { return values_; }

  VectorXd operator*(const VectorXd& x) const;
  double at(int r, int c) const;
  MatrixXd to_dense() const;
  Eigen::SparseMatrix<double> to_eigen() const;
  // max |K - K^T|
  double asymmetry() const;
  // Stable content hash (FNV-1a over dimensions, pattern and values).
  std::uint64_t hash() const;

 private:
  int n_ = 0;
  std::vector<int> row_ptr_{0};
  std::vector<int> col_idx_;
  std::vector<double> values_;
};

std::uint64_t hash_vector(const VectorXd& v, std::uint64_t h = 1469598103934665603ULL);

// ---------------------------------------------------------------------------
// Materials

enum class MaterialKind { PlaneStress, PlaneStrain, NeoHookeanPlaneStrain, Poisson };

std::string to_string(MaterialKind kind);
MaterialKind material_kind_from_string(const std::string& name);
int components(MaterialKind kind);

// Nodal parameter fields; a field of size 1 is uniform.
struct Material {
  MaterialKind kind = MaterialKind::PlaneStress;
  std::vector<double> E{100.0};
  std::vector<double> nu{0.25};
  std::vector<double> conductivity{1.0};
  std::vector<double> source{0.0};
  // Overrides `source` with a pointwise function when set.
  std::function<double(const mesh::Vec2&)> source_fn;
  mesh::Vec2 body_force{0.0, 0.0};
};

class AssemblyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Lame {
  double lambda;
  double mu;
};
Lame lame(double E, double nu);

// 3x3 Voigt matrix (engineering shear) for the plane stress/strain kinds.
Eigen::Matrix3d elasticity_matrix(MaterialKind kind, double E, double nu);

// ---------------------------------------------------------------------------
// Linear assembly

struct LinearSystem {
  CsrMatrix K;
  VectorXd F;
};

LinearSystem assemble_linear_elasticity(const mesh::Mesh& mesh, const Material& material);
LinearSystem assemble_poisson(const mesh::Mesh& mesh, const Material& material);
// Neumann tractions and body force (vector problems) or boundary flux and source (Poisson).
VectorXd external_force(const mesh::Mesh& mesh, const Material& material);
// Row-sum lumped mass: integral of N_I over the domain.
VectorXd lumped_mass(const mesh::Mesh& mesh);

// ---------------------------------------------------------------------------
// Dirichlet elimination

struct Constraint {
  int dof = 0;
  double value = 0.0;
};

std::vector<Constraint> dirichlet_constraints(const mesh::Mesh& mesh, int components);

struct ReducedSystem {
  CsrMatrix K;
  VectorXd F;
  std::vector<int> free_dofs;    // reduced index -> full dof
  std::vector<int> full_to_free; // full dof -> reduced index, -1 if constrained
  VectorXd prescribed;           // full length, constrained values (0 on free dofs)

  VectorXd reconstruct(const VectorXd& reduced) const;
  VectorXd restrict_to_free(const VectorXd& full) const;
};

ReducedSystem apply_dirichlet(const CsrMatrix& K, const VectorXd& F, const std::vector<Constraint>& constraints);

// ---------------------------------------------------------------------------
// Solvers

struct SolveReport {
  std::string solver;
  int iterations = 0;
  std::vector<double> residual_history;  // includes the initial residual
  bool converged = false;
  double tol = 0.0;
  std::string initial_guess_label = "zero";
  std::string message;

  nlohmann::json to_json() const;
  std::string history_csv() const;
};

struct SolveResult {
  VectorXd U;
  SolveReport report;
};

// Stops when ||K U - F|| / ||F|| < tol (absolute norm when F = 0).
// `on_iterate` sees every iterate, including U0.
SolveResult cg_solve(const CsrMatrix& K, const VectorXd& F, const VectorXd& U0, double tol, int max_iter,
                     const std::function<void(int, const VectorXd&)>& on_iterate = {});

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

VectorXd dense_direct_solve(const CsrMatrix& K, const VectorXd& F, int dense_limit = 5000);
VectorXd dense_direct_solve(const MatrixXd& K, const VectorXd& F, int dense_limit = 5000);

// ---------------------------------------------------------------------------
// Neo-Hookean, plane strain, total Lagrangian

class InversionError : public std::runtime_error {
 public:
  InversionError(std::size_t element, int qp, double J);
  std::size_t element;
  int qp;
  double J;
};

struct Kinematics {
  Eigen::Matrix2d F;
  Eigen::Matrix2d C;
  double J = 1.0;
  double I1 = 2.0;
  Eigen::Matrix2d S;  // second Piola-Kirchhoff
  double psi = 0.0;
};

// Throws InversionError(element, qp) when det F <= 0.
Kinematics neohookean_state(const Eigen::Matrix2d& F, double lambda, double mu, std::size_t element = 0, int qp = 0);
// Material tangent dS/dE in Voigt form (11, 22, 12).
Eigen::Matrix3d neohookean_tangent_voigt(const Kinematics& k, double lambda, double mu);

double strain_energy(const mesh::Mesh& mesh, const Material& material, const VectorXd& U);
VectorXd internal_force_neohookean(const mesh::Mesh& mesh, const Material& material, const VectorXd& U);

struct TangentParts {
  CsrMatrix material;
  CsrMatrix geometric;
};
CsrMatrix tangent_neohookean(const mesh::Mesh& mesh, const Material& material, const VectorXd& U,
                             TangentParts* parts = nullptr);

struct Residual {
  VectorXd r;  // full length, zero on constrained dofs
  double norm = 0.0;
};
// Linear kinds: K U - F; Neo-Hookean: f_int(U) - f_ext.
Residual residual(const mesh::Mesh& mesh, const Material& material, const VectorXd& U);

enum class LinearSolverKind { SparseLdlt, Dense, Cg };

struct NewtonOptions {
  double tol = 1e-6;
  bool relative = false;  // ||r|| / ||f_ext|| instead of ||r||
  int max_iter = 50;
  int load_steps = 1;
  LinearSolverKind linear_solver = LinearSolverKind::SparseLdlt;
  double cg_tol = 1e-12;
  std::string initial_guess_label = "zero";
};

// Dirichlet values from the mesh are imposed on U0 before iterating.
SolveResult newton_solve(const mesh::Mesh& mesh, const Material& material, const VectorXd& U0,
                         const NewtonOptions& options);

}  // namespace pfem::fem
