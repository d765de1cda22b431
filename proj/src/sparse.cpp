#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <stdexcept>

#include "pfem/fem.hpp"

namespace pfem::fem {

namespace {

std::uint64_t fnv(std::uint64_t h, std::uint64_t word) {
  for (int b = 0; b < 8; ++b) {
    h ^= (word >> (8 * b)) & 0xffu;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

CsrMatrix CsrMatrix::from_triplets(int n, std::vector<Triplet> entries) {
  if (n < 0) throw std::invalid_argument("csr: negative dimension");
  for (const auto& t : entries)
    if (t.row < 0 || t.row >= n || t.col < 0 || t.col >= n)
      throw std::out_of_range("csr: triplet (" + std::to_string(t.row) + ", " + std::to_string(t.col) +
                              ") outside " + std::to_string(n) + "x" + std::to_string(n));
  // stable sort keeps duplicate summation order deterministic
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Triplet& a, const Triplet& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
  CsrMatrix m;
  m.n_ = n;
  m.row_ptr_.assign(static_cast<std::size_t>(n) + 1, 0);
  for (std::size_t i = 0; i < entries.size();) {
    const int r = entries[i].row, c = entries[i].col;
    double v = 0.0;
    while (i < entries.size() && entries[i].row == r && entries[i].col == c) v += entries[i++].value;
    m.col_idx_.push_back(c);
    m.values_.push_back(v);
    ++m.row_ptr_[static_cast<std::size_t>(r) + 1];
  }
  for (int r = 0; r < n; ++r) m.row_ptr_[r + 1] += m.row_ptr_[r];
  return m;
}

CsrMatrix CsrMatrix::from_dense(const MatrixXd& dense) {
  if (dense.rows() != dense.cols()) throw std::invalid_argument("csr: dense matrix must be square");
  std::vector<Triplet> t;
  for (int r = 0; r < dense.rows(); ++r)
    for (int c = 0; c < dense.cols(); ++c)
      if (dense(r, c) != 0.0) t.push_back({r, c, dense(r, c)});
  return from_triplets(static_cast<int>(dense.rows()), std::move(t));
}

VectorXd CsrMatrix::operator*(const VectorXd& x) const {
  if (x.size() != n_)
    throw std::invalid_argument("csr: multiply " + std::to_string(n_) + "x" + std::to_string(n_) + " by vector of length " +
                                std::to_string(x.size()));
  VectorXd y(n_);
  for (int r = 0; r < n_; ++r) {
    double s = 0.0;
    for (int k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) s += values_[k] * x[col_idx_[k]];
    y[r] = s;
  }
  return y;
}

double CsrMatrix::at(int r, int c) const {
  const auto begin = col_idx_.begin() + row_ptr_[r], end = col_idx_.begin() + row_ptr_[r + 1];
  const auto it = std::lower_bound(begin, end, c);
  return (it != end && *it == c) ? values_[static_cast<std::size_t>(it - col_idx_.begin())] : 0.0;
}

MatrixXd CsrMatrix::to_dense() const {
  MatrixXd d = MatrixXd::Zero(n_, n_);
  for (int r = 0; r < n_; ++r)
    for (int k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) d(r, col_idx_[k]) = values_[k];
  return d;
}

Eigen::SparseMatrix<double> CsrMatrix::to_eigen() const {
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(values_.size());
  for (int r = 0; r < n_; ++r)
    for (int k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) t.emplace_back(r, col_idx_[k], values_[k]);
  Eigen::SparseMatrix<double> s(n_, n_);
  s.setFromTriplets(t.begin(), t.end());
  return s;
}

double CsrMatrix::asymmetry() const {
  double worst = 0.0;
  for (int r = 0; r < n_; ++r)
    for (int k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k)
      worst = std::max(worst, std::abs(values_[k] - at(col_idx_[k], r)));
  return worst;
}

std::uint64_t CsrMatrix::hash() const {
  std::uint64_t h = fnv(1469598103934665603ULL, static_cast<std::uint64_t>(n_));
  for (int v : row_ptr_) h = fnv(h, static_cast<std::uint64_t>(v));
  for (int v : col_idx_) h = fnv(h, static_cast<std::uint64_t>(v));
  for (double v : values_) h = fnv(h, std::bit_cast<std::uint64_t>(v));
  return h;
}

std::uint64_t hash_vector(const VectorXd& v, std::uint64_t h) {
  h = fnv(h, static_cast<std::uint64_t>(v.size()));
  for (double x : v) h = fnv(h, std::bit_cast<std::uint64_t>(x));
  return h;
}

// ---------------------------------------------------------------------------

VectorXd ReducedSystem::reconstruct(const VectorXd& reduced) const {
  if (reduced.size() != static_cast<Eigen::Index>(free_dofs.size()))
    throw std::invalid_argument("reconstruct: expected " + std::to_string(free_dofs.size()) + " free values");
  VectorXd full = prescribed;
  for (std::size_t i = 0; i < free_dofs.size(); ++i) full[free_dofs[i]] = reduced[static_cast<Eigen::Index>(i)];
  return full;
}

VectorXd ReducedSystem::restrict_to_free(const VectorXd& full) const {
  if (full.size() != prescribed.size()) throw std::invalid_argument("restrict: full vector length mismatch");
  VectorXd r(static_cast<Eigen::Index>(free_dofs.size()));
  for (std::size_t i = 0; i < free_dofs.size(); ++i) r[static_cast<Eigen::Index>(i)] = full[free_dofs[i]];
  return r;
}

ReducedSystem apply_dirichlet(const CsrMatrix& K, const VectorXd& F, const std::vector<Constraint>& constraints) {
  const int n = K.rows();
  if (F.size() != n) throw std::invalid_argument("apply_dirichlet: F length does not match K");
  ReducedSystem rs;
  rs.prescribed = VectorXd::Zero(n);
  std::vector<char> fixed(static_cast<std::size_t>(n), 0);
  for (const auto& c : constraints) {
    if (c.dof < 0 || c.dof >= n) throw std::out_of_range("apply_dirichlet: dof " + std::to_string(c.dof) + " out of range");
    if (fixed[c.dof] && rs.prescribed[c.dof] != c.value)
      throw std::invalid_argument("apply_dirichlet: conflicting values for dof " + std::to_string(c.dof));
    fixed[c.dof] = 1;
    rs.prescribed[c.dof] = c.value;
  }
  rs.full_to_free.assign(static_cast<std::size_t>(n), -1);
  for (int d = 0; d < n; ++d)
    if (!fixed[d]) {
      rs.full_to_free[d] = static_cast<int>(rs.free_dofs.size());
      rs.free_dofs.push_back(d);
    }
  // F_free - K_fc u_c
  const VectorXd lift = K * rs.prescribed;
  rs.F = VectorXd(static_cast<Eigen::Index>(rs.free_dofs.size()));
  std::vector<Triplet> t;
  const auto& rp = K.row_offsets();
  const auto& ci = K.column_indices();
  const auto& v = K.values();
  for (std::size_t i = 0; i < rs.free_dofs.size(); ++i) {
    const int r = rs.free_dofs[i];
    rs.F[static_cast<Eigen::Index>(i)] = F[r] - lift[r];
    for (int k = rp[r]; k < rp[r + 1]; ++k) {
      const int c = rs.full_to_free[ci[k]];
      if (c >= 0) t.push_back({static_cast<int>(i), c, v[k]});
    }
  }
  rs.K = CsrMatrix::from_triplets(static_cast<int>(rs.free_dofs.size()), std::move(t));
  return rs;
}

}  // namespace pfem::fem
