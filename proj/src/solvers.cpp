#include <cmath>
#include <limits>
#include <sstream>

#include "pfem/fem.hpp"

namespace pfem::fem {

nlohmann::json SolveReport::to_json() const {
  return {{"solver", solver},
          {"iterations", iterations},
          {"residual_history", residual_history},
          {"converged", converged},
          {"tol", tol},
          {"initial_guess_label", initial_guess_label},
          {"message", message}};
}

std::string SolveReport::history_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,norm\n";
  for (std::size_t i = 0; i < residual_history.size(); ++i) os << i << "," << residual_history[i] << "\n";
  return os.str();
}

SolveResult cg_solve(const CsrMatrix& K, const VectorXd& F, const VectorXd& U0, double tol, int max_iter,
                     const std::function<void(int, const VectorXd&)>& on_iterate) {
  if (F.size() != K.rows() || U0.size() != K.rows())
    throw std::invalid_argument("cg_solve: dimension mismatch (K " + std::to_string(K.rows()) + ", F " +
                                std::to_string(F.size()) + ", U0 " + std::to_string(U0.size()) + ")");
  SolveResult out{U0, {}};
  auto& rep = out.report;
  rep.solver = "cg";
  rep.tol = tol;
  const double fnorm = F.norm();
  const double scale = fnorm > 0.0 ? 1.0 / fnorm : 1.0;

  VectorXd& U = out.U;
  VectorXd r = F - K * U;
  double rr = r.squaredNorm();
  rep.residual_history.push_back(std::sqrt(rr) * scale);
  if (on_iterate) on_iterate(0, U);
  if (rep.residual_history.back() < tol) {
    rep.converged = true;
    return out;
  }
  VectorXd p = r;
  for (int it = 1; it <= max_iter; ++it) {
    const VectorXd Ap = K * p;
    const double pAp = p.dot(Ap);
    if (!(pAp > 0.0)) {
      rep.message = "matrix not positive definite along search direction (p'Kp = " + std::to_string(pAp) + ")";
      break;
    }
    const double alpha = rr / pAp;
    U.noalias() += alpha * p;
    r.noalias() -= alpha * Ap;
    const double rr_new = r.squaredNorm();
    rep.iterations = it;
    rep.residual_history.push_back(std::sqrt(rr_new) * scale);
    if (on_iterate) on_iterate(it, U);
    if (rep.residual_history.back() < tol) {
      rep.converged = true;
      break;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  if (!rep.converged && rep.message.empty()) rep.message = "max_iter reached";
  return out;
}

VectorXd dense_direct_solve(const MatrixXd& K, const VectorXd& F, int dense_limit) {
  if (K.rows() != K.cols() || K.rows() != F.size()) throw std::invalid_argument("dense_direct_solve: dimension mismatch");
  if (K.rows() > dense_limit)
    throw std::invalid_argument("dense_direct_solve: n = " + std::to_string(K.rows()) + " exceeds dense limit " +
                                std::to_string(dense_limit));
  if (K.rows() == 0) return VectorXd(0);
  Eigen::LLT<MatrixXd> llt(K);
  if (llt.info() == Eigen::Success && llt.rcond() > std::numeric_limits<double>::epsilon()) return llt.solve(F);
  Eigen::PartialPivLU<MatrixXd> lu(K);
  const double rcond = lu.rcond();
  if (!(rcond > std::numeric_limits<double>::epsilon()))
    throw SingularMatrixError("dense_direct_solve: matrix is singular (rcond " + std::to_string(rcond) + ")");
  return lu.solve(F);
}

VectorXd dense_direct_solve(const CsrMatrix& K, const VectorXd& F, int dense_limit) {
  if (K.rows() > dense_limit)
    throw std::invalid_argument("dense_direct_solve: n = " + std::to_string(K.rows()) + " exceeds dense limit " +
                                std::to_string(dense_limit));
  return dense_direct_solve(K.to_dense(), F, dense_limit);
}

}  // namespace pfem::fem
