#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "pfem/pipeline.hpp"

namespace pfem::pipe {

MatrixXd poisson_1d(int n) {
  if (n < 1) throw PipelineError("poisson_1d: n must be >= 1");
  MatrixXd K = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    K(i, i) = 2.0;
    if (i > 0) K(i, i - 1) = -1.0;
    if (i + 1 < n) K(i, i + 1) = -1.0;
  }
  return K;
}

json ConvergenceDiagnostic::to_json() const {
  json runs_j = json::array();
  for (const auto& r : runs)
    runs_j.push_back({{"m", r.m},
                      {"e0_norm", r.e0_norm},
                      {"observed", r.observed},
                      {"bound", r.bound},
                      {"checked", r.checked},
                      {"holds", r.holds}});
  json np = json::array(), os = json::array(), rs = json::array();
  for (const auto& [k, v] : norm_power) np.push_back({{"k", k}, {"value", v}});
  for (const auto& [m, v] : observed_savings) os.push_back({{"m", m}, {"savings", v}});
  for (const auto& [m, v] : relative_savings) rs.push_back({{"m", m}, {"relative", v}});
  return {{"n", n},
          {"iteration", iteration},
          {"spectral_radius", spectral_radius},
          {"rate", rate},
          {"norm_power", np},
          {"runs", runs_j},
          {"predicted_savings", predicted_savings},
          {"observed_savings", os},
          {"relative_savings", rs},
          {"bound_holds", bound_holds},
          {"savings_within_20pct", savings_within_20pct},
          {"diminishing", diminishing}};
}

ConvergenceDiagnostic convergence_bound_check(const MatrixXd& K, const std::vector<int>& m_values,
                                              const std::vector<double>& e0_norms, std::uint64_t seed) {
  const Eigen::Index n = K.rows();
  if (n == 0 || K.cols() != n) throw PipelineError("convergence check: K must be square and non-empty");
  if ((K.diagonal().array() <= 0.0).any()) throw PipelineError("convergence check: Jacobi needs a positive diagonal");
  if (m_values.empty() || e0_norms.empty()) throw PipelineError("convergence check: need tolerances and guesses");

  ConvergenceDiagnostic d;
  d.n = static_cast<int>(n);
  const VectorXd dinv = K.diagonal().cwiseInverse();
  const MatrixXd B = MatrixXd::Identity(n, n) - dinv.asDiagonal() * K;
  d.spectral_radius = Eigen::EigenSolver<MatrixXd>(B, false).eigenvalues().cwiseAbs().maxCoeff();
  if (!(d.spectral_radius < 1.0)) {
    std::ostringstream os;
    os << "iteration matrix is not contractive: rho(B) = " << d.spectral_radius;
    throw PipelineError(os.str());
  }
  d.rate = -std::log(d.spectral_radius);

  MatrixXd Bk = MatrixXd::Identity(n, n);
  int k = 0;
  for (int target : {1, 2, 5, 10, 20, 50, 100, 200, 500, 1000}) {
    for (; k < target; ++k) Bk = B * Bk;
    const double s = Eigen::JacobiSVD<MatrixXd>(Bk).singularValues()(0);
    d.norm_power.emplace_back(target, std::pow(s, 1.0 / target));
  }

  // fixed solution and error direction; Jacobi iterates on X, the error is measured against X*
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  VectorXd xs(n), dir(n);
  for (auto& v : xs) v = g(rng);
  for (auto& v : dir) v = g(rng);
  dir.normalize();
  const VectorXd f = dinv.cwiseProduct(K * xs);
  const int cap = 10000000;

  std::map<std::pair<int, double>, int> observed;
  for (int m : m_values) {
    const double tol = std::pow(10.0, -m);
    for (double e0 : e0_norms) {
      ConvergenceRun r;
      r.m = m;
      r.e0_norm = e0;
      VectorXd x = xs + e0 * dir;
      int it = 0;
      while ((x - xs).norm() > tol && it < cap) {
        x = B * x + f;
        ++it;
      }
      if (it == cap) throw PipelineError("convergence check: iteration cap reached");
      r.observed = it;
      r.bound = e0 > 0.0 ? (m * std::log(10.0) + std::log(e0)) / d.rate : 0.0;
      r.checked = e0 > 0.0 && it >= 10;
      r.holds = !r.checked || it <= r.bound;
      d.bound_holds = d.bound_holds && r.holds;
      observed[{m, e0}] = it;
      d.runs.push_back(r);
    }
  }

  const double worst = *std::max_element(e0_norms.begin(), e0_norms.end());
  const double best = *std::min_element(e0_norms.begin(), e0_norms.end());
  if (best > 0.0 && worst > best) {
    d.predicted_savings = std::log(worst / best) / d.rate;
    double prev_rel = std::numeric_limits<double>::infinity();
    for (int m : m_values) {
      const int kw = observed[{m, worst}], kb = observed[{m, best}];
      if (kw < 10 || kb < 10) continue;
      const double sv = kw - kb;
      d.observed_savings.emplace_back(m, sv);
      d.savings_within_20pct = d.savings_within_20pct && std::abs(sv - d.predicted_savings) <= 0.2 * d.predicted_savings;
      const double rel = sv / kw;
      d.relative_savings.emplace_back(m, rel);
      d.diminishing = d.diminishing && rel <= prev_rel;
      prev_rel = rel;
    }
  }
  return d;
}

}  // namespace pfem::pipe
