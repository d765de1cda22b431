#include <cmath>
#include <iomanip>
#include <sstream>

#include "pfem/pipeline.hpp"
#include "pipeline_internal.hpp"

namespace pfem::pipe {

json to_json(const BenchOptions& o) {
  return {{"tol", o.tol},
          {"tol_fine", o.tol_fine},
          {"max_iter", o.max_iter},
          {"newton_max_iter", o.newton_max_iter},
          {"newton_fallback", o.newton_fallback},
          {"fallback_steps", o.fallback_steps}};
}

BenchOptions bench_options_from_json(const json& j) {
  check_keys(j, {"tol", "tol_fine", "max_iter", "newton_max_iter", "newton_fallback", "fallback_steps"}, "bench");
  BenchOptions o;
  try {
    o.tol = j.value("tol", o.tol);
    o.tol_fine = j.value("tol_fine", o.tol_fine);
    o.max_iter = j.value("max_iter", o.max_iter);
    o.newton_max_iter = j.value("newton_max_iter", o.newton_max_iter);
    o.newton_fallback = j.value("newton_fallback", o.newton_fallback);
    o.fallback_steps = j.value("fallback_steps", o.fallback_steps);
  } catch (const json::exception& e) {
    throw PipelineError(std::string("bench: ") + e.what());
  }
  if (!(o.tol > 0.0) || o.tol_fine < 0.0 || o.max_iter < 1 || o.newton_max_iter < 1 || o.fallback_steps < 1)
    throw PipelineError("bench: tolerances must be positive and iteration caps >= 1");
  return o;
}

namespace {

std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

VectorXd as_vector(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

double relative_residual(const fem::ReducedSystem& rs, const VectorXd& u) {
  const double fn = rs.F.norm();
  const double r = (rs.F - rs.K * u).norm();
  return fn > 0.0 ? r / fn : r;
}

}  // namespace

void BenchReport::aggregate() {
  double sz = 0.0, so = 0.0;
  int counted = 0;
  failures = skips = 0;
  std::vector<double> pre;
  double post = 0.0;
  int npost = 0;
  for (const auto& s : samples) {
    if (s.skipped) ++skips;
    if (s.failed_zero || s.failed_op) {
      ++failures;
      continue;
    }
    sz += s.iters_zero;
    so += s.iters_op;
    ++counted;
    if (std::isfinite(s.err_pre)) pre.push_back(s.err_pre);
    if (std::isfinite(s.err_post)) {
      post += s.err_post;
      ++npost;
    }
  }
  mean_iters_zero = counted ? sz / counted : 0.0;
  mean_iters_op = counted ? so / counted : 0.0;
  speedup = mean_iters_op > 0.0 ? mean_iters_zero / mean_iters_op
                                : (mean_iters_zero > 0.0 ? std::numeric_limits<double>::infinity() : 1.0);
  mean_err_pre = std_err_pre = 0.0;
  for (double e : pre) mean_err_pre += e;
  if (!pre.empty()) mean_err_pre /= static_cast<double>(pre.size());
  for (double e : pre) std_err_pre += (e - mean_err_pre) * (e - mean_err_pre);
  if (!pre.empty()) std_err_pre = std::sqrt(std_err_pre / static_cast<double>(pre.size()));
  mean_err_post = npost ? post / npost : 0.0;
}

json BenchReport::to_json() const {
  json per = json::array();
  for (const auto& s : samples)
    per.push_back({{"sample", s.id},
                   {"iters_zero", s.iters_zero},
                   {"iters_op", s.iters_op},
                   {"err_pre", std::isfinite(s.err_pre) ? json(s.err_pre) : json(nullptr)},
                   {"err_post", std::isfinite(s.err_post) ? json(s.err_post) : json(nullptr)},
                   {"err_zero", std::isfinite(s.err_zero) ? json(s.err_zero) : json(nullptr)},
                   {"skipped", s.skipped},
                   {"failed_zero", s.failed_zero},
                   {"failed_op", s.failed_op},
                   {"system_hash_zero", s.system_hash_zero},
                   {"system_hash_op", s.system_hash_op},
                   {"history_zero", s.history_zero},
                   {"history_op", s.history_op},
                   {"message", s.message}});
  return {{"solver", solver},
          {"options", pipe::to_json(options)},
          {"mean_iters_zero", mean_iters_zero},
          {"mean_iters_op", mean_iters_op},
          {"speedup", std::isfinite(speedup) ? json(speedup) : json(nullptr)},
          {"mean_err_pre", mean_err_pre},
          {"std_err_pre", std_err_pre},
          {"mean_err_post", mean_err_post},
          {"failures", failures},
          {"skips", skips},
          {"samples", per}};
}

std::string BenchReport::csv() const {
  std::ostringstream os;
  os << "sample,iters_zero,iters_op,err_pre,err_post,skipped,err_zero,failed_zero,failed_op,system_hash\n";
  for (const auto& s : samples)
    os << s.id << "," << s.iters_zero << "," << s.iters_op << "," << fmt(s.err_pre) << "," << fmt(s.err_post) << ","
       << (s.skipped ? 1 : 0) << "," << fmt(s.err_zero) << "," << (s.failed_zero ? 1 : 0) << ","
       << (s.failed_op ? 1 : 0) << "," << s.system_hash_zero << "\n";
  return os.str();
}

void write_bench(const BenchReport& r, const fs::path& out) {
  write_text(out / "bench.csv", r.csv());
  write_json(out / "bench.json", r.to_json());
}

BenchReport warmstart_bench(const Dataset& data, const GuessFn& guess, const std::vector<std::optional<Reference>>& refs,
                            const BenchOptions& o) {
  BenchReport rep;
  rep.options = o;
  const bool newton = data.spec.material == fem::MaterialKind::NeoHookeanPlaneStrain;
  rep.solver = newton ? "newton" : "cg";
  const double nan = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    BenchSample b;
    b.id = s.id;
    b.err_pre = b.err_post = b.err_zero = nan;
    const mesh::Mesh m = loaded_mesh(data.mesh_of(s), s);
    const fem::Material mat = sample_material(data.spec, s);
    const VectorXd Uop = guess(data, s);
    const int nc = fem::components(mat.kind);
    if (Uop.size() != static_cast<Eigen::Index>(m.num_nodes()) * nc)
      throw PipelineError("sample " + std::to_string(s.id) + ": guess has the wrong length");
    VectorXd Uzero, Upost;

    if (!newton) {
      const auto sys = mat.kind == fem::MaterialKind::Poisson ? fem::assemble_poisson(m, mat)
                                                               : fem::assemble_linear_elasticity(m, mat);
      const auto rs = fem::apply_dirichlet(sys.K, sys.F, fem::dirichlet_constraints(m, nc));
      const auto z = fem::cg_solve(rs.K, rs.F, VectorXd::Zero(rs.F.size()), o.tol, o.max_iter);
      b.system_hash_zero = hex(fem::hash_vector(rs.F, rs.K.hash()));
      b.iters_zero = z.report.iterations;
      b.failed_zero = !z.report.converged;
      b.history_zero = z.report.residual_history;
      Uzero = rs.reconstruct(z.U);

      const VectorXd u0 = rs.restrict_to_free(Uop);
      const double r0 = relative_residual(rs, u0);
      b.system_hash_op = hex(fem::hash_vector(rs.F, rs.K.hash()));
      if (o.tol_fine > 0.0 && r0 < o.tol_fine) {
        b.skipped = true;
        b.history_op = {r0};
        Upost = Uop;
      } else {
        const auto w = fem::cg_solve(rs.K, rs.F, u0, o.tol, o.max_iter);
        b.iters_op = w.report.iterations;
        b.failed_op = !w.report.converged;
        b.history_op = w.report.residual_history;
        Upost = rs.reconstruct(w.U);
      }
      if (b.failed_zero || b.failed_op) b.message = "cg did not reach tol within max_iter";
    } else {
      fem::NewtonOptions no;
      no.tol = o.tol;
      no.max_iter = o.newton_max_iter;
      no.load_steps = 1;
      auto system_hash = [&] {
        return hex(fem::hash_vector(as_vector(s.nu), fem::hash_vector(as_vector(s.E), fem::hash_vector(fem::external_force(m, mat)))));
      };
      b.system_hash_zero = system_hash();
      no.initial_guess_label = "zero";
      auto z = fem::newton_solve(m, mat, VectorXd::Zero(Uop.size()), no);
      b.iters_zero = z.report.iterations;
      b.failed_zero = !z.report.converged;
      b.history_zero = z.report.residual_history;
      Uzero = z.U;
      if (b.failed_zero) b.message = "zero guess: " + z.report.message;

      b.system_hash_op = system_hash();
      double r0 = std::numeric_limits<double>::infinity();
      try {
        r0 = fem::residual(m, mat, Uop).norm;
      } catch (const fem::InversionError&) {
      }
      if (o.tol_fine > 0.0 && r0 < o.tol_fine) {
        b.skipped = true;
        b.history_op = {r0};
        Upost = Uop;
      } else {
        no.initial_guess_label = "operator";
        auto w = fem::newton_solve(m, mat, Uop, no);
        b.iters_op = w.report.iterations;
        b.failed_op = !w.report.converged;
        b.history_op = w.report.residual_history;
        Upost = w.U;
        if (b.failed_op) b.message += (b.message.empty() ? "" : "; ") + std::string("operator guess: ") + w.report.message;
      }
      if (o.newton_fallback && (b.failed_zero || b.failed_op)) {
        fem::NewtonOptions fb = no;
        fb.load_steps = o.fallback_steps;
        const auto f = fem::newton_solve(m, mat, VectorXd::Zero(Uop.size()), fb);
        b.message += "; fallback with " + std::to_string(o.fallback_steps) + " load steps " +
                     (f.report.converged ? "converged" : "failed");
      }
    }

    if (i < refs.size() && refs[i] && refs[i]->converged && refs[i]->U.size() == Uop.size()) {
      const VectorXd& ref = refs[i]->U;
      b.err_pre = relative_error(Uop, ref);
      b.err_post = relative_error(Upost, ref);
      b.err_zero = relative_error(Uzero, ref);
    }
    rep.samples.push_back(std::move(b));
  }
  rep.aggregate();
  return rep;
}

BenchReport warmstart_bench(const Surrogate& model, const Dataset& data,
                            const std::vector<std::optional<Reference>>& refs, const BenchOptions& options) {
  return warmstart_bench(
      data, [&](const Dataset& d, const Sample& s) { return model.predict(d, s); }, refs, options);
}

// ---------------------------------------------------------------------------

fem::SolveResult run_fem(const mesh::Mesh& m, const fem::Material& mat, const FemRunOptions& o) {
  mesh::validate(m);
  if (mat.kind == fem::MaterialKind::NeoHookeanPlaneStrain || o.solver == "newton") {
    if (mat.kind != fem::MaterialKind::NeoHookeanPlaneStrain)
      throw PipelineError("solver 'newton' needs the neo_hookean material");
    fem::NewtonOptions no;
    no.tol = o.tol;
    no.load_steps = o.load_steps;
    no.max_iter = std::min(o.max_iter, 200);
    return fem::newton_solve(m, mat, VectorXd::Zero(2 * static_cast<Eigen::Index>(m.num_nodes())), no);
  }
  const int nc = fem::components(mat.kind);
  const auto sys = mat.kind == fem::MaterialKind::Poisson ? fem::assemble_poisson(m, mat)
                                                           : fem::assemble_linear_elasticity(m, mat);
  const auto rs = fem::apply_dirichlet(sys.K, sys.F, fem::dirichlet_constraints(m, nc));
  fem::SolveResult out;
  if (o.solver == "dense") {
    const VectorXd u = fem::dense_direct_solve(rs.K, rs.F);
    out.U = rs.reconstruct(u);
    out.report.solver = "dense";
    out.report.tol = o.tol;
    out.report.converged = true;
    out.report.residual_history = {relative_residual(rs, u)};
    return out;
  }
  if (o.solver != "auto" && o.solver != "cg") throw PipelineError("unknown solver '" + o.solver + "' (auto, cg, dense, newton)");
  out = fem::cg_solve(rs.K, rs.F, VectorXd::Zero(rs.F.size()), o.tol, o.max_iter);
  out.U = rs.reconstruct(out.U);
  return out;
}

double classical_patch_test(fem::MaterialKind kind) {
  mesh::Mesh m;
  m.element_type = mesh::ElementType::Q4;
  m.nodes = {{0, 0}, {0.5, 0}, {1, 0}, {0, 0.5}, {0.62, 0.41}, {1, 0.5}, {0, 1}, {0.45, 1}, {1, 1}};
  m.connectivity = {0, 1, 4, 3, 1, 2, 5, 4, 3, 4, 7, 6, 4, 5, 8, 7};
  auto exact = [](const mesh::Vec2& p) {
    return std::array<double, 2>{1e-3 + 2e-3 * p[0] + 3e-3 * p[1], -1e-3 + 1.5e-3 * p[0] - 2.5e-3 * p[1]};
  };
  for (int v = 0; v < 9; ++v) {
    if (v == 4) continue;
    const auto u = exact(m.nodes[v]);
    m.dirichlet.push_back({v, u[0], u[1]});
  }
  fem::Material mat;
  mat.kind = kind;
  const auto sys = fem::assemble_linear_elasticity(m, mat);
  const auto rs = fem::apply_dirichlet(sys.K, sys.F, fem::dirichlet_constraints(m, 2));
  const VectorXd U = rs.reconstruct(fem::dense_direct_solve(rs.K, rs.F));
  const auto u = exact(m.nodes[4]);
  return std::max(std::abs(U[8] - u[0]), std::abs(U[9] - u[1]));
}

}  // namespace pfem::pipe
