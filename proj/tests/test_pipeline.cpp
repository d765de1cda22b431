#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "pfem/checkpoint.hpp"
#include "pfem/pipeline.hpp"

using namespace pfem;
using namespace pfem::pipe;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pfem_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

op::TransolverConfig small_model() {
  op::TransolverConfig c;
  c.num_layers = 1;
  c.channels = 8;
  c.num_tokens = 4;
  c.heads = 2;
  return c;
}

ProblemSpec small_beam(int nx = 4, int ny = 2) {
  auto s = ProblemSpec::defaults(Problem::Beam);
  s.nx = nx;
  s.ny = ny;
  return s;
}

ProblemSpec small_plate(int n = 4) {
  auto s = ProblemSpec::defaults(Problem::Plate);
  s.nx = s.ny = n;
  return s;
}

// Independent oracle: dense elimination solve with Eigen's LDLT.
VectorXd dense_oracle(const mesh::Mesh& m, const fem::Material& mat) {
  const auto sys = fem::assemble_linear_elasticity(m, mat);
  const MatrixXd K = sys.K.to_dense();
  std::vector<bool> fixed(static_cast<std::size_t>(K.rows()), false);
  for (const auto& c : fem::dirichlet_constraints(m, 2)) fixed[c.dof] = true;
  std::vector<int> free;
  for (int i = 0; i < K.rows(); ++i)
    if (!fixed[i]) free.push_back(i);
  MatrixXd Kf(free.size(), free.size());
  VectorXd Ff(free.size());
  for (std::size_t a = 0; a < free.size(); ++a) {
    Ff[a] = sys.F[free[a]];
    for (std::size_t b = 0; b < free.size(); ++b) Kf(a, b) = K(free[a], free[b]);
  }
  const VectorXd uf = Kf.ldlt().solve(Ff);
  VectorXd U = VectorXd::Zero(K.rows());
  for (std::size_t a = 0; a < free.size(); ++a) U[free[a]] = uf[a];
  return U;
}

}  // namespace

TEST_CASE("problem specs validate their factors") {
  auto b = ProblemSpec::defaults(Problem::Beam);
  b.factors.geometry = true;
  CHECK_THROWS_AS(b.validate(), PipelineError);
  auto p = ProblemSpec::defaults(Problem::Plate);
  p.factors.geometry = true;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("imported meshes"), PipelineError);
  auto q = ProblemSpec::defaults(Problem::Poisson);
  q.material = fem::MaterialKind::PlaneStress;
  CHECK_THROWS_AS(q.validate(), PipelineError);
  for (auto pr : {Problem::Plate, Problem::Beam, Problem::Cook, Problem::Poisson}) {
    const auto s = ProblemSpec::defaults(pr);
    CHECK_NOTHROW(s.validate());
    CHECK(to_json(problem_spec_from_json(to_json(s))) == to_json(s));
  }
  auto j = to_json(small_beam());
  j["bogus"] = 1;
  CHECK_THROWS_WITH_AS(problem_spec_from_json(j), doctest::Contains("bogus"), PipelineError);
  CHECK(Factors{true, true, true}.tag() == "G+M+B");
}

TEST_CASE("dataset generation") {
  SUBCASE("single sample is reproducible by seed") {
    const auto a = make_dataset(small_beam(), 1, 42), b = make_dataset(small_beam(), 1, 42);
    CHECK(to_json(a.samples[0]) == to_json(b.samples[0]));
    CHECK(to_json(make_dataset(small_beam(), 1, 43).samples[0]) != to_json(a.samples[0]));
  }
  SUBCASE("beam samples share one mesh and vary materials and loads") {
    const auto d = make_dataset(small_beam(), 5, 1);
    CHECK(d.meshes.size() == 1);
    for (const auto& s : d.samples) CHECK(s.mesh_id == "base");
    CHECK(d.samples[0].E != d.samples[1].E);
    CHECK(d.samples[0].nu != d.samples[1].nu);
    CHECK(d.samples[0].traction != d.samples[1].traction);
    for (const auto& s : d.samples) {
      CHECK(s.features.rows() == d.meshes.at("base").num_nodes());
      CHECK(s.features.cols() == kFeatureCount);
      for (double e : s.E) CHECK((e >= 50 && e <= 150));
      for (double v : s.nu) CHECK((v >= 0.2 && v <= 0.3));
      for (const auto& t : s.traction) CHECK((t[1] <= 0.0 && t[1] >= -0.3));
    }
    // clamped nodes carry the dirichlet flag, loaded nodes the neumann flag
    const auto& m = d.meshes.at("base");
    for (int v : m.boundary_nodes("left")) CHECK(d.samples[0].features(v, 5) == 1.0);
    for (int v : m.boundary_nodes("right")) CHECK(d.samples[0].features(v, 6) == 1.0);
  }
  SUBCASE("cook geometry draws give distinct meshes") {
    auto s = ProblemSpec::defaults(Problem::Cook);
    s.nx = s.ny = 3;
    const auto d = make_dataset(s, 3, 5);
    CHECK(d.meshes.size() == 3);
    for (const auto& [id, m] : d.meshes) CHECK_NOTHROW(mesh::validate(m));
  }
  SUBCASE("two runs with the same seed are byte identical on disk") {
    const auto a = scratch("gen_a"), b = scratch("gen_b");
    generate_dataset(small_beam(), 3, 9, a);
    generate_dataset(small_beam(), 3, 9, b);
    for (const auto& sub : {"samples/0000.json", "samples/0002.json", "meshes/base.json", "spec.json"})
      CHECK(slurp(a / sub) == slurp(b / sub));
    const auto d = load_dataset(a);
    CHECK(d.samples.size() == 3);
    CHECK(to_json(d.samples[1]) == to_json(make_dataset(small_beam(), 3, 9).samples[1]));
    // no solution fields in the training inputs
    CHECK_FALSE(fs::exists(a / "refs"));
    CHECK(slurp(a / "samples/0000.json").find("\"U\"") == std::string::npos);
  }
}

TEST_CASE("references") {
  SUBCASE("linear reference matches an independent dense solve") {
    const auto d = make_dataset(small_plate(), 2, 3);
    for (const auto& s : d.samples) {
      const auto r = solve_reference(d, s);
      CHECK(r.converged);
      const VectorXd U = dense_oracle(loaded_mesh(d.mesh_of(s), s), sample_material(d.spec, s));
      CHECK((r.U - U).norm() <= 1e-10 * U.norm());
    }
  }
  SUBCASE("zero load gives a zero reference") {
    auto s = small_plate();
    s.traction_x = 0.0;
    s.factors.boundary = false;
    const auto d = make_dataset(s, 1, 0);
    CHECK(solve_reference(d, d.samples[0]).U.norm() == 0.0);
  }
  SUBCASE("hyperelastic reference converges tightly") {
    const auto d = make_dataset(small_beam(6, 2), 2, 4);
    for (const auto& s : d.samples) {
      const auto r = solve_reference(d, s);
      CHECK(r.converged);
      CHECK(r.residual <= 1e-10);
    }
  }
  SUBCASE("files and the read audit") {
    const auto dir = scratch("refs");
    generate_dataset(small_plate(), 2, 1, dir);
    compute_references(dir, 2);
    const auto before = reference_reads(dir);
    const auto r = load_reference(dir, 1);
    REQUIRE(r);
    CHECK(r->converged);
    CHECK(reference_reads(dir) == before + 1);
    CHECK_FALSE(load_reference(dir, 7));
    CHECK(to_json(reference_from_json(to_json(*r))) == to_json(*r));
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(learning_rate(c, 0) == 0.002);
  CHECK(learning_rate(c, 999) == 0.002);
  CHECK(learning_rate(c, 1000) == doctest::Approx(0.0018).epsilon(1e-14));
  CHECK(learning_rate(c, 2500) == doctest::Approx(0.00162).epsilon(1e-14));
  c.decay = 0.0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  CHECK(to_json(train_config_from_json(to_json(c))) == to_json(c));
  CHECK_THROWS_AS(train_config_from_json({{"epochz", 3}}), PipelineError);
}

TEST_CASE("training") {
  TrainConfig c;
  c.model = small_model();
  c.epochs = 2;
  c.checkpoint_every = 1;
  SUBCASE("single-sample loss decreases over the first 100 steps") {
    // Adam oscillates step to step at the default rate, so compare 20-step window means
    const auto spec = ProblemSpec::defaults(Problem::Beam);
    const auto d = make_dataset(spec, 1, 0);
    TrainConfig pc;
    pc.epochs = 100;
    auto model = make_surrogate(pc, spec);
    auto opt = ad::AdamState::fresh(model.net.params().flat_size());
    const auto r = train(pc, d, model, opt);
    REQUIRE(r.losses.size() == 100);
    double prev = std::numeric_limits<double>::infinity();
    for (int w = 0; w < 5; ++w) {
      double mean = 0.0;
      for (int i = 0; i < 20; ++i) mean += r.losses[20 * w + i] / 20.0;
      CHECK(mean < prev);
      prev = mean;
    }
    CHECK(r.losses.back() < r.losses.front());
  }
  SUBCASE("resumed training reproduces the uninterrupted trajectory") {
    const auto d = make_dataset(small_beam(), 4, 2);
    const auto out_a = scratch("resume_a"), out_b = scratch("resume_b");
    auto m1 = make_surrogate(c, d.spec);
    auto o1 = ad::AdamState::fresh(m1.net.params().flat_size());
    const auto full = train(c, d, m1, o1, 0, out_a);
    REQUIRE(full.losses.size() == 8);

    ad::AdamState o2;
    json extra;
    auto m2 = load_surrogate(out_a / "epoch_0001.ckpt", &o2, &extra);
    CHECK(extra.at("epoch") == 1);
    const auto rest = train(c, d, m2, o2, 1, out_b);
    REQUIRE(rest.losses.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(rest.losses[i] == full.losses[4 + i]);
    CHECK(m2.net.params().flat() == m1.net.params().flat());

    std::ifstream is(out_a / "metrics.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "step,epoch,loss,lr,test_error,train_refs_read");
  }
  SUBCASE("training never reads the training references") {
    const auto dir = scratch("audit");
    generate_dataset(small_plate(), 3, 1, dir);
    compute_references(dir, 1);
    const auto r = train(c, dir, scratch("audit_out"));
    CHECK(r.train_refs_read == 0);
    CHECK(fs::exists(scratch("audit_out").parent_path()));
  }
  SUBCASE("non-finite loss aborts and restores the last good parameters") {
    const auto d = make_dataset(small_plate(), 2, 1);
    TrainConfig bad = c;
    bad.output_scale = 1e300;
    auto m = make_surrogate(bad, d.spec);
    const auto before = m.net.params().flat();
    auto o = ad::AdamState::fresh(m.net.params().flat_size());
    const auto out = scratch("abort");
    const auto r = train(bad, d, m, o, 0, out);
    CHECK(r.aborted);
    CHECK(r.message.find("non-finite") != std::string::npos);
    CHECK(m.net.params().flat() == before);
    CHECK(fs::exists(out / "last_good.ckpt"));
  }
  SUBCASE("inverted samples are skipped and counted") {
    const auto d = make_dataset(small_beam(), 3, 1);
    TrainConfig big = c;
    big.output_scale = 50.0;
    auto m = make_surrogate(big, d.spec);
    auto o = ad::AdamState::fresh(m.net.params().flat_size());
    const auto r = train(big, d, m, o);
    CHECK(r.skipped_inversions > 0);
    CHECK_FALSE(r.aborted);
  }
}

TEST_CASE("evaluation") {
  VectorXd ref(4), zero = VectorXd::Zero(4);
  ref << 1, -2, 0.5, 3;
  CHECK(relative_error(ref, ref) == 0.0);
  CHECK(relative_error(zero, ref) == 1.0);
  CHECK(std::isinf(relative_error(ref, zero)));

  const auto d = make_dataset(small_plate(), 3, 2);
  TrainConfig c;
  c.model = small_model();
  const auto model = make_surrogate(c, d.spec);
  std::vector<std::optional<Reference>> refs;
  for (const auto& s : d.samples) refs.push_back(solve_reference(d, s));
  refs[1].reset();
  const auto r = evaluate(model, d, refs);
  CHECK(r.skipped == 1);
  CHECK(r.errors.size() == 2);
  CHECK(r.mean > 0.0);
}

TEST_CASE("warm start benchmark") {
  SUBCASE("exact guess needs no iterations and triggers the skip rule") {
    const auto d = make_dataset(small_plate(6), 3, 1);
    std::vector<std::optional<Reference>> refs;
    for (const auto& s : d.samples) refs.push_back(solve_reference(d, s));
    GuessFn exact = [&](const Dataset&, const Sample& s) { return refs[static_cast<std::size_t>(s.id)]->U; };
    BenchOptions o;
    o.tol = 1e-3;
    auto r = warmstart_bench(d, exact, refs, o);
    for (const auto& b : r.samples) {
      CHECK(b.iters_op == 0);
      CHECK(b.iters_zero > 0);
      CHECK(b.system_hash_zero == b.system_hash_op);
      CHECK(b.err_pre < 1e-12);
    }
    o.tol_fine = 1e-8;
    r = warmstart_bench(d, exact, refs, o);
    CHECK(r.skips == 3);
    CHECK(r.csv().rfind("sample,iters_zero,iters_op,err_pre,err_post,skipped", 0) == 0);
  }
  SUBCASE("newton arms on the hyperelastic beam") {
    const auto d = make_dataset(small_beam(6, 2), 2, 1);
    std::vector<std::optional<Reference>> refs;
    for (const auto& s : d.samples) refs.push_back(solve_reference(d, s));
    BenchOptions o;
    o.tol = 1e-6;
    const auto r = warmstart_bench(
        d, [&](const Dataset&, const Sample& s) { return refs[static_cast<std::size_t>(s.id)]->U; }, refs, o);
    CHECK(r.solver == "newton");
    for (const auto& b : r.samples) {
      CHECK(b.iters_op == 0);
      CHECK(b.iters_zero >= 2);
      CHECK(b.err_zero < 1e-4);
    }
  }
  SUBCASE("speedup is the ratio of means") {
    BenchReport r;
    for (auto [z, p] : {std::pair{10, 1}, std::pair{30, 5}}) {
      BenchSample b;
      b.iters_zero = z;
      b.iters_op = p;
      r.samples.push_back(b);
    }
    BenchSample failed;
    failed.iters_zero = 1000;
    failed.failed_op = true;
    r.samples.push_back(failed);
    r.aggregate();
    CHECK(r.speedup == doctest::Approx(20.0 / 3.0));
    CHECK(r.failures == 1);
  }
}

TEST_CASE("patch test") {
  auto spec = small_beam(8, 8);
  spec.factors = {};
  PatchTestOptions o;
  o.model = small_model();
  o.model.channels = 16;
  const auto pass = patch_test(spec, o);
  CHECK(pass.passed);
  CHECK(pass.steps_to_threshold >= 0);
  CHECK(pass.final_error <= 0.05);
  CHECK(pass.grad_norm_final * 10.0 <= pass.grad_norm_initial);

  PatchTestOptions z = o;
  z.model.num_layers = 0;
  z.model.channels = 1;
  z.model.heads = 1;
  z.model.num_tokens = 1;
  z.max_steps = 1000;
  const auto fail = patch_test(spec, z);
  CHECK_FALSE(fail.passed);
  CHECK(fail.best_error > 0.05);
}

TEST_CASE("convergence bound diagnostic") {
  const MatrixXd K = poisson_1d(20);
  const double rate = -std::log(std::cos(std::numbers::pi / 21.0));
  const auto d = convergence_bound_check(K, {3, 6}, {10.0, 1.0, 0.0}, 1);
  CHECK(d.spectral_radius == doctest::Approx(std::cos(std::numbers::pi / 21.0)).epsilon(1e-12));
  CHECK(d.rate == doctest::Approx(rate).epsilon(1e-10));
  CHECK(d.bound_holds);
  auto find = [&](int m, double e0) {
    for (const auto& r : d.runs)
      if (r.m == m && r.e0_norm == e0) return r.observed;
    return -1;
  };
  CHECK(find(3, 0.0) == 0);
  CHECK(find(6, 0.0) == 0);
  const double one_decade = std::log(10.0) / rate;
  CHECK(find(3, 1.0) <= find(3, 10.0));
  CHECK(std::abs((find(3, 10.0) - find(3, 1.0)) - one_decade) <= 0.2 * one_decade);
  CHECK(std::abs((find(6, 1.0) - find(3, 1.0)) - 3 * one_decade) <= 0.2 * 3 * one_decade);
  // B = I - D^-1 K with a dominant off-diagonal is not contractive
  MatrixXd bad(2, 2);
  bad << 1, 2, 2, 1;
  CHECK_THROWS_WITH_AS(convergence_bound_check(bad, {2}, {1.0}), doctest::Contains("not contractive"), PipelineError);
  // the norm estimates approach rho
  CHECK(d.norm_power.back().second == doctest::Approx(d.spectral_radius).epsilon(1e-9));
}

TEST_CASE("fem helpers") {
  CHECK(classical_patch_test() <= 1e-10);
  CHECK(classical_patch_test(fem::MaterialKind::PlaneStrain) <= 1e-10);
  auto m = make_dataset(small_plate(6), 1, 0);
  const auto mesh = loaded_mesh(m.meshes.at("base"), m.samples[0]);
  const auto mat = sample_material(m.spec, m.samples[0]);
  FemRunOptions o;
  o.tol = 1e-10;
  const auto cg = run_fem(mesh, mat, o);
  CHECK(cg.report.converged);
  o.solver = "dense";
  const auto dense = run_fem(mesh, mat, o);
  CHECK((cg.U - dense.U).norm() <= 1e-6 * dense.U.norm());
  o.solver = "bogus";
  CHECK_THROWS(run_fem(mesh, mat, o));
}
