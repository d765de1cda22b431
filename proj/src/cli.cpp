#include "pfem/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "pfem/checkpoint.hpp"
#include "pfem/pipeline.hpp"

namespace pfem::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Input problems (bad flags, files, configs) map to exit code 1.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failures map to exit code 2 and leave a report behind.
class NumericalFailure : public std::runtime_error {
 public:
  NumericalFailure(const std::string& what, json report) : std::runtime_error(what), report(std::move(report)) {}
  json report;
};

json patch_defaults() {
  pipe::PatchTestOptions o;
  return {{"max_steps", o.max_steps}, {"threshold", o.threshold},     {"lr", o.lr},
          {"check_every", o.check_every}, {"window", o.window},       {"output_scale", o.output_scale},
          {"seed", o.seed},           {"model", op::to_json(o.model)}};
}

pipe::PatchTestOptions patch_from_json(const json& j) {
  pipe::PatchTestOptions o;
  o.max_steps = j.at("max_steps").get<int>();
  o.threshold = j.at("threshold").get<double>();
  o.lr = j.at("lr").get<double>();
  o.check_every = j.at("check_every").get<int>();
  o.window = j.at("window").get<int>();
  o.output_scale = j.at("output_scale").get<double>();
  o.seed = j.at("seed").get<std::uint64_t>();
  o.model = op::config_from_json(j.at("model"));
  if (o.max_steps < 0 || o.check_every < 1 || o.window < 1 || !(o.threshold > 0) || !(o.lr > 0))
    throw InputError("patch: max_steps >= 0, check_every >= 1, window >= 1, threshold > 0 and lr > 0 required");
  return o;
}

json fem_defaults() {
  pipe::FemRunOptions o;
  return {{"tol", o.tol},         {"solver", o.solver}, {"max_iter", o.max_iter}, {"load_steps", o.load_steps},
          {"material", "plane_stress"}, {"E", 100.0},   {"nu", 0.25}};
}

json convergence_defaults() {
  return {{"n", 20}, {"m_values", {2, 3, 4, 5, 6, 7, 8}}, {"e0_norms", {10.0, 1.0, 0.1}}, {"seed", 0}};
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

std::string env_out_root() {
  const char* e = std::getenv("PFEM_OUT");
  return e && *e ? e : "pfem_out";
}

json read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw InputError(path + ": " + e.what());
  }
  if (!j.is_object()) throw InputError(path + ": config must be a JSON object");
  if (!j.contains("schema_version")) throw InputError(path + ": missing schema_version");
  if (j.at("schema_version") != 1) throw InputError(path + ": unsupported schema_version " + j.at("schema_version").dump());
  return j;
}

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool verbose = false;
  std::string problem;
};

void add_common(CLI::App* sub, Common& c, bool with_problem) {
  sub->add_option("--config", c.config_file, "JSON config file (schema_version 1)");
  sub->add_option("--set", c.overrides, "Override a config entry, e.g. --set train.epochs=5 (repeatable)");
  sub->add_option("--out", c.out, "Output directory (default $PFEM_OUT/<command> or pfem_out/<command>)");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--threads", c.threads, "Worker threads for per-sample work (default 1)")->check(CLI::PositiveNumber);
  sub->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
  if (with_problem)
    sub->add_option("--problem", c.problem, "Problem: plate, beam, cook, poisson")
        ->check(CLI::IsMember({"plate", "beam", "cook", "poisson"}));
}

// defaults -> config file -> --set overrides -> explicit flags
json resolve(const std::string& command, const Common& c) {
  json file = c.config_file.empty() ? json::object() : read_config_file(c.config_file);
  std::string problem = "beam";
  if (file.contains("problem") && file["problem"].is_object() && file["problem"].contains("problem"))
    problem = file["problem"]["problem"].get<std::string>();
  for (const auto& o : c.overrides)
    if (o.rfind("problem.problem=", 0) == 0) problem = parse_value(o.substr(16)).get<std::string>();
  if (!c.problem.empty()) problem = c.problem;

  json cfg = default_config(problem);
  if (command == "patch-test") {
    cfg["problem"]["nx"] = 8;
    cfg["problem"]["ny"] = 8;
    cfg["problem"]["factors"] = {{"geometry", false}, {"material", false}, {"boundary", false}};
  }
  file.erase("command");
  file.erase("flags");
  merge_strict(cfg, file);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  cfg["problem"]["problem"] = problem;
  if (c.seed) {
    cfg["problem"]["seed"] = *c.seed;
    cfg["train"]["seed"] = *c.seed;
    cfg["patch"]["seed"] = *c.seed;
    cfg["convergence"]["seed"] = *c.seed;
  }
  return cfg;
}

fs::path out_dir(const std::string& command, const Common& c) {
  return c.out.empty() ? fs::path(env_out_root()) / command : fs::path(c.out);
}

void snapshot(const fs::path& out, const std::string& command, const json& cfg, const json& flags) {
  json snap = cfg;
  snap["command"] = command;
  snap["flags"] = flags;
  pipe::write_json(out / (command + ".config.json"), snap);
}

std::vector<std::optional<pipe::Reference>> refs_for(const fs::path& dir, const pipe::Dataset& d) {
  std::vector<std::optional<pipe::Reference>> refs;
  for (const auto& s : d.samples) refs.push_back(pipe::load_reference(dir, s.id));
  return refs;
}

void require_file(const std::string& p, const char* what) {
  if (p.empty()) throw InputError(std::string(what) + " is required");
  if (!fs::exists(p)) throw InputError(std::string(what) + " not found: " + p);
}

}  // namespace

json default_config(const std::string& problem) {
  return {{"schema_version", 1},
          {"problem", pipe::to_json(pipe::ProblemSpec::defaults(pipe::problem_from_string(problem)))},
          {"train", pipe::to_json(pipe::TrainConfig{})},
          {"bench", pipe::to_json(pipe::BenchOptions{})},
          {"patch", patch_defaults()},
          {"fem", fem_defaults()},
          {"convergence", convergence_defaults()}};
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw InputError("config" + (where.empty() ? "" : " '" + where + "'") + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw InputError("config: unknown key '" + path + "'");
    if (base[key].is_object() && value.is_object())
      merge_strict(base[key], value, path);
    else
      base[key] = value;
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InputError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw InputError("config: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = parse_value(assignment.substr(eq + 1));
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

int run(const std::vector<std::string>& args_in) {
  CLI::App app{"Pretrained finite element method toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common c;
  int n = 0;
  std::string data, test, ckpt, resume, mesh_path, material, solver;
  std::optional<double> tol, tol_fine, E, nu;
  std::optional<int> load_steps, size;

  auto* gen = app.add_subcommand("gen", "Generate a label-free dataset");
  add_common(gen, c, true);
  gen->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);

  auto* refs = app.add_subcommand("refs", "Compute FEM reference solutions for a dataset (evaluation only)");
  add_common(refs, c, false);
  refs->add_option("--data", data, "Dataset directory")->required();

  auto* train = app.add_subcommand("train", "Physics-only training");
  add_common(train, c, false);
  train->add_option("--data", data, "Training dataset directory")->required();
  train->add_option("--test", test, "Test dataset directory with refs/ for per-epoch errors");
  train->add_option("--resume", resume, "Checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "Relative errors of a checkpoint against references");
  add_common(eval, c, false);
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--data", data, "Dataset directory with refs/")->required();

  auto* warm = app.add_subcommand("warmstart", "Zero guess vs operator guess solver benchmark");
  add_common(warm, c, false);
  warm->add_option("--ckpt", ckpt, "Checkpoint")->required();
  warm->add_option("--data", data, "Dataset directory")->required();
  warm->add_option("--tol", tol, "Solver tolerance (CG: relative residual, Newton: residual norm)");
  warm->add_option("--tol-fine", tol_fine, "Skip the solve when the guess residual is below this");

  auto* patch = app.add_subcommand("patch-test", "Single-sample physics-only training check");
  add_common(patch, c, true);

  auto* femc = app.add_subcommand("fem", "Solve one mesh with FEM");
  add_common(femc, c, false);
  femc->add_option("--mesh", mesh_path, "Mesh JSON")->required();
  femc->add_option("--material", material, "plane_stress, plane_strain, neo_hookean, poisson");
  femc->add_option("--tol", tol, "Tolerance");
  femc->add_option("--solver", solver, "auto, cg, dense, newton");
  femc->add_option("--E", E, "Young's modulus (poisson: conductivity)");
  femc->add_option("--nu", nu, "Poisson's ratio (poisson: source)");
  femc->add_option("--load-steps", load_steps, "Newton load steps");

  auto* conv = app.add_subcommand("convergence-check", "Jacobi iteration count bound diagnostic");
  add_common(conv, c, false);
  conv->add_option("--n", size, "System size (1D Poisson)")->check(CLI::PositiveNumber);

  auto* vm = app.add_subcommand("validate-mesh", "Validate a mesh file");
  add_common(vm, c, false);
  vm->add_option("--mesh", mesh_path, "Mesh JSON")->required();

  std::vector<std::string> rev(args_in.rbegin(), args_in.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  fs::path out;
  try {
    const json cfg = resolve(command, c);
    out = out_dir(command == "gen" ? "data" : command, c);
    fs::create_directories(out);
    json flags = {{"out", out.string()}, {"threads", c.threads}};
    snapshot(out, command, cfg, flags);
    auto log = [&](const std::string& m) {
      if (c.verbose) std::cerr << m << "\n";
    };

    if (command == "gen") {
      const auto spec = pipe::problem_spec_from_json(cfg.at("problem"));
      pipe::generate_dataset(spec, n, spec.seed, out);
      std::cout << "wrote " << n << " samples to " << out.string() << "\n";
    } else if (command == "refs") {
      require_file(data, "--data");
      pipe::compute_references(data, c.threads);
      const auto d = pipe::load_dataset(data);
      int failed = 0;
      for (const auto& s : d.samples) {
        const auto r = pipe::load_reference(data, s.id);
        if (!r || !r->converged) ++failed;
      }
      std::cout << "references: " << d.samples.size() - failed << " converged, " << failed << " failed\n";
      if (failed) throw NumericalFailure(std::to_string(failed) + " reference solves failed", {{"failed", failed}});
    } else if (command == "train") {
      require_file(data, "--data");
      const auto tc = pipe::train_config_from_json(cfg.at("train"));
      std::optional<fs::path> tdir, rdir;
      if (!test.empty()) tdir = test;
      if (!resume.empty()) {
        require_file(resume, "--resume");
        rdir = resume;
      }
      log("training on " + data);
      const auto r = pipe::train(tc, data, out, tdir, rdir);
      json summary = {{"steps", r.steps},
                      {"epochs", r.epochs},
                      {"skipped_inversions", r.skipped_inversions},
                      {"train_refs_read", r.train_refs_read},
                      {"aborted", r.aborted},
                      {"budget_hit", r.budget_hit},
                      {"message", r.message},
                      {"checkpoint", r.checkpoint.string()},
                      {"final_loss", r.losses.empty() ? json(nullptr) : json(r.losses.back())}};
      pipe::write_json(out / "train_summary.json", summary);
      if (r.aborted) throw NumericalFailure(r.message, summary);
      std::cout << "trained " << r.steps << " steps; checkpoint " << r.checkpoint.string() << "\n";
    } else if (command == "eval") {
      require_file(ckpt, "--ckpt");
      require_file(data, "--data");
      const auto r = pipe::evaluate(ckpt, data);
      pipe::write_json(out / "eval.json", r.to_json());
      std::cout << "mean relative error " << r.mean << " (std " << r.std << ", " << r.errors.size() << " samples, "
                << r.skipped << " skipped)\n";
    } else if (command == "warmstart") {
      require_file(ckpt, "--ckpt");
      require_file(data, "--data");
      auto bo = pipe::bench_options_from_json(cfg.at("bench"));
      if (tol) bo.tol = *tol;
      if (tol_fine) bo.tol_fine = *tol_fine;
      const auto model = pipe::load_surrogate(ckpt);
      const auto d = pipe::load_dataset(data);
      const auto r = pipe::warmstart_bench(model, d, refs_for(data, d), bo);
      pipe::write_bench(r, out);
      std::cout << "speedup " << r.speedup << " = " << r.mean_iters_zero << " / " << r.mean_iters_op << " ("
                << r.failures << " failures, " << r.skips << " skipped)\n";
    } else if (command == "patch-test") {
      const auto spec = pipe::problem_spec_from_json(cfg.at("problem"));
      const auto r = pipe::patch_test(spec, patch_from_json(cfg.at("patch")));
      pipe::write_json(out / "patch_test.json", r.to_json());
      std::cout << (r.passed ? "PASS" : "FAIL") << ": " << r.message << " (error " << r.final_error << " after "
                << r.steps_run << " steps)\n";
    } else if (command == "fem") {
      require_file(mesh_path, "--mesh");
      const auto& fc = cfg.at("fem");
      pipe::FemRunOptions o;
      o.tol = tol.value_or(fc.at("tol").get<double>());
      o.solver = solver.empty() ? fc.at("solver").get<std::string>() : solver;
      o.max_iter = fc.at("max_iter").get<int>();
      o.load_steps = load_steps.value_or(fc.at("load_steps").get<int>());
      fem::Material mat;
      mat.kind = fem::material_kind_from_string(material.empty() ? fc.at("material").get<std::string>() : material);
      const double e = E.value_or(fc.at("E").get<double>()), v = nu.value_or(fc.at("nu").get<double>());
      if (mat.kind == fem::MaterialKind::Poisson) {
        mat.conductivity = {e};
        mat.source = {v};
      } else {
        mat.E = {e};
        mat.nu = {v};
      }
      const auto m = mesh::load_mesh(mesh_path);
      const auto r = pipe::run_fem(m, mat, o);
      pipe::write_json(out / "solve_report.json", r.report.to_json());
      pipe::write_text(out / "history.csv", r.report.history_csv());
      pipe::write_json(out / "solution.json", {{"U", std::vector<double>(r.U.data(), r.U.data() + r.U.size())}});
      if (!r.report.converged) throw NumericalFailure(r.report.solver + " did not converge: " + r.report.message,
                                                      r.report.to_json());
      std::cout << r.report.solver << " converged in " << r.report.iterations << " iterations\n";
    } else if (command == "convergence-check") {
      const auto& cc = cfg.at("convergence");
      const int sz = size.value_or(cc.at("n").get<int>());
      const auto d = pipe::convergence_bound_check(pipe::poisson_1d(sz), cc.at("m_values").get<std::vector<int>>(),
                                                   cc.at("e0_norms").get<std::vector<double>>(),
                                                   cc.at("seed").get<std::uint64_t>());
      pipe::write_json(out / "convergence.json", d.to_json());
      std::cout << "R(B) = " << d.rate << ", bound " << (d.bound_holds ? "holds" : "violated") << ", savings "
                << (d.savings_within_20pct ? "match" : "deviate from") << " prediction " << d.predicted_savings << "\n";
    } else if (command == "validate-mesh") {
      require_file(mesh_path, "--mesh");
      const auto m = mesh::load_mesh(mesh_path);
      mesh::validate(m);
      std::cout << "ok: " << m.num_nodes() << " nodes, " << m.num_elements() << " " << mesh::to_string(m.element_type)
                << " elements, area " << mesh::area(m) << "\n";
    }
    return 0;
  } catch (const NumericalFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!out.empty()) pipe::write_json(out / "failure.json", {{"command", command}, {"error", e.what()}, {"report", e.report}});
    return 2;
  } catch (const fem::SingularMatrixError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!out.empty()) pipe::write_json(out / "failure.json", {{"command", command}, {"error", e.what()}});
    return 2;
  } catch (const fem::InversionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (!out.empty()) pipe::write_json(out / "failure.json", {{"command", command}, {"error", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace pfem::cli
