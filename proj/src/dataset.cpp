#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "pfem/checkpoint.hpp"
#include "pfem/pipeline.hpp"
#include "pipeline_internal.hpp"

namespace pfem::pipe {

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw PipelineError("cannot write " + p.string());
  os << text;
  if (!os) throw PipelineError("write failed: " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(1) + "\n"); }

json read_json(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw PipelineError("cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw PipelineError(p.string() + ": " + e.what());
  }
}

std::string sample_name(int id) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << id;
  return os.str();
}

// ---------------------------------------------------------------------------

const mesh::Mesh& Dataset::mesh_of(const Sample& s) const {
  auto it = meshes.find(s.mesh_id);
  if (it == meshes.end()) throw PipelineError("sample " + std::to_string(s.id) + ": unknown mesh '" + s.mesh_id + "'");
  return it->second;
}

loss::PhysicsProblem Dataset::physics(const Sample& s, double output_scale) const {
  loss::PhysicsProblem p;
  p.mesh = loaded_mesh(mesh_of(s), s);
  p.material = sample_material(spec, s);
  p.kind = loss_kind(spec);
  p.ansatz = loss::build_ansatz(p.mesh, fem::components(spec.material), characteristic_length(p.mesh), output_scale);
  p.prepare();
  return p;
}

Dataset make_dataset(const ProblemSpec& spec_in, int n, std::uint64_t seed) {
  if (n < 1) throw PipelineError("dataset: need at least one sample");
  Dataset d;
  d.spec = spec_in;
  d.spec.seed = seed;
  d.spec.validate();
  const bool per_sample = d.spec.factors.geometry && d.spec.problem == Problem::Cook;
  const bool from_files = d.spec.problem == Problem::Plate && !d.spec.mesh_files.empty();
  for (int i = 0; i < n; ++i) {
    const std::uint64_t gseed = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(i)), 4);
    std::string id = "base";
    if (per_sample) id = to_string(d.spec.problem) + "_" + sample_name(i);
    if (from_files)
      id = "file" + std::to_string(d.spec.factors.geometry ? gseed % d.spec.mesh_files.size() : 0);
    if (!d.meshes.count(id)) d.meshes.emplace(id, problem_mesh(d.spec, gseed));
    d.samples.push_back(make_sample(d.spec, i, d.meshes.at(id), id));
  }
  return d;
}

void generate_dataset(const ProblemSpec& spec, int n, std::uint64_t seed, const fs::path& dir) {
  const Dataset d = make_dataset(spec, n, seed);
  for (const char* sub : {"samples", "meshes", "refs"}) fs::remove_all(dir / sub);
  fs::create_directories(dir / "samples");
  fs::create_directories(dir / "meshes");
  write_json(dir / "spec.json", {{"schema_version", 1}, {"problem", to_json(d.spec)}, {"n", n}, {"seed", seed}});
  for (const auto& [id, m] : d.meshes) write_text(dir / "meshes" / (id + ".json"), mesh::to_json(m).dump() + "\n");
  for (const auto& s : d.samples)
    write_text(dir / "samples" / (sample_name(s.id) + ".json"), to_json(s).dump() + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const json head = read_json(dir / "spec.json");
  if (head.value("schema_version", 0) != 1) throw PipelineError(dir.string() + "/spec.json: unsupported schema_version");
  Dataset d;
  d.root = dir;
  d.spec = problem_spec_from_json(head.at("problem"));
  std::vector<fs::path> files;
  if (!fs::is_directory(dir / "samples")) throw PipelineError(dir.string() + ": missing samples/ directory");
  for (const auto& e : fs::directory_iterator(dir / "samples"))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw PipelineError(dir.string() + ": no samples");
  for (const auto& f : files) {
    Sample s = sample_from_json(read_json(f));
    if (!d.meshes.count(s.mesh_id)) {
      const auto mp = dir / "meshes" / (s.mesh_id + ".json");
      try {
        d.meshes.emplace(s.mesh_id, mesh::mesh_from_json(read_json(mp)));
      } catch (const mesh::MeshError& e) {
        throw PipelineError(mp.string() + ": " + e.what());
      }
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// references

json to_json(const Reference& r) {
  return {{"id", r.id},
          {"U", std::vector<double>(r.U.data(), r.U.data() + r.U.size())},
          {"converged", r.converged},
          {"solver", r.solver},
          {"residual", r.residual},
          {"iterations", r.iterations},
          {"message", r.message}};
}

Reference reference_from_json(const json& j) {
  Reference r;
  r.id = j.at("id").get<int>();
  const auto u = j.at("U").get<std::vector<double>>();
  r.U = Eigen::Map<const VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
  r.converged = j.at("converged").get<bool>();
  r.solver = j.value("solver", std::string());
  r.residual = j.value("residual", 0.0);
  r.iterations = j.value("iterations", 0);
  r.message = j.value("message", std::string());
  return r;
}

Reference solve_reference(const Dataset& d, const Sample& s) {
  Reference ref;
  ref.id = s.id;
  const mesh::Mesh m = loaded_mesh(d.mesh_of(s), s);
  const fem::Material mat = sample_material(d.spec, s);
  if (mat.kind == fem::MaterialKind::NeoHookeanPlaneStrain) {
    const VectorXd U0 = VectorXd::Zero(2 * static_cast<Eigen::Index>(m.num_nodes()));
    for (int steps : {1, 4, 16}) {
      fem::NewtonOptions o;
      o.tol = 1e-10;
      o.load_steps = steps;
      auto r = fem::newton_solve(m, mat, U0, o);
      ref.U = r.U;
      ref.converged = r.report.converged;
      ref.iterations = r.report.iterations;
      ref.message = r.report.message;
      ref.solver = "newton(load_steps=" + std::to_string(steps) + ")";
      if (ref.converged) break;
    }
    ref.residual = fem::residual(m, mat, ref.U).norm;
    return ref;
  }
  const auto sys = mat.kind == fem::MaterialKind::Poisson ? fem::assemble_poisson(m, mat)
                                                           : fem::assemble_linear_elasticity(m, mat);
  const auto rs = fem::apply_dirichlet(sys.K, sys.F, fem::dirichlet_constraints(m, fem::components(mat.kind)));
  VectorXd Uf;
  if (rs.K.rows() <= 5000) {
    Uf = fem::dense_direct_solve(rs.K, rs.F);
    ref.solver = "dense";
    ref.converged = true;
  } else {
    auto r = fem::cg_solve(rs.K, rs.F, VectorXd::Zero(rs.F.size()), 1e-12, 100000);
    Uf = r.U;
    ref.solver = "cg";
    ref.converged = r.report.converged;
    ref.iterations = r.report.iterations;
    ref.message = r.report.message;
  }
  ref.U = rs.reconstruct(Uf);
  ref.residual = (rs.K * Uf - rs.F).norm();
  return ref;
}

void compute_references(const fs::path& dir, int threads) {
  const Dataset d = load_dataset(dir);
  fs::create_directories(dir / "refs");
  const std::size_t n = d.samples.size();
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  std::vector<std::string> errors(n);
  auto work = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(workers)) {
      const auto& s = d.samples[i];
      Reference r;
      try {
        r = solve_reference(d, s);
      } catch (const std::exception& e) {
        r.id = s.id;
        r.converged = false;
        r.message = e.what();
        r.U = VectorXd();
      }
      write_text(dir / "refs" / (sample_name(s.id) + ".json"), to_json(r).dump() + "\n");
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
}

namespace {

std::mutex g_reads_mutex;
std::map<std::string, std::size_t>& reads_table() {
  static std::map<std::string, std::size_t> t;
  return t;
}

std::string root_key(const fs::path& dir) { return fs::weakly_canonical(dir).string(); }

}  // namespace

std::optional<Reference> load_reference(const fs::path& dir, int id) {
  {
    std::lock_guard lock(g_reads_mutex);
    ++reads_table()[root_key(dir)];
  }
  const auto p = dir / "refs" / (sample_name(id) + ".json");
  if (!fs::exists(p)) return std::nullopt;
  return reference_from_json(read_json(p));
}

std::size_t reference_reads(const fs::path& dir) {
  std::lock_guard lock(g_reads_mutex);
  auto it = reads_table().find(root_key(dir));
  return it == reads_table().end() ? 0 : it->second;
}

// ---------------------------------------------------------------------------
// surrogate

VectorXd Surrogate::predict(const loss::PhysicsProblem& p, const ad::Tensor& features) const {
  return p.ansatz.apply(net.predict(features));
}

VectorXd Surrogate::predict(const Dataset& d, const Sample& s) const {
  return predict(d.physics(s, output_scale), s.features);
}

json surrogate_header(const Surrogate& s) {
  return {{"kind", "pfem_surrogate"},
          {"model", op::to_json(s.net.config())},
          {"output_scale", s.output_scale},
          {"problem", to_json(s.spec)}};
}

void save_surrogate(const fs::path& path, const Surrogate& s, const ad::AdamState* optimizer, const json& extra) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json cfg = surrogate_header(s);
  cfg["extra"] = extra;
  ad::save_checkpoint(path, s.net.params(), cfg, optimizer);
}

Surrogate load_surrogate(const fs::path& path, ad::AdamState* optimizer, json* extra) {
  auto ck = ad::load_checkpoint(path);
  if (ck.config.value("kind", std::string()) != "pfem_surrogate")
    throw PipelineError(path.string() + ": not a surrogate checkpoint");
  Surrogate s{op::Transolver(op::config_from_json(ck.config.at("model")), std::move(ck.params)),
              ck.config.at("output_scale").get<double>(), problem_spec_from_json(ck.config.at("problem"))};
  if (optimizer) {
    if (!ck.optimizer) throw PipelineError(path.string() + ": checkpoint has no optimizer state");
    *optimizer = *ck.optimizer;
  }
  if (extra) *extra = ck.config.value("extra", json::object());
  return s;
}

double default_output_scale(const ProblemSpec& spec) {
  ProblemSpec nominal = spec;
  nominal.factors = Factors{};
  nominal.mesh_files.resize(std::min<std::size_t>(nominal.mesh_files.size(), 1));
  const Dataset d = make_dataset(nominal, 1, 0);
  const Reference r = solve_reference(d, d.samples[0]);
  const double m = r.U.size() ? r.U.cwiseAbs().maxCoeff() : 0.0;
  return m > 0.0 && std::isfinite(m) ? m : 1.0;
}

// ---------------------------------------------------------------------------
// evaluation

double relative_error(const VectorXd& pred, const VectorXd& ref) {
  if (pred.size() != ref.size())
    throw PipelineError("relative_error: size mismatch (" + std::to_string(pred.size()) + " vs " +
                        std::to_string(ref.size()) + ")");
  const double rn = ref.norm();
  const double dn = (pred - ref).norm();
  if (rn == 0.0) return dn == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return dn / rn;
}

json EvalReport::to_json() const {
  return {{"ids", ids}, {"errors", errors}, {"mean", mean}, {"std", std}, {"skipped", skipped}, {"count", errors.size()}};
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size()));
}

}  // namespace

EvalReport evaluate(const Surrogate& model, const Dataset& data, const std::vector<std::optional<Reference>>& refs) {
  if (refs.size() != data.samples.size()) throw PipelineError("evaluate: one reference slot per sample expected");
  EvalReport r;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    if (!refs[i] || !refs[i]->converged || refs[i]->U.size() == 0) {
      std::cerr << "warning: sample " << s.id << " has no usable reference, skipped\n";
      ++r.skipped;
      continue;
    }
    const double e = relative_error(model.predict(data, s), refs[i]->U);
    if (!std::isfinite(e)) {
      std::cerr << "warning: sample " << s.id << " has a zero reference, skipped\n";
      ++r.skipped;
      continue;
    }
    r.ids.push_back(s.id);
    r.errors.push_back(e);
  }
  mean_std(r.errors, r.mean, r.std);
  return r;
}

EvalReport evaluate(const fs::path& checkpoint, const fs::path& data_dir) {
  const Surrogate model = load_surrogate(checkpoint);
  const Dataset d = load_dataset(data_dir);
  std::vector<std::optional<Reference>> refs;
  for (const auto& s : d.samples) refs.push_back(load_reference(data_dir, s.id));
  return evaluate(model, d, refs);
}

}  // namespace pfem::pipe
