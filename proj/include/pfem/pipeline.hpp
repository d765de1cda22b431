#pragma once

// Dataset generation, label-free training, evaluation against FEM references,
// warm-start benchmarking, the single-sample patch test and the stationary
// iteration convergence diagnostic.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pfem/fem.hpp"
#include "pfem/grf.hpp"
#include "pfem/mesh.hpp"
#include "pfem/physloss.hpp"
#include "pfem/tensor.hpp"
#include "pfem/transolver.hpp"

namespace pfem::pipe {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// problems

enum class Problem { Plate, Beam, Cook, Poisson };
std::string to_string(Problem p);
Problem problem_from_string(const std::string& name);

struct Factors {
  bool geometry = false;
  bool material = false;
  bool boundary = false;
  std::string tag() const;  // "G+M+B" style
};

struct ProblemSpec {
  Problem problem = Problem::Beam;
  int nx = 16;
  int ny = 16;
  mesh::ElementType element = mesh::ElementType::Q4;
  fem::MaterialKind material = fem::MaterialKind::NeoHookeanPlaneStrain;
  Factors factors;
  // poisson reuses E as the conductivity and nu as the source
  double E = 100.0;
  double nu = 0.25;
  // nominal traction on the loaded edge (poisson: boundary flux)
  double traction_x = 0.0;
  double traction_y = -0.15;
  grf::GrfSpec E_field;
  grf::GrfSpec nu_field;
  grf::GrfSpec traction_field;  // 1D along the loaded edge, absolute values
  grf::GrfSpec geometry_field;  // scalar draws for cook segments
  std::vector<std::string> mesh_files;  // imported geometries (plate with holes)
  std::uint64_t seed = 0;

  // Desk-scale defaults per problem (fields above filled accordingly).
  static ProblemSpec defaults(Problem p);
  void validate() const;
};

json to_json(const ProblemSpec& s);
ProblemSpec problem_spec_from_json(const json& j);

// One label-free training/test input.
struct Sample {
  int id = 0;
  std::uint64_t seed = 0;
  std::string mesh_id;
  std::vector<double> E;   // nodal (poisson: conductivity)
  std::vector<double> nu;  // nodal (poisson: source)
  std::vector<std::array<double, 2>> traction;  // per Neumann edge of the mesh
  json grf;  // realizations used
  ad::Tensor features;
};

inline constexpr std::size_t kFeatureCount = 7;

json to_json(const Sample& s);
Sample sample_from_json(const json& j);

// Builds the mesh for a given geometry draw; the mesh carries the Dirichlet
// set and the Neumann edges (tractions live in the sample).
mesh::Mesh problem_mesh(const ProblemSpec& spec, std::uint64_t geometry_seed);
// Deterministic sample from (spec.seed, index).
Sample make_sample(const ProblemSpec& spec, int index, const mesh::Mesh& m, const std::string& mesh_id);
// Mesh with the sample's tractions applied, and the material fields.
mesh::Mesh loaded_mesh(const mesh::Mesh& base, const Sample& s);
fem::Material sample_material(const ProblemSpec& spec, const Sample& s);
loss::LossKind loss_kind(const ProblemSpec& spec);
// Characteristic length used by the ansatz and the coordinate features.
double characteristic_length(const mesh::Mesh& m);
double traction_reference(const ProblemSpec& spec);
ad::Tensor make_features(const ProblemSpec& spec, const mesh::Mesh& loaded, const std::vector<double>& E,
                         const std::vector<double>& nu);

// ---------------------------------------------------------------------------
// dataset layout: spec.json, samples/NNNN.json, meshes/<id>.json, refs/NNNN.json

struct Dataset {
  fs::path root;
  ProblemSpec spec;
  std::map<std::string, mesh::Mesh> meshes;
  std::vector<Sample> samples;

  const mesh::Mesh& mesh_of(const Sample& s) const;
  loss::PhysicsProblem physics(const Sample& s, double output_scale) const;
};

std::string sample_name(int id);  // "0007"
void generate_dataset(const ProblemSpec& spec, int n, std::uint64_t seed, const fs::path& dir);
Dataset load_dataset(const fs::path& dir);
// In-memory variant, same content as generate_dataset + load_dataset.
Dataset make_dataset(const ProblemSpec& spec, int n, std::uint64_t seed);

struct Reference {
  int id = 0;
  VectorXd U;
  bool converged = false;
  std::string solver;
  double residual = 0.0;
  int iterations = 0;
  std::string message;
};

json to_json(const Reference& r);
Reference reference_from_json(const json& j);

Reference solve_reference(const Dataset& d, const Sample& s);
// Writes refs/NNNN.json for every sample. threads > 1 splits samples.
void compute_references(const fs::path& dir, int threads = 1);
// Counted per dataset root so training can prove it never reads labels.
std::optional<Reference> load_reference(const fs::path& dir, int id);
std::size_t reference_reads(const fs::path& dir);

// ---------------------------------------------------------------------------
// operator wrapper: network + ansatz parameters

struct Surrogate {
  op::Transolver net;
  double output_scale = 1.0;
  ProblemSpec spec;

  VectorXd predict(const Dataset& d, const Sample& s) const;
  VectorXd predict(const loss::PhysicsProblem& p, const ad::Tensor& features) const;
};

json surrogate_header(const Surrogate& s);
void save_surrogate(const fs::path& path, const Surrogate& s, const ad::AdamState* optimizer = nullptr,
                    const json& extra = json::object());
Surrogate load_surrogate(const fs::path& path, ad::AdamState* optimizer = nullptr, json* extra = nullptr);

// Default output scale for a problem: the order of magnitude of nodal
// displacements under the nominal load.
double default_output_scale(const ProblemSpec& spec);

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  double lr = 0.002;
  double decay = 0.9;
  int decay_every = 1000;
  int epochs = 100;
  int samples_per_epoch = 0;  // 0: whole dataset
  int batch = 1;              // samples accumulated per optimizer step
  int checkpoint_every = 10;  // epochs; 0 disables intermediate checkpoints
  int max_steps = 0;          // 0: unlimited
  double time_budget_s = 0;   // 0: unlimited; checked between steps
  double output_scale = 0;    // 0: default_output_scale
  int test_every = 1;         // epochs between test evaluations
  op::TransolverConfig model;
  std::uint64_t seed = 0;

  void validate() const;
};

json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

double learning_rate(const TrainConfig& c, std::uint64_t step);

struct EpochRecord {
  int epoch = 0;
  std::uint64_t step = 0;
  double mean_loss = 0.0;
  double test_error = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainResult {
  std::uint64_t steps = 0;
  int epochs = 0;
  std::vector<double> losses;  // per optimizer step
  std::vector<EpochRecord> history;
  std::size_t skipped_inversions = 0;
  std::size_t train_refs_read = 0;
  bool aborted = false;
  bool budget_hit = false;
  std::string message;
  fs::path checkpoint;
};

struct TestSet {
  const Dataset* data = nullptr;
  std::vector<std::optional<Reference>> refs;
};

// Label-free training on an in-memory dataset, continuing from the given
// optimizer state and epoch. Writes metrics.csv and checkpoints under out
// (when non-empty).
TrainResult train(const TrainConfig& config, const Dataset& data, Surrogate& model, ad::AdamState& optimizer,
                  int start_epoch = 0, const fs::path& out = {}, const TestSet* test = nullptr);

// File-based driver: loads data, creates or resumes the model.
TrainResult train(const TrainConfig& config, const fs::path& data_dir, const fs::path& out,
                  const std::optional<fs::path>& test_dir = std::nullopt,
                  const std::optional<fs::path>& resume_from = std::nullopt);

Surrogate make_surrogate(const TrainConfig& config, const ProblemSpec& spec);

// ---------------------------------------------------------------------------
// evaluation

double relative_error(const VectorXd& pred, const VectorXd& ref);

struct EvalReport {
  std::vector<int> ids;
  std::vector<double> errors;
  double mean = 0.0;
  double std = 0.0;
  int skipped = 0;
  json to_json() const;
};

EvalReport evaluate(const Surrogate& model, const Dataset& data, const std::vector<std::optional<Reference>>& refs);
EvalReport evaluate(const fs::path& checkpoint, const fs::path& data_dir);

// ---------------------------------------------------------------------------
// warm start

struct BenchOptions {
  double tol = 1e-3;        // CG: ||r||/||F||; Newton: ||r||
  double tol_fine = 0.0;    // skip the solve when the guess residual is below this
  int max_iter = 100000;    // CG cap; Newton uses newton_max_iter
  int newton_max_iter = 50;
  bool newton_fallback = false;  // diagnostic only: retry failures with more load steps
  int fallback_steps = 8;
};

json to_json(const BenchOptions& o);
BenchOptions bench_options_from_json(const json& j);

struct BenchSample {
  int id = 0;
  int iters_zero = 0;
  int iters_op = 0;
  double err_pre = 0.0;   // operator guess vs reference
  double err_post = 0.0;  // warm-started solution vs reference
  double err_zero = 0.0;  // zero-guess solution vs reference
  bool skipped = false;
  bool failed_zero = false;
  bool failed_op = false;
  std::string system_hash_zero;
  std::string system_hash_op;
  std::vector<double> history_zero;
  std::vector<double> history_op;
  std::string message;
};

struct BenchReport {
  std::string solver;
  BenchOptions options;
  std::vector<BenchSample> samples;
  double mean_iters_zero = 0.0;
  double mean_iters_op = 0.0;
  double speedup = 0.0;  // mean(zero) / mean(op)
  double mean_err_pre = 0.0;
  double std_err_pre = 0.0;
  double mean_err_post = 0.0;
  int failures = 0;
  int skips = 0;

  void aggregate();
  json to_json() const;
  std::string csv() const;
};

using GuessFn = std::function<VectorXd(const Dataset&, const Sample&)>;

// References are used for the error columns only; missing ones leave NaN.
BenchReport warmstart_bench(const Dataset& data, const GuessFn& guess, const std::vector<std::optional<Reference>>& refs,
                            const BenchOptions& options);
BenchReport warmstart_bench(const Surrogate& model, const Dataset& data,
                            const std::vector<std::optional<Reference>>& refs, const BenchOptions& options);
void write_bench(const BenchReport& r, const fs::path& out);

// ---------------------------------------------------------------------------
// patch test

struct PatchTestOptions {
  op::TransolverConfig model;
  int max_steps = 5000;
  double threshold = 0.05;
  double lr = 0.002;
  int check_every = 25;
  int window = 250;
  double output_scale = 0.0;  // 0: default
  std::uint64_t seed = 0;
};

struct PatchTestReport {
  bool passed = false;
  int steps_run = 0;
  int steps_to_threshold = -1;
  double final_error = 0.0;
  double best_error = 0.0;
  double grad_norm_initial = 0.0;  // ||dL/dU|| at step 0
  double grad_norm_final = 0.0;
  bool trailing_monotone = false;
  std::vector<double> losses;
  std::vector<std::pair<int, double>> errors;
  std::string message;
  json to_json() const;
};

// Single-sample beam (constant load unless spec varies it).
PatchTestReport patch_test(const ProblemSpec& spec, const PatchTestOptions& options);

// ---------------------------------------------------------------------------
// stationary iteration diagnostic

struct ConvergenceRun {
  int m = 0;               // tol = 10^-m on ||e||
  double e0_norm = 0.0;
  int observed = 0;
  double bound = 0.0;
  bool checked = false;    // observed >= 10
  bool holds = true;
};

struct ConvergenceDiagnostic {
  int n = 0;
  std::string iteration = "jacobi";
  double spectral_radius = 0.0;
  double rate = 0.0;  // R(B) = -ln rho
  std::vector<std::pair<int, double>> norm_power;  // (k, ||B^k||^(1/k))
  std::vector<ConvergenceRun> runs;
  double predicted_savings = 0.0;  // 2 ln10 / R for a 100x better guess
  std::vector<std::pair<int, double>> observed_savings;  // per m
  std::vector<std::pair<int, double>> relative_savings;  // per m, savings / k(worst guess)
  bool bound_holds = true;
  bool savings_within_20pct = true;
  bool diminishing = true;
  json to_json() const;
};

MatrixXd poisson_1d(int n);
// Jacobi on K; throws PipelineError if rho(B) >= 1.
ConvergenceDiagnostic convergence_bound_check(const MatrixXd& K, const std::vector<int>& m_values,
                                              const std::vector<double>& e0_norms, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// FEM helpers

struct FemRunOptions {
  double tol = 1e-6;
  std::string solver = "auto";  // auto, cg, dense, newton
  int max_iter = 100000;
  int load_steps = 1;
};

fem::SolveResult run_fem(const mesh::Mesh& m, const fem::Material& mat, const FemRunOptions& options);

// Classical displacement patch test on the distorted four element patch;
// returns the max interior nodal error.
double classical_patch_test(fem::MaterialKind kind = fem::MaterialKind::PlaneStress);

// ---------------------------------------------------------------------------
// small io helpers

void write_json(const fs::path& p, const json& j);
json read_json(const fs::path& p);
void write_text(const fs::path& p, const std::string& text);

}  // namespace pfem::pipe
