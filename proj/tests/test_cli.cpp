#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pfem/cli.hpp"
#include "pfem/pipeline.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace pfem;

namespace {

const fs::path root = fs::temp_directory_path() / "pfem_test_cli";

// Runs the installed binary; returns its exit code.
int run_cli(const std::string& args) {
  // default output root inside the scratch area so nothing lands in the working directory
  const std::string cmd = "PFEM_OUT=" + (root / "default_out").string() + " " + PFEM_CLI_PATH + " " + args + " >>" +
                          (root / "log.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string p(const std::string& rel) { return (root / rel).string(); }

json read(const std::string& rel) {
  std::ifstream is(root / rel);
  REQUIRE(is);
  return json::parse(is);
}

std::string slurp(const std::string& rel) {
  std::ifstream is(root / rel, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write(const std::string& rel, const std::string& text) {
  fs::create_directories((root / rel).parent_path());
  std::ofstream(root / rel) << text;
}

struct Fresh {
  Fresh() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
};

const std::string tiny_beam = "--problem beam --set problem.nx=4 --set problem.ny=2";
const std::string tiny_model =
    " --set train.model.channels=8 --set train.model.num_layers=1 --set train.model.num_tokens=4"
    " --set train.model.heads=2";

}  // namespace

TEST_CASE("usage errors exit with 1") {
  Fresh f;
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("gen --problem beam") == 1);  // --n is required
  CHECK(run_cli("gen --n 2 --problem sphere") == 1);
  CHECK(run_cli("gen --n 2 --set problem.bogus=1 --out " + p("x")) == 1);
  write("bad.json", R"({"schema_version": 1, "train": {"epochz": 2}})");
  CHECK(run_cli("gen --n 2 --config " + p("bad.json") + " --out " + p("x")) == 1);
  write("noversion.json", R"({"train": {"epochs": 2}})");
  CHECK(run_cli("gen --n 2 --config " + p("noversion.json") + " --out " + p("x")) == 1);
  CHECK(run_cli("eval --ckpt " + p("missing.ckpt") + " --data " + p("missing") + " --out " + p("x")) == 1);
}

TEST_CASE("dataset, references, training, evaluation and warm start") {
  Fresh f;
  REQUIRE(run_cli("gen --n 3 --seed 7 " + tiny_beam + " --out " + p("data")) == 0);
  CHECK(fs::exists(root / "data/samples/0002.json"));
  CHECK_FALSE(fs::exists(root / "data/refs"));

  // rerunning from the snapshot reproduces the dataset byte for byte
  REQUIRE(run_cli("gen --n 3 --config " + p("data/gen.config.json") + " --out " + p("again")) == 0);
  CHECK(slurp("data/samples/0001.json") == slurp("again/samples/0001.json"));
  CHECK(read("data/gen.config.json").at("problem").at("seed") == 7);

  REQUIRE(run_cli("refs --data " + p("data") + " --threads 2") == 0);
  CHECK(fs::exists(root / "default_out/refs/refs.config.json"));
  CHECK(fs::exists(root / "data/refs/0000.json"));

  REQUIRE(run_cli("train --data " + p("data") + " --test " + p("data") + " --set train.epochs=2" + tiny_model +
               " --out " + p("run")) == 0);
  CHECK(fs::exists(root / "run/model.ckpt"));
  CHECK(fs::exists(root / "run/metrics.csv"));
  CHECK(read("run/train_summary.json").at("train_refs_read") == 0);
  CHECK(read("run/train.config.json").at("command") == "train");

  REQUIRE(run_cli("train --data " + p("data") + " --set train.epochs=3" + tiny_model + " --resume " +
               p("run/model.ckpt") + " --out " + p("resumed")) == 0);
  CHECK(read("resumed/train_summary.json").at("steps") == 3);

  REQUIRE(run_cli("eval --ckpt " + p("run/model.ckpt") + " --data " + p("data") + " --out " + p("eval")) == 0);
  const auto ev = read("eval/eval.json");
  CHECK(ev.at("errors").size() == 3);

  REQUIRE(run_cli("warmstart --ckpt " + p("run/model.ckpt") + " --data " + p("data") + " --tol 1e-6 --out " +
               p("bench")) == 0);
  std::ifstream csv(root / "bench/bench.csv");
  std::string header, line;
  std::getline(csv, header);
  CHECK(header.rfind("sample,iters_zero,iters_op", 0) == 0);
  int rows = 0;
  while (std::getline(csv, line)) rows += !line.empty();
  CHECK(rows == 3);
}

TEST_CASE("fem, mesh validation and numerical failures") {
  Fresh f;
  auto spec = pipe::ProblemSpec::defaults(pipe::Problem::Plate);
  spec.nx = spec.ny = 4;
  const auto d = pipe::make_dataset(spec, 1, 0);
  const auto m = pipe::loaded_mesh(d.meshes.at("base"), d.samples[0]);
  mesh::save_mesh(m, root / "plate.json");

  CHECK(run_cli("validate-mesh --mesh " + p("plate.json")) == 0);
  auto broken = mesh::to_json(m);
  broken["elements"][0][0] = 999;
  write("broken.json", broken.dump());
  CHECK(run_cli("validate-mesh --mesh " + p("broken.json")) == 1);

  REQUIRE(run_cli("fem --mesh " + p("plate.json") + " --solver cg --tol 1e-8 --out " + p("fem")) == 0);
  const auto rep = read("fem/solve_report.json");
  CHECK(rep.at("converged") == true);
  CHECK(read("fem/solution.json").at("U").size() == 2 * m.num_nodes());

  // a very soft hyperelastic plate under the same load inverts elements
  CHECK(run_cli("fem --mesh " + p("plate.json") + " --material neo_hookean --E 1e-3 --out " + p("soft")) == 2);
  CHECK(fs::exists(root / "soft/failure.json"));
}

TEST_CASE("patch test and convergence diagnostic") {
  Fresh f;
  CHECK(run_cli("patch-test --problem beam --set patch.max_steps=20 --set patch.model.channels=8 --out " +
             p("patch")) == 0);
  CHECK(read("patch/patch_test.json").at("steps_run") == 20);

  const std::string env = "PFEM_OUT=" + p("envroot") + " ";
  const int status = std::system((env + PFEM_CLI_PATH + " convergence-check >/dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(status) == 0);
  const auto c = read("envroot/convergence-check/convergence.json");
  CHECK(c.at("bound_holds") == true);
  CHECK(c.at("savings_within_20pct") == true);
  CHECK(c.at("n") == 20);
}

TEST_CASE("config helpers") {
  auto cfg = cli::default_config("plate");
  cli::apply_override(cfg, "train.epochs=7");
  CHECK(cfg["train"]["epochs"] == 7);
  cli::apply_override(cfg, "fem.solver=dense");
  CHECK(cfg["fem"]["solver"] == "dense");
  CHECK_THROWS(cli::apply_override(cfg, "train.nope=1"));
  CHECK_THROWS(cli::apply_override(cfg, "noequals"));
  CHECK_THROWS(cli::merge_strict(cfg, json{{"train", {{"epochz", 1}}}}));
  cli::merge_strict(cfg, json{{"bench", {{"tol", 1e-4}}}});
  CHECK(cfg["bench"]["tol"] == 1e-4);
  CHECK(cfg["bench"]["max_iter"] == pipe::BenchOptions{}.max_iter);
}
