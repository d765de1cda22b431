#include <algorithm>
#include <cmath>
#include <set>

#include "pfem/pipeline.hpp"
#include "pipeline_internal.hpp"

namespace pfem::pipe {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(k + 0x632BE59BD9B4E019ull));
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw PipelineError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw PipelineError(where + ": unknown key '" + key + "'");
  }
}

std::string to_string(Problem p) {
  switch (p) {
    case Problem::Plate: return "plate";
    case Problem::Beam: return "beam";
    case Problem::Cook: return "cook";
    case Problem::Poisson: return "poisson";
  }
  return "?";
}

Problem problem_from_string(const std::string& name) {
  if (name == "plate") return Problem::Plate;
  if (name == "beam") return Problem::Beam;
  if (name == "cook") return Problem::Cook;
  if (name == "poisson") return Problem::Poisson;
  throw PipelineError("unknown problem '" + name + "' (plate, beam, cook, poisson)");
}

std::string Factors::tag() const {
  std::string t;
  auto add = [&](bool on, const char* c) {
    if (!on) return;
    if (!t.empty()) t += "+";
    t += c;
  };
  add(geometry, "G");
  add(material, "M");
  add(boundary, "B");
  return t.empty() ? "none" : t;
}

namespace {

grf::GrfSpec field(int dim, int modes, double mean, double amp, double lo, double hi) {
  grf::GrfSpec s;
  s.dimension = dim;
  s.modes = modes;
  s.alpha = 2.0;
  s.mean = mean;
  s.amplitude = amp;
  s.lo = lo;
  s.hi = hi;
  return s;
}

bool elastic(fem::MaterialKind k) { return k != fem::MaterialKind::Poisson; }

}  // namespace

ProblemSpec ProblemSpec::defaults(Problem p) {
  ProblemSpec s;
  s.problem = p;
  s.factors.material = true;
  s.factors.boundary = true;
  s.E_field = field(2, 6, 100.0, 15.0, 50.0, 150.0);
  s.nu_field = field(2, 6, 0.25, 0.04, 0.2, 0.3);
  s.geometry_field = field(1, 4, 0.0, 1.0, -1.0, 1.0);
  switch (p) {
    case Problem::Beam:
      s.material = fem::MaterialKind::NeoHookeanPlaneStrain;
      s.traction_y = -0.15;
      s.traction_field = field(1, 6, -0.15, 0.05, -0.3, 0.0);
      break;
    case Problem::Plate:
      s.nx = s.ny = 24;
      s.material = fem::MaterialKind::PlaneStress;
      s.traction_x = 1.0;
      s.traction_y = 0.0;
      s.traction_field = field(1, 6, 0.0, 0.3, -1.0, 1.0);
      break;
    case Problem::Cook:
      s.nx = s.ny = 8;
      s.element = mesh::ElementType::Q8;
      s.material = fem::MaterialKind::NeoHookeanPlaneStrain;
      s.factors.geometry = true;
      s.traction_y = 0.3;
      s.traction_field = field(1, 6, 0.3, 0.1, 0.0, 0.6);
      break;
    case Problem::Poisson:
      s.material = fem::MaterialKind::Poisson;
      s.E = 1.0;
      s.nu = 1.0;
      s.traction_x = 0.5;
      s.traction_y = 0.0;
      s.E_field = field(2, 6, 1.0, 0.2, 0.5, 1.5);
      s.nu_field = field(2, 6, 1.0, 0.3, 0.0, 2.0);
      s.traction_field = field(1, 6, 0.5, 0.2, -1.0, 1.0);
      break;
  }
  return s;
}

void ProblemSpec::validate() const {
  if (nx < 1 || ny < 1) throw PipelineError("problem: mesh resolution must be at least 1x1");
  if ((problem == Problem::Poisson) != (material == fem::MaterialKind::Poisson))
    throw PipelineError("problem: material '" + fem::to_string(material) + "' does not fit problem '" +
                        to_string(problem) + "'");
  if (!(E > 0.0)) throw PipelineError("problem: nominal E must be positive");
  if (elastic(material) && !(nu >= 0.0 && nu < 0.5)) throw PipelineError("problem: nominal nu must be in [0, 0.5)");
  if (factors.geometry) {
    if (problem == Problem::Beam || problem == Problem::Poisson)
      throw PipelineError("problem: geometry factor is not available for " + to_string(problem));
    if (problem == Problem::Plate && mesh_files.empty())
      throw PipelineError("problem: plate geometry variation needs imported meshes (mesh_files)");
    geometry_field.validate();
  }
  if (factors.material) {
    E_field.validate();
    nu_field.validate();
    if (E_field.dimension != 2 || nu_field.dimension != 2)
      throw PipelineError("problem: material fields must be two dimensional");
  }
  if (factors.boundary) traction_field.validate();
}

json to_json(const ProblemSpec& s) {
  return {{"problem", to_string(s.problem)},
          {"nx", s.nx},
          {"ny", s.ny},
          {"element", mesh::to_string(s.element)},
          {"material", fem::to_string(s.material)},
          {"factors", {{"geometry", s.factors.geometry}, {"material", s.factors.material}, {"boundary", s.factors.boundary}}},
          {"E", s.E},
          {"nu", s.nu},
          {"traction_x", s.traction_x},
          {"traction_y", s.traction_y},
          {"E_field", grf::to_json(s.E_field)},
          {"nu_field", grf::to_json(s.nu_field)},
          {"traction_field", grf::to_json(s.traction_field)},
          {"geometry_field", grf::to_json(s.geometry_field)},
          {"mesh_files", s.mesh_files},
          {"seed", s.seed}};
}

ProblemSpec problem_spec_from_json(const json& j) {
  check_keys(j,
             {"problem", "nx", "ny", "element", "material", "factors", "E", "nu", "traction_x", "traction_y", "E_field",
              "nu_field", "traction_field", "geometry_field", "mesh_files", "seed"},
             "problem");
  ProblemSpec s = ProblemSpec::defaults(problem_from_string(j.value("problem", std::string("beam"))));
  try {
    if (j.contains("nx")) s.nx = j.at("nx").get<int>();
    if (j.contains("ny")) s.ny = j.at("ny").get<int>();
    if (j.contains("element")) s.element = mesh::element_type_from_string(j.at("element").get<std::string>());
    if (j.contains("material")) s.material = fem::material_kind_from_string(j.at("material").get<std::string>());
    if (j.contains("factors")) {
      const auto& f = j.at("factors");
      check_keys(f, {"geometry", "material", "boundary"}, "problem.factors");
      s.factors.geometry = f.value("geometry", false);
      s.factors.material = f.value("material", false);
      s.factors.boundary = f.value("boundary", false);
    }
    if (j.contains("E")) s.E = j.at("E").get<double>();
    if (j.contains("nu")) s.nu = j.at("nu").get<double>();
    if (j.contains("traction_x")) s.traction_x = j.at("traction_x").get<double>();
    if (j.contains("traction_y")) s.traction_y = j.at("traction_y").get<double>();
    if (j.contains("E_field")) s.E_field = grf::spec_from_json(j.at("E_field"));
    if (j.contains("nu_field")) s.nu_field = grf::spec_from_json(j.at("nu_field"));
    if (j.contains("traction_field")) s.traction_field = grf::spec_from_json(j.at("traction_field"));
    if (j.contains("geometry_field")) s.geometry_field = grf::spec_from_json(j.at("geometry_field"));
    if (j.contains("mesh_files")) s.mesh_files = j.at("mesh_files").get<std::vector<std::string>>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw PipelineError(std::string("problem: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------

namespace {

void add_nodes(std::set<int>& out, const std::vector<std::vector<int>>& edges) {
  for (const auto& e : edges) out.insert(e.begin(), e.end());
}

void clamp(mesh::Mesh& m, const std::set<int>& nodes, bool scalar) {
  for (int v : nodes) m.dirichlet.push_back({v, 0.0, scalar ? std::nullopt : std::optional<double>(0.0)});
}

void load(mesh::Mesh& m, const std::vector<std::vector<int>>& edges, double tx, double ty) {
  for (const auto& e : edges) m.neumann.push_back({e, tx, ty});
}

double unit_draw(const grf::GrfSpec& spec, std::uint64_t seed) {
  const double g = std::clamp(grf::sample(spec, seed)({0.5, 0.0}), -1.0, 1.0);
  return 0.5 * (g + 1.0);
}

}  // namespace

mesh::Mesh problem_mesh(const ProblemSpec& spec, std::uint64_t geometry_seed) {
  mesh::Mesh m;
  std::set<int> fixed;
  switch (spec.problem) {
    case Problem::Beam:
      m = mesh::build_structured_mesh(spec.nx, spec.ny, spec.element, mesh::rectangle_map(0, 0, 4, 1));
      add_nodes(fixed, m.boundary_edges.at("left"));
      clamp(m, fixed, false);
      load(m, m.boundary_edges.at("right"), spec.traction_x, spec.traction_y);
      break;
    case Problem::Plate:
      if (!spec.mesh_files.empty()) {
        const std::size_t pick = spec.factors.geometry ? geometry_seed % spec.mesh_files.size() : 0;
        m = mesh::load_mesh(spec.mesh_files[pick]);
        if (!m.boundary_edges.count("left") || !m.boundary_edges.count("right"))
          throw PipelineError("plate mesh '" + spec.mesh_files[pick] + "' needs 'left' and 'right' boundaries");
        m.dirichlet.clear();
        m.neumann.clear();
      } else {
        m = mesh::build_structured_mesh(spec.nx, spec.ny, spec.element, mesh::rectangle_map(0, 0, 5, 5));
      }
      add_nodes(fixed, m.boundary_edges.at("left"));
      clamp(m, fixed, false);
      load(m, m.boundary_edges.at("right"), spec.traction_x, spec.traction_y);
      break;
    case Problem::Cook: {
      mesh::CookGeometry g;
      if (spec.factors.geometry) {
        g.clamped_fraction = 0.6 + 0.4 * unit_draw(spec.geometry_field, derive_seed(geometry_seed, 1));
        g.traction_length = 0.5 + 0.5 * unit_draw(spec.geometry_field, derive_seed(geometry_seed, 2));
        g.traction_start = (1.0 - g.traction_length) * unit_draw(spec.geometry_field, derive_seed(geometry_seed, 3));
      }
      g.validate();
      m = mesh::build_structured_mesh(spec.nx, spec.ny, spec.element, g.map());
      add_nodes(fixed, mesh::edges_in_segment(m, "left", 0.0, g.clamped_fraction));
      clamp(m, fixed, false);
      load(m, mesh::edges_in_segment(m, "right", g.traction_start, g.traction_start + g.traction_length),
           spec.traction_x, spec.traction_y);
      break;
    }
    case Problem::Poisson:
      m = mesh::build_structured_mesh(spec.nx, spec.ny, spec.element, mesh::rectangle_map(0, 0, 1, 1));
      add_nodes(fixed, m.boundary_edges.at("left"));
      add_nodes(fixed, m.boundary_edges.at("bottom"));
      clamp(m, fixed, true);
      load(m, m.boundary_edges.at("right"), spec.traction_x, 0.0);
      load(m, m.boundary_edges.at("top"), spec.traction_x, 0.0);
      break;
  }
  mesh::validate(m);
  return m;
}

double characteristic_length(const mesh::Mesh& m) {
  const auto bb = mesh::bounding_box(m);
  return std::max(bb[1][0] - bb[0][0], bb[1][1] - bb[0][1]);
}

double traction_reference(const ProblemSpec& spec) {
  double r = std::max({std::abs(spec.traction_x), std::abs(spec.traction_y)});
  if (spec.factors.boundary) r = std::max(r, std::abs(spec.traction_field.mean));
  if (r == 0.0) r = spec.factors.boundary && spec.traction_field.amplitude > 0 ? spec.traction_field.amplitude : 1.0;
  return r;
}

Sample make_sample(const ProblemSpec& spec, int index, const mesh::Mesh& m, const std::string& mesh_id) {
  Sample s;
  s.id = index;
  s.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(index));
  s.mesh_id = mesh_id;
  s.grf = json::object();

  const auto bb = mesh::bounding_box(m);
  const double wx = bb[1][0] - bb[0][0], wy = bb[1][1] - bb[0][1];
  std::vector<grf::Point> pts(m.num_nodes());
  for (std::size_t i = 0; i < m.num_nodes(); ++i)
    pts[i] = {(m.nodes[i][0] - bb[0][0]) / wx, (m.nodes[i][1] - bb[0][1]) / wy};

  if (spec.factors.material) {
    const auto fE = grf::sample(spec.E_field, derive_seed(s.seed, 1));
    const auto fnu = grf::sample(spec.nu_field, derive_seed(s.seed, 2));
    s.E = fE.evaluate(pts);
    s.nu = fnu.evaluate(pts);
    s.grf["E"] = grf::to_json(fE);
    s.grf["nu"] = grf::to_json(fnu);
  } else {
    s.E.assign(m.num_nodes(), spec.E);
    s.nu.assign(m.num_nodes(), spec.nu);
  }

  const bool scalar = spec.problem == Problem::Poisson;
  s.traction.assign(m.neumann.size(), {spec.traction_x, scalar ? 0.0 : spec.traction_y});
  if (spec.factors.boundary && !m.neumann.empty()) {
    const auto ft = grf::sample(spec.traction_field, derive_seed(s.seed, 3));
    const double n = static_cast<double>(m.neumann.size());
    for (std::size_t k = 0; k < m.neumann.size(); ++k) {
      const double v = ft({(static_cast<double>(k) + 0.5) / n, 0.0});
      if (scalar)
        s.traction[k][0] = v;
      else
        s.traction[k][1] = v;
    }
    s.grf["traction"] = grf::to_json(ft);
  }
  s.features = make_features(spec, loaded_mesh(m, s), s.E, s.nu);
  return s;
}

mesh::Mesh loaded_mesh(const mesh::Mesh& base, const Sample& s) {
  if (s.traction.size() != base.neumann.size())
    throw PipelineError("sample " + std::to_string(s.id) + ": " + std::to_string(s.traction.size()) +
                        " tractions for " + std::to_string(base.neumann.size()) + " loaded edges");
  mesh::Mesh m = base;
  for (std::size_t k = 0; k < m.neumann.size(); ++k) {
    m.neumann[k].tx = s.traction[k][0];
    m.neumann[k].ty = s.traction[k][1];
  }
  return m;
}

fem::Material sample_material(const ProblemSpec& spec, const Sample& s) {
  fem::Material mat;
  mat.kind = spec.material;
  if (spec.material == fem::MaterialKind::Poisson) {
    mat.conductivity = s.E;
    mat.source = s.nu;
  } else {
    mat.E = s.E;
    mat.nu = s.nu;
  }
  return mat;
}

loss::LossKind loss_kind(const ProblemSpec& spec) {
  switch (spec.material) {
    case fem::MaterialKind::PlaneStress:
    case fem::MaterialKind::PlaneStrain: return loss::LossKind::LinearEnergy;
    case fem::MaterialKind::NeoHookeanPlaneStrain: return loss::LossKind::NeoHookeanEnergy;
    case fem::MaterialKind::Poisson: return loss::LossKind::PoissonVariational;
  }
  return loss::LossKind::LinearEnergy;
}

ad::Tensor make_features(const ProblemSpec& spec, const mesh::Mesh& m, const std::vector<double>& E,
                         const std::vector<double>& nu) {
  const std::size_t n = m.num_nodes();
  if (E.size() != n || nu.size() != n) throw PipelineError("features: nodal fields do not match the mesh");
  const bool scalar = spec.problem == Problem::Poisson;
  const auto bb = mesh::bounding_box(m);
  const double L = characteristic_length(m);
  const double tref = traction_reference(spec);
  const double nu_ref = scalar && spec.nu != 0.0 ? spec.nu : 1.0;

  std::vector<double> tsum(n, 0.0), tcount(n, 0.0), dflag(n, 0.0);
  for (const auto& e : m.neumann)
    for (int v : e.nodes) {
      tsum[v] += scalar ? e.tx : e.ty;
      tcount[v] += 1.0;
    }
  for (const auto& d : m.dirichlet) dflag[d.node] = 1.0;

  ad::Tensor x = ad::Tensor::zeros(n, kFeatureCount);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = (m.nodes[i][0] - bb[0][0]) / L;
    x(i, 1) = (m.nodes[i][1] - bb[0][1]) / L;
    x(i, 2) = E[i] / spec.E;
    x(i, 3) = nu[i] / nu_ref;
    x(i, 4) = tcount[i] > 0 ? tsum[i] / tcount[i] / tref : 0.0;
    x(i, 5) = dflag[i];
    x(i, 6) = tcount[i] > 0 ? 1.0 : 0.0;
  }
  return x;
}

json to_json(const Sample& s) {
  json tr = json::array();
  for (const auto& t : s.traction) tr.push_back({t[0], t[1]});
  return {{"id", s.id},
          {"seed", s.seed},
          {"mesh_id", s.mesh_id},
          {"E", s.E},
          {"nu", s.nu},
          {"traction", tr},
          {"grf", s.grf},
          {"features", {{"rows", s.features.rows()}, {"cols", s.features.cols()}, {"data", s.features.data()}}}};
}

Sample sample_from_json(const json& j) {
  try {
    Sample s;
    s.id = j.at("id").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.mesh_id = j.at("mesh_id").get<std::string>();
    s.E = j.at("E").get<std::vector<double>>();
    s.nu = j.at("nu").get<std::vector<double>>();
    for (const auto& t : j.at("traction")) s.traction.push_back({t.at(0).get<double>(), t.at(1).get<double>()});
    s.grf = j.value("grf", json::object());
    const auto& f = j.at("features");
    s.features = ad::Tensor::zeros(f.at("rows").get<std::size_t>(), f.at("cols").get<std::size_t>());
    const auto data = f.at("data").get<std::vector<double>>();
    if (data.size() != s.features.data().size()) throw PipelineError("features: data size does not match shape");
    std::copy(data.begin(), data.end(), s.features.data().begin());
    return s;
  } catch (const json::exception& e) {
    throw PipelineError(std::string("sample: ") + e.what());
  }
}

}  // namespace pfem::pipe
