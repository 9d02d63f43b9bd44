#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "softfem/calibrate.hpp"
#include "softfem/damplab.hpp"

namespace softfem::harness {

using Json = nlohmann::ordered_json;
using Vec3 = std::array<double, 3>;
using Res3 = std::array<int, 3>;

// ---------------------------------------------------------------------------
// Experiment configuration

struct MeshConfig {
  std::string kind = "hex8";
  Vec3 dims{0.10, 0.035, 0.035};
  Res3 resolution{12, 4, 4};
  int clamp_axis = 0;
  std::string clamp_side = "min";
  double taper = 0.0;  // tet meshes only
  std::string file;    // plain-text mesh; replaces the generated box when set

  bool operator==(const MeshConfig&) const = default;
};

struct MaterialConfig {
  double youngs_modulus = 263824.0;
  double poisson_ratio = 0.499;
  double density = 1070.0;

  bool operator==(const MaterialConfig&) const = default;
};

struct ForceConfig {
  Vec3 gravity{0.0, 0.0, -kStandardGravity};
  Vec3 edge_force{0.0, 0.0, 0.0};  // N, total, spread over the top edge of the free end
  double edge_ramp = 0.1;
  double damping_lambda = 0.0;

  bool operator==(const ForceConfig&) const = default;
};

struct FiberConfig {
  std::string region = "top";  // top | bottom | left | right | all; unused when elements are listed
  std::vector<int> elements;
  Vec3 direction{1.0, 0.0, 0.0};
  double stiffness = 2e5;
  std::string mode = "extend";
  double frequency = 0.0;
  std::vector<double> values{1.0};

  bool operator==(const FiberConfig&) const = default;
};

struct SolverSettings {
  double h = 0.01;
  double tolerance = 1e-6;
  int max_iterations = 200;
  std::string acceleration = "newton";

  bool operator==(const SolverSettings&) const = default;
};

struct SweepConfig {
  std::string source = "beam";  // beam | oscillator
  std::vector<double> omegas;   // oscillator only
  std::vector<double> hs{0.005, 0.01, 0.02, 0.04};
  std::vector<double> lambdas{0.0};
  std::vector<double> lambda_fractions;  // multiples of lambda_crit
  double trim = 1e-4;

  bool operator==(const SweepConfig&) const = default;
};

struct ParameterConfig {
  std::string kind = "youngs_modulus";
  std::vector<int> fibers;
  std::vector<double> signs;
  double hidden = 263824.0;
  std::optional<double> initial;  // unset: seeded random draw around nominal
  std::optional<double> nominal;  // unset: hidden
  double lower = 1.0;
  double upper = 1e9;

  bool operator==(const ParameterConfig&) const = default;
};

struct LossConfig {
  std::string kind = "trajectory";
  std::vector<std::string> points;  // selectors; empty means every tracked point
  bool all_times_to_final = false;
  int axis = 2;
  double sign = -1.0;
  int peaks = 4;

  bool operator==(const LossConfig&) const = default;
};

struct OptimizerSettings {
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;
  double relative_loss_tolerance = 1e-10;
  int memory = 10;

  bool operator==(const OptimizerSettings&) const = default;
};

struct OptimizationConfig {
  std::string mode = "parameters";  // parameters | sequence | pressure-map
  LossConfig loss;
  std::vector<ParameterConfig> parameters;
  std::vector<int> fibers;
  std::vector<double> signs;
  double frequency = 5.0;
  std::vector<double> hidden_sequence;
  double initial = 1.0;
  std::vector<double> pressures;
  std::vector<double> heldout;
  std::vector<double> law{1.0, 0.004};  // pressure -> activation, increasing degree
  int degree = 2;
  std::optional<double> recovery_tolerance;
  OptimizerSettings optimizer;

  bool operator==(const OptimizationConfig&) const = default;
};

struct ExperimentConfig {
  std::string scenario;
  MeshConfig mesh;
  MaterialConfig material;
  ForceConfig forces;
  std::vector<FiberConfig> fibers;
  SolverSettings solver;
  std::vector<std::string> tracked{"tip-left", "tip-right"};
  double duration = 1.0;
  std::optional<SweepConfig> sweep;
  std::optional<OptimizationConfig> optimization;
  std::string output = "out";

  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Scenario registry

/// Clamped-beam loading case: edge force plus hex and tet resolutions, at
/// desk scale and at the published DOF counts.
struct ScenarioBeamCase {
  std::string id;
  double force = 0.0;  // N
  Res3 hex_desk, hex_full;
  Res3 tet_desk, tet_full;
};

inline const std::vector<ScenarioBeamCase>& beam_cases() {
  static const std::vector<ScenarioBeamCase> cases{
      {"A1", 0.0, {12, 4, 4}, {23, 7, 7}, {12, 4, 4}, {20, 5, 5}},
      {"A2", 0.0, {12, 4, 4}, {23, 7, 7}, {24, 8, 8}, {78, 26, 26}},
      {"B", 0.510, {12, 4, 4}, {23, 7, 7}, {12, 4, 4}, {20, 5, 5}},
      {"C", 0.510, {16, 5, 5}, {32, 9, 9}, {24, 8, 8}, {56, 19, 19}},
      {"D", 0.991, {12, 4, 4}, {23, 7, 7}, {12, 4, 4}, {20, 5, 5}},
      {"E", 0.991, {16, 5, 5}, {32, 9, 9}, {24, 8, 8}, {56, 19, 19}},
  };
  return cases;
}

inline const std::vector<std::string>& scenario_ids() {
  static const std::vector<std::string> ids{
      "beam-A1",         "beam-A2",         "beam-B",     "beam-C",     "beam-D",
      "beam-E",          "damping-sweep",   "oscillator-sweep",         "muscle-AC1",
      "muscle-AC2",      "arm-proxy",       "fish-proxy", "youngs-recovery",
      "actuation-recovery", "envelope-recovery"};
  return ids;
}

inline bool is_scenario(const std::string& id) {
  const auto& ids = scenario_ids();
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

inline ParameterConfig parameter_defaults(const std::string& kind) {
  ParameterConfig p;
  p.kind = kind;
  if (kind == "youngs_modulus") {
    p.hidden = 263824.0, p.lower = 1.0, p.upper = 1e9;
  } else if (kind == "damping_lambda") {
    p.hidden = 0.0, p.lower = -1e6, p.upper = 1e6;
  } else if (kind == "fiber_stiffness") {
    p.hidden = 2e5, p.lower = 1e-6, p.upper = 1e12, p.fibers = {0}, p.signs = {1.0};
  } else if (kind == "actuation") {
    p.hidden = 1.0, p.lower = 0.2, p.upper = 1.8, p.fibers = {0}, p.signs = {1.0};
  } else {
    throw ConfigError("unknown parameter kind '" + kind + "'");
  }
  return p;
}

namespace detail {

inline FiberConfig fiber(const std::string& region, const std::string& mode, double a) {
  FiberConfig f;
  f.region = region;
  f.mode = mode;
  f.values = {a};
  return f;
}

inline ExperimentConfig muscle_bar(const std::string& id) {
  ExperimentConfig c;
  c.scenario = id;
  c.mesh.dims = {0.08, 0.02, 0.02};
  c.mesh.resolution = {8, 2, 2};
  c.forces.gravity = {0.0, 0.0, 0.0};
  c.tracked = {"tip-center", "tip-left", "tip-right"};
  c.duration = 0.3;
  c.fibers = {fiber("top", "extend", 1.1)};
  return c;
}

}  // namespace detail

/// Defaults of a registered scenario. `full_scale` switches beam cases to the
/// published resolutions.
inline ExperimentConfig default_config(const std::string& id, bool full_scale = false) {
  ExperimentConfig c;
  c.scenario = id;
  c.output = "out/" + id;
  if (id.rfind("beam-", 0) == 0) {
    for (const auto& bc : beam_cases())
      if ("beam-" + bc.id == id) {
        c.mesh.resolution = full_scale ? bc.hex_full : bc.hex_desk;
        c.forces.edge_force = {0.0, 0.0, -bc.force};
        return c;
      }
  } else if (id == "damping-sweep") {
    c.mesh.resolution = {4, 2, 2};
    c.tracked = {"tip-center"};
    c.duration = 2.0;
    c.sweep = SweepConfig{};
    c.sweep->lambda_fractions = {0.5, 1.0};
    return c;
  } else if (id == "oscillator-sweep") {
    c.mesh.resolution = {1, 1, 1};
    c.tracked = {"tip-center"};
    SweepConfig s;
    s.source = "oscillator";
    s.omegas = {std::numbers::pi, 2 * std::numbers::pi, 4 * std::numbers::pi};
    s.lambda_fractions = {0.9, 1.0, 1.1};
    c.sweep = s;
    return c;
  } else if (id == "muscle-AC1") {
    auto m = detail::muscle_bar(id);
    m.output = c.output;
    return m;
  } else if (id == "muscle-AC2") {
    auto m = detail::muscle_bar(id);
    m.output = c.output;
    m.fibers.push_back(detail::fiber("bottom", "contract", 0.9));
    return m;
  } else if (id == "arm-proxy") {
    auto m = detail::muscle_bar(id);
    m.output = c.output;
    m.mesh.dims = {0.16, 0.03, 0.03};
    m.duration = 0.1;
    m.fibers = {detail::fiber("top", "extend", 1.0), detail::fiber("bottom", "contract", 1.0)};
    OptimizationConfig o;
    o.mode = "pressure-map";
    o.loss.kind = "final_pose";
    o.fibers = {0, 1};
    o.signs = {1.0, -1.0};
    o.pressures = {10.0, 20.0, 30.0, 40.0};
    o.heldout = {25.0, 35.0};
    o.recovery_tolerance = 0.05;
    m.optimization = o;
    return m;
  } else if (id == "fish-proxy") {
    c.mesh.kind = "tet4";
    c.mesh.dims = {0.12, 0.03, 0.02};
    c.mesh.resolution = {6, 2, 1};
    c.mesh.taper = 0.6;
    c.forces.gravity = {0.0, 0.0, 0.0};
    c.tracked = {"tip-center"};
    c.fibers = {detail::fiber("left", "extend", 1.0), detail::fiber("right", "contract", 1.0)};
    for (auto& f : c.fibers) f.stiffness = 1e5;
    OptimizationConfig o;
    o.mode = "sequence";
    o.fibers = {0, 1};
    o.signs = {1.0, -1.0};
    o.frequency = 5.0;
    o.hidden_sequence = {1.15, 0.9, 1.1, 0.92, 1.05};
    o.recovery_tolerance = 0.05;
    c.optimization = o;
    return c;
  } else if (id == "youngs-recovery") {
    c.mesh.resolution = {4, 2, 2};
    c.duration = 0.2;
    OptimizationConfig o;
    ParameterConfig p = parameter_defaults("youngs_modulus");
    p.initial = 1.5 * p.hidden;
    o.parameters = {p};
    o.recovery_tolerance = 0.02;
    c.optimization = o;
    return c;
  } else if (id == "actuation-recovery") {
    auto m = detail::muscle_bar(id);
    m.output = c.output;
    m.duration = 0.1;
    m.fibers[0].values = {1.0};
    OptimizationConfig o;
    ParameterConfig p = parameter_defaults("actuation");
    p.hidden = 1.15;
    p.initial = 1.0;
    o.parameters = {p};
    o.recovery_tolerance = 0.05;
    m.optimization = o;
    return m;
  } else if (id == "envelope-recovery") {
    c.mesh.resolution = {4, 2, 2};
    c.duration = 0.5;
    c.tracked = {"face-center:x+"};
    OptimizationConfig o;
    o.loss.kind = "envelope";
    ParameterConfig p = parameter_defaults("damping_lambda");
    p.hidden = 12.0;
    p.initial = 4.0;
    p.lower = -50.0;
    p.upper = 25.0;
    o.parameters = {p};
    o.recovery_tolerance = 0.05;
    c.optimization = o;
    return c;
  }
  std::string known;
  for (const auto& s : scenario_ids()) known += (known.empty() ? "" : ", ") + s;
  throw ConfigError("/scenario: unknown scenario '" + id + "' (registered: " + known + ")");
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace detail {

inline Json optional_json(const std::optional<double>& x) { return x ? Json(*x) : Json(nullptr); }

}  // namespace detail

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["scenario"] = c.scenario;
  j["mesh"] = {{"kind", c.mesh.kind},           {"dims", c.mesh.dims},
               {"resolution", c.mesh.resolution}, {"clamp_axis", c.mesh.clamp_axis},
               {"clamp_side", c.mesh.clamp_side}, {"taper", c.mesh.taper},
               {"file", c.mesh.file}};
  j["material"] = {{"youngs_modulus", c.material.youngs_modulus},
                   {"poisson_ratio", c.material.poisson_ratio},
                   {"density", c.material.density}};
  j["forces"] = {{"gravity", c.forces.gravity},
                 {"edge_force", c.forces.edge_force},
                 {"edge_ramp", c.forces.edge_ramp},
                 {"damping_lambda", c.forces.damping_lambda}};
  j["fibers"] = Json::array();
  for (const auto& f : c.fibers)
    j["fibers"].push_back({{"region", f.region},
                           {"elements", f.elements},
                           {"direction", f.direction},
                           {"stiffness", f.stiffness},
                           {"mode", f.mode},
                           {"frequency", f.frequency},
                           {"values", f.values}});
  j["solver"] = {{"h", c.solver.h},
                 {"tolerance", c.solver.tolerance},
                 {"max_iterations", c.solver.max_iterations},
                 {"acceleration", c.solver.acceleration}};
  j["tracked"] = c.tracked;
  j["duration"] = c.duration;
  if (c.sweep) {
    const auto& s = *c.sweep;
    j["sweep"] = {{"source", s.source},   {"omegas", s.omegas},
                  {"hs", s.hs},           {"lambdas", s.lambdas},
                  {"lambda_fractions", s.lambda_fractions}, {"trim", s.trim}};
  } else {
    j["sweep"] = nullptr;
  }
  if (c.optimization) {
    const auto& o = *c.optimization;
    Json params = Json::array();
    for (const auto& p : o.parameters)
      params.push_back({{"kind", p.kind},
                        {"fibers", p.fibers},
                        {"signs", p.signs},
                        {"hidden", p.hidden},
                        {"initial", detail::optional_json(p.initial)},
                        {"nominal", detail::optional_json(p.nominal)},
                        {"lower", p.lower},
                        {"upper", p.upper}});
    j["optimization"] = {
        {"mode", o.mode},
        {"loss",
         {{"kind", o.loss.kind},
          {"points", o.loss.points},
          {"all_times_to_final", o.loss.all_times_to_final},
          {"axis", o.loss.axis},
          {"sign", o.loss.sign},
          {"peaks", o.loss.peaks}}},
        {"parameters", params},
        {"fibers", o.fibers},
        {"signs", o.signs},
        {"frequency", o.frequency},
        {"hidden_sequence", o.hidden_sequence},
        {"initial", o.initial},
        {"pressures", o.pressures},
        {"heldout", o.heldout},
        {"law", o.law},
        {"degree", o.degree},
        {"recovery_tolerance", detail::optional_json(o.recovery_tolerance)},
        {"optimizer",
         {{"max_iterations", o.optimizer.max_iterations},
          {"gradient_tolerance", o.optimizer.gradient_tolerance},
          {"relative_loss_tolerance", o.optimizer.relative_loss_tolerance},
          {"memory", o.optimizer.memory}}}};
  } else {
    j["optimization"] = nullptr;
  }
  j["output"] = c.output;
  return j;
}

inline std::string serialize(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

namespace detail {

/// Typed access to one JSON object; every error names the field's path.
class Fields {
 public:
  Fields(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError((path_.empty() ? "/" : path_) + ": expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) fail(it.key(), "unknown field");
  }

  bool has(const std::string& k) const { return j_.contains(k); }
  const Json& at(const std::string& k) const { return j_.at(k); }
  std::string path(const std::string& k) const { return path_ + "/" + k; }

  [[noreturn]] void fail(const std::string& k, const std::string& msg) const {
    throw ConfigError(path(k) + ": " + msg);
  }

  void read(const std::string& k, double& out) const {
    if (!has(k)) return;
    out = number(at(k), k);
  }
  void read(const std::string& k, int& out) const {
    if (!has(k)) return;
    out = integer(at(k), k);
  }
  void read(const std::string& k, bool& out) const {
    if (!has(k)) return;
    if (!at(k).is_boolean()) fail(k, "expected true or false");
    out = at(k).get<bool>();
  }
  void read(const std::string& k, std::string& out) const {
    if (!has(k)) return;
    if (!at(k).is_string()) fail(k, "expected a string");
    out = at(k).get<std::string>();
  }
  void read(const std::string& k, std::optional<double>& out) const {
    if (!has(k)) return;
    if (at(k).is_null())
      out.reset();
    else
      out = number(at(k), k);
  }
  template <class T, std::size_t N>
  void read(const std::string& k, std::array<T, N>& out) const {
    if (!has(k)) return;
    std::vector<T> v;
    read(k, v);
    if (v.size() != N) fail(k, "expected " + std::to_string(N) + " entries");
    std::copy(v.begin(), v.end(), out.begin());
  }
  void read(const std::string& k, std::vector<double>& out) const {
    if (!has(k)) return;
    out.clear();
    const Json& a = array(k);
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(number(a[i], k + "/" + std::to_string(i)));
  }
  void read(const std::string& k, std::vector<int>& out) const {
    if (!has(k)) return;
    out.clear();
    const Json& a = array(k);
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(integer(a[i], k + "/" + std::to_string(i)));
  }
  void read(const std::string& k, std::vector<std::string>& out) const {
    if (!has(k)) return;
    out.clear();
    const Json& a = array(k);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_string()) fail(k + "/" + std::to_string(i), "expected a string");
      out.push_back(a[i].get<std::string>());
    }
  }

  const Json& array(const std::string& k) const {
    if (!at(k).is_array()) fail(k, "expected an array");
    return at(k);
  }

 private:
  double number(const Json& v, const std::string& k) const {
    if (!v.is_number()) fail(k, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail(k, "expected a finite number");
    return x;
  }
  int integer(const Json& v, const std::string& k) const {
    if (!v.is_number_integer()) fail(k, "expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) fail(k, "integer out of range");
    return static_cast<int>(x);
  }

  const Json& j_;
  std::string path_;
};

inline void read_mesh_config(const Fields& f, MeshConfig& m) {
  f.allow({"kind", "dims", "resolution", "clamp_axis", "clamp_side", "taper", "file"});
  f.read("kind", m.kind);
  f.read("dims", m.dims);
  f.read("resolution", m.resolution);
  f.read("clamp_axis", m.clamp_axis);
  f.read("clamp_side", m.clamp_side);
  f.read("taper", m.taper);
  f.read("file", m.file);
}

inline void read_optimization(const Fields& f, OptimizationConfig& o) {
  f.allow({"mode", "loss", "parameters", "fibers", "signs", "frequency", "hidden_sequence", "initial", "pressures",
           "heldout", "law", "degree", "recovery_tolerance", "optimizer"});
  f.read("mode", o.mode);
  if (f.has("loss")) {
    const Fields l(f.at("loss"), f.path("loss"));
    l.allow({"kind", "points", "all_times_to_final", "axis", "sign", "peaks"});
    l.read("kind", o.loss.kind);
    l.read("points", o.loss.points);
    l.read("all_times_to_final", o.loss.all_times_to_final);
    l.read("axis", o.loss.axis);
    l.read("sign", o.loss.sign);
    l.read("peaks", o.loss.peaks);
  }
  if (f.has("parameters")) {
    o.parameters.clear();
    const Json& a = f.array("parameters");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Fields p(a[i], f.path("parameters") + "/" + std::to_string(i));
      p.allow({"kind", "fibers", "signs", "hidden", "initial", "nominal", "lower", "upper"});
      std::string kind = "youngs_modulus";
      p.read("kind", kind);
      ParameterConfig pc;
      try {
        pc = parameter_defaults(kind);
      } catch (const ConfigError&) {
        p.fail("kind", "unknown parameter kind '" + kind + "'");
      }
      p.read("fibers", pc.fibers);
      p.read("signs", pc.signs);
      p.read("hidden", pc.hidden);
      p.read("initial", pc.initial);
      p.read("nominal", pc.nominal);
      p.read("lower", pc.lower);
      p.read("upper", pc.upper);
      o.parameters.push_back(pc);
    }
  }
  f.read("fibers", o.fibers);
  f.read("signs", o.signs);
  f.read("frequency", o.frequency);
  f.read("hidden_sequence", o.hidden_sequence);
  f.read("initial", o.initial);
  f.read("pressures", o.pressures);
  f.read("heldout", o.heldout);
  f.read("law", o.law);
  f.read("degree", o.degree);
  f.read("recovery_tolerance", o.recovery_tolerance);
  if (f.has("optimizer")) {
    const Fields p(f.at("optimizer"), f.path("optimizer"));
    p.allow({"max_iterations", "gradient_tolerance", "relative_loss_tolerance", "memory"});
    p.read("max_iterations", o.optimizer.max_iterations);
    p.read("gradient_tolerance", o.optimizer.gradient_tolerance);
    p.read("relative_loss_tolerance", o.optimizer.relative_loss_tolerance);
    p.read("memory", o.optimizer.memory);
  }
}

inline std::string line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

/// Checks ranges and cross-field consistency; errors name the field path.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); };
  if (!is_scenario(c.scenario)) fail("/scenario", "unknown scenario '" + c.scenario + "'");
  const auto& m = c.mesh;
  if (m.kind != "hex8" && m.kind != "tet4") fail("/mesh/kind", "expected hex8 or tet4");
  if (m.file.empty()) {
    for (int d = 0; d < 3; ++d) {
      if (!(m.dims[d] > 0.0)) fail("/mesh/dims/" + std::to_string(d), "must be positive");
      if (m.resolution[d] < 1) fail("/mesh/resolution/" + std::to_string(d), "must be at least 1");
    }
  } else if (!std::filesystem::exists(m.file)) {
    fail("/mesh/file", "file '" + m.file + "' does not exist");
  }
  if (m.clamp_axis < 0 || m.clamp_axis > 2) fail("/mesh/clamp_axis", "expected 0, 1 or 2");
  if (m.clamp_side != "min" && m.clamp_side != "max") fail("/mesh/clamp_side", "expected min or max");
  if (!(m.taper >= 0.0 && m.taper < 1.0)) fail("/mesh/taper", "must lie in [0, 1)");
  if (m.taper > 0.0 && m.kind != "tet4") fail("/mesh/taper", "tapering needs mesh kind tet4");
  if (!(c.material.youngs_modulus > 0.0)) fail("/material/youngs_modulus", "must be positive");
  if (!(c.material.poisson_ratio >= 0.0 && c.material.poisson_ratio < 0.5))
    fail("/material/poisson_ratio", "must lie in [0, 0.5)");
  if (!(c.material.density > 0.0)) fail("/material/density", "must be positive");
  if (c.forces.edge_ramp < 0.0) fail("/forces/edge_ramp", "must be nonnegative");
  for (std::size_t i = 0; i < c.fibers.size(); ++i) {
    const auto& f = c.fibers[i];
    const std::string p = "/fibers/" + std::to_string(i);
    static const std::vector<std::string> regions{"top", "bottom", "left", "right", "all"};
    if (f.elements.empty() && std::find(regions.begin(), regions.end(), f.region) == regions.end())
      fail(p + "/region", "expected top, bottom, left, right or all");
    for (std::size_t k = 0; k < f.elements.size(); ++k)
      if (f.elements[k] < 0) fail(p + "/elements/" + std::to_string(k), "must be nonnegative");
    const double n = std::sqrt(f.direction[0] * f.direction[0] + f.direction[1] * f.direction[1] +
                               f.direction[2] * f.direction[2]);
    if (!(n > 0.0)) fail(p + "/direction", "must be nonzero");
    if (!(f.stiffness > 0.0)) fail(p + "/stiffness", "must be positive");
    if (f.mode != "extend" && f.mode != "contract") fail(p + "/mode", "expected extend or contract");
    if (f.frequency < 0.0) fail(p + "/frequency", "must be nonnegative");
    if (f.values.empty()) fail(p + "/values", "must not be empty");
    for (double a : f.values)
      if (!(a > 0.0)) fail(p + "/values", "activations must be positive");
  }
  if (!(c.solver.h > 0.0)) fail("/solver/h", "must be positive");
  if (!(c.solver.tolerance > 0.0)) fail("/solver/tolerance", "must be positive");
  if (c.solver.max_iterations < 1) fail("/solver/max_iterations", "must be at least 1");
  try {
    acceleration_from_string(c.solver.acceleration);
  } catch (const InvalidArgument&) {
    fail("/solver/acceleration", "expected none, anderson or newton");
  }
  if (c.tracked.empty()) fail("/tracked", "at least one tracked point is required");
  for (std::size_t i = 0; i < c.tracked.size(); ++i) {
    const auto& s = c.tracked[i];
    static const std::vector<std::string> named{"tip-left", "tip-right", "tip-center"};
    const bool ok = std::find(named.begin(), named.end(), s) != named.end() ||
                    (s.rfind("face-center:", 0) == 0 && s.size() == 14 && std::string("xyz").find(s[12]) != std::string::npos &&
                     (s[13] == '+' || s[13] == '-')) ||
                    (s.rfind("node:", 0) == 0 && s.size() > 5 &&
                     s.find_first_not_of("0123456789", 5) == std::string::npos);
    if (!ok) fail("/tracked/" + std::to_string(i), "unknown selector '" + s + "'");
  }
  if (!(c.duration >= 0.0)) fail("/duration", "must be nonnegative");
  auto check_multiple = [&](double h, const std::string& path) {
    const double n = std::round(c.duration / h);
    if (std::abs(n * h - c.duration) > 1e-9) fail(path, "duration " + format_number(c.duration) +
                                                            " s is not a multiple of h=" + format_number(h));
  };
  check_multiple(c.solver.h, "/duration");
  if (c.sweep) {
    const auto& s = *c.sweep;
    if (s.source != "beam" && s.source != "oscillator") fail("/sweep/source", "expected beam or oscillator");
    if (s.hs.empty()) fail("/sweep/hs", "must not be empty");
    for (std::size_t i = 0; i < s.hs.size(); ++i) {
      if (!(s.hs[i] > 0.0)) fail("/sweep/hs/" + std::to_string(i), "must be positive");
      if (s.source == "beam") check_multiple(s.hs[i], "/sweep/hs/" + std::to_string(i));
    }
    if (s.source == "oscillator" && s.omegas.empty()) fail("/sweep/omegas", "oscillator sweeps need frequencies");
    for (std::size_t i = 0; i < s.omegas.size(); ++i)
      if (!(s.omegas[i] > 0.0)) fail("/sweep/omegas/" + std::to_string(i), "must be positive");
    if (!(s.trim >= 0.0 && s.trim < 1.0)) fail("/sweep/trim", "must lie in [0, 1)");
  }
  if (c.optimization) {
    const auto& o = *c.optimization;
    if (o.mode != "parameters" && o.mode != "sequence" && o.mode != "pressure-map")
      fail("/optimization/mode", "expected parameters, sequence or pressure-map");
    try {
      loss_kind_from_string(o.loss.kind);
    } catch (const InvalidArgument&) {
      fail("/optimization/loss/kind", "unknown loss '" + o.loss.kind + "'");
    }
    if (o.loss.axis < 0 || o.loss.axis > 2) fail("/optimization/loss/axis", "expected 0, 1 or 2");
    if (o.loss.sign != 1.0 && o.loss.sign != -1.0) fail("/optimization/loss/sign", "expected 1 or -1");
    if (o.loss.peaks < 1) fail("/optimization/loss/peaks", "must be at least 1");
    if (o.mode == "parameters" && o.parameters.empty()) fail("/optimization/parameters", "must not be empty");
    for (std::size_t i = 0; i < o.parameters.size(); ++i) {
      const auto& p = o.parameters[i];
      const std::string path = "/optimization/parameters/" + std::to_string(i);
      if (!(p.lower <= p.upper)) fail(path + "/lower", "lower bound exceeds upper bound");
      if (p.hidden < p.lower || p.hidden > p.upper) fail(path + "/hidden", "outside the bounds");
      if (p.initial && (*p.initial < p.lower || *p.initial > p.upper)) fail(path + "/initial", "outside the bounds");
      if (p.signs.size() != p.fibers.size()) fail(path + "/signs", "needs one sign per fiber");
      for (std::size_t k = 0; k < p.fibers.size(); ++k)
        if (p.fibers[k] < 0 || p.fibers[k] >= static_cast<int>(c.fibers.size()))
          fail(path + "/fibers/" + std::to_string(k), "no such fiber");
    }
    if (o.mode != "parameters") {
      if (o.fibers.empty()) fail("/optimization/fibers", "must not be empty");
      if (o.signs.size() != o.fibers.size()) fail("/optimization/signs", "needs one sign per fiber");
      for (std::size_t k = 0; k < o.fibers.size(); ++k)
        if (o.fibers[k] < 0 || o.fibers[k] >= static_cast<int>(c.fibers.size()))
          fail("/optimization/fibers/" + std::to_string(k), "no such fiber");
    }
    if (o.mode == "sequence") {
      if (!(o.frequency > 0.0)) fail("/optimization/frequency", "must be positive");
      const int count = ActuationSignal::decision_count(c.duration, o.frequency);
      if (static_cast<int>(o.hidden_sequence.size()) != count)
        fail("/optimization/hidden_sequence", "expected " + std::to_string(count) + " values for " +
                                                  format_number(c.duration) + " s at " +
                                                  format_number(o.frequency) + " Hz");
    }
    if (o.mode == "pressure-map") {
      if (o.pressures.size() < 3) fail("/optimization/pressures", "needs at least 3 pressures");
      if (o.law.empty()) fail("/optimization/law", "must not be empty");
      if (o.degree < 0) fail("/optimization/degree", "must be nonnegative");
    }
    if (o.optimizer.max_iterations < 1) fail("/optimization/optimizer/max_iterations", "must be at least 1");
    if (o.optimizer.memory < 1) fail("/optimization/optimizer/memory", "must be at least 1");
    if (o.recovery_tolerance && !(*o.recovery_tolerance > 0.0))
      fail("/optimization/recovery_tolerance", "must be positive");
  }
  if (c.output.empty()) fail("/output", "must not be empty");
}

/// Parses a config: the scenario's defaults overlaid with every field present.
inline ExperimentConfig parse_config(const std::string& text, bool full_scale = false) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + detail::line_column(text, e.byte) + ": malformed JSON (" + e.what() + ")");
  }
  const detail::Fields f(j, "");
  f.allow({"scenario", "mesh", "material", "forces", "fibers", "solver", "tracked", "duration", "sweep",
           "optimization", "output"});
  if (!f.has("scenario")) throw ConfigError("/scenario: missing");
  std::string id;
  f.read("scenario", id);
  ExperimentConfig c = default_config(id, full_scale);
  if (f.has("mesh")) {
    const detail::Fields m(f.at("mesh"), "/mesh");
    const std::string kind_before = c.mesh.kind;
    detail::read_mesh_config(m, c.mesh);
    // Switching a beam case to tets picks the case's tet resolution.
    if (c.mesh.kind != kind_before && !m.has("resolution") && id.rfind("beam-", 0) == 0)
      for (const auto& bc : beam_cases())
        if ("beam-" + bc.id == id)
          c.mesh.resolution = c.mesh.kind == "tet4" ? (full_scale ? bc.tet_full : bc.tet_desk)
                                                    : (full_scale ? bc.hex_full : bc.hex_desk);
  }
  if (f.has("material")) {
    const detail::Fields m(f.at("material"), "/material");
    m.allow({"youngs_modulus", "poisson_ratio", "density"});
    m.read("youngs_modulus", c.material.youngs_modulus);
    m.read("poisson_ratio", c.material.poisson_ratio);
    m.read("density", c.material.density);
  }
  if (f.has("forces")) {
    const detail::Fields m(f.at("forces"), "/forces");
    m.allow({"gravity", "edge_force", "edge_ramp", "damping_lambda"});
    m.read("gravity", c.forces.gravity);
    m.read("edge_force", c.forces.edge_force);
    m.read("edge_ramp", c.forces.edge_ramp);
    m.read("damping_lambda", c.forces.damping_lambda);
  }
  if (f.has("fibers")) {
    c.fibers.clear();
    const Json& a = f.array("fibers");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const detail::Fields m(a[i], "/fibers/" + std::to_string(i));
      m.allow({"region", "elements", "direction", "stiffness", "mode", "frequency", "values"});
      FiberConfig fc;
      m.read("region", fc.region);
      m.read("elements", fc.elements);
      m.read("direction", fc.direction);
      m.read("stiffness", fc.stiffness);
      m.read("mode", fc.mode);
      m.read("frequency", fc.frequency);
      m.read("values", fc.values);
      c.fibers.push_back(fc);
    }
  }
  if (f.has("solver")) {
    const detail::Fields m(f.at("solver"), "/solver");
    m.allow({"h", "tolerance", "max_iterations", "acceleration"});
    m.read("h", c.solver.h);
    m.read("tolerance", c.solver.tolerance);
    m.read("max_iterations", c.solver.max_iterations);
    m.read("acceleration", c.solver.acceleration);
  }
  f.read("tracked", c.tracked);
  f.read("duration", c.duration);
  if (f.has("sweep")) {
    if (f.at("sweep").is_null()) {
      c.sweep.reset();
    } else {
      const detail::Fields m(f.at("sweep"), "/sweep");
      m.allow({"source", "omegas", "hs", "lambdas", "lambda_fractions", "trim"});
      SweepConfig s = c.sweep.value_or(SweepConfig{});
      m.read("source", s.source);
      m.read("omegas", s.omegas);
      m.read("hs", s.hs);
      m.read("lambdas", s.lambdas);
      m.read("lambda_fractions", s.lambda_fractions);
      m.read("trim", s.trim);
      c.sweep = s;
    }
  }
  if (f.has("optimization")) {
    if (f.at("optimization").is_null()) {
      c.optimization.reset();
    } else {
      OptimizationConfig o = c.optimization.value_or(OptimizationConfig{});
      detail::read_optimization(detail::Fields(f.at("optimization"), "/optimization"), o);
      c.optimization = o;
    }
  }
  f.read("output", c.output);
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, bool full_scale = false) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), full_scale);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Building simulations from configs

struct Experiment {
  ExperimentConfig config;
  Scenario scenario;
  std::vector<int> tracked;  // node ids, parallel to config.tracked
  std::vector<MuscleFiber> fibers;

  const Mesh& mesh() const { return scenario.simulator.model().mesh(); }
  int dofs() const { return 3 * mesh().num_nodes(); }
};

namespace detail {

inline Eigen::Vector3d vec(const Vec3& v) { return {v[0], v[1], v[2]}; }

inline Mesh make_mesh(const MeshConfig& m) {
  Mesh mesh;
  if (!m.file.empty()) {
    std::ifstream in(m.file);
    if (!in) throw ConfigError("/mesh/file: cannot open '" + m.file + "'");
    try {
      mesh = read_mesh(in);
    } catch (const InvalidArgument& e) {
      throw ConfigError("/mesh/file: " + std::string(e.what()));
    }
  } else {
    const ElementKind kind = element_kind_from_string(m.kind);
    mesh = kind == ElementKind::hex8 ? build_hex_box(vec(m.dims), m.resolution) : build_tet_box(vec(m.dims), m.resolution);
    if (m.taper > 0.0) mesh = taper_box(mesh, m.clamp_axis, m.taper);
  }
  return clamp_face(mesh, m.clamp_axis, m.clamp_side == "min" ? Side::min : Side::max);
}

/// Point on the free end of the body (the face opposite the clamp).
inline Eigen::Vector3d tip_point(const Mesh& mesh, const MeshConfig& m, double lateral, double vertical) {
  const auto [lo, hi] = bounding_box(mesh);
  const int a = m.clamp_axis, a1 = (a + 1) % 3, a2 = (a + 2) % 3;
  Eigen::Vector3d p;
  p[a] = m.clamp_side == "min" ? hi[a] : lo[a];
  p[a1] = lo[a1] + lateral * (hi[a1] - lo[a1]);
  p[a2] = lo[a2] + vertical * (hi[a2] - lo[a2]);
  return p;
}

}  // namespace detail

/// Resolves a tracked-point selector to the nearest mesh node.
inline int resolve_selector(const Mesh& mesh, const MeshConfig& m, const std::string& sel) {
  if (sel == "tip-left") return nearest_node(mesh, detail::tip_point(mesh, m, 0.0, 1.0));
  if (sel == "tip-right") return nearest_node(mesh, detail::tip_point(mesh, m, 1.0, 1.0));
  if (sel == "tip-center") return nearest_node(mesh, detail::tip_point(mesh, m, 0.5, 0.5));
  if (sel.rfind("face-center:", 0) == 0 && sel.size() == 14) {
    const int axis = static_cast<int>(std::string("xyz").find(sel[12]));
    const auto [lo, hi] = bounding_box(mesh);
    Eigen::Vector3d p = 0.5 * (lo + hi);
    p[axis] = sel[13] == '+' ? hi[axis] : lo[axis];
    return nearest_node(mesh, p);
  }
  if (sel.rfind("node:", 0) == 0) {
    const int n = std::stoi(sel.substr(5));
    if (n < 0 || n >= mesh.num_nodes()) throw ConfigError("/tracked: node " + std::to_string(n) + " out of range");
    return n;
  }
  throw ConfigError("/tracked: unknown selector '" + sel + "'");
}

inline std::vector<MuscleFiber> make_fibers(const Mesh& mesh, const ExperimentConfig& c) {
  const auto [lo, hi] = bounding_box(mesh);
  const Eigen::Vector3d mid = 0.5 * (lo + hi);
  std::vector<MuscleFiber> out;
  for (std::size_t i = 0; i < c.fibers.size(); ++i) {
    const auto& f = c.fibers[i];
    const std::string path = "/fibers/" + std::to_string(i);
    MuscleFiber m;
    if (!f.elements.empty()) {
      for (std::size_t k = 0; k < f.elements.size(); ++k)
        if (f.elements[k] >= mesh.num_elements())
          throw ConfigError(path + "/elements/" + std::to_string(k) + ": element " + std::to_string(f.elements[k]) +
                            " out of range (mesh has " + std::to_string(mesh.num_elements()) + ")");
      m.elements = f.elements;
    } else {
      m.elements = select_elements(mesh, [&](const Eigen::Vector3d& x) {
        if (f.region == "top") return x.z() > mid.z();
        if (f.region == "bottom") return x.z() < mid.z();
        if (f.region == "left") return x.y() < mid.y();
        if (f.region == "right") return x.y() > mid.y();
        return true;
      });
      if (m.elements.empty()) throw ConfigError(path + "/region: selects no elements");
    }
    m.direction = detail::vec(f.direction).normalized();
    m.stiffness = f.stiffness;
    m.mode = fiber_mode_from_string(f.mode);
    out.push_back(std::move(m));
  }
  return out;
}

inline ActuationSchedule make_schedule(const ExperimentConfig& c) {
  ActuationSchedule s;
  for (const auto& f : c.fibers) s.push_back(ActuationSignal{f.frequency, f.values});
  return s;
}

inline Experiment build(const ExperimentConfig& c) {
  validate(c);
  Mesh mesh = detail::make_mesh(c.mesh);
  std::vector<MuscleFiber> fibers = make_fibers(mesh, c);
  ForceSpec forces;
  forces.gravity = detail::vec(c.forces.gravity);
  forces.damping_lambda = c.forces.damping_lambda;
  const Eigen::Vector3d edge = detail::vec(c.forces.edge_force);
  if (edge.norm() > 0.0) {
    // Top edge of the free end.
    const int a = c.mesh.clamp_axis, up = (a + 2) % 3;
    const auto face = face_nodes(mesh, a, c.mesh.clamp_side == "min" ? Side::max : Side::min);
    double top = -std::numeric_limits<double>::infinity();
    for (int n : face) top = std::max(top, mesh.nodes[n][up]);
    EdgeLoad load;
    for (int n : face)
      if (std::abs(mesh.nodes[n][up] - top) <= 1e-9) load.nodes.push_back(n);
    load.force = edge;
    load.ramp = c.forces.edge_ramp;
    forces.edge_loads.push_back(load);
  }
  SolverConfig sc;
  sc.h = c.solver.h;
  sc.tolerance = c.solver.tolerance;
  sc.max_iterations = c.solver.max_iterations;
  sc.acceleration = acceleration_from_string(c.solver.acceleration);
  Material mat{c.material.youngs_modulus, c.material.poisson_ratio, c.material.density};
  std::vector<int> tracked;
  for (const auto& s : c.tracked) tracked.push_back(resolve_selector(mesh, c.mesh, s));
  Simulator sim(EnergyModel(mesh, mat, fibers), forces, sc);
  State initial = sim.rest_state();
  return Experiment{c, Scenario{std::move(sim), std::move(initial), c.duration, make_schedule(c)}, std::move(tracked),
                    std::move(fibers)};
}

// ---------------------------------------------------------------------------
// Commands

struct RunOptions {
  std::filesystem::path out;  // empty: the config's output directory
  std::uint64_t seed = 1;
  int parallel = 1;
};

/// Summary plus process status: 0 success, 4 a recovery check failed.
struct RunResult {
  Json summary;
  int status = 0;
};

namespace detail {

inline std::filesystem::path out_dir(const ExperimentConfig& c, const RunOptions& o) {
  std::filesystem::path p = o.out.empty() ? std::filesystem::path(c.output) : o.out;
  std::filesystem::create_directories(p);
  return p;
}

template <class F>
void write_file(const std::filesystem::path& path, F&& fill) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  fill(os);
}

inline Json point_json(const Eigen::Vector3d& p) { return Json::array({p.x(), p.y(), p.z()}); }

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Static equilibrium; a failed reference solve is reported as a solver failure.
inline Eigen::VectorXd steady_state(const Simulator& sim, const ActuationSchedule& schedule, double t) {
  try {
    return sim.static_equilibrium(activation_at(schedule, t));
  } catch (const OracleError& e) {
    throw ConvergenceError(std::string("steady-state solve failed: ") + e.what(), 0.0);
  }
}

struct Oscillation {
  int axis = 2;
  double baseline = 0.0;
  double sign = 1.0;
  PeakSeries peaks;
  double zeta = std::numeric_limits<double>::quiet_NaN();
  double omega = std::numeric_limits<double>::quiet_NaN();
  std::string flag;
};

/// Decay of one coordinate about its steady value: peaks of the overshoot,
/// measured damping ratio and the undamped dominant frequency.
inline Oscillation measure_oscillation(const std::vector<double>& series, int axis, double baseline, double rest,
                                       double h, double trim) {
  Oscillation o;
  o.axis = axis;
  o.baseline = baseline;
  o.sign = baseline < rest ? -1.0 : 1.0;
  std::vector<double> s(series.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = o.sign * (series[i] - baseline);
  s = trim_decayed(std::move(s), 0.0, trim);
  try {
    o.peaks = extract_peaks(s, 0.0);
    o.zeta = damping_ratio(log_decrement(o.peaks));
    o.omega = continuous_frequency(dominant_frequency(s, h, 0.0), h);
  } catch (const std::exception& e) {
    o.flag = e.what();
  }
  return o;
}

inline Json number_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

}  // namespace detail

inline RunResult run_simulate(const ExperimentConfig& c, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const Experiment ex = build(c);
  const auto dir = detail::out_dir(c, opt);
  const Simulator& sim = ex.scenario.simulator;
  const Eigen::VectorXd steady = detail::steady_state(sim, ex.scenario.schedule, c.duration);
  const Rollout r = simulate(sim, ex.scenario.initial, c.duration, ex.scenario.schedule);
  const Trajectory tr = track(r, ex.tracked);
  detail::write_file(dir / "trajectory.csv", [&](std::ostream& os) { write_trajectory_csv(os, tr); });

  Json points = Json::array();
  for (std::size_t p = 0; p < ex.tracked.size(); ++p) {
    const int n = ex.tracked[p];
    const Eigen::Vector3d x = steady.segment<3>(3 * n);
    points.push_back({{"name", c.tracked[p]},
                      {"node", n},
                      {"steady_position", detail::point_json(x)},
                      {"steady_displacement", detail::point_json(x - ex.mesh().nodes[n])},
                      {"final_position", detail::point_json(tr.positions.back()[p])}});
  }
  // Oscillation of the first tracked point along its largest steady displacement.
  const int n0 = ex.tracked[0];
  const Eigen::Vector3d d0 = steady.segment<3>(3 * n0) - ex.mesh().nodes[n0];
  int axis = 2;
  d0.cwiseAbs().maxCoeff(&axis);
  const auto osc = detail::measure_oscillation(tr.series(0, axis), axis, steady[3 * n0 + axis],
                                               ex.mesh().nodes[n0][axis], c.solver.h, 1e-4);
  detail::write_file(dir / "peaks.csv", [&](std::ostream& os) {
    os << "index,t,amplitude\n" << std::setprecision(17);
    for (std::size_t k = 0; k < osc.peaks.size(); ++k)
      os << k << ',' << osc.peaks.positions[k] * c.solver.h << ',' << osc.peaks.amplitudes[k] << '\n';
  });
  int max_its = 0;
  double mean_its = 0.0;
  for (int i : r.iterations) {
    max_its = std::max(max_its, i);
    mean_its += i;
  }
  if (!r.iterations.empty()) mean_its /= static_cast<double>(r.iterations.size());
  Json oscillation = {{"axis", axis},
                      {"baseline", osc.baseline},
                      {"peaks", osc.peaks.size()},
                      {"zeta_measured", detail::number_or_null(osc.zeta)},
                      {"omega_dominant", detail::number_or_null(osc.omega)},
                      {"zeta_numerical",
                       std::isfinite(osc.omega) ? Json(zeta_analytic(osc.omega, c.solver.h)) : Json(nullptr)}};
  if (!osc.flag.empty()) oscillation["flag"] = osc.flag;
  RunResult res;
  res.summary = {{"command", "simulate"},
                 {"scenario", c.scenario},
                 {"element_kind", c.mesh.kind},
                 {"dofs", ex.dofs()},
                 {"steps", static_cast<int>(r.iterations.size())},
                 {"iterations_mean", mean_its},
                 {"iterations_max", max_its},
                 {"tracked", points},
                 {"oscillation", oscillation},
                 {"elapsed_seconds", detail::seconds_since(t0)}};
  return res;
}

inline RunResult run_damping_sweep(const ExperimentConfig& c, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!c.sweep) throw ConfigError("/sweep: damping-sweep needs a sweep section");
  validate(c);
  const SweepConfig& s = *c.sweep;
  const auto dir = detail::out_dir(c, opt);
  std::vector<std::vector<SweepRow>> groups;
  if (s.source == "oscillator") {
    groups.resize(s.omegas.size() * s.hs.size());
    parallel_for(static_cast<int>(groups.size()), opt.parallel, [&](int g) {
      const double w = s.omegas[g / s.hs.size()], h = s.hs[g % s.hs.size()];
      const double lc = lambda_crit(w, h);
      for (double l : s.lambdas) groups[g].push_back(oscillator_sweep_point(w, h, l));
      for (double f : s.lambda_fractions) groups[g].push_back(oscillator_sweep_point(w, h, f * lc));
    });
  } else {
    groups.resize(s.hs.size());
    parallel_for(static_cast<int>(groups.size()), opt.parallel, [&](int g) {
      const double h = s.hs[g];
      ExperimentConfig cc = c;
      cc.solver.h = h;
      cc.forces.damping_lambda = 0.0;
      Experiment ex = build(cc);
      Simulator& sim = ex.scenario.simulator;
      const int n0 = ex.tracked[0];
      const Eigen::VectorXd steady = detail::steady_state(sim, ex.scenario.schedule, c.duration);
      int axis = 2;
      (steady.segment<3>(3 * n0) - ex.mesh().nodes[n0]).cwiseAbs().maxCoeff(&axis);
      auto run = [&](double lambda) {
        sim.set_damping_lambda(lambda);
        const Trajectory tr = track(simulate(sim, ex.scenario.initial, c.duration, ex.scenario.schedule), {n0});
        return detail::measure_oscillation(tr.series(0, axis), axis, steady[3 * n0 + axis],
                                           ex.mesh().nodes[n0][axis], h, s.trim);
      };
      const auto free = run(0.0);
      const double omega = free.omega;
      auto row = [&](double lambda, const detail::Oscillation& o) {
        SweepRow r{omega, h, lambda};
        r.zeta_measured = o.zeta;
        r.flag = o.flag;
        if (std::isfinite(omega)) {
          r.zeta_analytic = zeta_analytic(omega, h);
          r.lambda_crit = lambda_crit(omega, h);
          r.constant_amplitude = o.flag.empty() && is_constant_amplitude(o.zeta, r.zeta_analytic);
        } else {
          r.zeta_analytic = r.lambda_crit = std::numeric_limits<double>::quiet_NaN();
        }
        return r;
      };
      auto guarded = [&](double lambda) {
        try {
          return row(lambda, run(lambda));
        } catch (const DivergenceError& e) {
          detail::Oscillation o;
          o.flag = e.what();
          return row(lambda, o);
        }
      };
      for (double l : s.lambdas) groups[g].push_back(l == 0.0 ? row(0.0, free) : guarded(l));
      if (std::isfinite(omega))
        for (double f : s.lambda_fractions) groups[g].push_back(guarded(f * lambda_crit(omega, h)));
    });
  }
  std::vector<SweepRow> rows;
  for (auto& g : groups) rows.insert(rows.end(), g.begin(), g.end());
  detail::write_file(dir / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, rows); });
  Json jr = Json::array();
  for (const auto& r : rows) {
    Json row = {{"omega", detail::number_or_null(r.omega)},
                {"h", r.h},
                {"lambda", r.lambda},
                {"zeta_measured", detail::number_or_null(r.zeta_measured)},
                {"zeta_analytic", detail::number_or_null(r.zeta_analytic)},
                {"lambda_crit", detail::number_or_null(r.lambda_crit)},
                {"constant_amplitude", r.constant_amplitude}};
    if (!r.flag.empty()) row["flag"] = r.flag;
    jr.push_back(row);
  }
  RunResult res;
  res.summary = {{"command", "damping-sweep"},
                 {"scenario", c.scenario},
                 {"source", s.source},
                 {"rows", jr},
                 {"elapsed_seconds", detail::seconds_since(t0)}};
  return res;
}

namespace detail {

inline ParameterSet parameter_set(const std::vector<ParameterConfig>& cfgs, bool hidden) {
  ParameterSet out;
  for (const auto& p : cfgs) {
    const double v = hidden ? p.hidden : p.nominal.value_or(p.hidden);
    if (p.kind == "youngs_modulus") {
      out.push_back(youngs_parameter(v, p.lower, p.upper));
    } else if (p.kind == "damping_lambda") {
      out.push_back(damping_parameter(v, p.lower, p.upper));
    } else if (p.kind == "fiber_stiffness") {
      Parameter q = stiffness_parameter(p.fibers.at(0), v, p.lower, p.upper);
      out.push_back(q);
    } else {
      out.push_back(actuation_parameter(p.fibers, p.signs, v, -1, p.lower, p.upper));
    }
  }
  return out;
}

inline OptimizerConfig optimizer_config(const OptimizerSettings& s) {
  OptimizerConfig o;
  o.max_iterations = s.max_iterations;
  o.gradient_tolerance = s.gradient_tolerance;
  o.relative_loss_tolerance = s.relative_loss_tolerance;
  o.memory = s.memory;
  return o;
}

inline double relative_error(double x, double truth) { return std::abs(x - truth) / std::max(std::abs(truth), 1e-300); }

}  // namespace detail

inline RunResult run_calibrate(const ExperimentConfig& c, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!c.optimization) throw ConfigError("/optimization: calibrate needs an optimization section");
  const OptimizationConfig& o = *c.optimization;
  const Experiment ex = build(c);
  const Scenario& sc = ex.scenario;
  const auto dir = detail::out_dir(c, opt);
  const OptimizerConfig ocfg = detail::optimizer_config(o.optimizer);

  std::vector<int> nodes;
  for (const auto& p : o.loss.points) nodes.push_back(resolve_selector(ex.mesh(), c.mesh, p));
  if (nodes.empty()) nodes = ex.tracked;

  RunResult res;
  res.summary = {{"command", "calibrate"}, {"scenario", c.scenario}, {"mode", o.mode}, {"loss", o.loss.kind}};
  double worst = 0.0;  // largest relative recovery error

  if (o.mode == "parameters") {
    const ParameterSet truth = detail::parameter_set(o.parameters, true);
    softfem::validate(truth, sc.simulator.model().num_fibers());
    ParameterSet start = detail::parameter_set(o.parameters, false);
    bool any_random = false;
    for (const auto& p : o.parameters) any_random |= !p.initial.has_value();
    if (any_random) start = random_initial_guess(start, opt.seed);
    for (std::size_t i = 0; i < start.size(); ++i)
      if (o.parameters[i].initial) start[i].value = *o.parameters[i].initial;

    LossSpec spec;
    spec.kind = loss_kind_from_string(o.loss.kind);
    spec.nodes = nodes;
    spec.all_times_to_final = o.loss.all_times_to_final;
    spec.axis = o.loss.axis;
    spec.sign = o.loss.sign;
    const Rollout ref = forward(sc, truth);
    spec.reference = track(ref, nodes);
    // Envelope losses compare peak amplitudes about the steady state.
    std::function<std::vector<double>(const Rollout&)> peaks;
    if (spec.kind == LossKind::envelope || spec.kind == LossKind::constant_amplitude) {
      spec.nodes = {nodes[0]};
      spec.reference = track(ref, spec.nodes);
      const Eigen::VectorXd steady = detail::steady_state(sc.simulator, sc.schedule, c.duration);
      spec.baseline = steady[3 * nodes[0] + spec.axis];
      peaks = [&, node = nodes[0]](const Rollout& r) {
        auto s = track(r, {node}).series(0, spec.axis);
        for (double& v : s) v *= spec.sign;
        return extract_peaks(trim_decayed(std::move(s), spec.sign * spec.baseline), spec.sign * spec.baseline)
            .amplitudes;
      };
      const auto [x0, delta] = fit_exponential_envelope(peaks(ref));
      spec.reference_peaks = exponential_envelope(x0, delta, o.loss.peaks);
    }
    const CalibrationResult cal = optimize(start, spec, sc, ocfg);
    detail::write_file(dir / "history.csv", [&](std::ostream& os) { write_history_csv(os, cal.optimization.history); });
    Json params = Json::array();
    detail::write_file(dir / "parameters.csv", [&](std::ostream& os) {
      os << "name,hidden,initial,recovered,relative_error\n" << std::setprecision(17);
      for (std::size_t i = 0; i < truth.size(); ++i) {
        const double err = detail::relative_error(cal.parameters[i].value, truth[i].value);
        os << truth[i].name << ',' << truth[i].value << ',' << start[i].value << ',' << cal.parameters[i].value << ','
           << err << '\n';
        params.push_back({{"name", truth[i].name},
                          {"hidden", truth[i].value},
                          {"initial", start[i].value},
                          {"recovered", cal.parameters[i].value},
                          {"relative_error", err}});
        if (!peaks) worst = std::max(worst, err);
      }
    });
    res.summary["parameters"] = params;
    if (peaks) {
      const double hidden_rate = fit_exponential_envelope(peaks(ref)).second;
      const double rate = fit_exponential_envelope(peaks(forward(sc, cal.parameters))).second;
      worst = detail::relative_error(rate, hidden_rate);
      res.summary["decay_rate"] = {{"hidden", hidden_rate}, {"recovered", rate}, {"relative_error", worst}};
    }
    res.summary["final_loss"] = cal.optimization.loss;
    res.summary["iterations"] = static_cast<int>(cal.optimization.history.size()) - 1;
    res.summary["evaluations"] = cal.optimization.evaluations;
    res.summary["stop_reason"] = cal.optimization.stop_reason;
  } else if (o.mode == "sequence") {
    const int count = ActuationSignal::decision_count(c.duration, o.frequency);
    Scenario ref_sc = sc;
    for (int f : o.fibers) ref_sc.schedule[f] = ActuationSignal::sequence(o.frequency, std::vector<double>(count, 1.0));
    const Rollout ref = forward(ref_sc, actuation_sequence_parameters(o.fibers, o.signs, o.hidden_sequence));
    LossSpec spec;
    spec.kind = loss_kind_from_string(o.loss.kind);
    spec.nodes = nodes;
    spec.all_times_to_final = o.loss.all_times_to_final;
    spec.reference = track(ref, nodes);
    const SequenceResult seq =
        optimize_actuation_sequence(sc, o.fibers, o.signs, o.frequency, make_loss(spec), o.initial, ocfg);
    const auto& cal = seq.calibration;
    detail::write_file(dir / "history.csv", [&](std::ostream& os) { write_history_csv(os, cal.optimization.history); });
    Json rows = Json::array();
    detail::write_file(dir / "sequence.csv", [&](std::ostream& os) {
      os << "interval,hidden,recovered,relative_error\n" << std::setprecision(17);
      for (int k = 0; k < count; ++k) {
        const double v = cal.parameters[k].value;
        const double err = detail::relative_error(v, o.hidden_sequence[k]);
        worst = std::max(worst, err);
        os << k << ',' << o.hidden_sequence[k] << ',' << v << ',' << err << '\n';
        rows.push_back({{"interval", k}, {"hidden", o.hidden_sequence[k]}, {"recovered", v}, {"relative_error", err}});
      }
    });
    res.summary["intervals"] = rows;
    res.summary["final_loss"] = cal.optimization.loss;
    res.summary["iterations"] = static_cast<int>(cal.optimization.history.size()) - 1;
    res.summary["stop_reason"] = cal.optimization.stop_reason;
  } else {
    const Eigen::VectorXd law = Eigen::Map<const Eigen::VectorXd>(o.law.data(), static_cast<Eigen::Index>(o.law.size()));
    auto sample = [&](double p) {
      return PressureSample{p, track(forward(sc, {actuation_parameter(o.fibers, o.signs, polyval(law, p))}), nodes)};
    };
    std::vector<PressureSample> samples, heldout;
    for (double p : o.pressures) samples.push_back(sample(p));
    for (double p : o.heldout) heldout.push_back(sample(p));
    PressureMapConfig pc;
    pc.fibers = o.fibers;
    pc.signs = o.signs;
    pc.nodes = nodes;
    pc.degree = o.degree;
    pc.initial = o.initial;
    pc.all_times_to_final = o.loss.all_times_to_final;
    pc.threads = std::max(1, opt.parallel);
    pc.optimizer = ocfg;
    const PressureActuationMap map = pressure_map(sc, samples, heldout, pc);
    detail::write_file(dir / "map.csv", [&](std::ostream& os) { write_map_csv(os, map); });
    double law_error = 0.0;
    for (double p : o.pressures) law_error = std::max(law_error, std::abs(map.fitted(p) - polyval(law, p)));
    Json held = Json::array();
    for (std::size_t i = 0; i < map.heldout_errors.size(); ++i) {
      held.push_back({{"pressure", map.heldout_pressures[i]}, {"relative_error", map.heldout_errors[i]}});
      worst = std::max(worst, map.heldout_errors[i]);
    }
    res.summary["coefficients"] = std::vector<double>(map.coefficients.data(), map.coefficients.data() + map.coefficients.size());
    res.summary["fit_residual"] = map.residual;
    res.summary["law_max_error"] = law_error;
    res.summary["heldout"] = held;
    res.summary["warnings"] = map.warnings;
  }
  res.summary["max_relative_error"] = worst;
  if (o.recovery_tolerance) {
    const bool ok = worst <= *o.recovery_tolerance;
    res.summary["recovery_tolerance"] = *o.recovery_tolerance;
    res.summary["recovered"] = ok;
    if (!ok) res.status = 4;
  }
  res.summary["elapsed_seconds"] = detail::seconds_since(t0);
  return res;
}

/// Every fiber held at 1 + s (a - 1): s = +1 extends, s = -1 contracts.
inline ExperimentConfig with_activation(ExperimentConfig c, double a) {
  for (auto& f : c.fibers) {
    f.frequency = 0.0;
    f.values = {f.mode == "extend" ? a : 2.0 - a};
  }
  return c;
}

inline RunResult run_muscle_demo(const ExperimentConfig& c, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (c.fibers.empty()) throw ConfigError("/fibers: muscle-demo needs at least one fiber");
  const Experiment ex = build(c);
  const auto dir = detail::out_dir(c, opt);
  const Rollout r = simulate(ex.scenario.simulator, ex.scenario.initial, c.duration, ex.scenario.schedule);
  const Trajectory tr = track(r, ex.tracked);
  detail::write_file(dir / "trajectory.csv", [&](std::ostream& os) { write_trajectory_csv(os, tr); });
  detail::write_file(dir / "fibers.csv", [&](std::ostream& os) {
    os << "element,fiber,mode\n";
    for (std::size_t f = 0; f < ex.fibers.size(); ++f)
      for (int e : ex.fibers[f].elements) os << e << ',' << f << ',' << to_string(ex.fibers[f].mode) << '\n';
  });
  detail::write_file(dir / "actuation.csv", [&](std::ostream& os) {
    os << "t,fiber,a\n" << std::setprecision(17);
    for (const auto& s : r.states) {
      const auto a = activation_at(ex.scenario.schedule, s.t);
      for (std::size_t f = 0; f < a.size(); ++f) os << s.t << ',' << f << ',' << a[f] << '\n';
    }
  });
  Json points = Json::array();
  double max_disp = 0.0;
  for (std::size_t p = 0; p < ex.tracked.size(); ++p) {
    const Eigen::Vector3d d = tr.positions.back()[p] - ex.mesh().nodes[ex.tracked[p]];
    max_disp = std::max(max_disp, d.norm());
    points.push_back({{"name", c.tracked[p]}, {"node", ex.tracked[p]}, {"final_displacement", detail::point_json(d)}});
  }
  Json fibers = Json::array();
  for (std::size_t f = 0; f < ex.fibers.size(); ++f)
    fibers.push_back({{"fiber", static_cast<int>(f)},
                      {"mode", to_string(ex.fibers[f].mode)},
                      {"elements", static_cast<int>(ex.fibers[f].elements.size())},
                      {"activation", c.fibers[f].values}});
  RunResult res;
  res.summary = {{"command", "muscle-demo"},
                 {"scenario", c.scenario},
                 {"fibers", fibers},
                 {"tracked", points},
                 {"max_displacement", max_disp},
                 {"elapsed_seconds", detail::seconds_since(t0)}};
  return res;
}

inline RunResult run_mesh_info(const ExperimentConfig& c, const RunOptions& opt = {}) {
  validate(c);
  const Mesh mesh = detail::make_mesh(c.mesh);
  const auto fibers = make_fibers(mesh, c);
  const auto dir = detail::out_dir(c, opt);
  detail::write_file(dir / "mesh.txt", [&](std::ostream& os) { write_mesh(os, mesh); });
  const RestShape rs = rest_shapes(mesh);
  const auto [lo, hi] = bounding_box(mesh);
  Json tracked = Json::array();
  for (const auto& s : c.tracked) {
    const int n = resolve_selector(mesh, c.mesh, s);
    tracked.push_back({{"name", s}, {"node", n}, {"position", detail::point_json(mesh.nodes[n])}});
  }
  Json fj = Json::array();
  for (const auto& f : fibers) fj.push_back(static_cast<int>(f.elements.size()));
  RunResult res;
  res.summary = {{"command", "mesh-info"},
                 {"scenario", c.scenario},
                 {"element_kind", to_string(mesh.kind)},
                 {"nodes", mesh.num_nodes()},
                 {"elements", mesh.num_elements()},
                 {"dofs", 3 * mesh.num_nodes()},
                 {"clamped_nodes", static_cast<int>(mesh.dirichlet.size())},
                 {"free_dofs", 3 * (mesh.num_nodes() - static_cast<int>(mesh.dirichlet.size()))},
                 {"volume", rs.total_volume()},
                 {"mass", lumped_mass(mesh, c.material.density).sum()},
                 {"bbox_min", detail::point_json(lo)},
                 {"bbox_max", detail::point_json(hi)},
                 {"tracked", tracked},
                 {"fiber_elements", fj}};
  return res;
}

/// The command a scenario is meant for.
inline std::string natural_command(const ExperimentConfig& c) {
  if (c.optimization) return "calibrate";
  if (c.sweep) return "damping-sweep";
  if (!c.fibers.empty()) return "muscle-demo";
  return "simulate";
}

inline RunResult run_command(const std::string& command, const ExperimentConfig& c, const RunOptions& opt = {}) {
  if (command == "simulate") return run_simulate(c, opt);
  if (command == "damping-sweep") return run_damping_sweep(c, opt);
  if (command == "calibrate") return run_calibrate(c, opt);
  if (command == "muscle-demo") return run_muscle_demo(c, opt);
  if (command == "mesh-info") return run_mesh_info(c, opt);
  throw ConfigError("unknown command '" + command + "'");
}

/// Process exit status for an exception escaping a command.
inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InvalidArgument*>(&e)) return 2;
  if (dynamic_cast<const DivergenceError*>(&e) || dynamic_cast<const ConvergenceError*>(&e)) return 3;
  if (dynamic_cast<const OracleError*>(&e)) return 4;
  return 1;
}

}  // namespace softfem::harness
