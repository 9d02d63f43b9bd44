#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "softfem/harness.hpp"

using namespace softfem;
using namespace softfem::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("softfem_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SOFTFEM_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double tip_drop(const ExperimentConfig& c) {
  const Experiment ex = build(c);
  const Eigen::VectorXd q = ex.scenario.simulator.static_equilibrium(activation_at(ex.scenario.schedule, 0.0));
  const int n = ex.tracked[0];
  return ex.mesh().nodes[n].z() - q[3 * n + 2];
}

}  // namespace

TEST(Registry, BeamCasesMatchLoadTable) {
  const auto& cases = beam_cases();
  ASSERT_EQ(cases.size(), 6u);
  const std::vector<std::pair<std::string, double>> expected{{"A1", 0.0},   {"A2", 0.0},   {"B", 0.510},
                                                             {"C", 0.510}, {"D", 0.991}, {"E", 0.991}};
  for (std::size_t i = 0; i < cases.size(); ++i) {
    EXPECT_EQ(cases[i].id, expected[i].first);
    EXPECT_EQ(cases[i].force, expected[i].second);
    const auto c = default_config("beam-" + cases[i].id);
    EXPECT_EQ(c.forces.edge_force[2], -expected[i].second);
  }
}

TEST(Registry, FullScaleHexDofs) {
  auto dofs = [](const Res3& r) { return 3 * (r[0] + 1) * (r[1] + 1) * (r[2] + 1); };
  EXPECT_EQ(dofs(default_config("beam-A1", true).mesh.resolution), 4608);
  EXPECT_EQ(dofs(default_config("beam-E", true).mesh.resolution), 9900);
  EXPECT_EQ(default_config("beam-D").mesh.resolution, (Res3{12, 4, 4}));
}

TEST(Registry, UnknownScenario) {
  EXPECT_THROW(default_config("beam-F"), ConfigError);
  EXPECT_NE(config_error(R"({"scenario": "nope"})").find("/scenario"), std::string::npos);
}

TEST(Config, EveryScenarioValidatesAndRoundTrips) {
  for (bool full : {false, true})
    for (const auto& id : scenario_ids()) {
      const ExperimentConfig c = default_config(id, full);
      EXPECT_NO_THROW(validate(c)) << id;
      const std::string text = serialize(c);
      const ExperimentConfig back = parse_config(text, full);
      EXPECT_TRUE(back == c) << id;
      EXPECT_EQ(serialize(back), text) << id;
    }
}

TEST(Config, RoundTripKeepsUnsetOptionals) {
  ExperimentConfig c = default_config("youngs-recovery");
  c.optimization->parameters[0].initial.reset();
  c.optimization->recovery_tolerance.reset();
  c.sweep.reset();
  EXPECT_TRUE(parse_config(serialize(c)) == c);
  c.optimization.reset();
  EXPECT_TRUE(parse_config(serialize(c)) == c);
}

TEST(Config, OverlayKeepsDefaults) {
  const auto c = parse_config(R"({"scenario": "beam-D", "material": {"density": 1100}, "duration": 0.5})");
  EXPECT_EQ(c.material.density, 1100.0);
  EXPECT_EQ(c.material.youngs_modulus, 263824.0);
  EXPECT_EQ(c.forces.edge_force[2], -0.991);
  EXPECT_EQ(c.duration, 0.5);
}

TEST(Config, SwitchingToTetsPicksCaseResolution) {
  EXPECT_EQ(parse_config(R"({"scenario": "beam-A2", "mesh": {"kind": "tet4"}})").mesh.resolution, (Res3{24, 8, 8}));
  EXPECT_EQ(parse_config(R"({"scenario": "beam-A2", "mesh": {"kind": "tet4"}})", true).mesh.resolution,
            (Res3{78, 26, 26}));
  EXPECT_EQ(parse_config(R"({"scenario": "beam-A2", "mesh": {"kind": "tet4", "resolution": [3, 2, 2]}})").mesh.resolution,
            (Res3{3, 2, 2}));
}

TEST(Config, FieldDiagnostics) {
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "mesh": {"resolutoin": [1, 1, 1]}})").find("/mesh/resolutoin"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "material": {"density": "heavy"}})").find("/material/density"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "mesh": {"dims": [1, 2]}})").find("/mesh/dims"), std::string::npos);
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "solver": {"max_iterations": 2.5}})").find("/solver/max_iterations"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "tracked": ["tip-middle"]})").find("/tracked/0"), std::string::npos);
  EXPECT_NE(config_error(R"({"mesh": {}})").find("/scenario"), std::string::npos);
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "fibers": [{"mode": "twist"}]})").find("/fibers/0/mode"),
            std::string::npos);
}

TEST(Config, MalformedJsonReportsLine) {
  const std::string err = config_error("{\n  \"scenario\": \"beam-A1\",\n  \"duration\": ,\n}");
  EXPECT_NE(err.find("line 3"), std::string::npos) << err;
}

TEST(Config, DurationMustMatchStep) {
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "duration": 0.105})").find("/duration"), std::string::npos);
  EXPECT_NE(config_error(R"({"scenario": "damping-sweep", "sweep": {"hs": [0.03]}})").find("/sweep/hs/0"),
            std::string::npos);
}

TEST(Config, MeshFileMustExist) {
  EXPECT_NE(config_error(R"({"scenario": "beam-A1", "mesh": {"file": "/nonexistent/beam.mesh"}})").find("/mesh/file"),
            std::string::npos);
}

TEST(Config, MeshFileIsUsed) {
  const fs::path dir = scratch("meshfile");
  const Mesh m = build_tet_box({0.1, 0.02, 0.02}, {3, 1, 1});
  {
    std::ofstream os(dir / "bar.mesh");
    write_mesh(os, m);
  }
  const auto c = parse_config(R"({"scenario": "beam-A1", "mesh": {"file": ")" + (dir / "bar.mesh").string() + R"("}})");
  const Experiment ex = build(c);
  EXPECT_EQ(ex.mesh().kind, ElementKind::tet4);
  EXPECT_EQ(ex.mesh().num_nodes(), m.num_nodes());
  EXPECT_FALSE(ex.mesh().dirichlet.empty());
}

TEST(Config, LoadFromFile) {
  const fs::path dir = scratch("load");
  std::ofstream(dir / "c.json") << serialize(default_config("fish-proxy"));
  EXPECT_TRUE(load_config(dir / "c.json") == default_config("fish-proxy"));
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Build, SelectorsResolveToTipCorners) {
  const Experiment ex = build(default_config("beam-A1"));
  const auto& m = ex.mesh();
  EXPECT_TRUE(m.nodes[ex.tracked[0]].isApprox(Eigen::Vector3d(0.10, 0.0, 0.035)));
  EXPECT_TRUE(m.nodes[ex.tracked[1]].isApprox(Eigen::Vector3d(0.10, 0.035, 0.035)));
  EXPECT_EQ(resolve_selector(m, ex.config.mesh, "node:7"), 7);
  EXPECT_THROW(resolve_selector(m, ex.config.mesh, "node:100000"), ConfigError);
  const int fc = resolve_selector(m, ex.config.mesh, "face-center:x+");
  EXPECT_TRUE(m.nodes[fc].isApprox(Eigen::Vector3d(0.10, 0.0175, 0.0175)));
}

TEST(Build, FiberRegions) {
  const Experiment ex = build(default_config("muscle-AC2"));
  ASSERT_EQ(ex.fibers.size(), 2u);
  EXPECT_EQ(ex.fibers[0].elements.size(), ex.fibers[1].elements.size());
  for (int e : ex.fibers[0].elements) EXPECT_GT(element_centroid(ex.mesh(), e).z(), 0.01);
  for (int e : ex.fibers[1].elements) EXPECT_LT(element_centroid(ex.mesh(), e).z(), 0.01);
}

TEST(Build, FiberElementOutOfRange) {
  auto c = default_config("muscle-AC1");
  c.fibers[0].elements = {0, 100000};
  try {
    build(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/fibers/0/elements/1"), std::string::npos);
  }
}

TEST(Commands, TetBeamIsStifferThanHex) {
  auto hex = default_config("beam-A1");
  auto tet = hex;
  tet.mesh.kind = "tet4";
  const double dh = tip_drop(hex), dt = tip_drop(tet);
  EXPECT_GT(dh, 0.0);
  EXPECT_LT(dt, dh);
}

TEST(Commands, RefinedHexBeamIsSofter) {
  EXPECT_GT(tip_drop(default_config("beam-E")), tip_drop(default_config("beam-D")));
}

TEST(Commands, SimulateWritesOutputs) {
  const fs::path dir = scratch("simulate");
  auto c = default_config("beam-A1");
  c.mesh.resolution = {4, 2, 2};
  const auto r = run_simulate(c, {dir});
  EXPECT_EQ(r.status, 0);
  for (const char* f : {"trajectory.csv", "peaks.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(r.summary["steps"], 100);
  EXPECT_GT(r.summary["oscillation"]["zeta_measured"].get<double>(), 0.0);
  EXPECT_LT(r.summary["tracked"][0]["steady_displacement"][2].get<double>(), 0.0);
}

TEST(Commands, MuscleDemoBending) {
  const fs::path dir = scratch("muscle");
  auto drop = [](const RunResult& r) { return -r.summary["tracked"][0]["final_displacement"][2].get<double>(); };
  const auto ac1 = default_config("muscle-AC1");
  EXPECT_EQ(run_muscle_demo(with_activation(ac1, 1.0), {dir}).summary["max_displacement"].get<double>(), 0.0);
  const double d1 = drop(run_muscle_demo(with_activation(ac1, 1.1), {dir}));
  EXPECT_GT(d1, 0.0);  // extending top fiber bends the bar down, away from it
  const double d2 = drop(run_muscle_demo(with_activation(default_config("muscle-AC2"), 1.1), {dir}));
  EXPECT_GT(d2, d1);
  EXPECT_TRUE(fs::exists(dir / "fibers.csv"));
  EXPECT_TRUE(fs::exists(dir / "actuation.csv"));
  EXPECT_THROW(run_muscle_demo(default_config("beam-A1"), {dir}), ConfigError);
}

TEST(Commands, SweepFlagsAndSigns) {
  const fs::path dir = scratch("sweep");
  auto c = default_config("damping-sweep");
  c.sweep->hs = {0.02};
  const auto r = run_damping_sweep(c, {dir});
  const auto& rows = r.summary["rows"];
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_GT(rows[0]["zeta_measured"].get<double>(), 0.0);
  EXPECT_TRUE(rows[2]["constant_amplitude"].get<bool>());
  EXPECT_THROW(run_damping_sweep(default_config("beam-A1"), {dir}), ConfigError);
}

TEST(Commands, RecoveryFailureSetsStatus) {
  auto c = default_config("actuation-recovery");
  c.optimization->optimizer.max_iterations = 1;
  c.optimization->recovery_tolerance = 1e-12;
  EXPECT_EQ(run_calibrate(c, {scratch("recovery")}).status, 4);
}

TEST(Commands, MeshInfo) {
  const auto r = run_mesh_info(default_config("beam-A1", true), {scratch("meshinfo")});
  EXPECT_EQ(r.summary["dofs"], 4608);
  EXPECT_EQ(r.summary["element_kind"], "hex8");
}

TEST(Determinism, SameSeedSameFiles) {
  auto c = default_config("youngs-recovery");
  c.duration = 0.1;
  c.optimization->parameters[0].initial.reset();
  const fs::path a = scratch("seed_a"), b = scratch("seed_b"), d = scratch("seed_d");
  run_calibrate(c, {a, 7});
  run_calibrate(c, {b, 7});
  run_calibrate(c, {d, 8});
  for (const char* f : {"history.csv", "parameters.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_NE(slurp(a / "parameters.csv"), slurp(d / "parameters.csv"));
}

TEST(Determinism, ParallelSweepMatchesSerial) {
  auto c = default_config("damping-sweep");
  c.duration = 1.0;
  c.sweep->hs = {0.01, 0.02, 0.04};
  const fs::path a = scratch("par1"), b = scratch("par3");
  run_damping_sweep(c, {a, 1, 1});
  run_damping_sweep(c, {b, 1, 3});
  EXPECT_EQ(slurp(a / "sweep.csv"), slurp(b / "sweep.csv"));
}

TEST(Determinism, SimulateTwice) {
  auto c = default_config("beam-B");
  c.duration = 0.3;
  const fs::path a = scratch("sim_a"), b = scratch("sim_b");
  run_simulate(c, {a});
  run_simulate(c, {b});
  EXPECT_EQ(slurp(a / "trajectory.csv"), slurp(b / "trajectory.csv"));
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code(ConfigError("x")), 2);
  EXPECT_EQ(exit_code(InvalidArgument("x")), 2);
  EXPECT_EQ(exit_code(DivergenceError("x", 3)), 3);
  EXPECT_EQ(exit_code(ConvergenceError("x", 1.0)), 3);
  EXPECT_EQ(exit_code(OracleError("x")), 4);
  EXPECT_EQ(exit_code(std::runtime_error("x")), 1);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  std::ofstream(dir / "bad.json") << "{\"scenario\": \"beam-A1\", \"mesh\": {\"kind\": \"prism\"}}";
  std::ofstream(dir / "diverge.json")
      << R"({"scenario": "beam-A1", "mesh": {"resolution": [4, 2, 2]}, "duration": 0.5, "solver": {"max_iterations": 1, "acceleration": "none"}, "forces": {"damping_lambda": 2000}})";
  EXPECT_EQ(run_cli("mesh-info --scenario beam-A1 --out " + (dir / "ok").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "ok" / "summary.json"));
  EXPECT_EQ(run_cli("simulate --config " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("simulate --scenario beam-Z"), 2);
  EXPECT_EQ(run_cli("simulate --bogus-flag"), 2);
  EXPECT_EQ(run_cli("simulate --config " + (dir / "diverge.json").string() + " --out " + (dir / "div").string()), 3);
}

class ScenarioBudget : public ::testing::TestWithParam<std::string> {};

TEST_P(ScenarioBudget, RunsUnderTwoMinutes) {
  const auto c = default_config(GetParam());
  const auto t0 = std::chrono::steady_clock::now();
  const RunResult r = run_command(natural_command(c), c, {scratch("budget_" + GetParam())});
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(r.status, 0);
  EXPECT_LT(s, 120.0);
}

INSTANTIATE_TEST_SUITE_P(All, ScenarioBudget, ::testing::ValuesIn(scenario_ids()),
                         [](const auto& info) {
                           std::string n = info.param;
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(Samples, ShippedConfigsLoad) {
  int count = 0;
  for (const auto& entry : fs::directory_iterator(SOFTFEM_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    ++count;
    const ExperimentConfig c = load_config(entry.path());
    EXPECT_TRUE(parse_config(serialize(c)) == c) << entry.path();
  }
  EXPECT_GE(count, 5);
}
