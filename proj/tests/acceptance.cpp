// Acceptance suite: one PASS/FAIL line per criterion, with the measured
// quantity, its limit and the runtime against its budget.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "softfem/harness.hpp"

using namespace softfem;
using namespace softfem::harness;
namespace fs = std::filesystem;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget;  // seconds
  std::function<Outcome()> run;
};

std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("softfem_acceptance_" + name);
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

const Material kSilicone{263824.0, 0.499, 1070.0};

// 1 ------------------------------------------------------------------------

Outcome pd_newton() {
  const Mesh m = clamp_face(build_hex_box({0.10, 0.035, 0.035}, {4, 2, 2}), 0, Side::min);
  const Simulator sim(EnergyModel(m, kSilicone));
  const Rollout pd = simulate(sim, sim.rest_state(), 0.2, {});
  const Rollout nt = simulate(sim, sim.rest_state(), 0.2, {}, StepMethod::newton);
  double worst = 0.0;
  for (std::size_t i = 0; i < pd.states.size(); ++i)
    worst = std::max(worst, (pd.states[i].q - nt.states[i].q).cwiseAbs().maxCoeff());
  return {worst < 1e-6, "max |q_PD - q_Newton| = " + sci(worst) + " m over " +
                            std::to_string(pd.states.size() - 1) + " steps (limit 1e-6)"};
}

// 2 ------------------------------------------------------------------------

LossFunction tip_loss(const std::vector<int>& nodes, const VectorXd& rest, const Vector3d& offset) {
  return [=](const Rollout& r) {
    LossResult out;
    for (const auto& s : r.states) {
      VectorXd g = VectorXd::Zero(s.q.size());
      for (int n : nodes) {
        const Vector3d d = s.q.segment<3>(3 * n) - rest.segment<3>(3 * n) - offset;
        out.value += d.squaredNorm();
        g.segment<3>(3 * n) = 2.0 * d;
      }
      out.state_gradient.push_back(g);
    }
    return out;
  };
}

Outcome gradients() {
  const Mesh beam = clamp_face(build_hex_box({0.06, 0.02, 0.02}, {2, 1, 1}), 0, Side::min);
  auto beam_scenario = [&](double lambda) {
    ForceSpec f;
    f.damping_lambda = lambda;
    Simulator sim(EnergyModel(beam, kSilicone), f);
    State s0 = sim.rest_state();
    return Scenario{std::move(sim), std::move(s0), 0.1, {}};
  };
  const Vector3d dims(0.08, 0.02, 0.02);
  const Mesh bar = clamp_face(build_hex_box(dims, {4, 1, 2}), 0, Side::min);
  MuscleFiber fiber;
  fiber.elements = select_elements(bar, [&](const Vector3d& c) { return c.z() > dims.z() / 2; });
  fiber.stiffness = 2e5;
  auto bar_scenario = [&](int steps, ActuationSchedule schedule) {
    ForceSpec f;
    f.gravity.setZero();
    Simulator sim(EnergyModel(bar, kSilicone, {fiber}), f);
    State s0 = sim.rest_state();
    return Scenario{std::move(sim), std::move(s0), steps * 0.01, std::move(schedule)};
  };
  const auto beam_tip = face_nodes(beam, 0, Side::max);
  const auto bar_tip = face_nodes(bar, 0, Side::max);

  struct Case {
    std::string label;
    Scenario sc;
    ParameterSet params;
    LossFunction loss;
  };
  std::vector<double> seq;
  for (int k = 0; k < 10; ++k) seq.push_back(1.0 + 0.02 * k);
  const Scenario b0 = beam_scenario(0.0), b8 = beam_scenario(8.0);
  const Scenario c10 = bar_scenario(10, {ActuationSignal::constant(1.0)});
  const Scenario s20 = bar_scenario(20, {ActuationSignal::sequence(50.0, std::vector<double>(10, 1.0))});
  std::vector<Case> cases{
      {"E", b0, {youngs_parameter(kSilicone.youngs_modulus)}, tip_loss(beam_tip, b0.initial.q, {0, 0, -0.004})},
      {"Lambda", b8, {damping_parameter(8.0)}, tip_loss(beam_tip, b8.initial.q, {0, 0, -0.004})},
      // w is only observable while the fiber is actuated.
      {"a,w", c10, {actuation_parameter({0}, {1.0}, 1.1), stiffness_parameter(0, 2e5)},
       tip_loss(bar_tip, c10.initial.q, {0.002, 0, -0.003})},
      {"a[10]", s20, actuation_sequence_parameters({0}, {1.0}, seq),
       tip_loss(bar_tip, s20.initial.q, {0.001, 0, -0.002})},
  };
  bool ok = true;
  std::string detail;
  for (const auto& c : cases) {
    const GradientReport rep = gradient_report(c.sc, c.params, c.loss, true);
    // Sequences report their worst interval, other cases every parameter.
    const bool worst_only = c.label == "a[10]";
    double worst = 0.0;
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      const double d = rep.discrepancy(i);
      ok = ok && d <= 1e-4;
      worst = std::max(worst, d);
      if (!worst_only) detail += (detail.empty() ? "" : ", ") + rep.names[i] + " " + sci(d);
    }
    if (worst_only) detail += ", " + c.label + " " + sci(worst);
  }
  return {ok, "adjoint vs central FD relative discrepancy: " + detail + " (limit 1e-4, " +
                  std::to_string(3 * bar.num_nodes()) + " DOFs max)"};
}

// 3 ------------------------------------------------------------------------

Outcome damping_law() {
  auto c = default_config("damping-sweep");
  c.sweep->lambda_fractions.clear();
  const RunResult r = run_damping_sweep(c, {scratch("c3")});
  bool ok = true;
  std::string detail = "beam rel. error";
  for (const auto& row : r.summary["rows"]) {
    if (!row["zeta_measured"].is_number() || !row["zeta_analytic"].is_number()) {
      ok = false;
      detail += " h=" + sci(row["h"].get<double>()) + " unmeasured";
      continue;
    }
    const double zm = row["zeta_measured"], za = row["zeta_analytic"];
    const double rel = std::abs(zm - za) / za;
    ok = ok && rel < 0.10;
    detail += " h=" + sci(row["h"].get<double>()) + ":" + sci(rel);
  }
  detail += " (limit 0.1); 1-DOF rel. error max";
  double worst = 0.0;
  for (double w : {std::numbers::pi, 2 * std::numbers::pi, 4 * std::numbers::pi})
    for (double h : {0.005, 0.01, 0.02, 0.04}) {
      const SweepRow row = oscillator_sweep_point(w, h, 0.0);
      worst = std::max(worst, std::abs(row.zeta_measured - row.zeta_analytic) / row.zeta_analytic);
    }
  ok = ok && worst < 0.01;
  return {ok, detail + " " + sci(worst) + " (limit 0.01)"};
}

// 4 ------------------------------------------------------------------------

double window_max(const std::vector<Eigen::Vector2d>& x, std::size_t from, std::size_t to) {
  double a = 0.0;
  for (std::size_t i = from; i < to; ++i) a = std::max(a, std::abs(x[i][0]));
  return a;
}

Outcome stability_boundary() {
  const std::vector<double> hs{0.002, 0.005, 0.01, 0.02, 0.04};
  double worst = 0.0;
  bool dichotomy = true, linear = true;
  double min_r2 = 1.0;
  for (double w : {std::numbers::pi, 2 * std::numbers::pi, 4 * std::numbers::pi}) {
    std::vector<double> lc;
    for (double h : hs) {
      const double l = lambda_crit(w, h);
      lc.push_back(l);
      worst = std::max(worst, std::abs(l - h * w * w) / (h * w * w));
      const int n = 2000;
      const auto lo = second_order_oscillator({w, h, n, 0.9 * l});
      const auto hi = second_order_oscillator({w, h, n, 1.1 * l});
      dichotomy = dichotomy && window_max(lo, 1500, n + 1) < window_max(lo, 0, 500) &&
                  window_max(hi, 1500, n + 1) > window_max(hi, 0, 500);
    }
    // Least-squares line through (h, lambda_crit).
    const Eigen::Map<const VectorXd> x(hs.data(), hs.size()), y(lc.data(), lc.size());
    const double xm = x.mean(), ym = y.mean();
    const double sxy = ((x.array() - xm) * (y.array() - ym)).sum(), sxx = (x.array() - xm).square().sum();
    const double slope = sxy / sxx, icpt = ym - slope * xm;
    const double ss_res = (y.array() - (slope * x.array() + icpt)).square().sum();
    const double ss_tot = (y.array() - ym).square().sum();
    const double r2 = 1.0 - ss_res / ss_tot;
    min_r2 = std::min(min_r2, r2);
    linear = linear && r2 > 0.9999;
  }
  const bool ok = worst < 1e-9 && dichotomy && linear;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", min_r2);
  return {ok, "max rel |Lambda_crit - h w^2| = " + sci(worst) + " (limit 1e-9); decay at 0.9, growth at 1.1: " +
                  (dichotomy ? "yes" : "no") + "; min R^2 = " + buf + " (limit 0.9999)"};
}

// 5, 6 ---------------------------------------------------------------------

double tip_deflection(ExperimentConfig c) {
  c.tracked = {"tip-center"};
  const Experiment ex = build(c);
  const VectorXd q = ex.scenario.simulator.static_equilibrium(activation_at(ex.scenario.schedule, 0.0));
  const int n = ex.tracked[0];
  return (q.segment<3>(3 * n) - ex.mesh().nodes[n]).norm();
}

int box_dofs(const ExperimentConfig& c) {
  const auto& r = c.mesh.resolution;
  return 3 * (r[0] + 1) * (r[1] + 1) * (r[2] + 1);
}

Outcome locking() {
  auto hex = default_config("beam-A1");
  auto tet = hex;
  tet.mesh.kind = "tet4";
  auto fine = tet;
  fine.mesh.resolution = {51, 17, 17};
  const double dh = tip_deflection(hex), dt = tip_deflection(tet), df = tip_deflection(fine);
  const double ratio = dt / dh, change = std::abs(df - dt) / dt;
  return {ratio <= 0.8 && change < 0.05,
          "tet/hex deflection " + sci(ratio) + " at " + std::to_string(box_dofs(tet)) + " DOFs (limit 0.8); tet " +
              std::to_string(box_dofs(tet)) + " -> " + std::to_string(box_dofs(fine)) + " DOFs changes it by " +
              sci(100 * change) + "% (limit 5%)"};
}

Outcome refinement() {
  const std::vector<Res3> ladder{{12, 4, 4}, {18, 6, 6}, {24, 8, 8}, {30, 10, 10}};
  std::vector<double> d;
  for (const auto& r : ladder) {
    auto c = default_config("beam-D");
    c.mesh.resolution = r;
    d.push_back(tip_deflection(c));
  }
  bool monotone = true;
  std::string detail = "deflections";
  for (std::size_t i = 0; i < d.size(); ++i) {
    detail += " " + sci(d[i]);
    if (i > 0) monotone = monotone && d[i] > d[i - 1];
  }
  const double last = (d.back() - d[d.size() - 2]) / d[d.size() - 2];
  return {monotone && std::abs(last) < 0.02,
          detail + " m; monotone: " + (monotone ? "yes" : "no") + "; final change " + sci(100 * last) + "% (limit 2%)"};
}

// 7, 8 ---------------------------------------------------------------------

Outcome recovery() {
  const auto e = run_calibrate(default_config("youngs-recovery"), {scratch("c7e")}).summary;
  const auto a = run_calibrate(default_config("actuation-recovery"), {scratch("c7a")}).summary;
  const auto d = run_calibrate(default_config("envelope-recovery"), {scratch("c7d")}).summary;
  const double ee = e["parameters"][0]["relative_error"], ea = a["parameters"][0]["relative_error"];
  const double ed = d["decay_rate"]["relative_error"];
  return {ee < 0.02 && ea < 0.05 && ed < 0.05,
          "E from " + sci(e["parameters"][0]["initial"].get<double>()) + ": rel. error " + sci(ee) +
              " (limit 0.02); a: " + sci(ea) + " (limit 0.05); envelope decay rate: " + sci(ed) + " (limit 0.05)"};
}

Outcome pressure() {
  const auto s = run_calibrate(default_config("arm-proxy"), {scratch("c8")}).summary;
  const double residual = s["fit_residual"];
  double worst = 0.0;
  for (const auto& h : s["heldout"]) worst = std::max(worst, h["relative_error"].get<double>());
  return {residual < 1e-3 && worst < 0.05, "fit residual " + sci(residual) + " (limit 1e-3); held-out error " +
                                                sci(100 * worst) + "% (limit 5%); law error " +
                                                sci(s["law_max_error"].get<double>())};
}

// 9 ------------------------------------------------------------------------

Outcome determinism() {
  bool ok = true;
  std::string detail;
  auto c = default_config("youngs-recovery");
  c.duration = 0.1;
  c.optimization->parameters[0].initial.reset();
  const fs::path a = scratch("c9a"), b = scratch("c9b");
  run_calibrate(c, {a, 42});
  run_calibrate(c, {b, 42});
  bool same = true;
  for (const char* f : {"history.csv", "parameters.csv"}) same = same && slurp(a / f) == slurp(b / f);
  auto s = default_config("beam-B");
  s.duration = 0.3;
  run_simulate(s, {a});
  run_simulate(s, {b});
  for (const char* f : {"trajectory.csv", "peaks.csv"}) same = same && slurp(a / f) == slurp(b / f);
  auto w = default_config("damping-sweep");
  w.duration = 1.0;
  w.sweep->hs = {0.01, 0.02};
  run_damping_sweep(w, {a, 1, 1});
  run_damping_sweep(w, {b, 1, 2});
  same = same && slurp(a / "sweep.csv") == slurp(b / "sweep.csv");
  ok = ok && same;
  detail += std::string("seeded CSVs identical: ") + (same ? "yes" : "no");

  int configs = 0;
  bool cfg_ok = true;
  for (bool full : {false, true})
    for (const auto& id : scenario_ids()) {
      const auto cfg = default_config(id, full);
      const std::string text = serialize(cfg);
      const auto back = parse_config(text, full);
      cfg_ok = cfg_ok && back == cfg && serialize(back) == text;
      ++configs;
    }
  ok = ok && cfg_ok;
  detail += "; " + std::to_string(configs) + " configs round-trip: " + (cfg_ok ? "yes" : "no");

  bool mesh_ok = true;
  for (const Mesh& m : {clamp_face(build_hex_box({0.1, 0.035, 0.035}, {5, 3, 2}), 0, Side::min),
                        clamp_face(taper_box(build_tet_box({0.12, 0.03, 0.02}, {6, 2, 1}), 0, 0.6), 0, Side::min)}) {
    std::stringstream ss;
    write_mesh(ss, m);
    const std::string text = ss.str();
    std::istringstream is(text);
    const Mesh back = read_mesh(is);
    std::ostringstream again;
    write_mesh(again, back);
    mesh_ok = mesh_ok && again.str() == text && back.nodes == m.nodes && back.connectivity == m.connectivity &&
              back.dirichlet == m.dirichlet && back.kind == m.kind;
  }
  ok = ok && mesh_ok;
  detail += std::string("; hex and tet meshes round-trip: ") + (mesh_ok ? "yes" : "no");
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  app.add_option("--criterion", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "PD-Newton equivalence", 10, pd_newton},
      {2, "adjoint gradients", 60, gradients},
      {3, "numerical damping law", 90, damping_law},
      {4, "stability boundary", 10, stability_boundary},
      {5, "tet locking", 120, locking},
      {6, "hex refinement under load", 120, refinement},
      {7, "parameter recovery", 300, recovery},
      {8, "pressure-to-actuation map", 300, pressure},
      {9, "determinism and IO", 1e9, determinism},
  };
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = s < c.budget;
    const bool pass = o.pass && in_time;
    failures += !pass;
    char timing[96];
    if (c.budget < 1e8)
      std::snprintf(timing, sizeof timing, "%.1f s (limit %.0f s)", s, c.budget);
    else
      std::snprintf(timing, sizeof timing, "%.1f s", s);
    std::cout << (pass ? "PASS" : "FAIL") << "  " << c.id << "  " << c.name << ": " << o.detail << "; " << timing
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
