#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "softfem/harness.hpp"

namespace {

using namespace softfem;
using namespace softfem::harness;

struct CommonArgs {
  std::string config;
  std::string scenario;
  std::string out;
  std::uint64_t seed = 1;
  int parallel = 1;
  bool full_scale = false;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  auto* cfg = sub->add_option("--config", a.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  auto* sc = sub->add_option("--scenario", a.scenario, "Registered scenario id");
  cfg->excludes(sc);
  sub->add_option("--out", a.out, "Output directory (default: the config's output field)");
  sub->add_option("--seed", a.seed, "Seed for random initial guesses");
  sub->add_option("--parallel", a.parallel, "Worker threads for independent runs")->check(CLI::PositiveNumber);
  sub->add_flag("--full-scale", a.full_scale, "Use the full-resolution meshes");
}

ExperimentConfig resolve(const CommonArgs& a, const std::string& fallback) {
  if (!a.config.empty()) return load_config(a.config, a.full_scale);
  const std::string id = a.scenario.empty() ? fallback : a.scenario;
  if (id.empty()) throw ConfigError("either --config or --scenario is required");
  ExperimentConfig c = default_config(id, a.full_scale);
  validate(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft-body simulation, damping analysis and calibration"};
  app.require_subcommand(1);
  CommonArgs args;
  std::string design = "AC1";
  std::optional<double> activation;

  struct Sub {
    std::string name, help, fallback;
  };
  const std::vector<Sub> subs{{"simulate", "Run a forward simulation", ""},
                              {"damping-sweep", "Measure numerical damping over steps and gains", "damping-sweep"},
                              {"calibrate", "Recover hidden parameters from a reference run", ""},
                              {"muscle-demo", "Drive a muscle-actuated bar", ""},
                              {"mesh-info", "Describe the mesh a config builds", ""}};
  std::vector<CLI::App*> cmds;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, args);
    cmds.push_back(sub);
  }
  app.get_subcommand("muscle-demo")
      ->add_option("--design", design, "Actuator layout when no config is given")
      ->check(CLI::IsMember({"AC1", "AC2"}));
  app.get_subcommand("muscle-demo")->add_option("--activation", activation, "Hold every fiber at this activation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!cmds[i]->parsed()) continue;
    const std::string& name = subs[i].name;
    try {
      std::string fallback = subs[i].fallback;
      if (name == "muscle-demo") fallback = "muscle-" + design;
      ExperimentConfig c = resolve(args, fallback);
      if (activation) c = with_activation(c, *activation);
      RunOptions opt;
      opt.out = args.out;
      opt.seed = args.seed;
      opt.parallel = args.parallel;
      const RunResult r = run_command(name, c, opt);
      const auto dir = args.out.empty() ? std::filesystem::path(c.output) : std::filesystem::path(args.out);
      std::ofstream(dir / "summary.json") << r.summary.dump(2) << '\n';
      std::cout << r.summary.dump(2) << std::endl;
      if (r.status != 0) std::cerr << "error: recovery check failed\n";
      return r.status;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return exit_code(e);
    }
  }
  return 1;
}
