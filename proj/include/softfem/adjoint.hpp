#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "softfem/dynamics.hpp"
#include "softfem/errors.hpp"
#include "softfem/parallel.hpp"

namespace softfem {

enum class ParameterKind { youngs_modulus, damping_lambda, fiber_stiffness, actuation };

inline std::string to_string(ParameterKind k) {
  switch (k) {
    case ParameterKind::youngs_modulus: return "youngs_modulus";
    case ParameterKind::damping_lambda: return "damping_lambda";
    case ParameterKind::fiber_stiffness: return "fiber_stiffness";
    case ParameterKind::actuation: return "actuation";
  }
  return "?";
}

/// One scalar design variable. Actuation parameters drive every listed fiber
/// as a_f = 1 + sign_f (value - 1), so a sign of -1 mirrors an antagonist.
struct Parameter {
  ParameterKind kind = ParameterKind::youngs_modulus;
  std::string name;
  double value = 0.0;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  std::vector<int> fibers;
  std::vector<double> signs;
  int interval = -1;  // actuation only; -1 drives every interval

  double fiber_value(std::size_t i) const { return 1.0 + signs[i] * (value - 1.0); }
};

using ParameterSet = std::vector<Parameter>;

inline Parameter youngs_parameter(double e, double lower = 1.0, double upper = 1e9) {
  return {ParameterKind::youngs_modulus, "E", e, lower, upper};
}

inline Parameter damping_parameter(double lambda, double lower = -1e6, double upper = 1e6) {
  return {ParameterKind::damping_lambda, "lambda", lambda, lower, upper};
}

inline Parameter stiffness_parameter(int fiber, double w, double lower = 1e-6, double upper = 1e12) {
  return {ParameterKind::fiber_stiffness, "w" + std::to_string(fiber), w, lower, upper, {fiber}, {1.0}};
}

inline Parameter actuation_parameter(std::vector<int> fibers, std::vector<double> signs, double a, int interval = -1,
                                     double lower = 0.2, double upper = 1.8) {
  std::string name = "a";
  if (interval >= 0) name += "[" + std::to_string(interval) + "]";
  return {ParameterKind::actuation, name, a, lower, upper, std::move(fibers), std::move(signs), interval};
}

/// One actuation parameter per hold interval.
inline ParameterSet actuation_sequence_parameters(const std::vector<int>& fibers, const std::vector<double>& signs,
                                                  const std::vector<double>& values, double lower = 0.2,
                                                  double upper = 1.8) {
  ParameterSet p;
  for (std::size_t k = 0; k < values.size(); ++k)
    p.push_back(actuation_parameter(fibers, signs, values[k], static_cast<int>(k), lower, upper));
  return p;
}

inline Eigen::VectorXd parameter_values(const ParameterSet& p) {
  Eigen::VectorXd x(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) x[i] = p[i].value;
  return x;
}

inline ParameterSet with_values(ParameterSet p, const Eigen::VectorXd& x) {
  if (x.size() != static_cast<Eigen::Index>(p.size())) throw InvalidArgument("parameter vector has the wrong size");
  for (std::size_t i = 0; i < p.size(); ++i) p[i].value = x[i];
  return p;
}

inline void validate(const ParameterSet& params, int num_fibers) {
  for (const auto& p : params) {
    if (!std::isfinite(p.value)) throw InvalidArgument("parameter " + p.name + " is not finite");
    if (p.value < p.lower || p.value > p.upper) throw InvalidArgument("parameter " + p.name + " is outside its bounds");
    if (p.kind == ParameterKind::youngs_modulus && !(p.value > 0.0))
      throw InvalidArgument("Young's modulus must be positive");
    if (p.kind == ParameterKind::fiber_stiffness || p.kind == ParameterKind::actuation) {
      if (p.fibers.empty() || p.signs.size() != p.fibers.size())
        throw InvalidArgument("parameter " + p.name + " needs one sign per fiber");
      for (int f : p.fibers)
        if (f < 0 || f >= num_fibers) throw InvalidArgument("parameter " + p.name + " names a missing fiber");
    }
    if (p.kind == ParameterKind::fiber_stiffness && !(p.value > 0.0))
      throw InvalidArgument("fiber stiffness must be positive");
    if (p.kind == ParameterKind::actuation)
      for (std::size_t i = 0; i < p.fibers.size(); ++i)
        if (!(p.fiber_value(i) > 0.0)) throw InvalidArgument("actuation of parameter " + p.name + " must stay positive");
  }
}

/// Everything needed to replay a rollout for a given parameter set.
struct Scenario {
  Simulator simulator;
  State initial;
  double duration = 0.0;
  ActuationSchedule schedule;
  StepMethod method = StepMethod::projective;
  /// Forward tolerance used whenever gradients are involved (force-scale units).
  double gradient_tolerance = 1e-9;
};

struct Configured {
  Simulator simulator;
  ActuationSchedule schedule;
};

inline Configured configure(const Scenario& sc, const ParameterSet& params) {
  validate(params, sc.simulator.model().num_fibers());
  Configured c{sc.simulator, sc.schedule};
  for (const auto& p : params) {
    switch (p.kind) {
      case ParameterKind::youngs_modulus: {
        Material m = c.simulator.model().material();
        m.youngs_modulus = p.value;
        c.simulator.set_material(m);
        break;
      }
      case ParameterKind::damping_lambda:
        c.simulator.set_damping_lambda(p.value);
        break;
      case ParameterKind::fiber_stiffness:
        for (int f : p.fibers) c.simulator.set_fiber_stiffness(f, p.value);
        break;
      case ParameterKind::actuation:
        for (std::size_t i = 0; i < p.fibers.size(); ++i) {
          auto& values = c.schedule[p.fibers[i]].values;
          if (p.interval < 0) {
            std::fill(values.begin(), values.end(), p.fiber_value(i));
          } else {
            if (p.interval >= static_cast<int>(values.size()))
              throw InvalidArgument("parameter " + p.name + " addresses a missing actuation interval");
            values[p.interval] = p.fiber_value(i);
          }
        }
        break;
    }
  }
  c.simulator.set_tolerance(std::min(c.simulator.config().tolerance, sc.gradient_tolerance));
  c.simulator.set_polish(true);
  return c;
}

inline Rollout forward(const Scenario& sc, const ParameterSet& params) {
  const Configured c = configure(sc, params);
  return simulate(c.simulator, sc.initial, sc.duration, c.schedule, sc.method);
}

/// Loss value and dL/dq_t (full 3n vectors; an empty vector means zero).
struct LossResult {
  double value = 0.0;
  std::vector<Eigen::VectorXd> state_gradient;
};

using LossFunction = std::function<LossResult(const Rollout&)>;

/// Recomputes state i+1 from checkpoint i.
inline State replay_step(const Scenario& sc, const ParameterSet& params, const Rollout& r, int i) {
  const Configured c = configure(sc, params);
  const State& s = r.states.at(i);
  const auto act = activation_at(c.schedule, s.t);
  if (sc.method == StepMethod::projective) return c.simulator.step(s, act);
  return c.simulator.newton_step(s, act, 1e-9);
}

namespace detail {

inline void check_checkpoints(const Simulator& sim, const Scenario& sc, const Rollout& r) {
  const int n = step_count(sc.duration, sim.h());
  if (static_cast<int>(r.states.size()) != n + 1)
    throw InvalidArgument("checkpoint count " + std::to_string(r.states.size()) + " does not match " +
                          std::to_string(n) + " steps");
  const Eigen::Index dofs = sim.model().mesh().num_dofs();
  for (int i = 0; i <= n; ++i) {
    const State& s = r.states[i];
    if (s.step != i || s.q.size() != dofs || s.v.size() != dofs || std::abs(s.t - i * sim.h()) > 1e-9)
      throw InvalidArgument("checkpoint " + std::to_string(i) + " is inconsistent with the scenario");
  }
}

}  // namespace detail

/// dL/dparams by the implicit-function theorem on every converged step,
/// accumulated backward in time.
inline Eigen::VectorXd backward(const Scenario& sc, const ParameterSet& params, const Rollout& r,
                                const LossResult& loss) {
  const Configured c = configure(sc, params);
  const Simulator& sim = c.simulator;
  detail::check_checkpoints(sim, sc, r);
  const int n = static_cast<int>(r.states.size()) - 1;
  const double h = sim.h();
  const double lambda = sim.forces().damping_lambda;
  const auto& free = sim.free_nodes();
  const int nf = static_cast<int>(free.size());
  const Eigen::VectorXd& mass = sim.node_mass();
  Eigen::VectorXd mass_free(3 * nf);
  for (int k = 0; k < nf; ++k) mass_free.segment<3>(3 * k).setConstant(mass[free[k]]);

  auto direct = [&](int t) -> Eigen::VectorXd {
    if (t < static_cast<int>(loss.state_gradient.size()) && loss.state_gradient[t].size() > 0) {
      if (loss.state_gradient[t].size() != sim.model().mesh().num_dofs())
        throw InvalidArgument("loss gradient at time index " + std::to_string(t) + " has the wrong size");
      return sim.gather_free(loss.state_gradient[t]);
    }
    return Eigen::VectorXd::Zero(3 * nf);
  };

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  Eigen::VectorXd qbar = direct(n);
  Eigen::VectorXd vbar = Eigen::VectorXd::Zero(3 * nf);
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
  bool analyzed = false;

  for (int i = n - 1; i >= 0; --i) {
    const State& s0 = r.states[i];
    const State& s1 = r.states[i + 1];
    const auto act = activation_at(c.schedule, s0.t);
    // v_{i+1} = (q_{i+1} - q_i) / h
    qbar += vbar / h;
    Eigen::VectorXd qbar_prev = direct(i) - vbar / h;

    const Eigen::SparseMatrix<double> hess = sim.step_hessian(s1.q, act);
    if (!analyzed) {
      solver.analyzePattern(hess);
      analyzed = true;
    }
    solver.factorize(hess);
    Eigen::VectorXd z;
    if (solver.info() == Eigen::Success) z = solver.solve(qbar);
    if (solver.info() != Eigen::Success || !z.allFinite())
      throw ConvergenceError("singular step Hessian at step " + std::to_string(i + 1),
                             std::numeric_limits<double>::quiet_NaN(), i + 1);

    // Parameter terms: dG/dtheta at the converged q_{i+1}.
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Parameter& par = params[p];
      switch (par.kind) {
        case ParameterKind::youngs_modulus:
          grad[p] -= z.dot(sim.gather_free(sim.model().gradient_youngs_derivative(s1.q)));
          break;
        case ParameterKind::fiber_stiffness:
          for (int f : par.fibers)
            grad[p] -= z.dot(sim.gather_free(sim.model().gradient_stiffness_derivative(s1.q, f, act)));
          break;
        case ParameterKind::actuation:
          for (std::size_t j = 0; j < par.fibers.size(); ++j) {
            const int f = par.fibers[j];
            if (par.interval >= 0 && c.schedule[f].interval(s0.t) != par.interval) continue;
            grad[p] -= par.signs[j] * z.dot(sim.gather_free(sim.model().gradient_activation_derivative(s1.q, f)));
          }
          break;
        case ParameterKind::damping_lambda: {
          // y depends on lambda through h^2 v_i; ybar = M z / h^2.
          const Eigen::VectorXd v = sim.gather_free(s0.v);
          grad[p] += mass_free.cwiseProduct(z).dot(v);
          break;
        }
      }
    }
    const Eigen::VectorXd ybar = mass_free.cwiseProduct(z) / (h * h);
    qbar_prev += ybar;
    vbar = (h + h * h * lambda) * ybar;
    qbar = std::move(qbar_prev);
  }
  return grad;
}

/// Generic central differences of a scalar function.
template <class F>
Eigen::VectorXd central_difference(F&& f, const Eigen::VectorXd& x, const Eigen::VectorXd& steps, int threads = 1) {
  Eigen::VectorXd g(x.size());
  parallel_for(static_cast<int>(x.size()), threads, [&](int i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += steps[i];
    xm[i] -= steps[i];
    g[i] = (f(xp) - f(xm)) / (2.0 * steps[i]);
  });
  return g;
}

inline Eigen::VectorXd fd_steps(const ParameterSet& params, double relative_step) {
  Eigen::VectorXd s(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) s[i] = relative_step * std::max(std::abs(params[i].value), 1.0);
  return s;
}

/// Two full simulations per scalar parameter, run in parallel.
inline Eigen::VectorXd fd_gradient_oracle(const Scenario& sc, const ParameterSet& params, const LossFunction& loss,
                                          double relative_step = 1e-5, int threads = default_threads()) {
  const Eigen::VectorXd x = parameter_values(params);
  const Eigen::VectorXd steps = fd_steps(params, relative_step);
  for (std::size_t i = 0; i < params.size(); ++i)
    if (x[i] - steps[i] < params[i].lower || x[i] + steps[i] > params[i].upper)
      throw InvalidArgument("finite-difference step leaves the bounds of " + params[i].name);
  auto f = [&](const Eigen::VectorXd& xx) {
    try {
      return loss(forward(sc, with_values(params, xx))).value;
    } catch (const DivergenceError& e) {
      throw OracleError(std::string("perturbed simulation diverged: ") + e.what());
    } catch (const ConvergenceError& e) {
      throw OracleError(std::string("perturbed simulation failed: ") + e.what());
    }
  };
  return central_difference(f, x, steps, threads);
}

struct GradientReport {
  double loss = 0.0;
  std::vector<std::string> names;
  Eigen::VectorXd gradient;
  std::optional<Eigen::VectorXd> fd_gradient;

  /// ||g_adj - g_fd|| / max(||g_fd||, eps)
  double discrepancy() const {
    if (!fd_gradient) return std::numeric_limits<double>::quiet_NaN();
    return (gradient - *fd_gradient).norm() / std::max(fd_gradient->norm(), 1e-300);
  }
  double discrepancy(std::size_t i) const {
    if (!fd_gradient) return std::numeric_limits<double>::quiet_NaN();
    return std::abs(gradient[i] - (*fd_gradient)[i]) / std::max(std::abs((*fd_gradient)[i]), 1e-300);
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "loss=" << loss << '\n';
    for (std::size_t i = 0; i < names.size(); ++i) {
      os << "grad." << names[i] << '=' << gradient[i] << '\n';
      if (fd_gradient) os << "fd." << names[i] << '=' << (*fd_gradient)[i] << '\n';
    }
    if (fd_gradient) os << "discrepancy=" << discrepancy() << '\n';
    return os.str();
  }
};

struct Evaluation {
  Rollout rollout;
  LossResult loss;
  Eigen::VectorXd gradient;
};

inline Evaluation evaluate(const Scenario& sc, const ParameterSet& params, const LossFunction& loss,
                           bool with_gradient = true) {
  Evaluation e;
  e.rollout = forward(sc, params);
  e.loss = loss(e.rollout);
  if (with_gradient) e.gradient = backward(sc, params, e.rollout, e.loss);
  return e;
}

inline GradientReport gradient_report(const Scenario& sc, const ParameterSet& params, const LossFunction& loss,
                                      bool with_fd = false, double relative_step = 1e-5) {
  const Evaluation e = evaluate(sc, params, loss);
  GradientReport rep;
  rep.loss = e.loss.value;
  for (const auto& p : params) rep.names.push_back(p.name);
  rep.gradient = e.gradient;
  if (with_fd) rep.fd_gradient = fd_gradient_oracle(sc, params, loss, relative_step);
  return rep;
}

}  // namespace softfem
