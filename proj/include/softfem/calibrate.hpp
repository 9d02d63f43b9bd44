#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "softfem/adjoint.hpp"
#include "softfem/damplab.hpp"
#include "softfem/dynamics.hpp"
#include "softfem/errors.hpp"
#include "softfem/parallel.hpp"

namespace softfem {

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { final_pose, trajectory, envelope, constant_amplitude };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::final_pose: return "final_pose";
    case LossKind::trajectory: return "trajectory";
    case LossKind::envelope: return "envelope";
    case LossKind::constant_amplitude: return "constant_amplitude";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  for (LossKind k : {LossKind::final_pose, LossKind::trajectory, LossKind::envelope, LossKind::constant_amplitude})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown loss kind '" + s + "'");
}

struct LossSpec {
  LossKind kind = LossKind::trajectory;
  std::vector<int> nodes;  // tracked mesh nodes
  Trajectory reference;    // final_pose, trajectory
  /// final_pose only: compare every simulated time against the final reference pose.
  bool all_times_to_final = false;
  double weight = 1.0;
  // envelope and constant_amplitude: one coordinate of one tracked point
  int point = 0;
  int axis = 2;
  double baseline = 0.0;
  double sign = 1.0;  // -1 measures peaks below the baseline
  std::vector<double> reference_peaks;  // envelope only
};

/// Loss value and its derivative with respect to every tracked position.
struct TrackedLoss {
  double value = 0.0;
  std::vector<std::vector<Eigen::Vector3d>> gradient;  // [time][point]
};

namespace detail {

inline void check_alignment(const Trajectory& sim, const Trajectory& ref, bool all_times) {
  if (ref.num_points() != sim.num_points())
    throw InvalidArgument("reference tracks " + std::to_string(ref.num_points()) + " points, simulation tracks " +
                          std::to_string(sim.num_points()));
  if (!all_times) return;
  if (ref.num_times() != sim.num_times())
    throw InvalidArgument("reference has " + std::to_string(ref.num_times()) + " samples, simulation has " +
                          std::to_string(sim.num_times()) + " (index " +
                          std::to_string(std::min(ref.num_times(), sim.num_times())) + ")");
  for (int t = 0; t < sim.num_times(); ++t)
    if (std::abs(sim.times[t] - ref.times[t]) > 1e-9)
      throw InvalidArgument("reference time misaligned at index " + std::to_string(t));
}

/// Parabolic peak value b - (a-c)^2 / (8 (a - 2b + c)) and its partials.
inline double peak_value(double a, double b, double c, Eigen::Vector3d& d) {
  const double u = a - c, k = a - 2.0 * b + c;
  if (!(k < 0.0)) {
    d = Eigen::Vector3d(0, 1, 0);
    return b;
  }
  d[0] = -u / (4.0 * k) + u * u / (8.0 * k * k);
  d[1] = 1.0 - u * u / (4.0 * k * k);
  d[2] = u / (4.0 * k) + u * u / (8.0 * k * k);
  return b - u * u / (8.0 * k);
}

}  // namespace detail

inline TrackedLoss loss_eval(const Trajectory& sim, const LossSpec& spec) {
  TrackedLoss out;
  out.gradient.assign(sim.num_times(), std::vector<Eigen::Vector3d>(sim.num_points(), Eigen::Vector3d::Zero()));
  if (sim.num_times() == 0) throw InvalidArgument("empty simulated trajectory");
  switch (spec.kind) {
    case LossKind::trajectory: {
      detail::check_alignment(sim, spec.reference, true);
      const double scale = spec.weight / (static_cast<double>(sim.num_times()) * sim.num_points());
      for (int t = 0; t < sim.num_times(); ++t)
        for (int p = 0; p < sim.num_points(); ++p) {
          const Eigen::Vector3d d = sim.positions[t][p] - spec.reference.positions[t][p];
          out.value += scale * d.squaredNorm();
          out.gradient[t][p] = 2.0 * scale * d;
        }
      break;
    }
    case LossKind::final_pose: {
      detail::check_alignment(sim, spec.reference, false);
      if (spec.reference.num_times() == 0) throw InvalidArgument("final_pose needs a reference pose");
      const auto& target = spec.reference.positions.back();
      const int first = spec.all_times_to_final ? 0 : sim.num_times() - 1;
      const double scale =
          spec.all_times_to_final ? spec.weight / (static_cast<double>(sim.num_times()) * sim.num_points()) : spec.weight;
      for (int t = first; t < sim.num_times(); ++t)
        for (int p = 0; p < sim.num_points(); ++p) {
          const Eigen::Vector3d d = sim.positions[t][p] - target[p];
          out.value += scale * d.squaredNorm();
          out.gradient[t][p] = 2.0 * scale * d;
        }
      break;
    }
    case LossKind::envelope:
    case LossKind::constant_amplitude: {
      if (spec.point < 0 || spec.point >= sim.num_points()) throw InvalidArgument("loss point out of range");
      if (spec.axis < 0 || spec.axis > 2) throw InvalidArgument("loss axis must be 0, 1 or 2");
      if (spec.sign != 1.0 && spec.sign != -1.0) throw InvalidArgument("peak sign must be +1 or -1");
      auto series = sim.series(spec.point, spec.axis);
      for (double& v : series) v *= spec.sign;
      const double baseline = spec.sign * spec.baseline;
      const PeakSeries peaks = extract_peaks(series, baseline);
      std::size_t count = peaks.size();
      if (spec.kind == LossKind::envelope) {
        if (spec.reference_peaks.empty()) throw InvalidArgument("envelope loss needs reference peaks");
        count = spec.reference_peaks.size();
        if (peaks.size() < count)
          throw InsufficientData("simulation shows " + std::to_string(peaks.size()) + " peaks, reference has " +
                                 std::to_string(count));
      }
      std::vector<double> x(count);
      std::vector<Eigen::Vector3d> dx(count);
      for (std::size_t k = 0; k < count; ++k) {
        const int i = peaks.samples[k];
        x[k] = detail::peak_value(series[i - 1], series[i], series[i + 1], dx[k]) - baseline;
      }
      std::vector<double> dl(count, 0.0);
      if (spec.kind == LossKind::envelope) {
        const double norm = spec.weight / (static_cast<double>(count) * spec.reference_peaks[0] * spec.reference_peaks[0]);
        for (std::size_t k = 0; k < count; ++k) {
          const double d = x[k] - spec.reference_peaks[k];
          out.value += norm * d * d;
          dl[k] = 2.0 * norm * d;
        }
      } else {
        // Scale-free variance of the peak amplitudes.
        double mean = 0.0, sq = 0.0;
        for (double v : x) mean += v / count;
        for (double v : x) sq += (v - mean) * (v - mean) / count;
        out.value = spec.weight * sq / (mean * mean);
        for (std::size_t k = 0; k < count; ++k)
          dl[k] = spec.weight * (2.0 * (x[k] - mean) / count / (mean * mean) - 2.0 * sq / (mean * mean * mean) / count);
      }
      for (std::size_t k = 0; k < count; ++k)
        for (int j = 0; j < 3; ++j)
          out.gradient[peaks.samples[k] - 1 + j][spec.point][spec.axis] += spec.sign * dl[k] * dx[k][j];
      break;
    }
  }
  return out;
}

/// Loss on a rollout, with gradients mapped back to full state vectors.
inline LossResult loss_eval(const Rollout& r, const LossSpec& spec) {
  const Trajectory tr = track(r, spec.nodes);
  const TrackedLoss l = loss_eval(tr, spec);
  LossResult out;
  out.value = l.value;
  out.state_gradient.resize(r.states.size());
  for (std::size_t t = 0; t < r.states.size(); ++t) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(r.states[t].q.size());
    bool any = false;
    for (std::size_t p = 0; p < spec.nodes.size(); ++p) {
      if (l.gradient[t][p].isZero(0.0)) continue;
      g.segment<3>(3 * spec.nodes[p]) += l.gradient[t][p];
      any = true;
    }
    if (any) out.state_gradient[t] = std::move(g);
  }
  return out;
}

/// Least-squares fit of X_k = X_0 exp(-delta k) in log space; returns (X_0, delta).
inline std::pair<double, double> fit_exponential_envelope(const std::vector<double>& amplitudes) {
  if (amplitudes.size() < 2) throw InsufficientData("envelope fit needs at least 2 peaks");
  const double n = static_cast<double>(amplitudes.size());
  double sk = 0, sl = 0, skk = 0, skl = 0;
  for (std::size_t k = 0; k < amplitudes.size(); ++k) {
    if (!(amplitudes[k] > 0.0)) throw InvalidArgument("peak amplitudes must be positive");
    const double l = std::log(amplitudes[k]);
    sk += k;
    sl += l;
    skk += static_cast<double>(k * k);
    skl += k * l;
  }
  const double slope = (n * skl - sk * sl) / (n * skk - sk * sk);
  return {std::exp((sl - slope * sk) / n), -slope};
}

inline std::vector<double> exponential_envelope(double x0, double delta, int count) {
  std::vector<double> x(count);
  for (int k = 0; k < count; ++k) x[k] = x0 * std::exp(-delta * k);
  return x;
}

inline LossFunction make_loss(LossSpec spec) {
  return [spec = std::move(spec)](const Rollout& r) { return loss_eval(r, spec); };
}

// ---------------------------------------------------------------------------
// Projected L-BFGS

struct OptimizerConfig {
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;  // projected gradient, scaled variables
  double relative_loss_tolerance = 1e-10;
  int memory = 10;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search = 20;
  int max_failures = 4;
};

struct HistoryEntry {
  int iteration = 0;
  double loss = 0.0;
  double gradient_norm = 0.0;
  Eigen::VectorXd values;
};

struct OptimizationResult {
  Eigen::VectorXd values;
  double loss = 0.0;
  std::vector<HistoryEntry> history;
  std::string stop_reason;
  int evaluations = 0;
  int rejected_steps = 0;
};

class OptimizationFailure : public std::runtime_error {
 public:
  OptimizationFailure(const std::string& what, std::vector<HistoryEntry> history)
      : std::runtime_error(what), history_(std::move(history)) {}
  const std::vector<HistoryEntry>& history() const { return history_; }

 private:
  std::vector<HistoryEntry> history_;
};

/// f(x, grad) returns the loss and fills grad. Throwing DivergenceError,
/// ConvergenceError or InsufficientData marks the point as infeasible.
using SmoothObjective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

/// Box-constrained L-BFGS: two-loop recursion on the free variables, strong
/// Wolfe search along the direction truncated at the box. `scale` maps the
/// problem to unit-order variables x = value / scale.
inline OptimizationResult lbfgs_minimize(const SmoothObjective& f, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                                         const Eigen::VectorXd& upper, const Eigen::VectorXd& scale,
                                         const OptimizerConfig& cfg = {}) {
  const Eigen::Index n = x0.size();
  OptimizationResult res;
  Eigen::VectorXd lo = lower.cwiseQuotient(scale), hi = upper.cwiseQuotient(scale);
  Eigen::VectorXd x = x0.cwiseQuotient(scale).cwiseMax(lo).cwiseMin(hi);

  struct Point {
    double f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd g;
    bool ok = false;
  };
  auto eval = [&](const Eigen::VectorXd& xs) {
    Point p;
    Eigen::VectorXd gv(n);
    ++res.evaluations;
    try {
      p.f = f(xs.cwiseProduct(scale).cwiseMax(lower).cwiseMin(upper), gv);
      p.g = gv.cwiseProduct(scale);
      p.ok = std::isfinite(p.f) && p.g.allFinite();
    } catch (const DivergenceError&) {
    } catch (const ConvergenceError&) {
    } catch (const InsufficientData&) {
    }
    if (!p.ok) p.f = std::numeric_limits<double>::infinity();
    return p;
  };
  auto projected_gradient = [&](const Eigen::VectorXd& xs, const Eigen::VectorXd& g) {
    Eigen::VectorXd pg = g;
    for (Eigen::Index i = 0; i < n; ++i)
      if ((xs[i] <= lo[i] && g[i] > 0.0) || (xs[i] >= hi[i] && g[i] < 0.0)) pg[i] = 0.0;
    return pg;
  };
  auto record = [&](int it, const Point& p, const Eigen::VectorXd& xs) {
    res.history.push_back(
        {it, p.f, projected_gradient(xs, p.g).norm(), xs.cwiseProduct(scale).cwiseMax(lower).cwiseMin(upper)});
  };

  Point cur = eval(x);
  if (!cur.ok) throw OptimizationFailure("objective failed at the initial guess", res.history);
  record(0, cur, x);
  std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> mem;
  int failures = 0;
  res.stop_reason = "iteration cap";
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    if (cur.f == 0.0) {
      res.stop_reason = "zero loss";
      break;
    }
    const Eigen::VectorXd pg = projected_gradient(x, cur.g);
    if (pg.norm() < cfg.gradient_tolerance) {
      res.stop_reason = "gradient tolerance";
      break;
    }
    // Two-loop recursion restricted to variables not held at a bound.
    Eigen::VectorXd q = pg;
    std::vector<double> alpha(mem.size());
    for (int k = static_cast<int>(mem.size()) - 1; k >= 0; --k) {
      const auto& [s, y] = mem[k];
      alpha[k] = s.dot(q) / y.dot(s);
      q -= alpha[k] * y;
    }
    if (!mem.empty()) q *= mem.back().first.dot(mem.back().second) / mem.back().second.squaredNorm();
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const auto& [s, y] = mem[k];
      const double beta = y.dot(q) / y.dot(s);
      q += (alpha[k] - beta) * s;
    }
    Eigen::VectorXd d = -q;
    for (Eigen::Index i = 0; i < n; ++i)
      if (pg[i] == 0.0) d[i] = 0.0;
    if (!(d.dot(cur.g) < 0.0)) {
      mem.clear();
      d = -pg;
    }
    // Largest feasible step along d.
    double amax = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (d[i] > 0.0) amax = std::min(amax, (hi[i] - x[i]) / d[i]);
      if (d[i] < 0.0) amax = std::min(amax, (lo[i] - x[i]) / d[i]);
    }
    double a1 = mem.empty() ? std::min(1.0, 0.1 / d.cwiseAbs().maxCoeff()) : 1.0;
    a1 = std::min(a1, amax);
    if (!(a1 > 0.0)) {
      res.stop_reason = "no feasible descent";
      break;
    }

    // Strong Wolfe search (bracketing then zoom with safeguarded interpolation).
    const double phi0 = cur.f, dphi0 = cur.g.dot(d);
    auto at = [&](double a) { return Eigen::VectorXd((x + a * d).cwiseMax(lo).cwiseMin(hi)); };
    Point best;
    double best_a = 0.0;
    bool found = false;
    double a_prev = 0.0, phi_prev = phi0;
    double a = a1;
    auto zoom = [&](double alo, double ahi, double flo) {
      for (int z = 0; z < cfg.max_line_search; ++z) {
        const double aj = 0.5 * (alo + ahi);
        Point p = eval(at(aj));
        if (!p.ok || p.f > phi0 + cfg.c1 * aj * dphi0 || p.f >= flo) {
          ahi = aj;
          if (p.ok && p.f <= phi0 + cfg.c1 * aj * dphi0 && p.f < best.f) {
            best = p;
            best_a = aj;
          }
        } else {
          const double dp = p.g.dot(d);
          if (p.f < best.f) {
            best = p;
            best_a = aj;
          }
          if (std::abs(dp) <= -cfg.c2 * dphi0) return true;
          if (dp * (ahi - alo) >= 0.0) ahi = alo;
          alo = aj;
          flo = p.f;
        }
      }
      return best.ok;
    };
    for (int ls = 0; ls < cfg.max_line_search; ++ls) {
      Point p = eval(at(a));
      if (!p.ok) {
        // Infeasible trial: shrink the step like a trust region.
        ++res.rejected_steps;
        a = a_prev + 0.5 * (a - a_prev);
        continue;
      }
      const bool armijo = p.f <= phi0 + cfg.c1 * a * dphi0;
      if (armijo && p.f < best.f) {
        best = p;
        best_a = a;
      }
      if (!armijo || (ls > 0 && p.f >= phi_prev)) {
        found = zoom(a_prev, a, phi_prev);
        break;
      }
      const double dp = p.g.dot(d);
      if (std::abs(dp) <= -cfg.c2 * dphi0) {
        found = true;
        break;
      }
      if (dp >= 0.0) {
        found = zoom(a, a_prev, p.f);
        break;
      }
      if (a >= amax) {  // pinned at the box: Armijo is all we can ask
        found = true;
        break;
      }
      a_prev = a;
      phi_prev = p.f;
      a = std::min(2.0 * a, amax);
    }
    if (!found || !best.ok) {
      ++failures;
      mem.clear();
      if (failures >= cfg.max_failures)
        throw OptimizationFailure("line search failed " + std::to_string(failures) + " times", res.history);
      continue;
    }
    failures = 0;
    const Eigen::VectorXd xn = at(best_a);
    const Eigen::VectorXd s = xn - x, y = best.g - cur.g;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      mem.emplace_back(s, y);
      if (static_cast<int>(mem.size()) > cfg.memory) mem.pop_front();
    }
    const double change = std::abs(cur.f - best.f) / std::max(std::abs(cur.f), 1e-300);
    x = xn;
    cur = best;
    record(it, cur, x);
    if (change < cfg.relative_loss_tolerance) {
      res.stop_reason = "relative loss change";
      break;
    }
  }
  res.values = x.cwiseProduct(scale).cwiseMax(lower).cwiseMin(upper);
  res.loss = cur.f;
  return res;
}

/// Seeded uniform draw in [0.5, 1.5] x nominal, clipped to the bounds.
inline ParameterSet random_initial_guess(ParameterSet params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& p : params) p.value = std::clamp(u(rng) * p.value, p.lower, p.upper);
  return params;
}

struct CalibrationResult {
  ParameterSet parameters;
  OptimizationResult optimization;
};

inline Eigen::VectorXd parameter_scale(const ParameterSet& params) {
  Eigen::VectorXd s(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) s[i] = std::max(std::abs(params[i].value), 1.0);
  return s;
}

/// Fits the parameters to a loss by L-BFGS with adjoint gradients.
inline CalibrationResult optimize(const ParameterSet& params, const LossFunction& loss, const Scenario& sc,
                                  const OptimizerConfig& cfg = {}) {
  validate(params, sc.simulator.model().num_fibers());
  Eigen::VectorXd lower(params.size()), upper(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    lower[i] = params[i].lower;
    upper[i] = params[i].upper;
  }
  const SmoothObjective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const Evaluation e = evaluate(sc, with_values(params, x), loss);
    g = e.gradient;
    return e.loss.value;
  };
  CalibrationResult r;
  r.optimization = lbfgs_minimize(f, parameter_values(params), lower, upper, parameter_scale(params), cfg);
  r.parameters = with_values(params, r.optimization.values);
  return r;
}

inline CalibrationResult optimize(const ParameterSet& params, const LossSpec& spec, const Scenario& sc,
                                  const OptimizerConfig& cfg = {}) {
  return optimize(params, make_loss(spec), sc, cfg);
}

inline void write_history_csv(std::ostream& os, const std::vector<HistoryEntry>& history) {
  const std::size_t k = history.empty() ? 0 : static_cast<std::size_t>(history.front().values.size());
  os << "iter,loss,grad_norm";
  for (std::size_t i = 1; i <= k; ++i) os << ",param_" << i;
  os << '\n' << std::setprecision(17);
  for (const auto& h : history) {
    os << h.iteration << ',' << h.loss << ',' << h.gradient_norm;
    for (Eigen::Index i = 0; i < h.values.size(); ++i) os << ',' << h.values[i];
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Actuation sequences

struct SequenceResult {
  ActuationSchedule schedule;
  CalibrationResult calibration;
};

/// Piecewise-constant actuation at `frequency` Hz for the listed fibers
/// (sign -1 mirrors an antagonist), starting from a = initial.
inline SequenceResult optimize_actuation_sequence(Scenario sc, const std::vector<int>& fibers,
                                                  const std::vector<double>& signs, double frequency,
                                                  const LossFunction& loss, double initial = 1.0,
                                                  const OptimizerConfig& cfg = {}) {
  if (!(frequency > 0.0)) throw InvalidArgument("actuation frequency must be positive");
  const double per = 1.0 / (frequency * sc.simulator.h());
  if (std::abs(per - std::round(per)) > 1e-9 * per)
    throw InvalidArgument("actuation interval is not a whole number of time steps");
  const int count = ActuationSignal::decision_count(sc.duration, frequency);
  if (count < 1) throw InvalidArgument("duration is shorter than one actuation interval");
  for (int f : fibers)
    if (f < 0 || f >= sc.simulator.model().num_fibers()) throw InvalidArgument("fiber out of range");
  if (sc.schedule.size() != static_cast<std::size_t>(sc.simulator.model().num_fibers()))
    sc.schedule.assign(sc.simulator.model().num_fibers(), ActuationSignal::constant(1.0));
  for (int f : fibers) sc.schedule[f] = ActuationSignal::sequence(frequency, std::vector<double>(count, 1.0));
  const ParameterSet params = actuation_sequence_parameters(fibers, signs, std::vector<double>(count, initial));
  SequenceResult r;
  r.calibration = optimize(params, loss, sc, cfg);
  r.schedule = configure(sc, r.calibration.parameters).schedule;
  return r;
}

// ---------------------------------------------------------------------------
// Pressure-to-actuation maps

/// Least-squares polynomial, coefficients in increasing degree.
inline Eigen::VectorXd polyfit(const std::vector<double>& x, const std::vector<double>& y, int degree) {
  if (x.size() != y.size() || x.size() < static_cast<std::size_t>(degree) + 1)
    throw InvalidArgument("polynomial fit needs at least degree+1 samples");
  Eigen::MatrixXd v(x.size(), degree + 1);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int j = 0; j <= degree; ++j) v(i, j) = std::pow(x[i], j);
  return v.colPivHouseholderQr().solve(Eigen::Map<const Eigen::VectorXd>(y.data(), y.size()));
}

inline double polyval(const Eigen::VectorXd& c, double x) {
  double r = 0.0;
  for (Eigen::Index j = c.size() - 1; j >= 0; --j) r = r * x + c[j];
  return r;
}

struct PressureActuationMap {
  std::vector<double> pressures;
  std::vector<double> actuation;  // optimized
  Eigen::VectorXd coefficients;
  double residual = 0.0;  // RMS of fitted minus optimized
  std::vector<std::string> warnings;
  std::vector<double> heldout_pressures;
  std::vector<double> heldout_errors;  // mean relative tracked-point error

  double fitted(double p) const { return polyval(coefficients, p); }
};

struct PressureSample {
  double pressure = 0.0;
  Trajectory reference;  // tracked points over the scenario duration
};

/// Mean tracked-point error at the final time relative to the mean reference displacement.
inline double relative_pose_error(const Trajectory& sim, const Trajectory& ref, const Trajectory& rest) {
  double err = 0.0, mag = 0.0;
  const auto& a = sim.positions.back();
  const auto& b = ref.positions.back();
  const auto& r0 = rest.positions.front();
  for (std::size_t p = 0; p < a.size(); ++p) {
    err += (a[p] - b[p]).norm();
    mag += (b[p] - r0[p]).norm();
  }
  return err / std::max(mag, 1e-300);
}

struct PressureMapConfig {
  std::vector<int> fibers;
  std::vector<double> signs;
  std::vector<int> nodes;  // tracked
  int degree = 2;
  double initial = 1.0;
  /// Compare every time against the final reference pose instead of the final pose only.
  bool all_times_to_final = false;
  int threads = default_threads();
  OptimizerConfig optimizer;
};

/// One single-actuation optimization per pressure, a polynomial fit through the
/// optimized values, then predictions checked at held-out pressures.
inline PressureActuationMap pressure_map(const Scenario& sc, const std::vector<PressureSample>& samples,
                                         const std::vector<PressureSample>& heldout, const PressureMapConfig& cfg) {
  if (samples.size() < 3) throw InvalidArgument("pressure map needs at least 3 pressures");
  for (std::size_t i = 1; i < samples.size(); ++i)
    if (!(samples[i].pressure > samples[i - 1].pressure)) throw InvalidArgument("pressures must be strictly increasing");
  PressureActuationMap map;
  map.actuation.resize(samples.size());
  parallel_for(static_cast<int>(samples.size()), cfg.threads, [&](int i) {
    LossSpec spec;
    spec.kind = LossKind::final_pose;
    spec.all_times_to_final = cfg.all_times_to_final;
    spec.nodes = cfg.nodes;
    spec.reference = samples[i].reference;
    const ParameterSet p{actuation_parameter(cfg.fibers, cfg.signs, cfg.initial)};
    map.actuation[i] = optimize(p, spec, sc, cfg.optimizer).parameters[0].value;
  });
  for (const auto& s : samples) map.pressures.push_back(s.pressure);
  for (std::size_t i = 1; i < map.actuation.size(); ++i)
    if ((map.actuation[i] - map.actuation[i - 1]) * (map.actuation[1] - map.actuation[0]) < 0.0) {
      map.warnings.push_back("optimized actuation is not monotone in pressure");
      break;
    }
  map.coefficients = polyfit(map.pressures, map.actuation, cfg.degree);
  double ss = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) ss += std::pow(map.fitted(map.pressures[i]) - map.actuation[i], 2);
  map.residual = std::sqrt(ss / static_cast<double>(samples.size()));

  const Trajectory rest = track(Rollout{{sc.initial}, {}}, cfg.nodes);
  for (const auto& h : heldout) {
    const ParameterSet p{actuation_parameter(cfg.fibers, cfg.signs, map.fitted(h.pressure))};
    const Trajectory sim = track(forward(sc, p), cfg.nodes);
    map.heldout_pressures.push_back(h.pressure);
    map.heldout_errors.push_back(relative_pose_error(sim, h.reference, rest));
  }
  return map;
}

inline void write_map_csv(std::ostream& os, const PressureActuationMap& map) {
  os << std::setprecision(17);
  os << "# coefficients";
  for (Eigen::Index j = 0; j < map.coefficients.size(); ++j) os << ' ' << map.coefficients[j];
  os << " residual " << map.residual << '\n';
  os << "pressure,a_optimized,a_fitted\n";
  for (std::size_t i = 0; i < map.pressures.size(); ++i)
    os << map.pressures[i] << ',' << map.actuation[i] << ',' << map.fitted(map.pressures[i]) << '\n';
}

}  // namespace softfem
