#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <deque>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "softfem/constitutive.hpp"
#include "softfem/errors.hpp"
#include "softfem/mesh.hpp"

namespace softfem {

inline constexpr double kStandardGravity = 9.81;

inline std::string format_number(double x) {
  std::ostringstream os;
  os << std::setprecision(6) << x;
  return os.str();
}

struct State {
  Eigen::VectorXd q;  // positions, 3n
  Eigen::VectorXd v;  // velocities, 3n
  double t = 0.0;
  int step = 0;
};

/// Total force spread equally over a node set, ramped linearly from zero
/// over `ramp` seconds and then held.
struct EdgeLoad {
  std::vector<int> nodes;
  Eigen::Vector3d force = Eigen::Vector3d::Zero();  // N, total
  double ramp = 0.1;

  double factor(double t) const { return ramp > 0.0 ? std::min(1.0, std::max(0.0, t / ramp)) : 1.0; }
};

struct ForceSpec {
  Eigen::Vector3d gravity{0.0, 0.0, -kStandardGravity};
  std::vector<EdgeLoad> edge_loads;
  /// Gain of the damping-compensation force Lambda * m * v_prev on every free node (1/s).
  double damping_lambda = 0.0;
};

/// How local/global iterations are accelerated. `none` is the textbook
/// alternation; `anderson` extrapolates over recent global steps; `newton`
/// takes inexact Newton steps preconditioned by the global matrix.
enum class Acceleration { none, anderson, newton };

inline std::string to_string(Acceleration a) {
  switch (a) {
    case Acceleration::none: return "none";
    case Acceleration::anderson: return "anderson";
    case Acceleration::newton: return "newton";
  }
  return "newton";
}

inline Acceleration acceleration_from_string(const std::string& s) {
  if (s == "none") return Acceleration::none;
  if (s == "anderson") return Acceleration::anderson;
  if (s == "newton") return Acceleration::newton;
  throw InvalidArgument("unknown acceleration '" + s + "'");
}

struct SolverConfig {
  double h = 0.01;
  int max_iterations = 200;
  /// Stop when ||grad objective||_inf < tolerance * mean node mass * g.
  double tolerance = 1e-6;
  Acceleration acceleration = Acceleration::newton;
  int anderson_window = 5;
  int max_cg_iterations = 500;
  /// Max displacement from rest before a state counts as diverged; <= 0 picks
  /// the bounding-box diagonal.
  double divergence_limit = 0.0;
  /// After convergence, one more accurately solved Newton correction. Makes
  /// rollouts smooth in the parameters (finite differences, gradients).
  bool polish = false;
};

struct StepReport {
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> objective;  // accepted iterates
  int rejected_accelerations = 0;
  bool at_roundoff_floor = false;
};

/// Implicit Euler integrator. Each step minimizes
///   1/(2h^2) ||M^(1/2) (q - y)||^2 + E_int(q),   y = q_i + h v_i + h^2 M^-1 f_ext
/// by projective local/global iterations with a prefactorized constant matrix.
/// Clamped nodes are eliminated from the solve.
class Simulator {
 public:
  Simulator(EnergyModel model, ForceSpec forces = {}, SolverConfig config = {})
      : model_(std::move(model)), forces_(std::move(forces)), config_(config) {
    if (!(config_.h > 0.0)) throw InvalidArgument("time step must be positive");
    if (!(config_.tolerance > 0.0)) throw InvalidArgument("solver tolerance must be positive");
    if (!std::isfinite(forces_.damping_lambda)) throw InvalidArgument("damping gain must be finite");
    const Mesh& mesh = model_.mesh();
    const int n = mesh.num_nodes();
    free_index_.assign(n, -1);
    for (int i = 0; i < n; ++i)
      if (!mesh.is_constrained(i)) {
        free_index_[i] = static_cast<int>(free_nodes_.size());
        free_nodes_.push_back(i);
      }
    for (const auto& load : forces_.edge_loads) {
      if (load.nodes.empty()) throw InvalidArgument("edge load has an empty node set");
      for (int node : load.nodes)
        if (node < 0 || node >= n) throw InvalidArgument("edge load node out of range");
    }
    rest_ = mesh.rest_positions();
    if (config_.divergence_limit <= 0.0) {
      const auto [lo, hi] = bounding_box(mesh);
      config_.divergence_limit = (hi - lo).norm();
    }
    refresh();
  }

  const EnergyModel& model() const { return model_; }
  const ForceSpec& forces() const { return forces_; }
  const SolverConfig& config() const { return config_; }
  const Eigen::VectorXd& node_mass() const { return mass_; }
  const std::vector<int>& free_nodes() const { return free_nodes_; }
  int free_index(int node) const { return free_index_[node]; }
  double h() const { return config_.h; }

  void set_material(const Material& m) {
    model_.set_material(m);
    refresh();
  }
  void set_fiber_stiffness(int fiber, double w) {
    model_.set_fiber_stiffness(fiber, w);
    refresh();
  }
  void set_damping_lambda(double lambda) {
    if (!std::isfinite(lambda)) throw InvalidArgument("damping gain must be finite");
    forces_.damping_lambda = lambda;
  }
  void set_polish(bool on) { config_.polish = on; }
  void set_tolerance(double tol) {
    if (!(tol > 0.0)) throw InvalidArgument("solver tolerance must be positive");
    config_.tolerance = tol;
  }

  /// Characteristic nodal force: mean node mass times standard gravity.
  double force_scale() const { return mass_.mean() * kStandardGravity; }

  State rest_state() const { return {rest_, Eigen::VectorXd::Zero(rest_.size()), 0.0, 0}; }

  std::vector<double> default_activation() const { return std::vector<double>(model_.num_fibers(), 1.0); }

  /// Edge loads evaluated at time t (3n).
  Eigen::VectorXd edge_forces(double t) const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(rest_.size());
    for (const auto& load : forces_.edge_loads) {
      const Eigen::Vector3d per_node = load.factor(t) * load.force / static_cast<double>(load.nodes.size());
      for (int node : load.nodes) f.segment<3>(3 * node) += per_node;
    }
    return f;
  }

  /// y = q + h v + h^2 M^-1 f_ext with f_ext = M g + edge loads(t_{i+1}) + Lambda M v_i.
  Eigen::VectorXd inertial_target(const State& s) const {
    const double h = config_.h;
    const Eigen::VectorXd edge = edge_forces(s.t + h);
    Eigen::VectorXd y = s.q;
    for (int node : free_nodes_) {
      y.segment<3>(3 * node) += (h + h * h * forces_.damping_lambda) * s.v.segment<3>(3 * node) +
                                h * h * (forces_.gravity + edge.segment<3>(3 * node) / mass_[node]);
    }
    return y;
  }

  double momentum(const Eigen::VectorXd& q, const Eigen::VectorXd& y) const {
    double e = 0.0;
    for (int node : free_nodes_) e += mass_[node] * (q.segment<3>(3 * node) - y.segment<3>(3 * node)).squaredNorm();
    return e / (2.0 * config_.h * config_.h);
  }

  double objective(const Eigen::VectorXd& q, const Eigen::VectorXd& y, std::span<const double> act) const {
    return momentum(q, y) + model_.energy(q, act);
  }

  /// Gradient of the step objective restricted to free DOFs (stacked by free node).
  Eigen::VectorXd objective_gradient(const Eigen::VectorXd& q, const Eigen::VectorXd& y,
                                     std::span<const double> act) const {
    const Eigen::VectorXd g = model_.gradient(q, act);
    Eigen::VectorXd out(3 * free_nodes_.size());
    const double ih2 = 1.0 / (config_.h * config_.h);
    for (std::size_t k = 0; k < free_nodes_.size(); ++k) {
      const int node = free_nodes_[k];
      out.segment<3>(3 * k) = mass_[node] * ih2 * (q.segment<3>(3 * node) - y.segment<3>(3 * node)) +
                              g.segment<3>(3 * node);
    }
    return out;
  }

  /// Hessian of the step objective on free DOFs.
  Eigen::SparseMatrix<double> step_hessian(const Eigen::VectorXd& q, std::span<const double> act) const {
    return assemble_step_hessian(model_.linearize(q, act));
  }

  /// Free-DOF block of a 3n x 3n matrix.
  Eigen::SparseMatrix<double> restrict_to_free(const Eigen::SparseMatrix<double>& full) const {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(full.nonZeros());
    for (int col = 0; col < full.outerSize(); ++col)
      for (Eigen::SparseMatrix<double>::InnerIterator it(full, col); it; ++it) {
        const int r = free_index_[it.row() / 3], c = free_index_[it.col() / 3];
        if (r < 0 || c < 0) continue;
        trip.emplace_back(3 * r + it.row() % 3, 3 * c + it.col() % 3, it.value());
      }
    const Eigen::Index nf = 3 * static_cast<Eigen::Index>(free_nodes_.size());
    Eigen::SparseMatrix<double> out(nf, nf);
    out.setFromTriplets(trip.begin(), trip.end());
    return out;
  }

  Eigen::VectorXd gather_free(const Eigen::VectorXd& full) const {
    Eigen::VectorXd out(3 * free_nodes_.size());
    for (std::size_t k = 0; k < free_nodes_.size(); ++k) out.segment<3>(3 * k) = full.segment<3>(3 * free_nodes_[k]);
    return out;
  }

  void scatter_free(const Eigen::VectorXd& free, Eigen::VectorXd& full) const {
    for (std::size_t k = 0; k < free_nodes_.size(); ++k) full.segment<3>(3 * free_nodes_[k]) = free.segment<3>(3 * k);
  }

  /// One implicit Euler step solved with projective local/global iterations.
  /// Every accepted iterate lowers the step objective. With Acceleration::newton
  /// the search direction is an inexact Newton step computed by conjugate
  /// gradients preconditioned with the prefactorized global matrix; the plain
  /// global step is the fallback whenever that direction fails the line search.
  State step(const State& s, std::span<const double> act, StepReport* report = nullptr) const {
    check_state(s);
    const int nf = static_cast<int>(free_nodes_.size());
    const double h2 = config_.h * config_.h;
    const Eigen::VectorXd y = inertial_target(s);
    const double tol = config_.tolerance * force_scale();

    RowMatrixX3d inertia(nf, 3);
    for (int k = 0; k < nf; ++k)
      inertia.row(k) = (mass_[free_nodes_[k]] / h2) * y.segment<3>(3 * free_nodes_[k]).transpose();

    struct Iterate {
      RowMatrixX3d x;     // free positions, row per free node (== stacked layout)
      Eigen::VectorXd q;  // full positions
      Targets targets;
      double objective = 0.0;
      RowMatrixX3d b;     // global-step right-hand side
      RowMatrixX3d grad;  // objective gradient A x - b
    };
    RowMatrixX3d rhs_full(model_.mesh().num_nodes(), 3);
    auto complete = [&](Iterate& it) {
      rhs_full.setZero();
      model_.add_target_forces(it.targets, rhs_full);
      it.b.resize(nf, 3);
      for (int k = 0; k < nf; ++k) it.b.row(k) = inertia.row(k) + rhs_full.row(free_nodes_[k]);
      it.b -= fixed_coupling_;
      it.grad = system_ * it.x - it.b;
    };
    auto evaluate = [&](const RowMatrixX3d& x, bool with_gradient) {
      Iterate it;
      it.x = x;
      it.q = s.q;
      scatter_free(Eigen::Map<const Eigen::VectorXd>(x.data(), x.size()), it.q);
      it.targets = model_.project(it.q, act);
      it.objective = momentum(it.q, y) + model_.target_energy(it.q, it.targets);
      if (with_gradient) complete(it);
      return it;
    };
    auto flat = [](RowMatrixX3d& m) { return Eigen::Map<Eigen::VectorXd>(m.data(), m.size()); };

    RowMatrixX3d x0(nf, 3);
    for (int k = 0; k < nf; ++k) {
      const int node = free_nodes_[k];
      x0.row(k) = (s.q.segment<3>(3 * node) + config_.h * s.v.segment<3>(3 * node)).transpose();
    }
    Iterate cur = evaluate(x0, true);

    Anderson anderson(config_.acceleration == Acceleration::anderson ? config_.anderson_window : 0);
    StepReport local_report;
    double residual = std::numeric_limits<double>::infinity();
    double first_norm = -1.0;
    std::shared_ptr<const Factor> factor;  // preconditioner, refreshed when CG slows down
    double best_residual = std::numeric_limits<double>::infinity();
    int stalled = 0;
    int last_cg = 0;
    for (int it = 0; it < config_.max_iterations; ++it) {
      local_report.objective.push_back(cur.objective);
      residual = cur.grad.cwiseAbs().maxCoeff();
      local_report.iterations = it;
      if (!std::isfinite(residual)) throw DivergenceError("non-finite state during step", s.step + 1);
      if (residual < tol) break;
      // Stagnation just above the tolerance is the roundoff floor of the
      // force assembly, not a failure to converge.
      stalled = residual < 100.0 * tol && residual >= best_residual ? stalled + 1 : 0;
      best_residual = std::min(best_residual, residual);
      if (stalled >= 5) {
        local_report.at_roundoff_floor = true;
        break;
      }
      const double gnorm = cur.grad.norm();
      if (first_norm < 0.0) first_norm = gnorm;

      RowMatrixX3d plain_x = solver_->solve(cur.b);
      std::optional<Iterate> next;
      if (config_.acceleration == Acceleration::newton) {
        const double forcing = std::min(0.1, gnorm / first_norm);
        const auto hess = assemble_step_hessian(model_.linearize(cur.q, act));
        if (!factor || last_cg > 10) {
          auto f = std::make_shared<Factor>(hess);
          factor = f->info() == Eigen::Success ? f : rest_factor_;
        }
        RowMatrixX3d d = newton_direction(hess, *factor, cur.grad, forcing, last_cg);
        const double slope = flat(cur.grad).dot(flat(d));
        if (slope < 0.0) {
          double alpha = 1.0;
          for (int ls = 0; ls < 8; ++ls, alpha *= 0.5) {
            Iterate trial = evaluate(cur.x + alpha * d, false);
            // Below roundoff of the objective the sufficient-decrease test is
            // meaningless; accept the full step and let the residual decide.
            if (trial.objective <= cur.objective + 1e-4 * alpha * slope ||
                (ls == 0 && -slope <= 1e-13 * std::abs(cur.objective) &&
                 trial.objective <= cur.objective + 1e-13 * std::abs(cur.objective))) {
              complete(trial);
              next = std::move(trial);
              break;
            }
          }
        }
        if (!next) ++local_report.rejected_accelerations;
      } else if (anderson.enabled()) {
        Eigen::VectorXd xv = Eigen::Map<const Eigen::VectorXd>(cur.x.data(), cur.x.size());
        Eigen::VectorXd gv = Eigen::Map<const Eigen::VectorXd>(plain_x.data(), plain_x.size());
        Eigen::VectorXd acc = anderson.update(xv, gv);
        RowMatrixX3d ax = Eigen::Map<const RowMatrixX3d>(acc.data(), nf, 3);
        Iterate trial = evaluate(ax, true);
        if (trial.objective <= cur.objective + 1e-13 * std::abs(cur.objective)) {
          next = std::move(trial);
        } else {
          ++local_report.rejected_accelerations;
          anderson.reset();
        }
      }
      cur = next ? std::move(*next) : evaluate(plain_x, true);
    }
    const bool converged = residual < tol || local_report.at_roundoff_floor;
    if (converged && config_.polish && config_.acceleration == Acceleration::newton && residual > 0.0) {
      const auto hess = assemble_step_hessian(model_.linearize(cur.q, act));
      auto f = std::make_shared<Factor>(hess);
      int cg = 0;
      // The direct force evaluation has a lower roundoff floor than A x - b.
      const Eigen::VectorXd g = objective_gradient(cur.q, y, act);
      const RowMatrixX3d gr = Eigen::Map<const RowMatrixX3d>(g.data(), nf, 3);
      const RowMatrixX3d d = newton_direction(hess, f->info() == Eigen::Success ? *f : *rest_factor_, gr, 1e-10, cg);
      if (d.allFinite() && g.dot(Eigen::Map<const Eigen::VectorXd>(d.data(), d.size())) < 0.0) {
        Iterate trial = evaluate(cur.x + d, true);
        if (trial.objective <= cur.objective + 1e-13 * std::abs(cur.objective)) {
          cur = std::move(trial);
          residual = cur.grad.cwiseAbs().maxCoeff();
        }
      }
    }
    local_report.residual = residual;
    if (report) *report = local_report;
    if (!converged) {
      if (model_.count_inverted(cur.q) > 0)
        throw DivergenceError("simulation diverged at step " + std::to_string(s.step + 1) + " (inverted elements)",
                              s.step + 1);
      throw ConvergenceError("projective solve did not converge in step " + std::to_string(s.step + 1) +
                                 " (residual " + format_number(residual) + ")",
                             residual, s.step + 1);
    }
    return finish(s, cur.q);
  }

  /// Newton's method on the same step objective with the exact Hessian and
  /// a backtracking line search. Reference solver for tests.
  State newton_step(const State& s, std::span<const double> act, double tolerance = 1e-9,
                    int* iterations = nullptr) const {
    check_state(s);
    const Eigen::VectorXd y = inertial_target(s);
    Eigen::VectorXd q = s.q;
    Eigen::VectorXd x0 = gather_free(y);
    scatter_free(x0, q);
    auto obj = [&](const Eigen::VectorXd& qq) { return objective(qq, y, act); };
    auto grad = [&](const Eigen::VectorXd& qq) { return objective_gradient(qq, y, act); };
    auto hess = [&](const Eigen::VectorXd& qq) { return step_hessian(qq, act); };
    const int its = newton_minimize(q, obj, grad, hess, tolerance * force_scale(), s.step + 1);
    if (iterations) *iterations = its;
    return finish(s, q);
  }

  /// Static equilibrium under gravity and fully ramped edge loads:
  /// minimizes E_int(q) - f_ext . q.
  Eigen::VectorXd static_equilibrium(std::span<const double> act, double tolerance = 1e-9,
                                     int* iterations = nullptr) const {
    if (free_nodes_.size() == static_cast<std::size_t>(model_.mesh().num_nodes()))
      throw InvalidArgument("static equilibrium needs at least one clamped node");
    Eigen::VectorXd f = edge_forces(std::numeric_limits<double>::infinity());
    for (int node : free_nodes_) f.segment<3>(3 * node) += mass_[node] * forces_.gravity;
    for (int node = 0; node < model_.mesh().num_nodes(); ++node)
      if (free_index_[node] < 0) f.segment<3>(3 * node).setZero();
    Eigen::VectorXd q = rest_;
    auto obj = [&](const Eigen::VectorXd& qq) { return model_.energy(qq, act) - f.dot(qq); };
    auto grad = [&](const Eigen::VectorXd& qq) { return gather_free(Eigen::VectorXd(model_.gradient(qq, act) - f)); };
    auto hess = [&](const Eigen::VectorXd& qq) { return assemble_step_hessian(model_.linearize(qq, act), false); };
    const double tol = tolerance * force_scale();
    int its = 0;
    // Newton-CG preconditioned by a lagged Hessian factor, refreshed only when
    // CG slows down. Moderate deflections need a single factorization.
    auto pre = std::make_unique<Factor>(hess(q));
    if (pre->info() == Eigen::Success) {
      const int nf = static_cast<int>(free_nodes_.size());
      double prev_norm = std::numeric_limits<double>::infinity();
      for (; its < 100; ++its) {
        const Eigen::VectorXd g = grad(q);
        const double norm = g.cwiseAbs().maxCoeff();
        if (norm < tol || (norm < 1e3 * tol && norm > 0.5 * prev_norm)) {
          if (iterations) *iterations = its;
          return q;
        }
        prev_norm = norm;
        int cg = 0;
        const RowMatrixX3d gr = Eigen::Map<const RowMatrixX3d>(g.data(), nf, 3);
        const Eigen::SparseMatrix<double> hq = hess(q);
        const RowMatrixX3d dr = newton_direction(hq, *pre, gr, 1e-4, cg);
        const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(dr.data(), dr.size());
        const double slope = g.dot(d);
        if (!(slope < 0.0)) break;
        if (cg > 40) {
          auto fresh = std::make_unique<Factor>(hq);
          if (fresh->info() == Eigen::Success) pre = std::move(fresh);
        }
        const Eigen::VectorXd x = gather_free(q);
        const double f0 = obj(q);
        Eigen::VectorXd trial = q;
        bool accepted = false;
        double alpha = 1.0;
        for (int ls = 0; ls < 30 && !accepted; ++ls, alpha *= 0.5) {
          scatter_free(Eigen::VectorXd(x + alpha * d), trial);
          const double f1 = obj(trial);
          accepted = std::isfinite(f1) && f1 <= f0 + 1e-4 * alpha * slope;
        }
        if (!accepted) {
          // Below the objective's roundoff Armijo cannot judge; use the gradient.
          scatter_free(Eigen::VectorXd(x + d), trial);
          if (grad(trial).cwiseAbs().maxCoeff() >= norm) break;  // finish with full Newton
        }
        q = trial;
      }
    }
    its += newton_minimize(q, obj, grad, hess, tol, -1);
    if (iterations) *iterations = its;
    return q;
  }

 private:
  /// Type-II Anderson acceleration on the fixed-point map x -> G(x).
  class Anderson {
   public:
    explicit Anderson(int window) : window_(window) {}
    bool enabled() const { return window_ > 0; }
    int size() const { return static_cast<int>(df_.size()); }
    void reset() {
      df_.clear();
      dg_.clear();
      has_prev_ = false;
    }
    Eigen::VectorXd update(const Eigen::VectorXd& x, const Eigen::VectorXd& gx) {
      const Eigen::VectorXd f = gx - x;
      if (has_prev_) {
        df_.push_back(f - f_prev_);
        dg_.push_back(gx - g_prev_);
        if (static_cast<int>(df_.size()) > window_) {
          df_.pop_front();
          dg_.pop_front();
        }
      }
      f_prev_ = f;
      g_prev_ = gx;
      has_prev_ = true;
      if (df_.empty()) return gx;
      Eigen::MatrixXd a(f.size(), df_.size());
      for (std::size_t j = 0; j < df_.size(); ++j) a.col(j) = df_[j];
      const Eigen::VectorXd theta = a.colPivHouseholderQr().solve(f);
      Eigen::VectorXd out = gx;
      for (std::size_t j = 0; j < dg_.size(); ++j) out -= theta[j] * dg_[j];
      return out.allFinite() ? out : gx;
    }

   private:
    int window_;
    std::deque<Eigen::VectorXd> df_, dg_;
    Eigen::VectorXd f_prev_, g_prev_;
    bool has_prev_ = false;
  };

  using Factor = Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>;

  /// Approximate solution of H d = -g by preconditioned conjugate gradients.
  /// Stops at relative residual `forcing` or on negative curvature.
  RowMatrixX3d newton_direction(const Eigen::SparseMatrix<double>& hess, const Factor& pre, const RowMatrixX3d& grad,
                                double forcing, int& iterations) const {
    const int nf = static_cast<int>(free_nodes_.size());
    auto as_rows = [nf](const Eigen::VectorXd& v) { return RowMatrixX3d(Eigen::Map<const RowMatrixX3d>(v.data(), nf, 3)); };
    auto as_vec = [](const RowMatrixX3d& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); };
    auto dot = [](const RowMatrixX3d& a, const RowMatrixX3d& b) { return a.cwiseProduct(b).sum(); };
    RowMatrixX3d d = RowMatrixX3d::Zero(nf, 3);
    RowMatrixX3d r = -grad;
    RowMatrixX3d z = as_rows(pre.solve(as_vec(r)));
    RowMatrixX3d p = z;
    double rz = dot(r, z);
    const double target = forcing * grad.norm();
    iterations = 0;
    for (int k = 0; k < config_.max_cg_iterations; ++k) {
      ++iterations;
      const RowMatrixX3d hp = as_rows(hess * as_vec(p));
      const double curvature = dot(p, hp);
      if (!(curvature > 0.0)) {
        if (k == 0) d = p;  // preconditioned steepest descent
        break;
      }
      const double alpha = rz / curvature;
      d += alpha * p;
      r -= alpha * hp;
      if (r.norm() <= target) break;
      z = as_rows(pre.solve(as_vec(r)));
      const double rz_next = dot(r, z);
      p = z + (rz_next / rz) * p;
      rz = rz_next;
    }
    return d;
  }

  /// Step Hessian on free DOFs assembled into the precomputed pattern.
  Eigen::SparseMatrix<double> assemble_step_hessian(const EnergyModel::Linearization& lin, bool with_mass = true) const {
    Eigen::SparseMatrix<double> h = layout_.pattern;
    double* val = h.valuePtr();
    std::fill(val, val + h.nonZeros(), 0.0);
    const int ne = model_.mesh().nodes_per_element();
    const auto& cons = model_.constraints();
    for (std::size_t i = 0; i < cons.size(); ++i) {
      const int* off = &layout_.offsets[static_cast<std::size_t>(cons[i].point->element) * ne * ne * 3];
      model_.constraint_blocks(lin, i, [&](int a, int b, const Eigen::Matrix3d& blk) {
        const int* o = off + 3 * (a + ne * b);
        if (o[0] < 0) return;
        for (int j = 0; j < 3; ++j)
          for (int r = 0; r < 3; ++r) val[o[j] + r] += blk(r, j);
      });
    }
    const double ih2 = with_mass ? 1.0 / (config_.h * config_.h) : 0.0;
    for (std::size_t k = 0; k < free_nodes_.size(); ++k)
      for (int d = 0; d < 3; ++d) val[layout_.diagonal[3 * k + d]] += mass_[free_nodes_[k]] * ih2;
    return h;
  }

  void build_layout() {
    const Mesh& mesh = model_.mesh();
    const int ne = mesh.nodes_per_element();
    std::vector<Eigen::Triplet<double>> trip;
    for (int e = 0; e < mesh.num_elements(); ++e) {
      auto el = mesh.element(e);
      for (int a : el)
        for (int b : el) {
          const int fa = free_index_[a], fb = free_index_[b];
          if (fa < 0 || fb < 0) continue;
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) trip.emplace_back(3 * fa + i, 3 * fb + j, 0.0);
        }
    }
    const Eigen::Index nf = 3 * static_cast<Eigen::Index>(free_nodes_.size());
    layout_.pattern.resize(nf, nf);
    layout_.pattern.setFromTriplets(trip.begin(), trip.end());
    layout_.pattern.makeCompressed();
    const auto& pat = layout_.pattern;
    auto find = [&](int row, int col) {
      const int* begin = pat.innerIndexPtr() + pat.outerIndexPtr()[col];
      const int* end = pat.innerIndexPtr() + pat.outerIndexPtr()[col + 1];
      const int* it = std::lower_bound(begin, end, row);
      return static_cast<int>(it - pat.innerIndexPtr());
    };
    layout_.offsets.assign(static_cast<std::size_t>(mesh.num_elements()) * ne * ne * 3, -1);
    for (int e = 0; e < mesh.num_elements(); ++e) {
      auto el = mesh.element(e);
      for (int b = 0; b < ne; ++b)
        for (int a = 0; a < ne; ++a) {
          const int fa = free_index_[el[a]], fb = free_index_[el[b]];
          if (fa < 0 || fb < 0) continue;
          int* o = &layout_.offsets[(static_cast<std::size_t>(e) * ne * ne + a + ne * b) * 3];
          for (int j = 0; j < 3; ++j) o[j] = find(3 * fa, 3 * fb + j);
        }
    }
    layout_.diagonal.resize(nf);
    for (int k = 0; k < nf; ++k) layout_.diagonal[k] = find(k, k);
  }

  void refresh() {
    const Mesh& mesh = model_.mesh();
    mass_ = lumped_mass(mesh, model_.material().density);
    const Eigen::SparseMatrix<double> lap = model_.pd_laplacian();
    const int nf = static_cast<int>(free_nodes_.size());
    const double ih2 = 1.0 / (config_.h * config_.h);
    std::vector<Eigen::Triplet<double>> ff, fc;
    for (int col = 0; col < lap.outerSize(); ++col)
      for (Eigen::SparseMatrix<double>::InnerIterator it(lap, col); it; ++it) {
        const int r = free_index_[it.row()];
        if (r < 0) continue;
        const int c = free_index_[it.col()];
        if (c >= 0)
          ff.emplace_back(r, c, it.value());
        else
          fc.emplace_back(r, static_cast<int>(it.col()), it.value());
      }
    for (int k = 0; k < nf; ++k) ff.emplace_back(k, k, mass_[free_nodes_[k]] * ih2);
    system_.resize(nf, nf);
    system_.setFromTriplets(ff.begin(), ff.end());
    Eigen::SparseMatrix<double> coupling(nf, mesh.num_nodes());
    coupling.setFromTriplets(fc.begin(), fc.end());
    RowMatrixX3d rest_rows(mesh.num_nodes(), 3);
    for (int i = 0; i < mesh.num_nodes(); ++i) rest_rows.row(i) = rest_.segment<3>(3 * i).transpose();
    fixed_coupling_ = coupling * rest_rows;
    solver_ = std::make_shared<Factor>(system_);
    if (solver_->info() != Eigen::Success) throw InvalidArgument("global step matrix is not positive definite");
    if (layout_.pattern.size() == 0) build_layout();
    if (config_.acceleration == Acceleration::newton) {
      // Fallback preconditioner when the current Hessian is indefinite.
      rest_factor_ = std::make_shared<Factor>(assemble_step_hessian(model_.linearize(rest_, default_activation())));
      if (rest_factor_->info() != Eigen::Success) throw InvalidArgument("rest-state Hessian is not positive definite");
    }
  }

  void check_state(const State& s) const {
    if (s.q.size() != rest_.size() || s.v.size() != rest_.size())
      throw InvalidArgument("state dimension does not match the mesh");
  }

  State finish(const State& s, const Eigen::VectorXd& q) const {
    State out;
    out.q = q;
    out.v = (q - s.q) / config_.h;
    out.t = (s.step + 1) * config_.h;
    out.step = s.step + 1;
    if (!q.allFinite() || (q - rest_).cwiseAbs().maxCoeff() > config_.divergence_limit)
      throw DivergenceError("simulation diverged at step " + std::to_string(out.step), out.step);
    return out;
  }

  /// Damped Newton with Armijo backtracking; shifts the Hessian when it is
  /// not positive definite. q holds the full position vector.
  template <class Obj, class Grad, class Hess>
  int newton_minimize(Eigen::VectorXd& q, Obj&& obj, Grad&& grad, Hess&& hess, double tol, int step) const {
    const double shift_scale = mass_.mean() / (config_.h * config_.h);
    double prev_norm = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 100; ++it) {
      const Eigen::VectorXd g = grad(q);
      if (!g.allFinite()) throw OracleError("non-finite gradient in Newton solve");
      const double norm = g.cwiseAbs().maxCoeff();
      if (norm < tol) return it;
      // Stagnation close to the tolerance means the roundoff floor is reached.
      if (norm < 1e3 * tol && norm > 0.5 * prev_norm) return it;
      prev_norm = norm;
      const Eigen::SparseMatrix<double> hm = hess(q);
      Eigen::VectorXd d;
      double shift = 0.0;
      for (int attempt = 0; attempt < 30; ++attempt) {
        Eigen::SparseMatrix<double> a = hm;
        if (shift > 0.0)
          for (int i = 0; i < a.rows(); ++i) a.coeffRef(i, i) += shift;
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(a);
        bool ok = ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all();
        if (ok) {
          d = ldlt.solve(-g);
          ok = d.allFinite() && d.dot(g) < 0.0;
        }
        if (ok) break;
        d.resize(0);
        shift = shift == 0.0 ? 1e-6 * shift_scale : 10.0 * shift;
      }
      if (d.size() == 0) throw OracleError("Newton solve could not find a descent direction");
      Eigen::VectorXd x = gather_free(q);
      const double f0 = obj(q);
      const double slope = g.dot(d);
      Eigen::VectorXd trial = q;
      bool accepted = false;
      // Once the predicted decrease is below the roundoff of the objective,
      // Armijo cannot discriminate; judge the full step by the gradient.
      if (-slope > 1e-13 * std::abs(f0)) {
        double alpha = 1.0;
        for (int ls = 0; ls < 40 && !accepted; ++ls, alpha *= 0.5) {
          scatter_free(Eigen::VectorXd(x + alpha * d), trial);
          const double f1 = obj(trial);
          accepted = std::isfinite(f1) && f1 <= f0 + 1e-4 * alpha * slope;
        }
      }
      if (!accepted) {
        scatter_free(Eigen::VectorXd(x + d), trial);
        const double trial_norm = grad(trial).cwiseAbs().maxCoeff();
        if (trial_norm < norm) {
          accepted = true;
        } else if (norm < 1e3 * tol) {
          return it;
        } else {
          throw OracleError("Newton line search failed" + (step >= 0 ? " in step " + std::to_string(step) : ""));
        }
      }
      q = trial;
    }
    throw OracleError("Newton solve did not converge" + (step >= 0 ? " in step " + std::to_string(step) : ""));
  }

  EnergyModel model_;
  ForceSpec forces_;
  SolverConfig config_;
  std::vector<int> free_nodes_;
  std::vector<int> free_index_;
  Eigen::VectorXd rest_;
  Eigen::VectorXd mass_;
  Eigen::SparseMatrix<double> system_;
  RowMatrixX3d fixed_coupling_;
  std::shared_ptr<Factor> solver_;
  struct HessianLayout {
    Eigen::SparseMatrix<double> pattern;  // free x free
    std::vector<int> offsets;             // per element and node pair: value index of each block column, -1 if clamped
    std::vector<int> diagonal;
  } layout_;
  std::shared_ptr<const Factor> rest_factor_;
};

// ---------------------------------------------------------------------------
// Rollouts and tracked trajectories

using ActuationSchedule = std::vector<ActuationSignal>;

inline std::vector<double> activation_at(const ActuationSchedule& schedule, double t) {
  std::vector<double> a(schedule.size());
  for (std::size_t i = 0; i < schedule.size(); ++i) a[i] = schedule[i].at(t);
  return a;
}

inline int step_count(double duration, double h) {
  if (duration < 0.0) throw InvalidArgument("duration must be nonnegative");
  const double n = std::round(duration / h);
  if (std::abs(n * h - duration) > 1e-9) throw InvalidArgument("duration is not a multiple of the time step");
  return static_cast<int>(n);
}

/// Every state of a simulation (the checkpoints used by the adjoint).
struct Rollout {
  std::vector<State> states;
  std::vector<int> iterations;
};

enum class StepMethod { projective, newton };

inline Rollout simulate(const Simulator& sim, const State& initial, double duration, const ActuationSchedule& schedule,
                        StepMethod method = StepMethod::projective) {
  if (static_cast<int>(schedule.size()) != sim.model().num_fibers())
    throw InvalidArgument("actuation schedule must have one signal per fiber");
  for (const auto& s : schedule) s.validate();
  const int n = step_count(duration, sim.h());
  Rollout r;
  r.states.reserve(n + 1);
  r.states.push_back(initial);
  for (int i = 0; i < n; ++i) {
    const State& cur = r.states.back();
    const auto act = activation_at(schedule, cur.t);
    if (method == StepMethod::projective) {
      StepReport rep;
      r.states.push_back(sim.step(cur, act, &rep));
      r.iterations.push_back(rep.iterations);
    } else {
      int its = 0;
      r.states.push_back(sim.newton_step(cur, act, 1e-9, &its));
      r.iterations.push_back(its);
    }
  }
  return r;
}

/// Time-stamped positions of tracked nodes.
struct Trajectory {
  std::vector<double> times;
  std::vector<int> nodes;
  std::vector<std::vector<Eigen::Vector3d>> positions;  // [time][point]

  int num_times() const { return static_cast<int>(times.size()); }
  int num_points() const { return static_cast<int>(nodes.size()); }

  /// One coordinate of one point over time.
  std::vector<double> series(int point, int axis) const {
    std::vector<double> s(times.size());
    for (std::size_t t = 0; t < times.size(); ++t) s[t] = positions[t][point][axis];
    return s;
  }
};

inline Trajectory track(const Rollout& rollout, const std::vector<int>& nodes) {
  Trajectory tr;
  tr.nodes = nodes;
  for (const auto& s : rollout.states) {
    tr.times.push_back(s.t);
    std::vector<Eigen::Vector3d> pts;
    pts.reserve(nodes.size());
    for (int n : nodes) {
      if (n < 0 || 3 * n + 2 >= s.q.size()) throw InvalidArgument("tracked node out of range");
      pts.push_back(s.q.segment<3>(3 * n));
    }
    tr.positions.push_back(std::move(pts));
  }
  return tr;
}

/// CSV `t,point_id,x,y,z`; point_id is the index in the tracked list.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
  os << "t,point_id,x,y,z\n" << std::setprecision(17);
  for (int t = 0; t < tr.num_times(); ++t)
    for (int p = 0; p < tr.num_points(); ++p) {
      const auto& x = tr.positions[t][p];
      os << tr.times[t] << ',' << p << ',' << x[0] << ',' << x[1] << ',' << x[2] << '\n';
    }
}

}  // namespace softfem
