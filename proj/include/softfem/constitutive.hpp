#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "softfem/errors.hpp"
#include "softfem/mesh.hpp"

namespace softfem {

/// Isotropic material. Lame parameters are derived on demand so they always
/// follow the current (E, nu).
struct Material {
  double youngs_modulus = 263824.0;  // Pa
  double poisson_ratio = 0.499;
  double density = 1070.0;  // kg/m^3

  double mu() const { return youngs_modulus / (2.0 * (1.0 + poisson_ratio)); }
  double lambda() const {
    return youngs_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
  }

  static Material from_lame(double mu, double lambda, double density) {
    Material m;
    m.youngs_modulus = mu * (3.0 * lambda + 2.0 * mu) / (lambda + mu);
    m.poisson_ratio = lambda / (2.0 * (lambda + mu));
    m.density = density;
    return m;
  }

  void validate() const {
    if (!(youngs_modulus > 0.0)) throw InvalidArgument("Young's modulus must be positive");
    if (!(poisson_ratio >= 0.0 && poisson_ratio < 0.5))
      throw InvalidArgument("Poisson ratio must lie in [0, 0.5)");
    if (!(density > 0.0)) throw InvalidArgument("density must be positive");
  }
};

enum class FiberMode { extend, contract };

inline std::string to_string(FiberMode m) { return m == FiberMode::extend ? "extend" : "contract"; }

inline FiberMode fiber_mode_from_string(const std::string& s) {
  if (s == "extend") return FiberMode::extend;
  if (s == "contract") return FiberMode::contract;
  throw InvalidArgument("unknown fiber mode '" + s + "'");
}

/// Group of elements actuated together along a rest-frame direction.
struct MuscleFiber {
  std::vector<int> elements;
  Eigen::Vector3d direction = Eigen::Vector3d::UnitX();
  double stiffness = 1e5;
  FiberMode mode = FiberMode::extend;

  void validate(int num_elements) const {
    if (elements.empty()) throw InvalidArgument("fiber has no elements");
    for (int e : elements)
      if (e < 0 || e >= num_elements)
        throw InvalidArgument("fiber element " + std::to_string(e) + " out of range");
    if (std::abs(direction.norm() - 1.0) > 1e-12) throw InvalidArgument("fiber direction must be unit length");
    if (!(stiffness > 0.0)) throw InvalidArgument("fiber stiffness must be positive");
  }
};

/// Piecewise-constant actuation held for 1/frequency seconds per value.
/// frequency == 0 denotes a single constant value.
struct ActuationSignal {
  double frequency = 0.0;
  std::vector<double> values{1.0};

  static ActuationSignal constant(double a) { return {0.0, {a}}; }
  static ActuationSignal sequence(double frequency, std::vector<double> values) {
    return {frequency, std::move(values)};
  }

  /// Number of hold intervals covering `duration` seconds at `frequency` Hz.
  static int decision_count(double duration, double frequency) {
    return static_cast<int>(std::floor(duration * frequency + 1e-9));
  }

  int interval(double t) const {
    if (frequency <= 0.0 || values.size() == 1) return 0;
    const int k = static_cast<int>(std::floor(t * frequency + 1e-9));
    return std::clamp(k, 0, static_cast<int>(values.size()) - 1);
  }
  double at(double t) const { return values[interval(t)]; }

  void validate() const {
    if (values.empty()) throw InvalidArgument("actuation signal is empty");
    if (frequency < 0.0) throw InvalidArgument("actuation frequency must be nonnegative");
    for (double a : values)
      if (!(a > 0.0)) throw InvalidArgument("actuation values must be positive");
  }
};

// ---------------------------------------------------------------------------
// Pointwise constitutive laws

struct PolarDecomposition {
  Eigen::Matrix3d u, v;
  Eigen::Vector3d sigma;  // signed: sigma[2] < 0 for inverted F
  Eigen::Matrix3d rotation;
  bool inverted = false;
};

/// F = U diag(sigma) V^T with U, V proper rotations; R = U V^T is the
/// closest rotation to F even when det F <= 0.
inline PolarDecomposition polar_decomposition(const Eigen::Matrix3d& f) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  PolarDecomposition p;
  p.u = svd.matrixU();
  p.v = svd.matrixV();
  p.sigma = svd.singularValues();
  if (p.u.determinant() < 0.0) {
    p.u.col(2) *= -1.0;
    p.sigma[2] *= -1.0;
  }
  if (p.v.determinant() < 0.0) {
    p.v.col(2) *= -1.0;
    p.sigma[2] *= -1.0;
  }
  p.rotation = p.u * p.v.transpose();
  p.inverted = p.sigma[2] < 0.0;
  return p;
}

inline Eigen::Matrix3d corotational_projection(const Eigen::Matrix3d& f) {
  return polar_decomposition(f).rotation;
}

/// Psi(F) = mu ||F - R||^2 + lambda/2 tr^2(R^T F - I).
inline double corotational_energy(const Eigen::Matrix3d& f, double mu, double lambda) {
  const Eigen::Matrix3d r = corotational_projection(f);
  const double tr = (r.transpose() * f).trace() - 3.0;
  return mu * (f - r).squaredNorm() + 0.5 * lambda * tr * tr;
}

/// dPsi/dF (first Piola-Kirchhoff stress).
inline Eigen::Matrix3d corotational_stress(const Eigen::Matrix3d& f, double mu, double lambda) {
  const Eigen::Matrix3d r = corotational_projection(f);
  const double tr = (r.transpose() * f).trace() - 3.0;
  return 2.0 * mu * (f - r) + lambda * tr * r;
}

using Matrix9d = Eigen::Matrix<double, 9, 9>;

inline Eigen::Matrix<double, 9, 1> vec(const Eigen::Matrix3d& m) {
  return Eigen::Map<const Eigen::Matrix<double, 9, 1>>(m.data());
}

/// d vec(R) / d vec(F) for the polar rotation (column-major vec):
/// sum over a < b of t t^T / (sigma_a + sigma_b), t = vec(u_a v_b^T - u_b v_a^T).
inline Matrix9d rotation_derivative(const PolarDecomposition& p) {
  Matrix9d d = Matrix9d::Zero();
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      double s = p.sigma[a] + p.sigma[b];
      if (std::abs(s) < 1e-12) s = std::copysign(1e-12, s == 0.0 ? 1.0 : s);
      const Eigen::Matrix3d t = p.u.col(a) * p.v.col(b).transpose() - p.u.col(b) * p.v.col(a).transpose();
      const auto tv = vec(t);
      d.noalias() += (tv * tv.transpose()) / s;
    }
  return d;
}

/// Actuation energy of one fiber sample: (w/2) (|F m| - a)^2. The fiber's
/// rest length is scaled by a: a > 1 extends, a < 1 contracts, and a = 1
/// is energy-free whenever the fiber keeps its length.
inline double muscle_energy(const Eigen::Matrix3d& f, const Eigen::Vector3d& m, double a, double w) {
  const double len = (f * m).norm();
  return 0.5 * w * (len - a) * (len - a);
}

inline Eigen::Vector3d muscle_direction(const Eigen::Vector3d& fm, const Eigen::Vector3d& fallback) {
  const double len = fm.norm();
  return len > 1e-14 ? Eigen::Vector3d(fm / len) : fallback;
}

/// dE/dF of muscle_energy.
inline Eigen::Matrix3d muscle_stress(const Eigen::Matrix3d& f, const Eigen::Vector3d& m, double a, double w) {
  const Eigen::Vector3d fm = f * m;
  return w * (fm - a * muscle_direction(fm, m)) * m.transpose();
}

// ---------------------------------------------------------------------------
// Assembled energy in projective form

enum class ConstraintKind { rotation, trace, muscle };

/// One projective term  (w/2) || G q - P(G q) ||^2  sampled at a quadrature point.
/// For F-type terms G q = F; for muscle terms G q = F m = sum_a coeffs[a] x_a.
struct Constraint {
  ConstraintKind kind = ConstraintKind::rotation;
  const QuadraturePoint* point = nullptr;
  int fiber = -1;
  Eigen::VectorXd coeffs;  // muscle only
};

/// Per-constraint projection targets from a local step. Muscle targets use col(0).
struct Targets {
  std::vector<Eigen::Matrix3d> p;
  int inverted = 0;
};

using RowMatrixX3d = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Internal energy E_int(q; material, fibers, activation) assembled from
/// elastic and muscle constraints. The mesh and rest shape are shared and
/// immutable; material and fiber stiffness may be changed between solves.
class EnergyModel {
 public:
  EnergyModel(std::shared_ptr<const Mesh> mesh, std::shared_ptr<const RestShape> rest, Material material,
              std::vector<MuscleFiber> fibers = {})
      : mesh_(std::move(mesh)), rest_(std::move(rest)), material_(material), fibers_(std::move(fibers)) {
    material_.validate();
    for (const auto& f : fibers_) f.validate(mesh_->num_elements());
    build_constraints();
  }

  EnergyModel(const Mesh& mesh, Material material, std::vector<MuscleFiber> fibers = {},
              HexQuadrature quadrature = HexQuadrature::selective)
      : EnergyModel(std::make_shared<const Mesh>(mesh),
                    std::make_shared<const RestShape>(rest_shapes(mesh, quadrature)), material,
                    std::move(fibers)) {}

  // The constraint list points into *rest_; copies share it.
  EnergyModel(const EnergyModel&) = default;
  EnergyModel& operator=(const EnergyModel&) = default;

  const Mesh& mesh() const { return *mesh_; }
  std::shared_ptr<const Mesh> mesh_ptr() const { return mesh_; }
  const RestShape& rest() const { return *rest_; }
  const Material& material() const { return material_; }
  const std::vector<MuscleFiber>& fibers() const { return fibers_; }
  int num_fibers() const { return static_cast<int>(fibers_.size()); }
  const std::vector<Constraint>& constraints() const { return constraints_; }

  void set_material(const Material& m) {
    m.validate();
    material_ = m;
  }
  void set_fiber_stiffness(int fiber, double w) {
    if (!(w > 0.0)) throw InvalidArgument("fiber stiffness must be positive");
    fibers_.at(fiber).stiffness = w;
  }

  double weight(const Constraint& c) const {
    switch (c.kind) {
      case ConstraintKind::rotation: return 2.0 * material_.mu() * c.point->volume;
      case ConstraintKind::trace: return 3.0 * material_.lambda() * c.point->volume;
      case ConstraintKind::muscle: return fibers_[c.fiber].stiffness * c.point->volume;
    }
    return 0.0;
  }

  /// G q: the deformation gradient, or F m in col(0) for muscle terms.
  Eigen::Matrix3d apply(const Constraint& c, const Eigen::VectorXd& q) const {
    auto el = mesh_->element(c.point->element);
    if (c.kind == ConstraintKind::muscle) {
      Eigen::Matrix3d out = Eigen::Matrix3d::Zero();
      for (int a = 0; a < static_cast<int>(el.size()); ++a) out.col(0) += c.coeffs[a] * q.segment<3>(3 * el[a]);
      return out;
    }
    return deformation_gradient(*mesh_, *c.point, q);
  }

  /// Local step: closest point of each constraint set to the current G q.
  Targets project(const Eigen::VectorXd& q, std::span<const double> activation) const {
    check_activation(activation);
    Targets t;
    t.p.resize(constraints_.size());
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      const Constraint& c = constraints_[i];
      const Eigen::Matrix3d g = apply(c, q);
      switch (c.kind) {
        case ConstraintKind::rotation: {
          const auto pd = polar_decomposition(g);
          if (pd.inverted) ++t.inverted;
          t.p[i] = pd.rotation;
          break;
        }
        case ConstraintKind::trace: {
          const auto pd = polar_decomposition(g);
          const double shift = ((pd.rotation.transpose() * g).trace() - 3.0) / 3.0;
          t.p[i] = g - shift * pd.rotation;
          break;
        }
        case ConstraintKind::muscle: {
          const Eigen::Vector3d& m = fibers_[c.fiber].direction;
          t.p[i].setZero();
          t.p[i].col(0) = activation[c.fiber] * muscle_direction(g.col(0), m);
          break;
        }
      }
    }
    return t;
  }

  /// sum_c (w_c/2) || G_c q - p_c ||^2 for fixed targets; equals energy() when
  /// the targets are project(q).
  double target_energy(const Eigen::VectorXd& q, const Targets& t) const {
    double e = 0.0;
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      const Constraint& c = constraints_[i];
      const Eigen::Matrix3d g = apply(c, q);
      const double d = c.kind == ConstraintKind::muscle ? (g.col(0) - t.p[i].col(0)).squaredNorm()
                                                        : (g - t.p[i]).squaredNorm();
      e += 0.5 * weight(c) * d;
    }
    return e;
  }

  double energy(const Eigen::VectorXd& q, std::span<const double> activation) const {
    return target_energy(q, project(q, activation));
  }

  double elastic_energy(const Eigen::VectorXd& q) const {
    double e = 0.0;
    for (const auto& c : constraints_) {
      if (c.kind == ConstraintKind::muscle) continue;
      e += c.kind == ConstraintKind::rotation
               ? material_.mu() * c.point->volume * rotation_distance2(apply(c, q))
               : 0.5 * material_.lambda() * c.point->volume * trace_excess2(apply(c, q));
    }
    return e;
  }

  /// sum_c w_c G_c^T p_c accumulated into an n x 3 (row per node) array.
  void add_target_forces(const Targets& t, RowMatrixX3d& rhs) const {
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      const Constraint& c = constraints_[i];
      const double w = weight(c);
      auto el = mesh_->element(c.point->element);
      for (int a = 0; a < static_cast<int>(el.size()); ++a) {
        if (c.kind == ConstraintKind::muscle)
          rhs.row(el[a]) += (w * c.coeffs[a]) * t.p[i].col(0).transpose();
        else
          rhs.row(el[a]) += (w * (t.p[i] * c.point->grads.col(a))).transpose();
      }
    }
  }

  /// Scalar n x n matrix sum_c w_c D_c D_c^T; the full PD matrix is this
  /// Kronecker I_3.
  Eigen::SparseMatrix<double> pd_laplacian() const {
    std::vector<Eigen::Triplet<double>> trip;
    for (const auto& c : constraints_) {
      const double w = weight(c);
      auto el = mesh_->element(c.point->element);
      const int n = static_cast<int>(el.size());
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          const double v = c.kind == ConstraintKind::muscle ? c.coeffs[a] * c.coeffs[b]
                                                            : c.point->grads.col(a).dot(c.point->grads.col(b));
          trip.emplace_back(el[a], el[b], w * v);
        }
    }
    Eigen::SparseMatrix<double> l(mesh_->num_nodes(), mesh_->num_nodes());
    l.setFromTriplets(trip.begin(), trip.end());
    return l;
  }

  /// grad E_int(q); internal forces are its negative.
  Eigen::VectorXd gradient(const Eigen::VectorXd& q, std::span<const double> activation) const {
    const Targets t = project(q, activation);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(q.size());
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      const Constraint& c = constraints_[i];
      const double w = weight(c);
      const Eigen::Matrix3d diff = apply(c, q) - t.p[i];
      auto el = mesh_->element(c.point->element);
      for (int a = 0; a < static_cast<int>(el.size()); ++a) {
        if (c.kind == ConstraintKind::muscle)
          g.segment<3>(3 * el[a]) += (w * c.coeffs[a]) * diff.col(0);
        else
          g.segment<3>(3 * el[a]) += w * (diff * c.point->grads.col(a));
      }
    }
    return g;
  }

  Eigen::VectorXd internal_forces(const Eigen::VectorXd& q, std::span<const double> activation) const {
    return -gradient(q, activation);
  }

  /// Per-constraint second derivatives at a state, for matrix-free products
  /// and assembly. F-type terms hold 9x9 blocks in vec(F); muscle terms hold
  /// 3x3 blocks in F m (top-left of the 9x9 storage).
  struct Linearization {
    std::vector<Matrix9d> blocks;
  };

  Linearization linearize(const Eigen::VectorXd& q, std::span<const double> activation) const {
    check_activation(activation);
    Linearization lin;
    lin.blocks.resize(constraints_.size());
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      const Constraint& c = constraints_[i];
      const double w = weight(c);
      const Eigen::Matrix3d g = apply(c, q);
      if (c.kind == ConstraintKind::muscle) {
        const Eigen::Vector3d x = g.col(0);
        const double len = x.norm();
        Eigen::Matrix3d hx = Eigen::Matrix3d::Identity();
        if (len > 1e-14) {
          const Eigen::Vector3d u = x / len;
          hx -= (activation[c.fiber] / len) * (Eigen::Matrix3d::Identity() - u * u.transpose());
        }
        lin.blocks[i].setZero();
        lin.blocks[i].topLeftCorner<3, 3>() = w * hx;
      } else {
        lin.blocks[i] = w * constraint_hessian(c.kind, g);
      }
    }
    return lin;
  }

  /// Hessian-vector product H v using a linearization (3n vectors).
  Eigen::VectorXd hessian_product(const Linearization& lin, const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      const Constraint& c = constraints_[i];
      auto el = mesh_->element(c.point->element);
      const int n = static_cast<int>(el.size());
      if (c.kind == ConstraintKind::muscle) {
        Eigen::Vector3d dx = Eigen::Vector3d::Zero();
        for (int a = 0; a < n; ++a) dx += c.coeffs[a] * v.segment<3>(3 * el[a]);
        const Eigen::Vector3d f = lin.blocks[i].topLeftCorner<3, 3>() * dx;
        for (int a = 0; a < n; ++a) out.segment<3>(3 * el[a]) += c.coeffs[a] * f;
        continue;
      }
      Eigen::Matrix3d df = Eigen::Matrix3d::Zero();
      for (int a = 0; a < n; ++a) df.noalias() += v.segment<3>(3 * el[a]) * c.point->grads.col(a).transpose();
      const Eigen::Matrix<double, 9, 1> dp = lin.blocks[i] * vec(df);
      const Eigen::Map<const Eigen::Matrix3d> p(dp.data());
      for (int a = 0; a < n; ++a) out.segment<3>(3 * el[a]).noalias() += p * c.point->grads.col(a);
    }
    return out;
  }

  /// Exact Hessian of E_int (3n x 3n).
  Eigen::SparseMatrix<double> hessian(const Eigen::VectorXd& q, std::span<const double> activation) const {
    return assemble(linearize(q, activation));
  }

  /// Calls f(a, b, block) for every 3x3 node block (local indices) of one
  /// constraint's Hessian.
  template <class F>
  void constraint_blocks(const Linearization& lin, std::size_t i, F&& f) const {
    const Constraint& c = constraints_[i];
    const int n = mesh_->nodes_per_element();
    if (c.kind == ConstraintKind::muscle) {
      const Eigen::Matrix3d hx = lin.blocks[i].topLeftCorner<3, 3>();
      for (int b1 = 0; b1 < n; ++b1)
        for (int a1 = 0; a1 < n; ++a1) f(a1, b1, Eigen::Matrix3d(c.coeffs[a1] * c.coeffs[b1] * hx));
      return;
    }
    // block(a, b)_{ik} = sum_{j,l} G(j,a) G(l,b) H(i+3j, k+3l)
    const auto& gr = c.point->grads;
    const Matrix9d& hf = lin.blocks[i];
    for (int b1 = 0; b1 < n; ++b1) {
      Eigen::Matrix<double, 9, 3> hb;
      for (int k = 0; k < 3; ++k)
        hb.col(k) = hf.col(k) * gr(0, b1) + hf.col(k + 3) * gr(1, b1) + hf.col(k + 6) * gr(2, b1);
      for (int a1 = 0; a1 < n; ++a1)
        f(a1, b1,
          Eigen::Matrix3d(gr(0, a1) * hb.topRows<3>() + gr(1, a1) * hb.middleRows<3>(3) +
                          gr(2, a1) * hb.bottomRows<3>()));
    }
  }

  Eigen::SparseMatrix<double> assemble(const Linearization& lin) const {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(constraints_.size() * 9 * mesh_->nodes_per_element() * mesh_->nodes_per_element());
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
      auto el = mesh_->element(constraints_[i].point->element);
      constraint_blocks(lin, i, [&](int a, int b, const Eigen::Matrix3d& blk) { add_block(trip, el[a], el[b], blk); });
    }
    const Eigen::Index dofs = mesh_->num_dofs();
    Eigen::SparseMatrix<double> h(dofs, dofs);
    h.setFromTriplets(trip.begin(), trip.end());
    return h;
  }

  /// d(grad E_int)/dE at fixed nu: elastic energy is linear in E.
  Eigen::VectorXd gradient_youngs_derivative(const Eigen::VectorXd& q) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(q.size());
    for (const auto& c : constraints_) {
      if (c.kind == ConstraintKind::muscle) continue;
      add_f_gradient(c, q, weight(c) / material_.youngs_modulus, g);
    }
    return g;
  }

  /// d(grad E_int)/dw for one fiber.
  Eigen::VectorXd gradient_stiffness_derivative(const Eigen::VectorXd& q, int fiber,
                                                std::span<const double> activation) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(q.size());
    for (const auto& c : constraints_) {
      if (c.kind != ConstraintKind::muscle || c.fiber != fiber) continue;
      const Eigen::Vector3d x = apply(c, q).col(0);
      const Eigen::Vector3d r = x - activation[fiber] * muscle_direction(x, fibers_[fiber].direction);
      scatter_muscle(c, c.point->volume * r, g);
    }
    return g;
  }

  /// d(grad E_int)/da for one fiber's activation.
  Eigen::VectorXd gradient_activation_derivative(const Eigen::VectorXd& q, int fiber) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(q.size());
    for (const auto& c : constraints_) {
      if (c.kind != ConstraintKind::muscle || c.fiber != fiber) continue;
      const Eigen::Vector3d x = apply(c, q).col(0);
      scatter_muscle(c, -weight(c) * muscle_direction(x, fibers_[fiber].direction), g);
    }
    return g;
  }

  int count_inverted(const Eigen::VectorXd& q) const {
    int n = 0;
    for (const auto& c : constraints_)
      if (c.kind == ConstraintKind::rotation && apply(c, q).determinant() <= 0.0) ++n;
    return n;
  }

 private:
  static double rotation_distance2(const Eigen::Matrix3d& f) { return (f - corotational_projection(f)).squaredNorm(); }
  static double trace_excess2(const Eigen::Matrix3d& f) {
    const double tr = (corotational_projection(f).transpose() * f).trace() - 3.0;
    return tr * tr;
  }

  /// Hessian of (1/2) dist^2(F, set) w.r.t. vec(F).
  static Matrix9d constraint_hessian(ConstraintKind kind, const Eigen::Matrix3d& f) {
    const auto pd = polar_decomposition(f);
    const Matrix9d dr = rotation_derivative(pd);
    if (kind == ConstraintKind::rotation) return Matrix9d::Identity() - dr;
    // gradient = shift * R with shift = (tr(R^T F) - 3)/3
    const double shift = ((pd.rotation.transpose() * f).trace() - 3.0) / 3.0;
    const auto r = vec(pd.rotation);
    return (r * r.transpose()) / 3.0 + shift * dr;
  }

  void add_f_gradient(const Constraint& c, const Eigen::VectorXd& q, double w, Eigen::VectorXd& g) const {
    const Eigen::Matrix3d f = apply(c, q);
    Eigen::Matrix3d diff;
    if (c.kind == ConstraintKind::rotation) {
      diff = f - corotational_projection(f);
    } else {
      const Eigen::Matrix3d r = corotational_projection(f);
      diff = ((r.transpose() * f).trace() - 3.0) / 3.0 * r;
    }
    auto el = mesh_->element(c.point->element);
    for (int a = 0; a < static_cast<int>(el.size()); ++a) g.segment<3>(3 * el[a]) += w * (diff * c.point->grads.col(a));
  }

  void scatter_muscle(const Constraint& c, const Eigen::Vector3d& v, Eigen::VectorXd& g) const {
    auto el = mesh_->element(c.point->element);
    for (int a = 0; a < static_cast<int>(el.size()); ++a) g.segment<3>(3 * el[a]) += c.coeffs[a] * v;
  }

  static void add_block(std::vector<Eigen::Triplet<double>>& trip, int r, int c, const Eigen::Matrix3d& b) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (b(i, j) != 0.0) trip.emplace_back(3 * r + i, 3 * c + j, b(i, j));
  }

  void check_activation(std::span<const double> activation) const {
    if (activation.size() < fibers_.size())
      throw InvalidArgument("activation vector shorter than the fiber list");
  }

  void build_constraints() {
    const RestShape& rs = *rest_;
    for (const auto& gp : rs.gauss_points) constraints_.push_back({ConstraintKind::rotation, &gp, -1, {}});
    const bool trace_at_center = rs.kind == ElementKind::hex8 && rs.quadrature == HexQuadrature::selective;
    for (const auto& p : trace_at_center ? rs.centers : rs.gauss_points)
      constraints_.push_back({ConstraintKind::trace, &p, -1, {}});
    for (int f = 0; f < num_fibers(); ++f)
      for (int e : fibers_[f].elements) {
        const QuadraturePoint& p = rs.centers[e];
        constraints_.push_back({ConstraintKind::muscle, &p, f, p.grads.transpose() * fibers_[f].direction});
      }
  }

  std::shared_ptr<const Mesh> mesh_;
  std::shared_ptr<const RestShape> rest_;
  Material material_;
  std::vector<MuscleFiber> fibers_;
  std::vector<Constraint> constraints_;
};

/// Element-averaged deformation gradient (the centroid F for box hexes).
inline Eigen::Matrix3d deformation_gradient(int element, const Eigen::VectorXd& q, const Mesh& mesh,
                                            const RestShape& rest) {
  return deformation_gradient(mesh, rest.centers.at(element), q);
}

}  // namespace softfem
