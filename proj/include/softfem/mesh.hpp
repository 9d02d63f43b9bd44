#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "softfem/errors.hpp"

namespace softfem {

enum class ElementKind { hex8, tet4 };

inline int nodes_per_element(ElementKind kind) { return kind == ElementKind::hex8 ? 8 : 4; }

inline std::string to_string(ElementKind kind) { return kind == ElementKind::hex8 ? "hex8" : "tet4"; }

inline ElementKind element_kind_from_string(const std::string& s) {
  if (s == "hex8" || s == "hex") return ElementKind::hex8;
  if (s == "tet4" || s == "tet") return ElementKind::tet4;
  throw InvalidArgument("unknown element kind '" + s + "'");
}

/// Volumetric mesh: rest node positions, element connectivity and the
/// Dirichlet (clamped) node set.
///
/// Hex8 local node order: corner b = bx + 2*by + 4*bz, where (bx, by, bz)
/// selects the min/max side of the cell along each axis.
struct Mesh {
  ElementKind kind = ElementKind::hex8;
  std::vector<Eigen::Vector3d> nodes;
  std::vector<int> connectivity;  // nodes_per_element() entries per element
  std::vector<int> dirichlet;     // sorted, unique

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  int nodes_per_element() const { return softfem::nodes_per_element(kind); }
  int num_elements() const { return static_cast<int>(connectivity.size()) / nodes_per_element(); }
  Eigen::Index num_dofs() const { return 3 * static_cast<Eigen::Index>(nodes.size()); }

  std::span<const int> element(int e) const {
    const int n = nodes_per_element();
    return {connectivity.data() + static_cast<std::size_t>(e) * n, static_cast<std::size_t>(n)};
  }

  bool is_constrained(int node) const {
    return std::binary_search(dirichlet.begin(), dirichlet.end(), node);
  }

  /// Positions stacked as (x0, y0, z0, x1, ...).
  Eigen::VectorXd rest_positions() const {
    Eigen::VectorXd q(num_dofs());
    for (int i = 0; i < num_nodes(); ++i) q.segment<3>(3 * i) = nodes[i];
    return q;
  }

  void validate() const;
};

namespace detail {

inline double tet_signed_volume(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                                const Eigen::Vector3d& c, const Eigen::Vector3d& d) {
  Eigen::Matrix3d m;
  m << b - a, c - a, d - a;
  return m.determinant() / 6.0;
}

inline Eigen::Vector3d hex_corner_offset(int b) {
  return {static_cast<double>(b & 1), static_cast<double>((b >> 1) & 1),
          static_cast<double>((b >> 2) & 1)};
}

/// Edge lengths of an axis-aligned hex; throws if the element is not one.
inline Eigen::Vector3d hex_cell_size(const Mesh& mesh, int e) {
  auto el = mesh.element(e);
  const Eigen::Vector3d origin = mesh.nodes[el[0]];
  const Eigen::Vector3d size = mesh.nodes[el[7]] - origin;
  const double tol = 1e-9 * std::max(1.0, size.norm());
  if ((size.array() <= 0.0).any())
    throw InvalidArgument("hex element " + std::to_string(e) + " is degenerate or inverted");
  for (int b = 0; b < 8; ++b) {
    const Eigen::Vector3d expected = origin + hex_corner_offset(b).cwiseProduct(size);
    if ((mesh.nodes[el[b]] - expected).cwiseAbs().maxCoeff() > tol)
      throw InvalidArgument("hex element " + std::to_string(e) + " is not an axis-aligned box");
  }
  return size;
}

inline void check_box_args(const Eigen::Vector3d& dims, const std::array<int, 3>& res) {
  for (int d = 0; d < 3; ++d) {
    if (!(dims[d] > 0.0) || !std::isfinite(dims[d]))
      throw InvalidArgument("box dimensions must be positive");
    if (res[d] < 1) throw InvalidArgument("box resolution must be >= 1 per axis");
  }
}

}  // namespace detail

inline double element_volume(const Mesh& mesh, int e) {
  auto el = mesh.element(e);
  if (mesh.kind == ElementKind::hex8) return detail::hex_cell_size(mesh, e).prod();
  return detail::tet_signed_volume(mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]],
                                   mesh.nodes[el[3]]);
}

inline void Mesh::validate() const {
  const int n = nodes_per_element();
  if (connectivity.size() % static_cast<std::size_t>(n) != 0)
    throw InvalidArgument("connectivity length is not a multiple of the element size");
  for (int idx : connectivity)
    if (idx < 0 || idx >= num_nodes())
      throw InvalidArgument("element references node " + std::to_string(idx) + " out of range");
  for (int e = 0; e < num_elements(); ++e) {
    if (kind == ElementKind::tet4 && !(element_volume(*this, e) > 0.0))
      throw InvalidArgument("tet element " + std::to_string(e) + " has nonpositive volume");
    if (kind == ElementKind::hex8) detail::hex_cell_size(*this, e);
  }
  if (!std::is_sorted(dirichlet.begin(), dirichlet.end()) ||
      std::adjacent_find(dirichlet.begin(), dirichlet.end()) != dirichlet.end())
    throw InvalidArgument("dirichlet set must be sorted and unique");
  for (int idx : dirichlet)
    if (idx < 0 || idx >= num_nodes())
      throw InvalidArgument("dirichlet node " + std::to_string(idx) + " out of range");
}

/// Regular hex grid over [0, dims] keeping only the cells for which
/// `keep(i, j, k)` is true. Unused grid nodes are dropped.
inline Mesh build_hex_grid(const Eigen::Vector3d& dims, const std::array<int, 3>& res,
                           const std::function<bool(int, int, int)>& keep) {
  detail::check_box_args(dims, res);
  const int nx = res[0] + 1, ny = res[1] + 1, nz = res[2] + 1;
  auto grid_index = [&](int i, int j, int k) { return i + nx * (j + ny * k); };
  std::vector<int> remap(static_cast<std::size_t>(nx) * ny * nz, -1);
  Mesh mesh;
  mesh.kind = ElementKind::hex8;
  const Eigen::Vector3d h = dims.cwiseQuotient(Eigen::Vector3d(res[0], res[1], res[2]));
  for (int k = 0; k < res[2]; ++k)
    for (int j = 0; j < res[1]; ++j)
      for (int i = 0; i < res[0]; ++i) {
        if (!keep(i, j, k)) continue;
        for (int b = 0; b < 8; ++b) {
          const int gi = i + (b & 1), gj = j + ((b >> 1) & 1), gk = k + ((b >> 2) & 1);
          int& slot = remap[grid_index(gi, gj, gk)];
          if (slot < 0) {
            slot = mesh.num_nodes();
            // Last grid line is placed exactly on dims to keep face selection exact.
            Eigen::Vector3d p(gi == res[0] ? dims[0] : gi * h[0], gj == res[1] ? dims[1] : gj * h[1],
                              gk == res[2] ? dims[2] : gk * h[2]);
            mesh.nodes.push_back(p);
          }
          mesh.connectivity.push_back(slot);
        }
      }
  if (mesh.connectivity.empty()) throw InvalidArgument("hex grid selection is empty");
  return mesh;
}

inline Mesh build_hex_box(const Eigen::Vector3d& dims, const std::array<int, 3>& res) {
  detail::check_box_args(dims, res);
  // Node numbering of the full box follows the grid (i fastest), so build directly.
  Mesh mesh;
  mesh.kind = ElementKind::hex8;
  const int nx = res[0] + 1, ny = res[1] + 1, nz = res[2] + 1;
  mesh.nodes.reserve(static_cast<std::size_t>(nx) * ny * nz);
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        mesh.nodes.emplace_back(i == res[0] ? dims[0] : dims[0] * i / res[0],
                                j == res[1] ? dims[1] : dims[1] * j / res[1],
                                k == res[2] ? dims[2] : dims[2] * k / res[2]);
  auto id = [&](int i, int j, int k) { return i + nx * (j + ny * k); };
  mesh.connectivity.reserve(static_cast<std::size_t>(res[0]) * res[1] * res[2] * 8);
  for (int k = 0; k < res[2]; ++k)
    for (int j = 0; j < res[1]; ++j)
      for (int i = 0; i < res[0]; ++i)
        for (int b = 0; b < 8; ++b)
          mesh.connectivity.push_back(id(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1)));
  return mesh;
}

/// Box split into linear tetrahedra: every grid cell becomes 5 tets, with the
/// split mirrored on alternating cells so shared faces use the same diagonal.
inline Mesh build_tet_box(const Eigen::Vector3d& dims, const std::array<int, 3>& res) {
  const Mesh grid = build_hex_box(dims, res);
  static constexpr std::array<std::array<int, 4>, 5> even{
      {{0, 1, 2, 4}, {3, 1, 2, 7}, {5, 1, 4, 7}, {6, 2, 4, 7}, {1, 2, 4, 7}}};
  static constexpr std::array<std::array<int, 4>, 5> odd{
      {{1, 0, 3, 5}, {2, 0, 3, 6}, {4, 0, 5, 6}, {7, 3, 5, 6}, {0, 3, 5, 6}}};
  Mesh mesh;
  mesh.kind = ElementKind::tet4;
  mesh.nodes = grid.nodes;
  mesh.connectivity.reserve(static_cast<std::size_t>(grid.num_elements()) * 20);
  int e = 0;
  for (int k = 0; k < res[2]; ++k)
    for (int j = 0; j < res[1]; ++j)
      for (int i = 0; i < res[0]; ++i, ++e) {
        auto cell = grid.element(e);
        const auto& split = ((i + j + k) % 2 == 0) ? even : odd;
        for (const auto& t : split) {
          std::array<int, 4> tet{cell[t[0]], cell[t[1]], cell[t[2]], cell[t[3]]};
          if (detail::tet_signed_volume(mesh.nodes[tet[0]], mesh.nodes[tet[1]], mesh.nodes[tet[2]],
                                        mesh.nodes[tet[3]]) < 0.0)
            std::swap(tet[2], tet[3]);
          mesh.connectivity.insert(mesh.connectivity.end(), tet.begin(), tet.end());
        }
      }
  return mesh;
}

inline std::pair<Eigen::Vector3d, Eigen::Vector3d> bounding_box(const Mesh& mesh) {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (const auto& p : mesh.nodes) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

enum class Side { min, max };

/// Shrinks the cross-section linearly along `axis`, from full size at the
/// min end to (1 - taper) at the max end, about the section center. Tets only:
/// hex elements are required to stay axis-aligned boxes.
inline Mesh taper_box(Mesh mesh, int axis, double taper) {
  if (mesh.kind != ElementKind::tet4) throw InvalidArgument("tapering needs a tet mesh");
  if (axis < 0 || axis > 2) throw InvalidArgument("axis must be 0, 1 or 2");
  if (!(taper >= 0.0 && taper < 1.0)) throw InvalidArgument("taper must lie in [0, 1)");
  const auto [lo, hi] = bounding_box(mesh);
  const Eigen::Vector3d center = 0.5 * (lo + hi);
  for (auto& p : mesh.nodes) {
    const double s = 1.0 - taper * (p[axis] - lo[axis]) / (hi[axis] - lo[axis]);
    for (int d = 0; d < 3; ++d)
      if (d != axis) p[d] = center[d] + s * (p[d] - center[d]);
  }
  mesh.validate();
  return mesh;
}

inline std::vector<int> select_nodes(const Mesh& mesh,
                                     const std::function<bool(const Eigen::Vector3d&)>& pred) {
  std::vector<int> out;
  for (int i = 0; i < mesh.num_nodes(); ++i)
    if (pred(mesh.nodes[i])) out.push_back(i);
  return out;
}

inline Eigen::Vector3d element_centroid(const Mesh& mesh, int e) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (int n : mesh.element(e)) c += mesh.nodes[n];
  return c / static_cast<double>(mesh.nodes_per_element());
}

inline std::vector<int> select_elements(const Mesh& mesh,
                                        const std::function<bool(const Eigen::Vector3d&)>& pred) {
  std::vector<int> out;
  for (int e = 0; e < mesh.num_elements(); ++e)
    if (pred(element_centroid(mesh, e))) out.push_back(e);
  return out;
}

/// Nodes lying within `tol` of the bounding-box plane `axis = min|max`.
inline std::vector<int> face_nodes(const Mesh& mesh, int axis, Side side, double tol = 1e-9) {
  if (axis < 0 || axis > 2) throw InvalidArgument("axis must be 0, 1 or 2");
  const auto [lo, hi] = bounding_box(mesh);
  const double plane = side == Side::min ? lo[axis] : hi[axis];
  return select_nodes(mesh, [&](const Eigen::Vector3d& p) { return std::abs(p[axis] - plane) <= tol; });
}

inline Mesh clamp_nodes(Mesh mesh, const std::vector<int>& nodes) {
  if (nodes.empty()) throw InvalidArgument("clamp selection is empty");
  for (int n : nodes)
    if (n < 0 || n >= mesh.num_nodes()) throw InvalidArgument("clamp node out of range");
  mesh.dirichlet.insert(mesh.dirichlet.end(), nodes.begin(), nodes.end());
  std::sort(mesh.dirichlet.begin(), mesh.dirichlet.end());
  mesh.dirichlet.erase(std::unique(mesh.dirichlet.begin(), mesh.dirichlet.end()), mesh.dirichlet.end());
  return mesh;
}

inline Mesh clamp_face(Mesh mesh, int axis, Side side) {
  auto nodes = face_nodes(mesh, axis, side);
  return clamp_nodes(std::move(mesh), nodes);
}

inline int nearest_node(const Mesh& mesh, const Eigen::Vector3d& point) {
  if (mesh.nodes.empty()) throw InvalidArgument("mesh has no nodes");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    const double d = (mesh.nodes[i] - point).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

/// Diagonal lumped mass: each element gives rho * V_e / n_e to each corner.
inline Eigen::VectorXd lumped_mass(const Mesh& mesh, double density) {
  if (!(density > 0.0)) throw InvalidArgument("density must be positive");
  Eigen::VectorXd m = Eigen::VectorXd::Zero(mesh.num_nodes());
  const double share = 1.0 / mesh.nodes_per_element();
  for (int e = 0; e < mesh.num_elements(); ++e) {
    const double me = density * element_volume(mesh, e) * share;
    for (int n : mesh.element(e)) m[n] += me;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Rest-shape data

/// Quadrature for hexes: `selective` evaluates the rotation term at the 8
/// Gauss points and the volumetric/trace term at the element-averaged F;
/// `full` uses the 8 Gauss points for both.
enum class HexQuadrature { selective, full };

/// One sampling point of the deformation gradient: F = sum_a x_a grads.col(a)^T.
struct QuadraturePoint {
  int element = -1;
  double volume = 0.0;  // integration weight (m^3)
  Eigen::Matrix<double, 3, Eigen::Dynamic> grads;
};

struct RestShape {
  ElementKind kind = ElementKind::hex8;
  HexQuadrature quadrature = HexQuadrature::selective;
  std::vector<double> element_volume;
  std::vector<Eigen::Vector3d> cell_size;      // hex only
  std::vector<Eigen::Matrix3d> inverse_edges;  // tet only: inverse of [x1-x0, x2-x0, x3-x0]
  std::vector<QuadraturePoint> gauss_points;   // hex: 8 per element; tet: 1 per element
  std::vector<QuadraturePoint> centers;        // element-averaged F, 1 per element

  double total_volume() const {
    double v = 0.0;
    for (double x : element_volume) v += x;
    return v;
  }
};

namespace detail {

/// Gradients of the 8 trilinear shape functions at natural coordinates xi.
inline Eigen::Matrix<double, 3, 8> hex_gradients(const Eigen::Vector3d& size, const Eigen::Vector3d& xi) {
  Eigen::Matrix<double, 3, 8> g;
  for (int b = 0; b < 8; ++b) {
    const Eigen::Vector3d s = 2.0 * hex_corner_offset(b) - Eigen::Vector3d::Ones();
    const Eigen::Vector3d f = (Eigen::Vector3d::Ones() + s.cwiseProduct(xi));
    g(0, b) = s[0] * f[1] * f[2] / 8.0 * 2.0 / size[0];
    g(1, b) = s[1] * f[0] * f[2] / 8.0 * 2.0 / size[1];
    g(2, b) = s[2] * f[0] * f[1] / 8.0 * 2.0 / size[2];
  }
  return g;
}

}  // namespace detail

inline RestShape rest_shapes(const Mesh& mesh, HexQuadrature quadrature = HexQuadrature::selective) {
  RestShape rs;
  rs.kind = mesh.kind;
  rs.quadrature = quadrature;
  const int ne = mesh.num_elements();
  rs.element_volume.resize(ne);
  if (mesh.kind == ElementKind::hex8) {
    const double gp = 1.0 / std::sqrt(3.0);
    rs.cell_size.resize(ne);
    for (int e = 0; e < ne; ++e) {
      const Eigen::Vector3d size = detail::hex_cell_size(mesh, e);
      const double vol = size.prod();
      rs.cell_size[e] = size;
      rs.element_volume[e] = vol;
      Eigen::Matrix<double, 3, 8> avg = Eigen::Matrix<double, 3, 8>::Zero();
      for (int b = 0; b < 8; ++b) {
        const Eigen::Vector3d xi = gp * (2.0 * detail::hex_corner_offset(b) - Eigen::Vector3d::Ones());
        QuadraturePoint q{e, vol / 8.0, detail::hex_gradients(size, xi)};
        avg += q.grads / 8.0;
        rs.gauss_points.push_back(std::move(q));
      }
      rs.centers.push_back(QuadraturePoint{e, vol, avg});
    }
  } else {
    rs.inverse_edges.resize(ne);
    for (int e = 0; e < ne; ++e) {
      auto el = mesh.element(e);
      Eigen::Matrix3d dm;
      dm << mesh.nodes[el[1]] - mesh.nodes[el[0]], mesh.nodes[el[2]] - mesh.nodes[el[0]],
          mesh.nodes[el[3]] - mesh.nodes[el[0]];
      const double vol = dm.determinant() / 6.0;
      if (!(vol > 0.0))
        throw InvalidArgument("tet element " + std::to_string(e) + " is degenerate or inverted");
      const Eigen::Matrix3d inv = dm.inverse();
      rs.inverse_edges[e] = inv;
      rs.element_volume[e] = vol;
      Eigen::Matrix<double, 3, Eigen::Dynamic> g(3, 4);
      g.col(1) = inv.row(0).transpose();
      g.col(2) = inv.row(1).transpose();
      g.col(3) = inv.row(2).transpose();
      g.col(0) = -(g.col(1) + g.col(2) + g.col(3));
      rs.gauss_points.push_back(QuadraturePoint{e, vol, g});
      rs.centers.push_back(QuadraturePoint{e, vol, g});
    }
  }
  return rs;
}

/// Deformation gradient at a sampling point for stacked positions q.
inline Eigen::Matrix3d deformation_gradient(const Mesh& mesh, const QuadraturePoint& qp,
                                            const Eigen::VectorXd& q) {
  Eigen::Matrix3d f = Eigen::Matrix3d::Zero();
  auto el = mesh.element(qp.element);
  for (int a = 0; a < static_cast<int>(el.size()); ++a)
    f.noalias() += q.segment<3>(3 * el[a]) * qp.grads.col(a).transpose();
  return f;
}

// ---------------------------------------------------------------------------
// Text serialization

/// Header `kind nodes elements`, then one coordinate line per node, one index
/// line per element and a final line with the Dirichlet indices.
inline void write_mesh(std::ostream& os, const Mesh& mesh) {
  os << to_string(mesh.kind) << ' ' << mesh.num_nodes() << ' ' << mesh.num_elements() << '\n';
  os << std::setprecision(17);
  for (const auto& p : mesh.nodes) os << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  for (int e = 0; e < mesh.num_elements(); ++e) {
    auto el = mesh.element(e);
    for (std::size_t a = 0; a < el.size(); ++a) os << (a ? " " : "") << el[a];
    os << '\n';
  }
  for (std::size_t i = 0; i < mesh.dirichlet.size(); ++i) os << (i ? " " : "") << mesh.dirichlet[i];
  os << '\n';
}

inline Mesh read_mesh(std::istream& is) {
  Mesh mesh;
  std::string kind;
  long nn = -1, ne = -1;
  if (!(is >> kind >> nn >> ne) || nn < 0 || ne < 0) throw InvalidArgument("malformed mesh header");
  mesh.kind = element_kind_from_string(kind);
  mesh.nodes.resize(nn);
  for (auto& p : mesh.nodes)
    if (!(is >> p[0] >> p[1] >> p[2])) throw InvalidArgument("malformed node line");
  mesh.connectivity.resize(static_cast<std::size_t>(ne) * mesh.nodes_per_element());
  for (auto& idx : mesh.connectivity)
    if (!(is >> idx)) throw InvalidArgument("malformed element line");
  std::string line;
  std::getline(is, line);  // rest of last element line
  if (std::getline(is, line)) {
    std::istringstream ls(line);
    int idx;
    while (ls >> idx) mesh.dirichlet.push_back(idx);
    if (!ls.eof()) throw InvalidArgument("malformed dirichlet line");
  }
  mesh.validate();
  return mesh;
}

}  // namespace softfem
