#include "rnnafem/fem.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

struct Csr {
  std::size_t n = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<std::size_t> col;
  std::vector<double> val;
};

Csr to_csr(const LinearSystem& sys) {
  std::vector<Triplet> t = sys.triplets;
  std::sort(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  Csr m;
  m.n = sys.size;
  m.row_ptr.assign(m.n + 1, 0);
  for (std::size_t i = 0; i < t.size();) {
    std::size_t j = i;
    double sum = 0;
    while (j < t.size() && t[j].row == t[i].row && t[j].col == t[i].col) sum += t[j++].value;
    m.col.push_back(t[i].col);
    m.val.push_back(sum);
    ++m.row_ptr[t[i].row + 1];
    i = j;
  }
  std::partial_sum(m.row_ptr.begin(), m.row_ptr.end(), m.row_ptr.begin());
  return m;
}

void spmv(const Csr& a, const std::vector<double>& x, std::vector<double>& y) {
  for (std::size_t r = 0; r < a.n; ++r) {
    double s = 0;
    for (std::size_t k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k) s += a.val[k] * x[a.col[k]];
    y[r] = s;
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Gradients of the three barycentric coordinates and twice the signed area.
struct P1Local {
  std::array<std::array<double, 2>, 3> grad;
  double area;
};

P1Local p1_local(const std::array<Point, 3>& c) {
  const double det = (c[1].x - c[0].x) * (c[2].y - c[0].y) - (c[2].x - c[0].x) * (c[1].y - c[0].y);
  P1Local l;
  for (int i = 0; i < 3; ++i) {
    const Point& a = c[(i + 1) % 3];
    const Point& b = c[(i + 2) % 3];
    l.grad[i] = {(a.y - b.y) / det, (b.x - a.x) / det};
  }
  l.area = 0.5 * std::abs(det);
  return l;
}

}  // namespace

ElementField constant_source(const Mesh& mesh, double value) { return ElementField(mesh.num_elements(), value); }

ElementField source_from_roots(const Mesh& mesh, std::span<const double> per_root) {
  ElementField f(mesh.num_elements());
  for (std::size_t e = 0; e < f.size(); ++e) {
    const auto root = mesh.elements[e].key.root;
    if (root >= per_root.size()) throw ValidationError("source_from_roots: root index out of range");
    f[e] = per_root[root];
  }
  return f;
}

LinearSystem assemble_poisson(const Mesh& mesh, std::span<const double> source) {
  if (source.size() != mesh.num_elements()) throw ValidationError("assemble_poisson: source size mismatch");
  LinearSystem sys;
  sys.dof_of_vertex.assign(mesh.num_vertices(), -1);
  std::vector<char> used(mesh.num_vertices(), 0), on_boundary(mesh.num_vertices(), 0);
  for (const auto& el : mesh.elements)
    for (VertexId v : el.v) used[v] = 1;
  for (const auto& be : mesh.boundary_edges) on_boundary[be[0]] = on_boundary[be[1]] = 1;
  for (std::size_t v = 0; v < mesh.num_vertices(); ++v)
    if (used[v] && !on_boundary[v]) sys.dof_of_vertex[v] = static_cast<std::int64_t>(sys.size++);
  sys.rhs.assign(sys.size, 0.0);
  sys.triplets.reserve(9 * mesh.num_elements());
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto& el = mesh.elements[e];
    const P1Local l = p1_local(mesh.corners(static_cast<ElementId>(e)));
    if (!(l.area > 0) || !std::isfinite(l.area))
      throw ValidationError("assemble_poisson: degenerate element " + std::to_string(e));
    for (int i = 0; i < 3; ++i) {
      const auto di = sys.dof_of_vertex[el.v[i]];
      if (di < 0) continue;
      sys.rhs[di] += source[e] * l.area / 3.0;
      for (int j = 0; j < 3; ++j) {
        const auto dj = sys.dof_of_vertex[el.v[j]];
        if (dj < 0) continue;
        const double k = l.area * (l.grad[i][0] * l.grad[j][0] + l.grad[i][1] * l.grad[j][1]);
        sys.triplets.push_back({static_cast<std::size_t>(di), static_cast<std::size_t>(dj), k});
      }
    }
  }
  return sys;
}

CgResult solve_cg(const LinearSystem& system, const CgOptions& options) {
  const Csr a = to_csr(system);
  const std::size_t n = a.n;
  CgResult res;
  res.x.assign(n, 0.0);
  if (n == 0) return res;
  std::vector<double> inv_diag(n, 1.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k)
      if (a.col[k] == r && a.val[k] != 0) inv_diag[r] = 1.0 / a.val[k];

  std::vector<double> r = system.rhs, z(n), p(n), ap(n);
  const double bnorm = std::sqrt(dot(r, r));
  if (bnorm == 0) return res;
  for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
  p = z;
  double rz = dot(r, z);
  double rel = 1.0;
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    spmv(a, p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0) || !std::isfinite(pap)) throw NumericalError("solve_cg: breakdown (p^T A p <= 0)", rel);
    const double alpha = rz / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    rel = std::sqrt(dot(r, r)) / bnorm;
    res.iterations = it + 1;
    if (!std::isfinite(rel)) throw NumericalError("solve_cg: non-finite residual", rel);
    if (rel <= options.rel_tol) {
      res.relative_residual = rel;
      return res;
    }
    for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
    const double rz_new = dot(r, z);
    const double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  throw NumericalError("solve_cg: iteration cap reached", rel);
}

FemSolution solve_poisson(const Mesh& mesh, std::span<const double> source, const CgOptions& options) {
  const LinearSystem sys = assemble_poisson(mesh, source);
  const CgResult cg = solve_cg(sys, options);
  FemSolution sol;
  sol.nodal.assign(mesh.num_vertices(), 0.0);
  for (std::size_t v = 0; v < mesh.num_vertices(); ++v)
    if (sys.dof_of_vertex[v] >= 0) sol.nodal[v] = cg.x[sys.dof_of_vertex[v]];
  sol.cg_iterations = cg.iterations;
  sol.relative_residual = cg.relative_residual;
  return sol;
}

std::array<double, 2> element_gradient(const Mesh& mesh, ElementId e, std::span<const double> nodal) {
  const P1Local l = p1_local(mesh.corners(e));
  const auto& v = mesh.elements[e].v;
  std::array<double, 2> g{0, 0};
  for (int i = 0; i < 3; ++i) {
    g[0] += nodal[v[i]] * l.grad[i][0];
    g[1] += nodal[v[i]] * l.grad[i][1];
  }
  return g;
}

double energy_norm_sq(const Mesh& mesh, std::span<const double> nodal) {
  if (nodal.size() != mesh.num_vertices()) throw ValidationError("energy_norm_sq: nodal size mismatch");
  double s = 0;
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto g = element_gradient(mesh, static_cast<ElementId>(e), nodal);
    s += (g[0] * g[0] + g[1] * g[1]) * element_geometry(mesh, static_cast<ElementId>(e)).area;
  }
  return s;
}

std::vector<double> residual_estimator(const Mesh& mesh, std::span<const double> nodal, std::span<const double> source,
                                       EstimatorForm form) {
  if (nodal.size() != mesh.num_vertices()) throw ValidationError("residual_estimator: nodal size mismatch");
  if (source.size() != mesh.num_elements()) throw ValidationError("residual_estimator: source size mismatch");
  const std::size_t ne = mesh.num_elements();
  std::vector<std::array<double, 2>> grad(ne);
  for (std::size_t e = 0; e < ne; ++e) grad[e] = element_gradient(mesh, static_cast<ElementId>(e), nodal);
  const auto nb = edge_neighbors(mesh);

  std::vector<double> rho(ne, 0.0);
  for (std::size_t e = 0; e < ne; ++e) {
    const auto c = mesh.corners(static_cast<ElementId>(e));
    const ElementGeometry g = element_geometry(c);
    double jump = 0;  // sum over interior edges of |[grad U]|^2 |e|
    for (int j = 0; j < 3; ++j) {
      const std::int64_t o = nb[e][j];
      if (o == kNoNeighbor) continue;
      const Point& a = c[(j + 1) % 3];
      const Point& b = c[(j + 2) % 3];
      const double len = std::hypot(a.x - b.x, a.y - b.y);
      const double dx = grad[e][0] - grad[o][0];
      const double dy = grad[e][1] - grad[o][1];
      jump += (dx * dx + dy * dy) * len;
    }
    const double f2 = source[e] * source[e];
    if (form == EstimatorForm::classical) {
      rho[e] = g.diam * g.diam * f2 * g.area + g.diam * jump;
    } else {
      const double h2 = g.diam_inf * g.diam_inf;
      rho[e] = h2 * h2 * f2 + h2 * jump / g.perimeter;
    }
  }
  return rho;
}

}  // namespace rnnafem
