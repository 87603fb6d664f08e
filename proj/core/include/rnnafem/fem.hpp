#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "rnnafem/mesh.hpp"

namespace rnnafem {

struct Triplet {
  std::size_t row;
  std::size_t col;
  double value;
};

/// Stiffness system on the free (interior) vertices.
struct LinearSystem {
  std::size_t size = 0;
  std::vector<Triplet> triplets;
  std::vector<double> rhs;
  std::vector<std::int64_t> dof_of_vertex;  // -1 on Dirichlet vertices
};

struct CgOptions {
  double rel_tol = 1e-10;
  std::size_t max_iterations = 20000;
};

struct CgResult {
  std::vector<double> x;
  std::size_t iterations = 0;
  double relative_residual = 0;
};

struct FemSolution {
  std::vector<double> nodal;  // one value per mesh vertex, zero on the boundary
  std::size_t cg_iterations = 0;
  double relative_residual = 0;
};

/// Source term constant on each element of the current mesh.
using ElementField = std::vector<double>;

ElementField constant_source(const Mesh& mesh, double value);
/// Values given per initial element, inherited by every descendant.
ElementField source_from_roots(const Mesh& mesh, std::span<const double> per_root);

LinearSystem assemble_poisson(const Mesh& mesh, std::span<const double> source);

/// Jacobi-preconditioned CG; throws NumericalError carrying the final
/// relative residual if the tolerance is not reached.
CgResult solve_cg(const LinearSystem& system, const CgOptions& options = {});

FemSolution solve_poisson(const Mesh& mesh, std::span<const double> source, const CgOptions& options = {});

/// Constant gradient of the P1 function on element e.
std::array<double, 2> element_gradient(const Mesh& mesh, ElementId e, std::span<const double> nodal);

/// |U|_{H^1}^2 = U^T K U, evaluated elementwise.
double energy_norm_sq(const Mesh& mesh, std::span<const double> nodal);

enum class EstimatorForm {
  classical,  // diam^2 |f|^2_T + diam * sum_e |[d_n U]|^2 |e|
  diam_inf,   // diam_inf^4 |T|^-1 |f|^2_T + diam_inf^2 |dT|^-1 sum_e |[grad U]|^2 |e|
};

/// Squared indicators rho_T^2, one per element.
std::vector<double> residual_estimator(const Mesh& mesh, std::span<const double> nodal,
                                       std::span<const double> source,
                                       EstimatorForm form = EstimatorForm::classical);

}  // namespace rnnafem
