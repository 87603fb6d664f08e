#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "rnnafem/errors.hpp"
#include "rnnafem/mesh.hpp"
#include "rnnafem/network.hpp"
#include "rnnafem/stochastic.hpp"

using namespace rnnafem;

namespace {

Mesh reference_triangle() {
  Mesh m;
  m.vertices = {{0, 0}, {1, 0}, {0, 1}};
  m.elements.push_back({{0, 1, 2}, {}});
  rebuild_boundary(m);
  return m;
}

GradientSurrogate surrogate(std::function<Vec2(double, double)> f) {
  GradientSurrogate v;
  v.evaluator = std::move(f);
  return v;
}

bool inside(const std::array<Point, 3>& c, Point p) {
  auto cross = [](Point a, Point b, Point q) { return (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x); };
  const double tol = -1e-14;
  return cross(c[0], c[1], p) >= tol && cross(c[1], c[2], p) >= tol && cross(c[2], c[0], p) >= tol;
}

double max_eta(const Mesh& m, const GradientSurrogate& v) {
  double worst = 0;
  for (ElementId e = 0; e < m.num_elements(); ++e) worst = std::max(worst, eta(m, e, v));
  return worst;
}

}  // namespace

TEST_CASE("counter generator is a pure function of its key") {
  CounterRng a(123), b(123), c(124);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a(), y = b(), z = c();
    CHECK(x == y);
    differs = differs || x != z;
  }
  CHECK(differs);

  const ForestKey key{2, 3, 5};
  CounterRng k1(7, 1, key, 0), k2(7, 1, key, 0), k3(7, 1, key, 1), k4(7, 2, key, 0);
  const double u1 = k1.uniform();
  CHECK(u1 == k2.uniform());
  CHECK(u1 != k3.uniform());
  CHECK(u1 != k4.uniform());
  CounterRng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("uniform samples stay in the triangle") {
  const std::array<Point, 3> tri = {Point{0, 0}, Point{2, 0.5}, Point{-1, 1}};
  CounterRng r(5);
  double mx = 0, my = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const Point p = sample_in_triangle(tri, r);
    CHECK(inside(tri, p));
    mx += p.x / n;
    my += p.y / n;
  }
  // centroid (1/3, 1/2)
  CHECK(std::fabs(mx - 1.0 / 3.0) < 0.02);
  CHECK(std::fabs(my - 0.5) < 0.02);
}

TEST_CASE("collapsed Gauss rule") {
  const std::array<Point, 3> ref = {Point{0, 0}, Point{1, 0}, Point{0, 1}};
  const TriangleRule rule = triangle_rule(ref, 6);
  CHECK(std::accumulate(rule.weights.begin(), rule.weights.end(), 0.0) == doctest::Approx(0.5).epsilon(1e-14));
  double x2 = 0, xy = 0, x3y2 = 0;
  for (std::size_t q = 0; q < rule.points.size(); ++q) {
    const Point p = rule.points[q];
    x2 += rule.weights[q] * p.x * p.x;
    xy += rule.weights[q] * p.x * p.y;
    x3y2 += rule.weights[q] * p.x * p.x * p.x * p.y * p.y;
  }
  CHECK(x2 == doctest::Approx(1.0 / 12.0).epsilon(1e-14));
  CHECK(xy == doctest::Approx(1.0 / 24.0).epsilon(1e-14));
  // 3! 2! / 7!
  CHECK(x3y2 == doctest::Approx(12.0 / 5040.0).epsilon(1e-13));
}

TEST_CASE("eta") {
  const Mesh ref = reference_triangle();
  CHECK(eta(ref, 0, constant_gradient({2.0, -1.0})) == doctest::Approx(0.0));
  // int_T (x - 1/3)^2 = 1/12 - 1/9 + 1/18
  const double expected = std::sqrt(1.0 / 12.0 - 1.0 / 9.0 + 1.0 / 18.0);
  CHECK(eta(ref, 0, surrogate([](double x, double) { return Vec2{x, 0.0}; })) ==
        doctest::Approx(expected).epsilon(1e-13));

  // children never carry more than their parent (exact quadrature here)
  const GradientSurrogate v = polynomial_gradient();
  const Mesh l = l_shape();
  for (ElementId e = 0; e < l.num_elements(); ++e) {
    Mesh m = l;
    std::vector<ElementId> created;
    bisect_in_place(m, e, &created);
    double children = 0;
    for (ElementId c : created) children += eta(m, c, v) * eta(m, c, v);
    CHECK(children <= eta(l, e, v) * eta(l, e, v) * (1 + 1e-9));
  }
}

TEST_CASE("Monte Carlo indicator") {
  const Mesh l = l_shape();
  CounterRng r(1);
  for (int i = 0; i < 10; ++i) CHECK(mc_indicator(l, 2, constant_gradient({1, 1}), 4, r) == 0.0);

  // N = 1 is the single pair form |T| |V(x) - V(y)|^2
  const GradientSurrogate v = polynomial_gradient();
  const double area = element_geometry(l, 3).area;
  for (std::uint64_t key = 0; key < 20; ++key) {
    CounterRng draw(key), replay(key);
    const double rho = mc_indicator(l, 3, v, 1, draw);
    const Point x = sample_in_triangle(l.corners(3), replay);
    const Point y = sample_in_triangle(l.corners(3), replay);
    const Vec2 vx = v(x), vy = v(y);
    const double pair = area * ((vx[0] - vy[0]) * (vx[0] - vy[0]) + (vx[1] - vy[1]) * (vx[1] - vy[1]));
    CHECK(rho * rho == doctest::Approx(pair).epsilon(1e-12));
  }

  // mean of rho^2 is (1 + 1/N) eta^2
  const int n_points = 4, draws = 20000;
  const double eta2 = std::pow(eta(l, 3, v, 16), 2);
  double mean = 0, sq = 0;
  CounterRng g(77);
  for (int i = 0; i < draws; ++i) {
    const double r2 = std::pow(mc_indicator(l, 3, v, n_points, g), 2) / ((1.0 + 1.0 / n_points) * eta2);
    mean += r2 / draws;
    sq += r2 * r2 / draws;
  }
  const double se = std::sqrt((sq - mean * mean) / draws);
  CHECK(std::fabs(mean - 1.0) <= 4 * se);
}

TEST_CASE("greedy refinement") {
  const Mesh l = l_shape();
  const Mesh same = greedy_refine(l, constant_gradient({1, 0}), 1e-3);
  CHECK(same.num_elements() == l.num_elements());

  const GradientSurrogate v = corner_singularity_gradient();
  const Mesh g = greedy_refine(l, v, 0.05);
  CHECK(g.num_elements() > l.num_elements());
  CHECK(max_eta(g, v) <= 0.05);

  // scaling V and eps together leaves the refinement unchanged
  const GradientSurrogate v2 = surrogate([v](double x, double y) {
    const Vec2 w = v.evaluator(x, y);
    return Vec2{2 * w[0], 2 * w[1]};
  });
  const Mesh g2 = greedy_refine(l, v2, 0.1);
  REQUIRE(g2.num_elements() == g.num_elements());
  for (ElementId e = 0; e < g.num_elements(); ++e) CHECK(g2.elements[e].key == g.elements[e].key);

  CHECK_THROWS_AS(greedy_refine(l, v, 0.0), ValidationError);
}

TEST_CASE("stochastic greedy refinement") {
  const Mesh l = l_shape();
  GreedyConfig cfg;
  cfg.eps = 0.02;
  cfg.seed = 3;

  const GreedyResult idle = stochastic_greedy_refine(l, constant_gradient({0.5, 0.5}), cfg);
  CHECK(idle.mesh.num_elements() == l.num_elements());
  CHECK(idle.trace.size() == 1);

  // with the exact indicator every leaf ends below the tolerance
  const GradientSurrogate v = corner_singularity_gradient();
  const IndicatorDraw exact = [&](const Mesh& m, ElementId e, CounterRng&) { return eta(m, e, v); };
  const GreedyResult det = stochastic_greedy_refine(l, exact, cfg);
  CHECK(max_eta(det.mesh, v) <= cfg.eps);
  CHECK(is_conforming(det.mesh));

  const GreedyResult a = stochastic_greedy_refine(l, v, cfg);
  const GreedyResult b = stochastic_greedy_refine(l, v, cfg);
  REQUIRE(a.mesh.num_elements() == b.mesh.num_elements());
  for (ElementId e = 0; e < a.mesh.num_elements(); ++e) CHECK(a.mesh.elements[e].key == b.mesh.elements[e].key);
  CHECK(is_conforming(a.mesh));
  for (std::size_t i = 1; i < a.trace.size(); ++i) CHECK(a.trace[i].elements >= a.trace[i - 1].elements);
  CHECK(a.trace.back().marked == 0);
}

TEST_CASE("rho network and its ADAPTIVE") {
  const int n = 12;
  const Dnn flat = Dnn::from_dense({Matrix(2, 3, {0, 0, 0.7, 0, 0, -0.2})}, true);
  const Dnn rho_flat = build_rho_net(flat, n);
  const std::vector<double> in = {0.1, 0.2, 0.9, -0.4, 0.5};
  CHECK(std::fabs(rho_flat(in)[0]) <= 2 * std::pow(4.0, -n));

  const Dnn linear = linear_dnn(Matrix(2, 2, {1.0, 0.5, -0.25, 2.0}));
  const Dnn rho = build_rho_net(linear, n);
  for (const auto& s : std::vector<std::array<double, 5>>{{0.1, 0.2, 0.9, -0.4, 0.5}, {-0.3, 0.3, 0.2, 0.25, 0.125}}) {
    const auto vx = linear(std::vector<double>{s[0], s[1]});
    const auto vy = linear(std::vector<double>{s[2], s[3]});
    const double expect = s[4] * (std::fabs(vx[0] - vy[0]) + std::fabs(vx[1] - vy[1]));
    CHECK(std::fabs(rho(s)[0] - expect) <= 2 * std::pow(4.0, -n));
  }

  const int samples = 3;
  const double eps = 0.05;
  const BasicRnn ada = adaptive_from_rho(rho, samples, eps);
  CHECK(ada.input_size == 5 * samples);
  Sequence x(2, ada.input_size);
  // element 0: all draws tiny; element 1: one large draw
  for (int k = 0; k < samples; ++k) {
    const double small[5] = {0.1, 0.1, 0.1001, 0.1, 0.01};
    const double large[5] = {0.0, 0.0, 1.0, 1.0, 0.5};
    std::copy(small, small + 5, x[0].begin() + 5 * k);
    std::copy(k == 1 ? large : small, (k == 1 ? large : small) + 5, x[1].begin() + 5 * k);
  }
  const Sequence y = eval_basic_rnn(ada, x);
  CHECK(y[0][0] == 0.0);
  CHECK(y[1][0] > 0.0);
  CHECK(adaptive_from_rho(rho_flat, 2, eps).is_elementwise());
}

TEST_CASE("network-driven stochastic greedy stops on zero outputs") {
  const Mesh l = l_shape();
  const Dnn linear = linear_dnn(Matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  GreedyConfig cfg;
  cfg.eps = 0.05;
  cfg.samples = 2;
  const GreedyResult r = stochastic_greedy_refine(l, adaptive_from_rho(build_rho_net(linear, 16), 2, cfg.eps), cfg);
  CHECK(is_conforming(r.mesh));
  CHECK(r.trace.back().marked == 0);
  CHECK(r.mesh.num_elements() > l.num_elements());
}
