#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

#include "rnnafem/errors.hpp"
#include "rnnafem/mesh.hpp"

using namespace rnnafem;

namespace {

bool same_mesh(const Mesh& a, const Mesh& b) {
  if (a.vertices != b.vertices || a.elements.size() != b.elements.size()) return false;
  for (std::size_t e = 0; e < a.elements.size(); ++e)
    if (a.elements[e].v != b.elements[e].v || !(a.elements[e].key == b.elements[e].key)) return false;
  return true;
}

bool has_vertex(const Mesh& m, ElementId e, Point p) {
  for (const Point& c : m.corners(e))
    if (c == p) return true;
  return false;
}

double min_angle(const Mesh& m) {
  double best = std::numbers::pi;
  for (ElementId e = 0; e < m.num_elements(); ++e) {
    const auto c = m.corners(e);
    for (int i = 0; i < 3; ++i) {
      const Point& p = c[i];
      const Point& a = c[(i + 1) % 3];
      const Point& b = c[(i + 2) % 3];
      const double ux = a.x - p.x, uy = a.y - p.y, vx = b.x - p.x, vy = b.y - p.y;
      const double cosv = (ux * vx + uy * vy) / (std::hypot(ux, uy) * std::hypot(vx, vy));
      best = std::min(best, std::acos(std::clamp(cosv, -1.0, 1.0)));
    }
  }
  return best;
}

std::vector<ElementId> random_marks(const Mesh& m, std::mt19937_64& gen, double fraction) {
  std::bernoulli_distribution pick(fraction);
  std::vector<ElementId> out;
  for (ElementId e = 0; e < m.num_elements(); ++e)
    if (pick(gen)) out.push_back(e);
  return out;
}

}  // namespace

TEST_CASE("initial meshes") {
  const Mesh sq = unit_square();
  CHECK(sq.num_elements() == 2);
  CHECK(sq.num_vertices() == 4);
  for (ElementId e = 0; e < 2; ++e) {
    CHECK(has_vertex(sq, e, {0, 0}));
    CHECK(has_vertex(sq, e, {1, 1}));
  }

  const Mesh l = l_shape();
  CHECK(l.num_elements() == 6);
  CHECK(is_conforming(l));
  CHECK(total_area(l) == doctest::Approx(3.0).epsilon(1e-14));

  const Mesh z = z_shape();
  CHECK(z.num_elements() >= 8);
  CHECK(is_conforming(z));
  CHECK(total_area(z) == doctest::Approx(3.9).epsilon(1e-14));

  CHECK(make_initial_mesh(DomainName::l_shape).num_elements() == 6);
}

TEST_CASE("element orientation is counter-clockwise") {
  for (const Mesh& m : {unit_square(), l_shape(), z_shape(), uniform_refine(z_shape())})
    for (ElementId e = 0; e < m.num_elements(); ++e) {
      const auto c = m.corners(e);
      const double det = (c[1].x - c[0].x) * (c[2].y - c[0].y) - (c[2].x - c[0].x) * (c[1].y - c[0].y);
      CHECK(det > 0);
    }
}

TEST_CASE("refine_nvb with no marks is a bit-exact no-op") {
  const Mesh l = uniform_refine(l_shape());
  const Mesh r = refine_nvb(l, {});
  CHECK(same_mesh(l, r));
}

TEST_CASE("marking one square half forces closure of the other") {
  const Mesh sq = unit_square();
  // both halves have the diagonal as refinement edge
  for (ElementId e = 0; e < 2; ++e) {
    const auto& el = sq.elements[e];
    const Point a = sq.vertices[el.v[1]], b = sq.vertices[el.v[2]];
    CHECK(std::fabs(a.x - b.x) == 1.0);
    CHECK(std::fabs(a.y - b.y) == 1.0);
  }
  const ElementId marked[] = {0};
  const Mesh r = refine_nvb(sq, marked);
  CHECK(r.num_elements() == 4);
  CHECK(is_conforming(r));
}

TEST_CASE("marking every element bisects every element") {
  const Mesh l = l_shape();
  std::vector<ElementId> all(l.num_elements());
  for (ElementId e = 0; e < all.size(); ++e) all[e] = e;
  const Mesh r = refine_nvb(l, all);
  CHECK(r.num_elements() >= 2 * l.num_elements());
  for (const auto& el : r.elements) CHECK(el.level() >= 1);
  CHECK(is_conforming(r));
}

TEST_CASE("refine_nvb rejects unknown element ids") {
  const ElementId bad[] = {6};
  CHECK_THROWS_AS(refine_nvb(l_shape(), bad), ValidationError);
}

TEST_CASE("uniform refinement multiplies the element count by four") {
  CHECK(uniform_refine(unit_square()).num_elements() == 8);
  Mesh m = l_shape();
  for (int i = 0; i < 3; ++i) {
    const Mesh next = uniform_refine(m);
    CHECK(next.num_elements() == 4 * m.num_elements());
    CHECK(is_conforming(next));
    CHECK(total_area(next) == doctest::Approx(total_area(m)).epsilon(1e-13));
    m = next;
  }
}

TEST_CASE("random adaptive refinement keeps conformity, levels and vertex prefix") {
  std::mt19937_64 gen(11);
  Mesh m = z_shape();
  const double angle0 = std::min({min_angle(m), min_angle(uniform_refine(m)), min_angle(uniform_refine(uniform_refine(m)))});
  for (int step = 0; step < 12; ++step) {
    const Mesh next = refine_nvb(m, random_marks(m, gen, 0.2));
    REQUIRE(is_conforming(next));
    REQUIRE(next.num_vertices() >= m.num_vertices());
    CHECK(std::equal(m.vertices.begin(), m.vertices.end(), next.vertices.begin()));
    CHECK(min_angle(next) >= angle0 - 1e-12);
    // every new leaf descends from an old leaf
    for (const auto& el : next.elements) {
      const bool nested = std::any_of(m.elements.begin(), m.elements.end(),
                                      [&](const Element& old) { return el.key.descends_from(old.key); });
      CHECK(nested);
    }
    m = next;
  }
}

TEST_CASE("children sit one level below their parent") {
  const Mesh sq = unit_square();
  const ElementId marked[] = {0};
  const Mesh r = refine_nvb(sq, marked);
  for (const auto& el : r.elements) {
    CHECK(el.level() == 1);
    CHECK(el.key.parent().level == 0);
  }
}

TEST_CASE("element patches") {
  const Mesh sq = unit_square();
  CHECK(element_patch(sq, 0).size() == 2);

  const Mesh fine = uniform_refine(uniform_refine(sq));
  bool found_interior = false;
  for (ElementId e = 0; e < fine.num_elements(); ++e) {
    const auto patch = element_patch(fine, e);
    CHECK(patch.front() == e);
    CHECK(patch.size() <= 4);
    found_interior = found_interior || patch.size() == 4;
    for (ElementId other : patch) {
      const auto back = element_patch(fine, other);
      CHECK(std::find(back.begin(), back.end(), e) != back.end());
    }
  }
  CHECK(found_interior);
  CHECK_THROWS_AS(element_patch(sq, 2), ValidationError);
}

TEST_CASE("element geometry") {
  const ElementGeometry ref = element_geometry({Point{0, 0}, Point{1, 0}, Point{0, 1}});
  CHECK(ref.area == 0.5);
  CHECK(ref.diam_inf == 1.0);
  CHECK(ref.perimeter == doctest::Approx(2.0 + std::sqrt(2.0)).epsilon(1e-15));
  CHECK(element_geometry({Point{0, 0}, Point{2, 0}, Point{0, 1}}).diam_inf == 2.0);
  CHECK(element_geometry({Point{0, 0}, Point{1, 1}, Point{-1, 1}}).diam_inf == 2.0);
}

TEST_CASE("mesh text format round-trips bit for bit") {
  std::mt19937_64 gen(3);
  Mesh m = l_shape();
  for (int i = 0; i < 4; ++i) m = refine_nvb(m, random_marks(m, gen, 0.3));
  std::stringstream io;
  write_mesh(io, m);
  const Mesh back = read_mesh(io);
  CHECK(back.vertices == m.vertices);
  REQUIRE(back.num_elements() == m.num_elements());
  for (ElementId e = 0; e < m.num_elements(); ++e) {
    CHECK(back.elements[e].v == m.elements[e].v);
    CHECK(back.elements[e].level() == m.elements[e].level());
  }

  std::istringstream bad("vertices 1 elements 1\n0 0\n0 0 3 0\n");
  CHECK_THROWS_AS(read_mesh(bad), ValidationError);
}
