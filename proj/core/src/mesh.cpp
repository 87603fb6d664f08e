#include "rnnafem/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

using EdgeKey = std::uint64_t;

EdgeKey edge_key(VertexId a, VertexId b) {
  if (a > b) std::swap(a, b);
  return (static_cast<EdgeKey>(a) << 32) | b;
}

double orient(const Point& a, const Point& b, const Point& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

double dist(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Element with newest vertex `top` and refinement edge {a, b}, oriented CCW.
Element make_element(const std::vector<Point>& pts, VertexId top, VertexId a, VertexId b,
                     std::uint32_t root) {
  if (orient(pts[top], pts[a], pts[b]) < 0) std::swap(a, b);
  Element el;
  el.v = {top, a, b};
  el.key = {root, 0, 0};
  return el;
}

Mesh assemble(std::vector<Point> pts, const std::vector<std::array<VertexId, 3>>& tris) {
  Mesh m;
  m.vertices = std::move(pts);
  for (std::size_t i = 0; i < tris.size(); ++i) {
    const auto& t = tris[i];
    m.elements.push_back(make_element(m.vertices, t[0], t[1], t[2], static_cast<std::uint32_t>(i)));
  }
  rebuild_boundary(m);
  return m;
}

struct EdgeMidpoints {
  std::unordered_map<EdgeKey, VertexId> ids;

  VertexId get(Mesh& mesh, VertexId a, VertexId b) {
    auto [it, inserted] = ids.try_emplace(edge_key(a, b), 0);
    if (inserted) {
      const Point& p = mesh.vertices[a];
      const Point& q = mesh.vertices[b];
      mesh.vertices.push_back({0.5 * (p.x + q.x), 0.5 * (p.y + q.y)});
      it->second = static_cast<VertexId>(mesh.vertices.size() - 1);
    }
    return it->second;
  }
};

void bisect(Mesh& mesh, ElementId e, EdgeMidpoints& mids, std::vector<ElementId>* created) {
  const Element parent = mesh.elements[e];
  const auto [v0, v1, v2] = parent.v;
  const VertexId m = mids.get(mesh, v1, v2);
  Element first;
  first.v = {m, v0, v1};
  first.key = parent.key.child(0);
  Element second;
  second.v = {m, v2, v0};
  second.key = parent.key.child(1);
  mesh.elements[e] = first;
  mesh.elements.push_back(second);
  if (created) {
    created->push_back(e);
    created->push_back(static_cast<ElementId>(mesh.elements.size() - 1));
  }
}

}  // namespace

ElementGeometry element_geometry(const std::array<Point, 3>& c) {
  ElementGeometry g;
  g.area = 0.5 * std::abs(orient(c[0], c[1], c[2]));
  for (int i = 0; i < 3; ++i) {
    const Point& p = c[i];
    const Point& q = c[(i + 1) % 3];
    const double len = dist(p, q);
    g.perimeter += len;
    g.diam = std::max(g.diam, len);
    g.diam_inf = std::max({g.diam_inf, std::abs(p.x - q.x), std::abs(p.y - q.y)});
  }
  return g;
}

ElementGeometry element_geometry(const Mesh& mesh, ElementId e) {
  return element_geometry(mesh.corners(e));
}

Mesh unit_square() {
  std::vector<Point> pts{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  return assemble(std::move(pts), {{1, 2, 0}, {3, 0, 2}});
}

Mesh l_shape() {
  //  6---7
  //  |  /|
  //  | / |
  //  2---3---4
  //  |  /|   (re-entrant corner at vertex 3)
  //  | / |
  //  0---1
  // Every diagonal passes through the origin.
  std::vector<Point> pts{{-1, -1}, {0, -1}, {-1, 0}, {0, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}};
  return assemble(std::move(pts), {
                                      {1, 0, 3},
                                      {2, 0, 3},
                                      {2, 5, 3},
                                      {6, 5, 3},
                                      {4, 3, 7},
                                      {6, 3, 7},
                                  });
}

Mesh z_shape() {
  std::vector<Point> pts{
      {-1, -1},  // 0 A
      {0, -1},   // 1 B
      {1, -1},   // 2 C
      {1, 0},    // 3 D
      {1, 1},    // 4 E
      {0, 1},    // 5 F
      {-1, 1},   // 6 G
      {-1, 0},   // 7 H
      {0, 0},    // 8 O
      {-1, -0.2},  // 9 K
  };
  return assemble(std::move(pts), {
                                      {1, 0, 8},  // A B O
                                      {9, 0, 8},  // A O K
                                      {1, 8, 2},  // O B C
                                      {3, 8, 2},  // O C D
                                      {7, 6, 8},  // G H O
                                      {5, 6, 8},  // G O F
                                      {3, 8, 4},  // O D E
                                      {5, 8, 4},  // O E F
                                  });
}

Mesh make_initial_mesh(DomainName name) {
  switch (name) {
    case DomainName::unit_square: return unit_square();
    case DomainName::l_shape: return l_shape();
    case DomainName::z_shape: return z_shape();
  }
  throw ValidationError("unknown domain");
}

void rebuild_boundary(Mesh& mesh) {
  std::map<EdgeKey, int> count;
  for (const auto& el : mesh.elements)
    for (int j = 0; j < 3; ++j) ++count[edge_key(el.v[(j + 1) % 3], el.v[(j + 2) % 3])];
  mesh.boundary_edges.clear();
  for (const auto& [key, c] : count)
    if (c == 1) mesh.boundary_edges.push_back({static_cast<VertexId>(key >> 32), static_cast<VertexId>(key & 0xffffffffu)});
}

void label_longest_edges(Mesh& mesh) {
  auto relabel = [&](Element& el, int top) {
    const std::array<VertexId, 3> old = el.v;
    el.v = {old[top], old[(top + 1) % 3], old[(top + 2) % 3]};
  };
  for (auto& el : mesh.elements) {
    int best = 0;
    double best_len = -1;
    for (int j = 0; j < 3; ++j) {
      const double len = dist(mesh.vertices[el.v[(j + 1) % 3]], mesh.vertices[el.v[(j + 2) % 3]]);
      if (len > best_len * (1 + 1e-12)) {
        best_len = len;
        best = j;
      }
    }
    relabel(el, best);
  }
  // Compatibility: a refinement edge shared with a neighbour whose own
  // refinement edge differs is resolved by re-labelling the neighbour onto
  // the shared edge when that edge is also among its longest.
  const auto nb = edge_neighbors(mesh);
  for (std::size_t e = 0; e < mesh.elements.size(); ++e) {
    const std::int64_t other = nb[e][0];
    if (other < 0) continue;
    auto& o = mesh.elements[other];
    const EdgeKey shared = edge_key(mesh.elements[e].v[1], mesh.elements[e].v[2]);
    if (edge_key(o.v[1], o.v[2]) == shared) continue;
    for (int j = 0; j < 3; ++j) {
      if (edge_key(o.v[(j + 1) % 3], o.v[(j + 2) % 3]) != shared) continue;
      const double shared_len = dist(mesh.vertices[o.v[(j + 1) % 3]], mesh.vertices[o.v[(j + 2) % 3]]);
      const double cur_len = dist(mesh.vertices[o.v[1]], mesh.vertices[o.v[2]]);
      if (shared_len >= cur_len * (1 - 1e-12)) relabel(o, j);
    }
  }
}

std::vector<std::array<std::int64_t, 3>> edge_neighbors(const Mesh& mesh) {
  std::unordered_map<EdgeKey, std::pair<std::int64_t, int>> first;
  first.reserve(mesh.elements.size() * 2);
  std::vector<std::array<std::int64_t, 3>> nb(mesh.elements.size(), {kNoNeighbor, kNoNeighbor, kNoNeighbor});
  for (std::size_t e = 0; e < mesh.elements.size(); ++e) {
    const auto& v = mesh.elements[e].v;
    for (int j = 0; j < 3; ++j) {
      const EdgeKey k = edge_key(v[(j + 1) % 3], v[(j + 2) % 3]);
      auto [it, inserted] = first.try_emplace(k, static_cast<std::int64_t>(e), j);
      if (!inserted) {
        nb[e][j] = it->second.first;
        nb[it->second.first][it->second.second] = static_cast<std::int64_t>(e);
      }
    }
  }
  return nb;
}

std::vector<ElementId> element_patch(const Mesh& mesh, ElementId e) {
  if (e >= mesh.elements.size()) throw ValidationError("element_patch: element id out of range");
  const auto nb = edge_neighbors(mesh);
  std::vector<ElementId> patch{e};
  for (std::int64_t o : nb[e])
    if (o != kNoNeighbor) patch.push_back(static_cast<ElementId>(o));
  return patch;
}

Mesh refine_nvb(const Mesh& mesh, std::span<const ElementId> marked) {
  for (ElementId e : marked)
    if (e >= mesh.elements.size()) throw ValidationError("refine_nvb: marked element id out of range");

  // Marked-edge closure: an element carrying any marked edge must have its
  // refinement edge marked as well.
  std::unordered_set<EdgeKey> marked_edges;
  std::unordered_map<EdgeKey, std::vector<ElementId>> edge_elems;
  edge_elems.reserve(mesh.elements.size() * 2);
  for (std::size_t e = 0; e < mesh.elements.size(); ++e) {
    const auto& v = mesh.elements[e].v;
    for (int j = 0; j < 3; ++j) edge_elems[edge_key(v[(j + 1) % 3], v[(j + 2) % 3])].push_back(static_cast<ElementId>(e));
  }
  std::vector<ElementId> work;
  auto mark_edge = [&](EdgeKey k) {
    if (marked_edges.insert(k).second)
      for (ElementId o : edge_elems[k]) work.push_back(o);
  };
  for (ElementId e : marked) {
    const auto& v = mesh.elements[e].v;
    mark_edge(edge_key(v[1], v[2]));
  }
  while (!work.empty()) {
    const ElementId e = work.back();
    work.pop_back();
    const auto& v = mesh.elements[e].v;
    mark_edge(edge_key(v[1], v[2]));
  }

  Mesh out = mesh;
  out.generation = mesh.generation + 1;
  EdgeMidpoints mids;
  // Depth-first bisection keeps child numbering deterministic.
  std::vector<ElementId> stack;
  const std::size_t n0 = mesh.elements.size();
  for (std::size_t e0 = 0; e0 < n0; ++e0) {
    stack.push_back(static_cast<ElementId>(e0));
    while (!stack.empty()) {
      const ElementId e = stack.back();
      stack.pop_back();
      const auto& v = out.elements[e].v;
      if (!marked_edges.count(edge_key(v[1], v[2]))) continue;
      bisect(out, e, mids, nullptr);
      stack.push_back(static_cast<ElementId>(out.elements.size() - 1));
      stack.push_back(e);
    }
  }
  rebuild_boundary(out);
  return out;
}

Mesh uniform_refine(const Mesh& mesh) {
  // Marking every edge bisects each triangle exactly three times.
  std::vector<ElementId> all(mesh.elements.size());
  for (std::size_t e = 0; e < all.size(); ++e) all[e] = static_cast<ElementId>(e);
  Mesh out = mesh;
  out.generation = mesh.generation + 1;
  std::unordered_set<EdgeKey> edges;
  for (const auto& el : mesh.elements)
    for (int j = 0; j < 3; ++j) edges.insert(edge_key(el.v[(j + 1) % 3], el.v[(j + 2) % 3]));
  EdgeMidpoints mids;
  std::vector<ElementId> stack;
  for (ElementId e0 : all) {
    stack.push_back(e0);
    while (!stack.empty()) {
      const ElementId e = stack.back();
      stack.pop_back();
      const auto& v = out.elements[e].v;
      if (!edges.count(edge_key(v[1], v[2]))) continue;
      bisect(out, e, mids, nullptr);
      stack.push_back(static_cast<ElementId>(out.elements.size() - 1));
      stack.push_back(e);
    }
  }
  rebuild_boundary(out);
  return out;
}

void bisect_in_place(Mesh& mesh, ElementId e, std::vector<ElementId>* created) {
  if (e >= mesh.elements.size()) throw ValidationError("bisect_in_place: element id out of range");
  // Midpoints are looked up by coordinates so neighbours that were bisected
  // earlier share the vertex.
  const auto& v = mesh.elements[e].v;
  const Point& p = mesh.vertices[v[1]];
  const Point& q = mesh.vertices[v[2]];
  const Point mid{0.5 * (p.x + q.x), 0.5 * (p.y + q.y)};
  VertexId m = static_cast<VertexId>(mesh.vertices.size());
  for (std::size_t i = mesh.vertices.size(); i-- > 0;) {
    if (mesh.vertices[i] == mid) {
      m = static_cast<VertexId>(i);
      break;
    }
  }
  if (m == mesh.vertices.size()) mesh.vertices.push_back(mid);
  EdgeMidpoints mids;
  mids.ids[edge_key(v[1], v[2])] = m;
  bisect(mesh, e, mids, created);
  ++mesh.generation;
}

bool is_conforming(const Mesh& mesh) {
  std::set<std::pair<double, double>> pts;
  for (const auto& p : mesh.vertices) pts.insert({p.x, p.y});
  std::unordered_set<VertexId> used;
  for (const auto& el : mesh.elements)
    for (VertexId v : el.v) used.insert(v);
  std::set<std::pair<double, double>> used_pts;
  for (VertexId v : used) used_pts.insert({mesh.vertices[v].x, mesh.vertices[v].y});
  std::map<EdgeKey, int> count;
  for (const auto& el : mesh.elements) {
    for (int j = 0; j < 3; ++j) {
      const VertexId a = el.v[(j + 1) % 3];
      const VertexId b = el.v[(j + 2) % 3];
      if (++count[edge_key(a, b)] > 2) return false;
      const Point& p = mesh.vertices[a];
      const Point& q = mesh.vertices[b];
      if (used_pts.count({0.5 * (p.x + q.x), 0.5 * (p.y + q.y)})) return false;
    }
  }
  return true;
}

double total_area(const Mesh& mesh) {
  double a = 0;
  for (std::size_t e = 0; e < mesh.elements.size(); ++e) a += element_geometry(mesh, static_cast<ElementId>(e)).area;
  return a;
}

void write_mesh(std::ostream& out, const Mesh& mesh) {
  out << "vertices " << mesh.vertices.size() << " elements " << mesh.elements.size() << '\n';
  char buf[96];
  for (const auto& p : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", p.x, p.y);
    out << buf;
  }
  for (const auto& el : mesh.elements)
    out << el.v[0] << ' ' << el.v[1] << ' ' << el.v[2] << ' ' << el.level() << '\n';
}

Mesh read_mesh(std::istream& in) {
  std::string w1, w2;
  std::size_t nv = 0, ne = 0;
  if (!(in >> w1 >> nv >> w2 >> ne) || w1 != "vertices" || w2 != "elements")
    throw ValidationError("read_mesh: expected header 'vertices N elements M'");
  Mesh m;
  m.vertices.resize(nv);
  for (auto& p : m.vertices) {
    std::string sx, sy;
    if (!(in >> sx >> sy)) throw ValidationError("read_mesh: truncated vertex list");
    p.x = std::strtod(sx.c_str(), nullptr);
    p.y = std::strtod(sy.c_str(), nullptr);
  }
  m.elements.resize(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    auto& el = m.elements[e];
    std::uint32_t level = 0;
    if (!(in >> el.v[0] >> el.v[1] >> el.v[2] >> level)) throw ValidationError("read_mesh: truncated element list");
    for (VertexId v : el.v)
      if (v >= nv) throw ValidationError("read_mesh: vertex index out of range");
    el.key = {static_cast<std::uint32_t>(e), level, 0};
  }
  rebuild_boundary(m);
  return m;
}

}  // namespace rnnafem
