#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "rnnafem/blocks.hpp"
#include "rnnafem/errors.hpp"
#include "rnnafem/fem.hpp"

namespace rnnafem {

Sequence encode_estimator_inputs(const Mesh& mesh, std::span<const double> nodal, std::span<const double> source) {
  if (nodal.size() != mesh.num_vertices()) throw ValidationError("estimator input: nodal size mismatch");
  if (source.size() != mesh.num_elements()) throw ValidationError("estimator input: source size mismatch");
  const std::size_t ne = mesh.num_elements();
  std::vector<std::array<double, 3>> coef(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    const auto g = element_gradient(mesh, static_cast<ElementId>(e), nodal);
    const Element& el = mesh.elements[e];
    const Point& p0 = mesh.vertices[el.v[0]];
    coef[e] = {nodal[el.v[0]] - g[0] * p0.x - g[1] * p0.y, g[0], g[1]};
  }
  const auto nb = edge_neighbors(mesh);
  Sequence out(ne, kEstimatorInputSize);
  for (std::size_t e = 0; e < ne; ++e) {
    auto rec = out[e];
    const Element& el = mesh.elements[e];
    for (int j = 0; j < 3; ++j) {
      const Point& p = mesh.vertices[el.v[j]];
      rec[kInVertices + 2 * j] = p.x;
      rec[kInVertices + 2 * j + 1] = p.y;
    }
    for (int c = 0; c < 3; ++c) rec[kInCoeffSelf + c] = coef[e][c];
    for (int j = 0; j < 3; ++j) {
      const std::int64_t o = nb[e][j];
      Point far = mesh.vertices[el.v[j]];
      const std::array<double, 3>* oc = &coef[e];
      if (o != kNoNeighbor) {
        oc = &coef[static_cast<std::size_t>(o)];
        const Element& other = mesh.elements[static_cast<std::size_t>(o)];
        const VertexId a = el.v[(j + 1) % 3];
        const VertexId b = el.v[(j + 2) % 3];
        for (VertexId v : other.v)
          if (v != a && v != b) far = mesh.vertices[v];
      }
      rec[kInOpposite + 2 * j] = far.x;
      rec[kInOpposite + 2 * j + 1] = far.y;
      for (int c = 0; c < 3; ++c) rec[kInCoeffNeighbor + 3 * j + c] = (*oc)[c];
    }
    rec[kInSource] = source[e];
  }
  return out;
}

int estimator_accuracy(std::size_t elements, double eps) {
  if (!(eps > 0.0)) throw ValidationError("eps must be positive");
  const double bits = std::ceil(std::log2(static_cast<double>(std::max<std::size_t>(elements, 1)) / eps));
  return std::max(40, static_cast<int>(bits) + 8);
}

namespace {

int window_exponent(int n) { return (n + 7) / 8; }

// Piecewise-linear interpolant of fn at geometric nodes lo * 2^(k/4) up to
// hi, as one hidden layer; extrapolates linearly outside.
Signal pl_seed(NetBuilder& nb, const Signal& s, double lo, double hi, double (*fn)(double)) {
  std::vector<double> t;
  for (int k = 0;; ++k) {
    t.push_back(lo * std::exp2(k / 4.0));
    if (t.back() >= hi) break;
  }
  std::vector<double> slope(t.size() - 1);
  for (std::size_t k = 0; k + 1 < t.size(); ++k) slope[k] = (fn(t[k + 1]) - fn(t[k])) / (t[k + 1] - t[k]);
  std::vector<std::pair<double, Signal>> parts;
  parts.emplace_back(slope[0], s);
  for (std::size_t k = 1; k < slope.size(); ++k)
    parts.emplace_back(slope[k] - slope[k - 1], nb.relu(nb.lin({{1.0, s}}, -t[k])));
  return nb.lin(parts, fn(t[0]) - slope[0] * t[0]);
}

int newton_steps(int n, double seed_bits) {
  int it = 1;
  while (seed_bits * std::exp2(it) < n) ++it;
  return it;
}

// Normalised patch geometry: D' = diam_inf 2^p in [1/2, 1), scaled edges and
// relative edge weights |e_j| / |dT|, plus the payloads scaled by 2^(c p).
struct Geometry {
  Signal diam;     // exact diam_inf
  Signal dn;       // normalised diam_inf
  std::array<Signal, 3> weight;
  std::vector<Signal> payload;
};

struct Payload {
  Signal v;
  int power;  // scaled by 2^(power * p)
};

Geometry patch_geometry(Gadgets& g, int n, std::vector<Payload> extra) {
  NetBuilder& nb = g.builder();
  const int m = (n + 1) / 2;
  const int big = 18 + (n + 1) / 2;  // headroom for payloads up to 2^ceil(n/2)
  Geometry geo;

  std::array<Signal, 6> verts;
  for (std::size_t i = 0; i < 6; ++i) verts[i] = nb.input(kInVertices + i);
  geo.diam = nb.embed(build_diam(g.options()), verts).front();
  geo.diam.nonneg = true;

  std::vector<Payload> items;
  items.push_back({geo.diam, 1});
  for (int j = 0; j < 3; ++j) {
    const int a = (j + 1) % 3;
    const int b = (j + 2) % 3;
    for (int c = 0; c < 2; ++c)
      items.push_back({nb.lin({{1.0, verts[2 * b + c]}, {-1.0, verts[2 * a + c]}}), 1});
  }
  const std::size_t geometric = items.size();
  for (auto& p : extra) items.push_back(std::move(p));

  auto gate_all = [&](const Signal& cond, int k, bool undo, int threshold_exp) {
    const Signal c = nb.materialize(cond);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const int factor = items[i].power * k;
      const int shift = i < geometric ? 2 : big + threshold_exp;
      const Signal v = undo ? nb.lin({{std::ldexp(1.0, factor), items[i].v}}) : items[i].v;
      items[i].v = g.scale_if(v, c, undo ? -factor : factor, shift);
    }
  };
  // bring D' below 1: halve by 2^t while D' >= 2^t
  for (int t : {4, 2, 1, 0}) {
    const int k = t == 0 ? -1 : -t;
    gate_all(nb.lin({{-1.0, items[0].v}}, std::ldexp(1.0, t)), k, true, 8);
  }
  // then up to [1/2, 1)
  for (int j : {32, 16, 8, 4, 2, 1}) gate_all(nb.lin({{-1.0, items[0].v}}, std::ldexp(1.0, -j)), j, false, j);

  geo.dn = items[0].v;
  geo.dn.nonneg = true;

  // |e_j|^2 in [2^-8, 2] for shape-regular patches
  std::array<Signal, 3> len;
  std::array<Signal, 3> sq;
  for (int j = 0; j < 3; ++j) {
    const Signal ex = g.square(items[1 + 2 * j].v, m, 0);
    const Signal ey = g.square(items[2 + 2 * j].v, m, 0);
    sq[j] = nb.lin({{1.0, ex}, {1.0, ey}});
    sq[j].nonneg = true;
  }
  const int isqrt_steps = newton_steps(m, 8.0);
  for (int j = 0; j < 3; ++j) {
    Signal r = pl_seed(nb, sq[j], std::ldexp(1.0, -8), 4.0, [](double x) { return 1.0 / std::sqrt(x); });
    for (int it = 0; it < isqrt_steps; ++it) {
      const Signal t = g.multiply(sq[j], r, m, 5);
      const Signal u = g.multiply(t, r, m, 5);
      r = g.multiply(r, nb.lin({{-0.5, u}}, 1.5), m, 5);
    }
    len[j] = g.multiply(sq[j], r, m, 5);
  }
  const Signal perim = nb.lin({{1.0, len[0]}, {1.0, len[1]}, {1.0, len[2]}});
  Signal q = pl_seed(nb, perim, 0.5, 8.0, [](double x) { return 1.0 / x; });
  const int recip_steps = newton_steps(m, 7.0);
  for (int it = 0; it < recip_steps; ++it) {
    const Signal v = g.multiply(perim, q, m, 3);
    q = g.multiply(q, nb.lin({{-1.0, v}}, 2.0), m, 3);
  }
  for (int j = 0; j < 3; ++j) geo.weight[j] = g.multiply(len[j], q, m, 3);

  for (std::size_t i = geometric; i < items.size(); ++i) geo.payload.push_back(items[i].v);
  return geo;
}

// Jump of grad U across edge j: (c1 - c1', c2 - c2').
std::array<Signal, 2> gradient_jump(NetBuilder& nb, int j) {
  std::array<Signal, 2> out;
  for (int c = 0; c < 2; ++c)
    out[c] = nb.lin({{1.0, nb.input(kInCoeffSelf + 1 + c)},
                     {-1.0, nb.input(kInCoeffNeighbor + 3 * j + 1 + c)}});
  return out;
}

}  // namespace

DeepRnn build_vol(int n, BlockOptions opt) {
  if (n < 1) throw ValidationError("accuracy n must be positive");
  NetBuilder nb(kEstimatorInputSize + 1);
  Gadgets g(nb, opt);
  const int e = window_exponent(n);
  std::array<Signal, 6> verts;
  for (std::size_t i = 0; i < 6; ++i) verts[i] = nb.input(kInVertices + i);
  const Signal diam = nb.embed(build_diam(opt), verts).front();
  const Signal df = g.multiply(diam, nb.input(kInSource), n, e);
  const Signal vol = g.square(df, n, e);
  return single_stage(BasicRnn(nb.build({vol}), kEstimatorInputSize, 1));
}

DeepRnn build_jump(int n, BlockOptions opt) {
  if (n < 1) throw ValidationError("accuracy n must be positive");
  NetBuilder nb(kEstimatorInputSize + 1);
  Gadgets g(nb, opt);
  const int e = window_exponent(n);
  const Geometry geo = patch_geometry(g, n, {});
  std::vector<std::pair<double, Signal>> terms;
  for (int j = 0; j < 3; ++j) {
    const auto jump = gradient_jump(nb, j);
    for (const Signal& c : jump) {
      const Signal dc = g.multiply(geo.diam, c, n, e);
      const Signal wdc = g.multiply(geo.weight[j], dc, n, e);
      terms.emplace_back(1.0, g.multiply(wdc, c, n, e));
    }
  }
  return single_stage(BasicRnn(nb.build({nb.lin(terms)}), kEstimatorInputSize, 1));
}

BasicRnn build_estimator(int n, BlockOptions opt) {
  if (n < 1) throw ValidationError("accuracy n must be positive");
  NetBuilder nb(kEstimatorInputSize + 1);
  Gadgets g(nb, opt);
  const int e = window_exponent(n);
  // D' g = D g and D'^2 f' = D^2 f once g and f are scaled by 2^-p and 4^-p
  std::vector<Payload> extra;
  for (int j = 0; j < 3; ++j)
    for (const Signal& c : gradient_jump(nb, j)) extra.push_back({c, -1});
  extra.push_back({nb.input(kInSource), -2});
  const Geometry geo = patch_geometry(g, n, std::move(extra));

  std::vector<std::pair<double, Signal>> terms;
  const Signal dn2 = g.square(geo.dn, n, 0);
  const Signal d2f = g.multiply(dn2, geo.payload[6], n, e);
  terms.emplace_back(1.0, g.square(d2f, n, e));
  for (int j = 0; j < 3; ++j) {
    for (int c = 0; c < 2; ++c) {
      const Signal dg = g.multiply(geo.dn, geo.payload[2 * j + c], n, e);
      const Signal wdg = g.multiply(geo.weight[j], dg, n, e);
      terms.emplace_back(1.0, g.multiply(wdg, dg, n, e));
    }
  }
  const Signal rho = nb.relu(nb.lin(terms));
  return BasicRnn(nb.build({rho}), kEstimatorInputSize, 1);
}

}  // namespace rnnafem

