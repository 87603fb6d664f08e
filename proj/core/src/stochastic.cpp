#include "rnnafem/stochastic.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <queue>
#include <unordered_map>
#include <unordered_set>

#include "rnnafem/blocks.hpp"
#include "rnnafem/errors.hpp"
#include "rnnafem/net_builder.hpp"

namespace rnnafem {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t combine(std::uint64_t h, std::uint64_t v) { return splitmix64(h ^ splitmix64(v)); }

std::uint64_t key_hash(const ForestKey& k) {
  return combine(combine(k.root, k.level), k.path);
}

struct ForestKeyHash {
  std::size_t operator()(const ForestKey& k) const { return static_cast<std::size_t>(key_hash(k)); }
};

using KeySet = std::unordered_set<ForestKey, ForestKeyHash>;

bool frozen(ForestKey k, const KeySet& stop) {
  if (stop.empty()) return false;
  while (true) {
    if (stop.count(k)) return true;
    if (k.level == 0) return false;
    k = k.parent();
  }
}

double area_of(const std::array<Point, 3>& c) {
  return 0.5 * std::fabs((c[1].x - c[0].x) * (c[2].y - c[0].y) - (c[2].x - c[0].x) * (c[1].y - c[0].y));
}

// Gauss-Legendre nodes and weights on [0, 1].
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double t = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = t;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (t * p1 - p0) / (t * t - 1.0);
      const double dt = p1 / dp;
      t -= dt;
      if (std::fabs(dt) < 1e-16) break;
    }
    x[i] = 0.5 * (1.0 - t);
    w[i] = 1.0 / ((1.0 - t * t) * dp * dp);
  }
}

GradientSurrogate analytic(std::function<Vec2(double, double)> f, double bound) {
  GradientSurrogate s;
  s.evaluator = std::move(f);
  s.linf_bound = bound;
  return s;
}

// Shared outer loop; `stopped` decides, for the elements to examine, which
// ones join the stop set.
template <class Decide>
GreedyResult stochastic_loop(const Mesh& mesh0, const ElementEta& eta_of, Decide&& stopped) {
  GreedyResult res;
  res.mesh = mesh0;
  KeySet stop;
  std::unordered_map<ForestKey, double, ForestKeyHash> eta_cache;
  std::vector<ElementId> examine(mesh0.num_elements());
  for (std::size_t e = 0; e < examine.size(); ++e) examine[e] = static_cast<ElementId>(e);

  for (int gen = 0;; ++gen) {
    if (gen >= kStochasticGenerationCap)
      throw NumericalError("stochastic greedy refinement exceeded the generation cap",
                           static_cast<double>(res.mesh.num_elements()));
    const std::vector<char> stop_now = stopped(res.mesh, examine, gen);
    std::vector<ElementId> marked;
    for (std::size_t i = 0; i < examine.size(); ++i) {
      if (stop_now[i]) {
        stop.insert(res.mesh.elements[examine[i]].key);
        res.stop_set.push_back(res.mesh.elements[examine[i]].key);
      } else {
        marked.push_back(examine[i]);
      }
    }

    GenerationTrace t;
    t.generation = gen;
    t.elements = res.mesh.num_elements();
    t.marked = marked.size();
    t.stopped = stop.size();
    t.max_eta = std::numeric_limits<double>::quiet_NaN();
    if (eta_of) {
      t.max_eta = 0;
      for (std::size_t e = 0; e < res.mesh.num_elements(); ++e) {
        const ForestKey& k = res.mesh.elements[e].key;
        auto it = eta_cache.find(k);
        if (it == eta_cache.end()) it = eta_cache.emplace(k, eta_of(res.mesh, static_cast<ElementId>(e))).first;
        t.max_eta = std::max(t.max_eta, it->second);
      }
    }
    res.trace.push_back(t);
    if (marked.empty()) break;

    const std::vector<Element> before = res.mesh.elements;
    res.mesh = refine_nvb(res.mesh, marked);
    examine.clear();
    for (std::size_t e = 0; e < res.mesh.num_elements(); ++e) {
      const ForestKey& k = res.mesh.elements[e].key;
      if (e < before.size() && before[e].key == k) continue;
      if (!frozen(k, stop)) examine.push_back(static_cast<ElementId>(e));
    }
  }
  return res;
}

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t generation, const ForestKey& element, std::uint64_t draw)
    : key_(combine(combine(combine(splitmix64(seed), generation), key_hash(element)), draw)) {}

CounterRng::result_type CounterRng::operator()() { return splitmix64(key_ + 0x632be59bd9b4e019ULL * ++counter_); }

double CounterRng::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

Point sample_in_triangle(const std::array<Point, 3>& c, CounterRng& rng) {
  double u = rng.uniform();
  double v = rng.uniform();
  if (u + v > 1.0) {
    u = 1.0 - u;
    v = 1.0 - v;
  }
  return {c[0].x + u * (c[1].x - c[0].x) + v * (c[2].x - c[0].x),
          c[0].y + u * (c[1].y - c[0].y) + v * (c[2].y - c[0].y)};
}

GradientSurrogate corner_singularity_gradient() {
  return analytic(
      [](double x, double y) -> Vec2 {
        const double r = std::hypot(x, y);
        if (r == 0.0) return {0.0, 0.0};
        double phi = std::atan2(y, x);
        if (phi < 0.0) phi += 2.0 * std::numbers::pi;
        const double s = (2.0 / 3.0) * std::pow(r, -1.0 / 3.0);
        return {-s * std::sin(phi / 3.0), s * std::cos(phi / 3.0)};
      },
      std::numeric_limits<double>::infinity());
}

GradientSurrogate polynomial_gradient() {
  // bound on (-1, 1)^2
  return analytic([](double x, double y) -> Vec2 { return {2.0 * x * y + y * y * y / 3.0, x * x + x * y * y}; }, 7.0 / 3.0);
}

GradientSurrogate sine_gradient() {
  const double pi = std::numbers::pi;
  return analytic(
      [pi](double x, double y) -> Vec2 {
        return {pi * std::cos(pi * x) * std::sin(pi * y), pi * std::sin(pi * x) * std::cos(pi * y)};
      },
      pi);
}

GradientSurrogate constant_gradient(Vec2 value) {
  return analytic([value](double, double) { return value; }, std::max(std::fabs(value[0]), std::fabs(value[1])));
}

GradientSurrogate network_gradient(Dnn net) {
  if (net.input_size() != 2 || net.output_size() != 2)
    throw ValidationError("gradient surrogate network must map R^2 to R^2");
  GradientSurrogate s;
  s.kind = GradientSurrogate::Kind::network;
  s.network = std::make_shared<const Dnn>(std::move(net));
  s.evaluator = [net = s.network](double x, double y) -> Vec2 {
    const double in[2] = {x, y};
    const auto out = (*net)(in);
    return {out[0], out[1]};
  };
  return s;
}

TriangleRule triangle_rule(const std::array<Point, 3>& c, int order) {
  if (order < 1) throw ValidationError("quadrature order must be positive");
  std::vector<double> x, w;
  gauss_legendre(order, x, w);
  const double a2 = 2.0 * area_of(c);
  TriangleRule rule;
  rule.points.reserve(order * order);
  rule.weights.reserve(order * order);
  // Duffy map collapsing the unit square onto vertex 0
  for (int i = 0; i < order; ++i) {
    for (int j = 0; j < order; ++j) {
      const double u = x[i], v = x[j];
      const double px = (1.0 - v) * c[1].x + v * c[2].x;
      const double py = (1.0 - v) * c[1].y + v * c[2].y;
      rule.points.push_back({(1.0 - u) * c[0].x + u * px, (1.0 - u) * c[0].y + u * py});
      rule.weights.push_back(w[i] * w[j] * u * a2);
    }
  }
  return rule;
}

double eta(const Mesh& mesh, ElementId e, const GradientSurrogate& v, int order) {
  const TriangleRule rule = triangle_rule(mesh.corners(e), order);
  std::vector<Vec2> vals(rule.points.size());
  double area = 0, m0 = 0, m1 = 0;
  for (std::size_t q = 0; q < vals.size(); ++q) {
    vals[q] = v(rule.points[q]);
    area += rule.weights[q];
    m0 += rule.weights[q] * vals[q][0];
    m1 += rule.weights[q] * vals[q][1];
  }
  if (!(area > 0)) return 0.0;
  m0 /= area;
  m1 /= area;
  double s = 0;
  for (std::size_t q = 0; q < vals.size(); ++q) {
    const double d0 = vals[q][0] - m0, d1 = vals[q][1] - m1;
    s += rule.weights[q] * (d0 * d0 + d1 * d1);
  }
  return std::sqrt(s);
}

double mc_indicator(const Mesh& mesh, ElementId e, const GradientSurrogate& v, int n_points, CounterRng& rng) {
  if (n_points < 1) throw ValidationError("Monte-Carlo indicator needs N >= 1");
  const auto c = mesh.corners(e);
  const auto n = static_cast<std::size_t>(n_points);
  std::vector<Vec2> vx(n);
  for (auto& val : vx) val = v(sample_in_triangle(c, rng));
  double y0 = 0, y1 = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const Vec2 val = v(sample_in_triangle(c, rng));
    y0 += val[0];
    y1 += val[1];
  }
  y0 /= n_points;
  y1 /= n_points;
  double s = 0;
  for (const auto& val : vx) {
    const double d0 = val[0] - y0, d1 = val[1] - y1;
    s += d0 * d0 + d1 * d1;
  }
  return std::sqrt(area_of(c) / n_points * s);
}

Mesh greedy_refine(const Mesh& mesh0, const GradientSurrogate& v, double eps) {
  if (!(eps > 0.0)) throw ValidationError("greedy tolerance must be positive");
  Mesh mesh = mesh0;
  std::vector<double> value(mesh.num_elements());
  std::vector<std::uint32_t> version(mesh.num_elements(), 0);
  struct Entry {
    double eta;
    ElementId id;
    std::uint32_t version;
  };
  // largest eta first, then smallest index
  auto later = [](const Entry& a, const Entry& b) { return a.eta != b.eta ? a.eta < b.eta : a.id > b.id; };
  std::priority_queue<Entry, std::vector<Entry>, decltype(later)> heap(later);
  auto update = [&](ElementId e) {
    if (e >= value.size()) {
      value.resize(e + 1);
      version.resize(e + 1, 0);
    }
    value[e] = eta(mesh, e, v);
    heap.push({value[e], e, ++version[e]});
  };
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) update(static_cast<ElementId>(e));

  std::vector<ElementId> created;
  for (std::size_t step = 0;; ++step) {
    while (!heap.empty() && heap.top().version != version[heap.top().id]) heap.pop();
    if (heap.empty() || heap.top().eta <= eps) break;
    if (step >= kGreedyStepCap) throw NumericalError("greedy refinement exceeded the step cap", heap.top().eta);
    const ElementId e = heap.top().id;
    created.clear();
    bisect_in_place(mesh, e, &created);
    for (ElementId c : created) update(c);
  }
  rebuild_boundary(mesh);
  return mesh;
}

GreedyResult stochastic_greedy_refine(const Mesh& mesh0, const IndicatorDraw& draw, const GreedyConfig& config,
                                      const ElementEta& eta_of) {
  if (!(config.eps > 0.0)) throw ValidationError("stochastic greedy tolerance must be positive");
  if (config.samples < 1) throw ValidationError("stochastic greedy needs K >= 1");
  return stochastic_loop(mesh0, eta_of, [&](const Mesh& mesh, std::span<const ElementId> examine, int gen) {
    std::vector<char> stop(examine.size(), 1);
    for (std::size_t i = 0; i < examine.size(); ++i) {
      const ForestKey& key = mesh.elements[examine[i]].key;
      for (int k = 0; k < config.samples; ++k) {
        CounterRng rng(config.seed, static_cast<std::uint64_t>(gen), key, static_cast<std::uint64_t>(k));
        if (draw(mesh, examine[i], rng) > config.eps) {
          stop[i] = 0;
          break;
        }
      }
    }
    return stop;
  });
}

GreedyResult stochastic_greedy_refine(const Mesh& mesh0, const GradientSurrogate& v, const GreedyConfig& config) {
  if (config.mc_points < 1) throw ValidationError("stochastic greedy needs N >= 1");
  const int n = config.mc_points;
  return stochastic_greedy_refine(
      mesh0, [&v, n](const Mesh& m, ElementId e, CounterRng& rng) { return mc_indicator(m, e, v, n, rng); }, config,
      [&v](const Mesh& m, ElementId e) { return eta(m, e, v); });
}

Dnn build_rho_net(const Dnn& v_eps, int n) {
  if (v_eps.input_size() != 2 || v_eps.output_size() != 2)
    throw ValidationError("rho network needs a surrogate mapping R^2 to R^2");
  if (n < 1) throw ValidationError("rho network accuracy must be positive");
  NetBuilder nb(5);
  Gadgets g(nb);
  const Signal x[2] = {nb.input(0), nb.input(1)};
  const Signal y[2] = {nb.input(2), nb.input(3)};
  const auto vx = nb.embed(v_eps, x);
  const auto vy = nb.embed(v_eps, y);
  const Signal d0 = nb.abs(nb.lin({{1.0, vx[0]}, {-1.0, vy[0]}}));
  const Signal d1 = nb.abs(nb.lin({{1.0, vx[1]}, {-1.0, vy[1]}}));
  const Signal dist = nb.lin({{1.0, d0}, {1.0, d1}});
  return nb.build({g.multiply(nb.nonneg_input(4), dist, n, n)});
}

BasicRnn adaptive_from_rho(const Dnn& rho_net, int samples, double eps) {
  if (rho_net.input_size() != 5 || rho_net.output_size() != 1) throw ValidationError("not a rho network");
  if (samples < 1) throw ValidationError("ADAPTIVE needs K >= 1");
  if (!(eps > 0.0)) throw ValidationError("ADAPTIVE tolerance must be positive");
  const std::size_t inputs = 5 * static_cast<std::size_t>(samples);
  NetBuilder nb(inputs + 1);
  Gadgets g(nb);
  std::vector<Signal> level;
  for (int k = 0; k < samples; ++k) {
    std::vector<Signal> in;
    for (std::size_t c = 0; c < 5; ++c) in.push_back(nb.input(5 * k + c));
    level.push_back(nb.relu(nb.embed(rho_net, in)[0]));
  }
  while (level.size() > 1) {
    std::vector<Signal> next;
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(g.max_nonneg(level[i], level[i + 1]));
    if (level.size() % 2) next.push_back(level.back());
    level = std::move(next);
  }
  const Signal y = nb.relu(nb.lin({{1.0, level.front()}}, -eps));
  return BasicRnn(nb.build({y}), inputs, 1);
}

GreedyResult stochastic_greedy_refine(const Mesh& mesh0, const BasicRnn& adaptive, const GreedyConfig& config,
                                      const ElementEta& eta_of) {
  if (adaptive.output_size != 1 || adaptive.input_size == 0 || adaptive.input_size % 5 != 0)
    throw ValidationError("not a rho ADAPTIVE network");
  const std::size_t samples = adaptive.input_size / 5;
  return stochastic_loop(mesh0, eta_of, [&](const Mesh& mesh, std::span<const ElementId> examine, int gen) {
    Sequence in(examine.size(), adaptive.input_size);
    for (std::size_t i = 0; i < examine.size(); ++i) {
      const auto c = mesh.corners(examine[i]);
      const double root_area = std::sqrt(area_of(c));
      auto row = in[i];
      for (std::size_t k = 0; k < samples; ++k) {
        CounterRng rng(config.seed, static_cast<std::uint64_t>(gen), mesh.elements[examine[i]].key, k);
        const Point x = sample_in_triangle(c, rng);
        const Point y = sample_in_triangle(c, rng);
        const double vals[5] = {x.x, x.y, y.x, y.y, root_area};
        std::copy(vals, vals + 5, row.begin() + 5 * k);
      }
    }
    const Sequence out = eval_basic_rnn(adaptive, in);
    std::vector<char> stop(examine.size());
    for (std::size_t i = 0; i < examine.size(); ++i) stop[i] = out[i][0] <= 0.0;
    return stop;
  });
}

void write_generation_csv(std::ostream& out, std::span<const GenerationTrace> trace) {
  out << "generation,elements,marked,stopped,max_eta\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& t : trace)
    out << t.generation << ',' << t.elements << ',' << t.marked << ',' << t.stopped << ',' << t.max_eta << '\n';
}

}  // namespace rnnafem
