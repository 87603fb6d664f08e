#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "rnnafem/mesh.hpp"
#include "rnnafem/network.hpp"

namespace rnnafem {

/// Counter-mode generator: the stream is a pure function of its key, so draws
/// for (seed, generation, element, draw) can be produced in any order.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t key) : key_(key) {}
  CounterRng(std::uint64_t seed, std::uint64_t generation, const ForestKey& element, std::uint64_t draw);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Uniform point on the triangle.
Point sample_in_triangle(const std::array<Point, 3>& corners, CounterRng& rng);

using Vec2 = std::array<double, 2>;

struct GradientSurrogate {
  enum class Kind { analytic, network };
  std::function<Vec2(double, double)> evaluator;
  Kind kind = Kind::analytic;
  double linf_bound = std::numeric_limits<double>::infinity();
  std::shared_ptr<const Dnn> network;  // set for Kind::network

  Vec2 operator()(const Point& p) const { return evaluator(p.x, p.y); }
};

/// Gradient of r^(2/3) sin(2 phi / 3), phi in [0, 2 pi), singular at the origin.
GradientSurrogate corner_singularity_gradient();
/// Gradient of x^2 y + x y^3 / 3.
GradientSurrogate polynomial_gradient();
/// Gradient of sin(pi x) sin(pi y).
GradientSurrogate sine_gradient();
GradientSurrogate constant_gradient(Vec2 value);
/// Wraps a 2 -> 2 network.
GradientSurrogate network_gradient(Dnn net);

/// Collapsed Gauss-Legendre rule on a triangle: weights sum to the area.
struct TriangleRule {
  std::vector<Point> points;
  std::vector<double> weights;
};
TriangleRule triangle_rule(const std::array<Point, 3>& corners, int order = 8);

/// eta(T, V) = ||V - mean_T V||_{L2(T)}, root-sum-square over components.
double eta(const Mesh& mesh, ElementId e, const GradientSurrogate& v, int order = 8);

/// One draw of rho(T, V) from 2N uniform points (x_i, y_j) on T.
double mc_indicator(const Mesh& mesh, ElementId e, const GradientSurrogate& v, int n_points, CounterRng& rng);

struct GreedyConfig {
  double eps = 0.1;
  int samples = 8;     // K draws per element and generation
  int mc_points = 1;   // N
  std::uint64_t seed = 0;
};

struct GenerationTrace {
  int generation = 0;
  std::size_t elements = 0;
  std::size_t marked = 0;
  std::size_t stopped = 0;
  double max_eta = 0;
};

struct GreedyResult {
  Mesh mesh;
  std::vector<ForestKey> stop_set;
  std::vector<GenerationTrace> trace;
};

inline constexpr std::size_t kGreedyStepCap = 100000;
inline constexpr int kStochasticGenerationCap = 200;

/// Bisects an element of maximal eta (earliest index on ties) until every
/// eta <= eps. No closure: the output may have hanging nodes.
Mesh greedy_refine(const Mesh& mesh0, const GradientSurrogate& v, double eps);

/// Per-element draw of an indicator; the generator is already keyed.
using IndicatorDraw = std::function<double(const Mesh&, ElementId, CounterRng&)>;
using ElementEta = std::function<double(const Mesh&, ElementId)>;

/// Elements whose K draws all stay <= eps join the stop set, the rest are
/// refined with closure. Only elements created by the last refinement are
/// sampled again, and descendants of stopped elements never are. `eta_of`
/// only feeds the trace.
GreedyResult stochastic_greedy_refine(const Mesh& mesh0, const IndicatorDraw& draw, const GreedyConfig& config,
                                      const ElementEta& eta_of = {});
GreedyResult stochastic_greedy_refine(const Mesh& mesh0, const GradientSurrogate& v, const GreedyConfig& config);

/// rho_T = |T|^(1/2) * (|v1(x) - v1(y)| + |v2(x) - v2(y)|) on input
/// (x1, x2, y1, y2, |T|^(1/2)), product via MULTIPLY with window 2^n.
Dnn build_rho_net(const Dnn& v_eps, int n);

/// Elementwise RNN on K stacked rho inputs: max(max_k rho_k, eps) - eps.
BasicRnn adaptive_from_rho(const Dnn& rho_net, int samples, double eps);

/// Stochastic greedy driven by the network above: an element is stopped
/// exactly when its output is zero. The network fixes K; eps in `config`
/// must match the one it was built with.
GreedyResult stochastic_greedy_refine(const Mesh& mesh0, const BasicRnn& adaptive, const GreedyConfig& config,
                                      const ElementEta& eta_of = {});

void write_generation_csv(std::ostream& out, std::span<const GenerationTrace> trace);

}  // namespace rnnafem
