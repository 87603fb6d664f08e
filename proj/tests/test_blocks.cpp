#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "rnnafem/adaptive.hpp"
#include "rnnafem/blocks.hpp"
#include "rnnafem/fem.hpp"
#include "rnnafem/marking.hpp"
#include "rnnafem/mesh.hpp"

using namespace rnnafem;

namespace {

double square_at(const DeepRnn& net, int n, double x) {
  return eval_at_last(net, static_cast<std::size_t>(n), std::span(&x, 1))[0];
}

// Linear interpolant of t^2 at the nodes k / 4^n, extended evenly.
double spline_square(double x, int n) {
  const double h = std::ldexp(1.0, -2 * n);
  const double t = std::fabs(x);
  const double k = std::min(std::floor(t / h), std::ldexp(1.0, 2 * n) - 1);
  const double a = k * h, b = (k + 1) * h;
  return a * a + (t - a) * (a + b);
}

std::vector<std::size_t> marked_of(const Sequence& out, std::size_t channel) {
  std::vector<std::size_t> m;
  for (std::size_t i = 0; i < out.length(); ++i)
    if (out[i][channel] > 0) m.push_back(i);
  return m;
}

Mesh reference_triangle() {
  Mesh m;
  m.vertices = {{0, 0}, {1, 0}, {0, 1}};
  m.elements.push_back({{0, 1, 2}, {}});
  rebuild_boundary(m);
  return m;
}

VertexId vertex_at(const Mesh& m, Point p) {
  for (VertexId v = 0; v < m.num_vertices(); ++v)
    if (m.vertices[v] == p) return v;
  return 0;
}

}  // namespace

TEST_CASE("IF selects the payload exactly") {
  const DeepRnn gt = build_if(Comparator::greater, 52);
  CHECK(eval_if_rnn(gt, 52, 2, 3, 1) == 2.0);
  CHECK(eval_if_rnn(gt, 52, 2, 1, 3) == 0.0);
  CHECK(eval_if_rnn(build_if(Comparator::less_equal, 52), 52, -5, 1, 1) == -5.0);

  const double grid[] = {-2, -1, -0.375, 0, 0.5, 1, 2};
  const double payloads[] = {-3, -1, 0, 0.5, 2};
  for (auto cmp : {Comparator::less, Comparator::less_equal, Comparator::greater, Comparator::greater_equal}) {
    const DeepRnn net = build_if(cmp, 52);
    for (double a : payloads)
      for (double b : grid)
        for (double c : grid) {
          bool holds = false;
          switch (cmp) {
            case Comparator::less: holds = b < c; break;
            case Comparator::less_equal: holds = b <= c; break;
            case Comparator::greater: holds = b > c; break;
            case Comparator::greater_equal: holds = b >= c; break;
          }
          CHECK(eval_if_rnn(net, 52, a, b, c) == (holds ? a : 0.0));
        }
  }
}

TEST_CASE("SQUARE") {
  for (int n : {1, 3, 5}) {
    const DeepRnn sq = build_square(n);
    CHECK(square_at(sq, n, 0.0) == 0.0);
    CHECK(square_at(sq, n, 1.0) == 1.0);
  }
  const DeepRnn one = build_square(1);
  CHECK(square_at(one, 1, 0.3) == doctest::Approx(0.1).epsilon(1e-14));

  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const DeepRnn four = build_square(4);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double x = unit(gen);
    worst = std::max(worst, std::fabs(square_at(four, 4, x) - x * x));
  }
  CHECK(worst <= std::pow(4.0, -8));

  for (int n = 1; n <= 6; ++n) {
    const DeepRnn sq = build_square(n);
    for (int i = 0; i < 2000; ++i) {
      const double x = unit(gen);
      CHECK(std::fabs(square_at(sq, n, x) - spline_square(x, n)) <= 1e-12);
    }
  }
}

TEST_CASE("MULTIPLY") {
  for (int n : {2, 6}) {
    const DeepRnn mul = build_multiply(n);
    const double bound = 2 * std::pow(4.0, -n);
    for (double x : {-1.5, 0.25, 1.0}) {
      const double xy[] = {x, 0.0};
      CHECK(std::fabs(eval_at_last(mul, n, xy)[0]) <= bound);
    }
  }
  const DeepRnn mul = build_multiply(6);
  const double p[] = {2, 3}, q[] = {-1, 1};
  CHECK(std::fabs(eval_at_last(mul, 6, p)[0] - 6.0) <= 2 * std::pow(4.0, -6));
  CHECK(std::fabs(eval_at_last(mul, 6, q)[0] + 1.0) <= 2 * std::pow(4.0, -6));
}

TEST_CASE("DIAM is exact") {
  const Dnn diam = build_diam();
  const std::vector<std::array<double, 6>> tris = {{0, 0, 1, 0, 0, 1}, {0, 0, 2, 0, 0, 1}, {0, 0, 1, 1, -1, 1}};
  for (const auto& t : tris) {
    const auto g = element_geometry({Point{t[0], t[1]}, Point{t[2], t[3]}, Point{t[4], t[5]}});
    CHECK(diam(t)[0] == g.diam_inf);
  }
}

TEST_CASE("VOL and JUMP") {
  const int n = 24;
  const double tol = 1e-5;
  {
    const Mesh ref = reference_triangle();
    const std::vector<double> zero(3, 0.0);
    const DeepRnn vol = build_vol(n);
    CHECK(std::fabs(eval_deep_rnn(vol, encode_estimator_inputs(ref, zero, constant_source(ref, 0.0)))[0][0]) <= tol);
    CHECK(eval_deep_rnn(vol, encode_estimator_inputs(ref, zero, constant_source(ref, 1.0)))[0][0] ==
          doctest::Approx(1.0).epsilon(tol));
  }
  const DeepRnn jump = build_jump(n);
  {
    const Mesh sq = unit_square();
    std::vector<double> hat(sq.num_vertices(), 0.0);
    hat[vertex_at(sq, {1, 0})] = 1.0;
    const Sequence out = eval_deep_rnn(jump, encode_estimator_inputs(sq, hat, constant_source(sq, 0.0)));
    const double expected = 2 * std::sqrt(2.0) / (2 + std::sqrt(2.0));
    for (std::size_t e = 0; e < 2; ++e) CHECK(out[e][0] == doctest::Approx(expected).epsilon(tol));
  }
  {
    const Mesh m = uniform_refine(l_shape());
    std::vector<double> affine(m.num_vertices());
    for (VertexId v = 0; v < m.num_vertices(); ++v) affine[v] = 1 + 2 * m.vertices[v].x - 3 * m.vertices[v].y;
    const Sequence out = eval_deep_rnn(jump, encode_estimator_inputs(m, affine, constant_source(m, 0.0)));
    for (std::size_t e = 0; e < out.length(); ++e) CHECK(std::fabs(out[e][0]) <= tol);
  }
}

TEST_CASE("ESTIMATOR") {
  const BasicRnn est = build_estimator(40);
  CHECK(est.is_elementwise());

  const Mesh l = l_shape();
  const std::vector<double> zero(l.num_vertices(), 0.0);
  const Sequence none = eval_basic_rnn(est, encode_estimator_inputs(l, zero, constant_source(l, 0.0)));
  for (double v : none.data) CHECK(std::fabs(v) <= 1e-9);

  const ElementField f = constant_source(l, 1.0);
  const Sequence out = eval_basic_rnn(est, encode_estimator_inputs(l, zero, f));
  const auto ref = residual_estimator(l, zero, f, EstimatorForm::diam_inf);
  const double total = std::accumulate(ref.begin(), ref.end(), 0.0);
  for (std::size_t e = 0; e < ref.size(); ++e) CHECK(std::fabs(out[e][0] - ref[e]) / (total + 1e-30) <= 1e-6);

  // permuting the records permutes the outputs
  const Mesh m = uniform_refine(l);
  const ElementField fm = constant_source(m, 1.0);
  const Sequence in = encode_estimator_inputs(m, solve_poisson(m, fm).nodal, fm);
  std::vector<std::size_t> perm(in.length());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  Sequence shuffled(in.length(), in.dim);
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy(in[perm[i]].begin(), in[perm[i]].end(), shuffled[i].begin());
  const Sequence a = eval_basic_rnn(est, in), b = eval_basic_rnn(est, shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) CHECK(b[i][0] == a[perm[i]][0]);
}

TEST_CASE("SUMY") {
  const BasicRnn sumy = build_sumy();
  const double xs[] = {4, 3, 2, 1};
  auto run = [&](double y) {
    Sequence s(4, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      s[i][0] = xs[i];
      s[i][1] = y;
    }
    return eval_basic_rnn(sumy, s)[3][0];
  };
  CHECK(run(3) == 7.0);
  CHECK(run(0) == 10.0);
  CHECK(run(5) == 0.0);
}

TEST_CASE("ROUND") {
  const BasicRnn round = build_round();
  auto run = [&](std::vector<double> xs, double lo, double hi) {
    Sequence s(xs.size(), 3);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      s[i][0] = xs[i];
      s[i][1] = lo;
      s[i][2] = hi;
    }
    return eval_basic_rnn(round, s).data;
  };
  CHECK(run({1, 2.5, 4}, 2, 3) == std::vector<double>{1, 3, 4});
  CHECK(run({1, 2.5, 4}, 5, 6) == std::vector<double>{1, 2.5, 4});
  CHECK(run({3, 1}, 2, 3) == std::vector<double>{3, 1});
}

TEST_CASE("BINARY") {
  auto last = [](const DeepRnn& net, std::vector<double> xs) {
    const Sequence out = eval_deep_rnn(net, Sequence::from_scalars(xs));
    return std::vector<double>(out[out.length() - 1].begin(), out[out.length() - 1].end());
  };
  const int k = 20;
  const auto y = last(build_binary(0.5, k), {4, 3, 2, 1});
  CHECK(std::fabs(y[kBinY] - 3.0) <= 4 * std::ldexp(1.0, -k));
  CHECK(y[kBinZ] == 4 * std::ldexp(1.0, -(k + 2)));
  CHECK(std::fabs(last(build_binary(1.0, k), {0.7, 0.7, 0.7})[kBinY] - 0.7) <= 0.7 * std::ldexp(1.0, -k));
  CHECK(std::fabs(last(build_binary(0.5, k), {1, 0, 0, 0})[kBinY] - 1.0) <= std::ldexp(1.0, -k));
}

TEST_CASE("MARK") {
  auto mark = [](std::vector<double> xs, double theta, BlockOptions opt = {}) {
    const double mx = *std::max_element(xs.begin(), xs.end());
    const int k = mark_iterations(mx, xs.size(), 1e-9);
    return marked_of(eval_deep_rnn(build_mark(theta, k, opt), Sequence::from_scalars(xs)), kMarkY);
  };
  CHECK(mark({4, 3, 2, 1}, 0.5) == std::vector<std::size_t>{0, 1});
  CHECK(mark({1, 100, 2, 3}, 0.1) == std::vector<std::size_t>{1});
  CHECK(mark({2, 2, 2, 2}, 0.5) == std::vector<std::size_t>{0, 1});

  std::mt19937_64 gen(21);
  std::uniform_real_distribution<double> logv(std::log(1e-6), std::log(1e3));
  for (int t = 0; t < 20; ++t) {
    std::vector<double> xs(1 + gen() % 200);
    for (double& v : xs) v = std::exp(logv(gen));
    if (t % 4 == 0)
      for (double& v : xs) v = std::round(v);
    const int k = mark_iterations(*std::max_element(xs.begin(), xs.end()), xs.size(), 1e-6);
    const PerturbedMarking oracle = perturbed_doerfler_with_iterations(xs, 0.5, k);
    for (IfForm form : {IfForm::recurrent, IfForm::one_layer}) {
      BlockOptions opt;
      opt.if_form = form;
      const Sequence out = eval_deep_rnn(build_mark(0.5, k, opt), Sequence::from_scalars(xs));
      CHECK(marked_of(out, kMarkY) == oracle.marked);
      CHECK(out.channel(kMarkSnapped) == oracle.snapped);
    }
  }
}

TEST_CASE("independent weights do not grow with n") {
  auto indep = [](const DeepRnn& net) { return net.weight_budget().independent_weights; };
  auto total = [](const DeepRnn& net) { return net.weight_budget().total_weights; };
  for (int n : {2, 4, 8}) {
    CHECK(indep(build_square(n)) == indep(build_square(2 * n)));
    CHECK(total(build_square(n)) <= total(build_square(2 * n)));
    CHECK(indep(build_multiply(n)) == indep(build_multiply(2 * n)));
    CHECK(indep(build_binary(0.5, n)) == indep(build_binary(0.5, 2 * n)));
    CHECK(indep(build_mark(0.5, n)) == indep(build_mark(0.5, 2 * n)));
  }
  for (int n : {16, 32}) {
    CHECK(indep(build_vol(n)) == indep(build_vol(2 * n)));
    CHECK(indep(build_jump(n)) == indep(build_jump(2 * n)));
    CHECK(indep(single_stage(build_estimator(n))) == indep(single_stage(build_estimator(2 * n))));
  }
}

TEST_CASE("ADAPTIVE") {
  const Mesh l = l_shape();
  const std::vector<double> zero(l.num_vertices(), 0.0);
  const AdaptiveParams p = adaptive_params_for(l.num_elements(), 0.5, 1e-6, 0.0, 64.0);

  const AdaptiveStep idle = run_adaptive_network(build_adaptive(p), encode_estimator_inputs(l, zero, constant_source(l, 0.0)));
  CHECK(idle.stop);

  const Mesh m = uniform_refine(l);
  const ElementField f = constant_source(m, 1.0);
  const FemSolution sol = solve_poisson(m, f);
  const Sequence in = encode_estimator_inputs(m, sol.nodal, f);
  const AdaptiveParams pm = adaptive_params_for(m.num_elements(), 0.5, 1e-6, 0.0, 64.0);
  const AdaptiveStep st = run_adaptive_network(build_adaptive(pm), in);
  const auto ref = residual_estimator(m, sol.nodal, f, EstimatorForm::diam_inf);
  const PerturbedMarking band = perturbed_doerfler_with_iterations(ref, 0.5, pm.k);
  const bool band_empty = std::none_of(ref.begin(), ref.end(), [&](double v) {
    return v >= band.band_low && v <= band.band_high;
  });
  const auto replica = perturbed_doerfler_with_iterations(st.indicators, 0.5, pm.k).marked;
  CHECK(std::vector<std::size_t>(st.marked.begin(), st.marked.end()) == replica);
  if (band_empty) {
    auto classical = doerfler_mark(ref, 0.5);
    std::sort(classical.begin(), classical.end());
    CHECK(std::vector<std::size_t>(st.marked.begin(), st.marked.end()) == classical);
  }
  CHECK_FALSE(st.stop);

  AdaptiveParams tight = pm;
  tight.eps_tol = std::sqrt(st.total) * (1 + 1e-9);
  CHECK(run_adaptive_network(build_adaptive(tight), in).stop);
}
