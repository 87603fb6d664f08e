#include "rnnafem/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

double seconds_to_ms(std::chrono::steady_clock::duration d) {
  return std::chrono::duration<double, std::milli>(d).count();
}

// (y_i[0..keep), c_i) with c_i = c_{i-1} + x_{i, width + component}: under
// init_with_last wiring c_i is x_n[component] at every position.
BasicRnn broadcast_stage(std::size_t width, const StageShape::Broadcast& b) {
  if (b.keep > width || b.component >= width) throw ValidationError("broadcast reads past the previous output");
  const std::size_t in = 2 * width;
  const std::size_t out = b.keep + 1;
  Matrix hidden(2 * out, in + out, std::vector<double>(2 * out * (in + out), 0.0));
  Matrix merge(out, 2 * out, std::vector<double>(out * 2 * out, 0.0));
  for (std::size_t c = 0; c < b.keep; ++c) {
    hidden(2 * c, c) = 1.0;
    hidden(2 * c + 1, c) = -1.0;
    merge(c, 2 * c) = 1.0;
    merge(c, 2 * c + 1) = -1.0;
  }
  const std::size_t r = 2 * b.keep;
  hidden(r, width + b.component) = 1.0;
  hidden(r, in + b.keep) = 1.0;
  hidden(r + 1, width + b.component) = -1.0;
  hidden(r + 1, in + b.keep) = -1.0;
  merge(b.keep, r) = 1.0;
  merge(b.keep, r + 1) = -1.0;
  return BasicRnn(Dnn::from_dense({hidden, merge}), in, out);
}

BasicRnn stage_network(const StageShape& s, std::span<const double> p) {
  const std::size_t bias = s.bias ? 1 : 0;
  const std::size_t nx = s.input_size();
  const std::size_t ny = s.output_size();
  std::vector<Matrix> mats;
  std::size_t at = 0;
  for (std::size_t l = 0; l + 1 < s.sizes.size(); ++l) {
    const std::size_t rows = s.sizes[l + 1];
    const std::size_t pcols = s.sizes[l] + bias;
    const std::size_t cols = (l == 0 ? nx + ny : s.sizes[l]) + bias;
    Matrix m(rows, cols, std::vector<double>(rows * cols, 0.0));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pcols; ++c) {
        std::size_t col = c;
        if (l == 0 && c >= nx && c < s.sizes[0]) col = nx + s.feedback[c - nx];
        else if (l == 0 && c == s.sizes[0]) col = nx + ny;
        m(r, col) = p[at + r * pcols + c];
      }
    }
    at += rows * pcols;
    mats.push_back(std::move(m));
  }
  if (s.relu_output) {
    Matrix id(ny, ny + bias, std::vector<double>(ny * (ny + bias), 0.0));
    for (std::size_t i = 0; i < ny; ++i) id(i, i) = 1.0;
    mats.push_back(std::move(id));
  }
  return BasicRnn(Dnn::from_dense(mats, s.bias), nx, ny);
}

void check_shape(const StageShape& s) {
  if (s.sizes.size() < 2) throw ValidationError("stage needs at least one weight matrix");
  if (s.sizes.front() <= s.feedback.size()) throw ValidationError("stage has no external input");
  for (std::size_t c : s.feedback)
    if (c >= s.sizes.back()) throw ValidationError("feedback component outside the stage output");
}

}  // namespace

std::size_t StageShape::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l + 1] * (sizes[l] + (bias ? 1 : 0));
  return n;
}

std::size_t Blueprint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.parameter_count();
  return n;
}

std::vector<std::size_t> Blueprint::recursive_indices() const {
  std::vector<std::size_t> idx;
  std::size_t at = 0;
  for (const auto& s : stages) {
    const std::size_t pcols = s.sizes[0] + (s.bias ? 1 : 0);
    for (std::size_t r = 0; r < s.sizes[1]; ++r)
      for (std::size_t c = s.input_size(); c < s.sizes[0]; ++c) idx.push_back(at + r * pcols + c);
    at += s.parameter_count();
  }
  return idx;
}

std::vector<double> project_recursive(const Blueprint& bp, std::span<const double> params) {
  std::vector<double> out(params.begin(), params.end());
  if (bp.restrict_recursive)
    for (std::size_t i : bp.recursive_indices()) out[i] = std::clamp(std::round(out[i]), -1.0, 1.0);
  return out;
}

void project_recursive(Blueprint& bp) { bp.params = project_recursive(bp, bp.params); }

DeepRnn instantiate(const Blueprint& bp) { return instantiate(bp, bp.params); }

DeepRnn instantiate(const Blueprint& bp, std::span<const double> params) {
  if (bp.stages.empty()) throw ValidationError("blueprint has no stages");
  if (params.size() != bp.parameter_count()) throw ValidationError("parameter vector does not match the blueprint");
  DeepRnn net;
  std::size_t at = 0;
  std::size_t width = 0;
  for (std::size_t i = 0; i < bp.stages.size(); ++i) {
    const StageShape& s = bp.stages[i];
    check_shape(s);
    if (s.broadcast) {
      if (i == 0) throw ValidationError("the first stage cannot broadcast");
      net.push(broadcast_stage(width, *s.broadcast), Wiring::init_with_last);
      width = s.broadcast->keep + 1;
    }
    if (i > 0 && s.input_size() != width) throw ValidationError("stage input does not match the previous output");
    net.push(stage_network(s, params.subspan(at, s.parameter_count())));
    at += s.parameter_count();
    width = s.output_size();
  }
  return net;
}

Blueprint maxstrategy_shape() {
  Blueprint bp;
  StageShape b1;
  b1.sizes = {2, 3, 2};
  b1.feedback = {1};
  StageShape b2;
  b2.sizes = {2, 1};
  b2.relu_output = true;
  b2.broadcast = StageShape::Broadcast{1, 1};
  bp.stages = {b1, b2};
  bp.params.assign(bp.parameter_count(), 0.0);
  bp.restrict_recursive = true;
  return bp;
}

Blueprint maxstrategy_blueprint(double theta) {
  if (!(theta > 0.0 && theta < 1.0)) throw ValidationError("theta must lie in (0, 1)");
  Blueprint bp = maxstrategy_shape();
  bp.params = {1, 0, -1, 0, -1, 1,   // (x, y_{i-1,2}) -> hidden
               1, -1, 0, 1, -1, 1,   // hidden -> (x, running max)
               1, -(1.0 - theta)};
  return bp;
}

Blueprint fixture_blueprint() {
  Blueprint bp = maxstrategy_shape();
  bp.params = {0.4394,  0,       -0.6591, 0,       -0.6466, -1,
               -0.2471, 0.1095,  -0.2358, -0.1868, 0.3123,  -0.9564,
               -0.1585, 0.2804};
  return bp;
}

std::vector<ElementId> blueprint_mark(const DeepRnn& net, std::span<const double> indicators) {
  if (net.input_size() != 1 || net.output_size() != 1) throw ValidationError("marking network must map scalars to scalars");
  const Sequence y = eval_deep_rnn(net, Sequence::from_scalars(indicators));
  std::vector<ElementId> marked;
  for (std::size_t i = 0; i < indicators.size(); ++i)
    if (y[i][0] > 0.0) marked.push_back(static_cast<ElementId>(i));
  return marked;
}

Blueprint spsa_optimize(Blueprint bp, const std::function<double(std::span<const double>)>& objective,
                        const SpsaConfig& config, const std::function<void(const SpsaStep&)>& on_step) {
  if (!(config.a >= 0.0) || !(config.c > 0.0) || !(config.A >= 0.0))
    throw ValidationError("SPSA gains must be nonnegative with c > 0");
  if (bp.params.size() != bp.parameter_count()) throw ValidationError("parameter vector does not match the blueprint");
  std::mt19937_64 gen(config.seed);
  std::vector<double> theta = bp.params;
  std::vector<double> delta(theta.size()), trial(theta.size());
  for (int k = 1; k <= config.iterations; ++k) {
    const double ak = config.a / std::pow(k + config.A, config.alpha);
    const double ck = config.c / std::pow(static_cast<double>(k), config.gamma);
    for (auto& d : delta) d = (gen() & 1u) ? 1.0 : -1.0;
    auto eval = [&](double sign) {
      for (std::size_t i = 0; i < theta.size(); ++i) trial[i] = theta[i] + sign * ck * delta[i];
      const double j = objective(project_recursive(bp, trial));
      if (!std::isfinite(j)) throw NumericalError("SPSA objective is not finite at iteration " + std::to_string(k), j);
      return j;
    };
    SpsaStep step;
    step.iteration = k;
    step.plus = eval(1.0);
    step.minus = eval(-1.0);
    const double g = (step.plus - step.minus) / (2.0 * ck);
    // Rademacher entries are their own inverses
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += ak * g * delta[i];
    if (on_step) on_step(step);
  }
  bp.params = project_recursive(bp, theta);
  return bp;
}

MarkingRun marking_objective(const DeepRnn& net, const Mesh& mesh0, double f, std::size_t max_elements,
                             EstimatorForm form) {
  MarkingRun run;
  Mesh mesh = mesh0;
  for (int step = 0;; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const ElementField src = constant_source(mesh, f);
    const FemSolution sol = solve_poisson(mesh, src);
    const std::vector<double> rho_sq = residual_estimator(mesh, sol.nodal, src, form);
    ConvergenceRecord rec;
    rec.step = step;
    rec.n_elements = mesh.num_elements();
    rec.estimator = std::sqrt(std::accumulate(rho_sq.begin(), rho_sq.end(), 0.0));
    rec.energy = energy_norm_sq(mesh, sol.nodal);
    run.objective = rec.energy;
    if (mesh.num_elements() > max_elements) {
      rec.time_ms = seconds_to_ms(std::chrono::steady_clock::now() - t0);
      run.records.push_back(rec);
      break;
    }
    std::vector<double> rho(rho_sq.size());
    std::transform(rho_sq.begin(), rho_sq.end(), rho.begin(), [](double v) { return std::sqrt(v); });
    const std::vector<ElementId> marked = blueprint_mark(net, rho);
    rec.time_ms = seconds_to_ms(std::chrono::steady_clock::now() - t0);
    run.records.push_back(rec);
    if (marked.empty()) {
      run.objective = kMarkingPenalty;
      run.penalized = true;
      break;
    }
    mesh = refine_nvb(mesh, marked);
  }
  run.final_mesh = std::move(mesh);
  return run;
}

Sequence job_features(const Mesh& mesh, std::span<const double> nodal, std::span<const double> source) {
  if (source.size() != mesh.num_elements()) throw ValidationError("source needs one value per element");
  const std::size_t n = mesh.num_elements();
  std::vector<std::array<double, 2>> grad(n);
  for (std::size_t e = 0; e < n; ++e) grad[e] = element_gradient(mesh, static_cast<ElementId>(e), nodal);
  const auto nb = edge_neighbors(mesh);
  Sequence x(n, kJobFeatures);
  for (std::size_t e = 0; e < n; ++e) {
    auto row = x[e];
    row[0] = grad[e][0];
    row[1] = grad[e][1];
    for (int j = 0; j < 3; ++j) {
      const std::int64_t o = nb[e][j];
      const auto& g = o == kNoNeighbor ? grad[e] : grad[static_cast<std::size_t>(o)];
      row[2 + 2 * j] = g[0];
      row[3 + 2 * j] = g[1];
    }
    const auto c = mesh.corners(static_cast<ElementId>(e));
    for (int k = 0; k < 3; ++k) {
      row[8 + 2 * k] = c[k].x;
      row[9 + 2 * k] = c[k].y;
    }
    row[14] = source[e];
  }
  return x;
}

Blueprint job_blueprint(std::uint64_t seed) {
  Blueprint bp;
  StageShape b;
  b.sizes = {kJobFeatures + 1, 10, 10, 10};
  b.feedback = {0};
  b.bias = true;
  StageShape b2;
  b2.sizes = {11, 10, 1};
  b2.feedback = {0};
  b2.bias = true;
  bp.stages = {b, b2};
  std::mt19937_64 gen(seed);
  for (const auto& s : bp.stages) {
    for (std::size_t l = 0; l + 1 < s.sizes.size(); ++l) {
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(s.sizes[l])));
      const std::size_t count = s.sizes[l + 1] * (s.sizes[l] + 1);
      for (std::size_t i = 0; i < count; ++i) bp.params.push_back(dist(gen));
    }
  }
  return bp;
}

std::vector<ElementId> top_elements(std::span<const double> values, std::size_t count) {
  std::vector<ElementId> order(values.size());
  std::iota(order.begin(), order.end(), ElementId{0});
  count = std::min(count, order.size());
  auto key = [&](ElementId i) { return std::isnan(values[i]) ? -std::numeric_limits<double>::infinity() : values[i]; };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                    [&](ElementId a, ElementId b) { return key(a) != key(b) ? key(a) > key(b) : a < b; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

JobResult train_on_the_job(const Mesh& mesh0, Blueprint bp, const JobConfig& config) {
  if (config.steps < 0 || config.n_train < 0) throw ValidationError("steps and n_train must be nonnegative");
  if (bp.params.size() != bp.parameter_count()) throw ValidationError("parameter vector does not match the blueprint");
  std::mt19937_64 gen(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  JobResult res;
  Mesh mesh = mesh0;
  double scale = config.scale;
  for (int step = 0;; ++step) {
    const ElementField src = constant_source(mesh, config.f);
    const FemSolution sol = solve_poisson(mesh, src);
    const std::vector<double> rho_sq = residual_estimator(mesh, sol.nodal, src);
    JobRecord rec;
    rec.step = step;
    rec.n_elements = mesh.num_elements();
    rec.energy = energy_norm_sq(mesh, sol.nodal);
    rec.estimator = std::sqrt(std::accumulate(rho_sq.begin(), rho_sq.end(), 0.0));
    rec.candidate_best = std::numeric_limits<double>::quiet_NaN();
    if (step == config.steps) {
      res.records.push_back(rec);
      break;
    }

    const Sequence x = job_features(mesh, sol.nodal, src);
    const std::size_t count = (mesh.num_elements() + 4) / 5;
    auto select = [&](std::span<const double> params) {
      const Sequence y = eval_deep_rnn(instantiate(bp, params), x);
      return top_elements(y.channel(0), count);
    };
    if (config.n_train > 0) {
      auto trial_energy = [&](std::span<const double> params) {
        const Mesh trial = refine_nvb(mesh, select(params));
        const ElementField tsrc = constant_source(trial, config.f);
        return energy_norm_sq(trial, solve_poisson(trial, tsrc).nodal);
      };
      // the incumbent competes with its perturbations; slot 0 is the incumbent
      std::vector<std::vector<double>> cands(static_cast<std::size_t>(config.n_train) + 1, bp.params);
      for (std::size_t k = 1; k < cands.size(); ++k)
        for (double& w : cands[k]) w += scale * normal(gen);
      std::vector<double> energies(cands.size());
      const std::size_t workers = std::clamp<std::size_t>(config.threads, 1, cands.size());
      std::atomic<std::size_t> next{0};
      std::exception_ptr failure;
      std::mutex failure_mutex;
      auto work = [&] {
        for (std::size_t k; (k = next++) < cands.size();) {
          try {
            energies[k] = trial_energy(cands[k]);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      };
      {
        std::vector<std::jthread> pool;
        for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
        work();
      }
      if (failure) std::rethrow_exception(failure);
      std::size_t best_k = 0;
      for (std::size_t k = 1; k < cands.size(); ++k)
        if (energies[k] > energies[best_k]) best_k = k;
      const std::vector<double>& best = cands[best_k];
      const double best_energy = energies[best_k];
      bp.params = project_recursive(bp, best);
      rec.candidate_best = best_energy;
    }
    res.records.push_back(rec);
    mesh = refine_nvb(mesh, select(bp.params));
    scale *= config.decay;
  }
  res.blueprint = std::move(bp);
  res.final_mesh = std::move(mesh);
  return res;
}

void write_job_csv(std::ostream& out, std::span<const JobRecord> records) {
  out << "step,n_elements,energy,estimator,candidate_best_objective\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : records)
    out << r.step << ',' << r.n_elements << ',' << r.energy << ',' << r.estimator << ',' << r.candidate_best << '\n';
}

}  // namespace rnnafem
