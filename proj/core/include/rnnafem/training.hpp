#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "rnnafem/fem.hpp"
#include "rnnafem/mesh.hpp"
#include "rnnafem/network.hpp"
#include "rnnafem/report.hpp"

namespace rnnafem {

/// One trainable basic RNN. sizes = (s_0, ..., s_L) where s_0 counts the
/// fed-back components; the dense matrices are s_{l+1} x s_l (+1 bias column).
struct StageShape {
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> feedback;  // previous-output components read by the first layer
  bool bias = false;
  bool relu_output = false;
  /// If set, a fixed stage in front of this one replaces the input sequence
  /// by (x_i[0..keep), x_n[component]).
  struct Broadcast {
    std::size_t keep = 0;
    std::size_t component = 0;
  };
  std::optional<Broadcast> broadcast;

  std::size_t input_size() const { return sizes.front() - feedback.size(); }
  std::size_t output_size() const { return sizes.back(); }
  std::size_t parameter_count() const;
};

struct Blueprint {
  std::vector<StageShape> stages;
  std::vector<double> params;  // stage by stage, layer by layer, row-major
  bool restrict_recursive = false;

  std::size_t parameter_count() const;
  /// Positions in `params` of weights that read the previous output.
  std::vector<std::size_t> recursive_indices() const;
};

/// Rounds recursive weights to {-1, 0, 1} when the blueprint asks for it.
void project_recursive(Blueprint& bp);
std::vector<double> project_recursive(const Blueprint& bp, std::span<const double> params);

DeepRnn instantiate(const Blueprint& bp);
DeepRnn instantiate(const Blueprint& bp, std::span<const double> params);

/// B1: (x_i, y_{i-1,2}) -> 3 -> 2 with feedback of component 2; B2 after a
/// broadcast of y_{n,2}: 2 -> 1 with ReLU output. Parameters zero.
Blueprint maxstrategy_shape();
/// Hand weights realising the maximum strategy: output > 0 iff marked.
Blueprint maxstrategy_blueprint(double theta = 0.5);
/// Weights found by SPSA in the reference experiment.
Blueprint fixture_blueprint();

/// Marks i with output > 0.
std::vector<ElementId> blueprint_mark(const DeepRnn& net, std::span<const double> indicators);

struct SpsaConfig {
  double a = 0.1;
  double c = 0.1;
  double A = 10.0;
  double alpha = 0.602;
  double gamma = 0.101;
  int iterations = 100;
  std::uint64_t seed = 0;
};

struct SpsaStep {
  int iteration = 0;
  double plus = 0;
  double minus = 0;
};

/// Maximises `objective` from bp.params with Rademacher perturbations. The
/// iterate stays continuous; every evaluation and the result are projected.
Blueprint spsa_optimize(Blueprint bp, const std::function<double(std::span<const double>)>& objective,
                        const SpsaConfig& config, const std::function<void(const SpsaStep&)>& on_step = {});

inline constexpr double kMarkingPenalty = -1e6;

struct MarkingRun {
  double objective = 0;  // final energy, or kMarkingPenalty
  bool penalized = false;
  std::vector<ConvergenceRecord> records;
  Mesh final_mesh;
};

/// Adaptive loop with the blueprint network as the marking step, fed the
/// unsquared indicators; refines while #T <= max_elements and returns the
/// energy of the last solution.
MarkingRun marking_objective(const DeepRnn& net, const Mesh& mesh0, double f, std::size_t max_elements,
                             EstimatorForm form = EstimatorForm::classical);

/// Per-element features: grad U on the element and its three edge neighbours
/// (own gradient for boundary edges), vertex coordinates, f at the midpoint.
inline constexpr std::size_t kJobFeatures = 15;
Sequence job_features(const Mesh& mesh, std::span<const double> nodal, std::span<const double> source);

/// B: (16, 10, 10, 10) and B': (11, 10, 1), each reading the first component
/// of its previous output, with biases; weights drawn from the seed.
Blueprint job_blueprint(std::uint64_t seed);

/// Indices of the `count` largest values, ties to the smaller index.
std::vector<ElementId> top_elements(std::span<const double> values, std::size_t count);

struct JobConfig {
  int steps = 15;
  int n_train = 50;
  double scale = 0.1;
  double decay = 0.95;
  double f = 1.0;
  std::uint64_t seed = 0;
  int threads = 1;  // candidate evaluations in parallel; results do not depend on it
};

struct JobRecord {
  int step = 0;
  std::size_t n_elements = 0;
  double energy = 0;
  double estimator = 0;
  double candidate_best = 0;  // trial energy of the kept weights, NaN without training
};

struct JobResult {
  std::vector<JobRecord> records;
  Blueprint blueprint;
  Mesh final_mesh;
};

JobResult train_on_the_job(const Mesh& mesh0, Blueprint bp, const JobConfig& config);

void write_job_csv(std::ostream& out, std::span<const JobRecord> records);

}  // namespace rnnafem
