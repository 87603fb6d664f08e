#pragma once

#include <cstddef>
#include <vector>

#include "rnnafem/blocks.hpp"
#include "rnnafem/mesh.hpp"
#include "rnnafem/network.hpp"

namespace rnnafem {

struct AdaptiveParams {
  double theta = 0.5;
  double eps = 1e-6;      // perturbation budget of the marking
  double eps_tol = 0.0;   // stop once the total estimator is <= eps_tol^2
  int n = 40;             // ESTIMATOR accuracy
  int k = 40;             // BINARY repetitions
};

/// Output channels of ADAPTIVE.
inline constexpr std::size_t kAdaptY = 0, kAdaptSnapped = 1, kAdaptTotal = 2, kAdaptWidth = 3;

/// ESTIMATOR -> BINARY -> MARK -> stop test. Channel kAdaptY is
/// min(mark, S - eps_tol^2): positive exactly on marked elements while the
/// total S exceeds eps_tol^2.
DeepRnn build_adaptive(const AdaptiveParams& params, BlockOptions opt = {});

/// Parameters for a mesh with `elements` entries: n from the eps budget and
/// k large enough for indicators up to `max_bound`.
AdaptiveParams adaptive_params_for(std::size_t elements, double theta, double eps, double eps_tol,
                                   double max_bound);

struct AdaptiveStep {
  std::vector<ElementId> marked;
  std::vector<double> indicators;  // the network's estimator values
  std::vector<double> snapped;
  double total = 0;                // sum of indicators
  bool stop = false;
};

/// Evaluates ADAPTIVE on encoded data and decodes marks and stop signal.
AdaptiveStep run_adaptive_network(const DeepRnn& net, const Sequence& inputs);

}  // namespace rnnafem
