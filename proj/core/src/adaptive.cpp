#include "rnnafem/adaptive.hpp"

#include <algorithm>
#include <cmath>

#include "rnnafem/errors.hpp"
#include "rnnafem/marking.hpp"

namespace rnnafem {

DeepRnn build_adaptive(const AdaptiveParams& params, BlockOptions opt) {
  if (!(params.theta > 0.0 && params.theta < 1.0)) throw ValidationError("theta must lie in (0, 1)");
  if (!(params.eps > 0.0)) throw ValidationError("eps must be positive");
  if (!(params.eps_tol >= 0.0)) throw ValidationError("eps_tol must be nonnegative");
  if (params.n < 1 || params.k < 1) throw ValidationError("n and k must be positive");

  DeepRnn net = single_stage(build_estimator(params.n, opt));
  net.append(build_binary(params.theta, params.k, opt));
  append_mark_stages(net, params.theta, opt);

  NetBuilder nb(kMarkWidth + kAdaptWidth);
  const Signal mark = nb.nonneg_input(kMarkY);
  const Signal slack = nb.lin({{1.0, nb.nonneg_input(kMarkT)}}, -params.eps_tol * params.eps_tol);
  const Signal excess = nb.relu(nb.lin({{1.0, mark}, {-1.0, slack}}));
  const Signal y = nb.lin({{1.0, mark}, {-1.0, excess}});
  net.push(BasicRnn(nb.build({y, nb.nonneg_input(kMarkSnapped), nb.nonneg_input(kMarkT)}), kMarkWidth, kAdaptWidth));
  return net;
}

AdaptiveParams adaptive_params_for(std::size_t elements, double theta, double eps, double eps_tol,
                                   double max_bound) {
  AdaptiveParams p;
  p.theta = theta;
  p.eps = eps;
  p.eps_tol = eps_tol;
  p.n = estimator_accuracy(elements, eps);
  p.k = mark_iterations(max_bound, std::max<std::size_t>(elements, 1), eps);
  return p;
}

AdaptiveStep run_adaptive_network(const DeepRnn& net, const Sequence& inputs) {
  if (net.stages.empty() || net.output_size() != kAdaptWidth)
    throw ValidationError("not an ADAPTIVE network");
  AdaptiveStep step;
  // the estimator stage is evaluated separately to expose its output
  const Sequence rho = eval_basic_rnn(net.stages.front(), inputs);
  DeepRnn tail;
  for (std::size_t s = 1; s < net.stages.size(); ++s)
    tail.push(net.stages[s], s == 1 ? Wiring::plain : net.wiring[s]);
  const Sequence out = eval_deep_rnn(tail, rho);

  const std::size_t n = inputs.length();
  step.indicators = rho.channel(0);
  step.snapped = out.channel(kAdaptSnapped);
  for (std::size_t i = 0; i < n; ++i) {
    if (out[i][kAdaptY] > 0.0) step.marked.push_back(static_cast<ElementId>(i));
  }
  step.total = n > 0 ? out[n - 1][kAdaptTotal] : 0.0;
  step.stop = step.marked.empty();
  return step;
}

}  // namespace rnnafem
