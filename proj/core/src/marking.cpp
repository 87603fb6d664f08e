#include "rnnafem/marking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

void check_theta(double theta) {
  if (!(theta > 0 && theta <= 1)) throw ValidationError("marking: theta must lie in (0, 1]");
}

void check_values(std::span<const double> v) {
  for (double x : v)
    if (!(x >= 0) || !std::isfinite(x)) throw ValidationError("marking: indicators must be finite and nonnegative");
}

// Decreasing value, earliest index first among equals.
std::vector<std::size_t> descending_order(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return order;
}

// Running sums in index order, matching the network's accumulation.
double sum_in_order(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

std::vector<std::size_t> doerfler_mark(std::span<const double> rho_sq, double theta) {
  check_theta(theta);
  check_values(rho_sq);
  const double total = sum_in_order(rho_sq);
  std::vector<std::size_t> marked;
  if (total <= 0) return marked;
  const double target = theta * total;
  double acc = 0;
  for (std::size_t i : descending_order(rho_sq)) {
    marked.push_back(i);
    acc += rho_sq[i];
    if (acc >= target) break;
  }
  return marked;
}

std::vector<std::size_t> maximum_strategy_mark(std::span<const double> values, double theta) {
  check_theta(theta);
  check_values(values);
  std::vector<std::size_t> marked;
  if (values.empty()) return marked;
  const double cut = (1 - theta) * *std::max_element(values.begin(), values.end());
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] > cut) marked.push_back(i);
  return marked;
}

int mark_iterations(double max_value, std::size_t n, double eps) {
  if (!(eps > 0)) throw ValidationError("mark_iterations: eps must be positive");
  if (n == 0 || !(max_value > 0)) return 1;
  const double bits = std::log2(max_value * static_cast<double>(n) / eps);
  return std::max(1, static_cast<int>(std::ceil(bits)) + 1);
}

PerturbedMarking perturbed_doerfler_with_iterations(std::span<const double> x, double theta, int k) {
  check_theta(theta);
  check_values(x);
  PerturbedMarking out;
  out.snapped.assign(x.begin(), x.end());
  if (x.empty()) return out;

  double max_value = 0;
  for (double v : x) max_value = std::max(max_value, v);
  const double total = sum_in_order(x);
  const double target = theta * total;

  double y = 0.5 * max_value;
  double z = 0.25 * max_value;
  for (int it = 0; it < k; ++it) {
    double s = 0;
    for (double v : x)
      if (v >= y) s += v;
    if (s < target) {
      y -= z;
    } else {
      y += z;
    }
    z *= 0.5;
  }
  const double hi = y + 2 * z;
  const double lo = y - 2 * z;
  out.band_low = lo;
  out.band_high = hi;
  for (double& v : out.snapped)
    if (v >= lo && v <= hi) v = hi;

  // Entries above the cutoff hi are all taken; ties at hi are taken in index
  // order until the snapped Doerfler condition holds.
  const double snapped_total = sum_in_order(out.snapped);
  const double snapped_target = theta * snapped_total;
  double above = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (out.snapped[i] > hi) {
      above += out.snapped[i];
      out.marked.push_back(i);
    }
  }
  double ties = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (out.snapped[i] != hi) continue;
    if (above + ties < snapped_target) out.marked.push_back(i);
    ties += out.snapped[i];
  }
  std::sort(out.marked.begin(), out.marked.end());
  return out;
}

PerturbedMarking perturbed_doerfler_oracle(std::span<const double> x, double theta, double eps) {
  if (eps == 0) {
    PerturbedMarking out;
    out.marked = doerfler_mark(x, theta);
    std::sort(out.marked.begin(), out.marked.end());
    out.snapped.assign(x.begin(), x.end());
    return out;
  }
  double max_value = 0;
  for (double v : x) max_value = std::max(max_value, v);
  return perturbed_doerfler_with_iterations(x, theta, mark_iterations(max_value, x.size(), eps));
}

}  // namespace rnnafem
