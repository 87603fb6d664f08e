#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rnnafem/mesh.hpp"

namespace rnnafem {

struct ConvergenceRecord {
  int step = 0;
  std::size_t n_elements = 0;
  double estimator = 0;  // sqrt of the summed squared indicators
  double energy = 0;     // |U|_{H^1}^2
  double time_ms = 0;
};

inline constexpr const char* kConvergenceHeader = "step,n_elements,estimator,energy,time_ms";

void write_csv(std::ostream& out, std::span<const ConvergenceRecord> records);
std::vector<ConvergenceRecord> read_csv(std::istream& in);
void emit_csv(std::span<const ConvergenceRecord> records, const std::filesystem::path& path);

/// One polygon per element; fill by `field` (one value per element) when given.
void write_svg(std::ostream& out, const Mesh& mesh, std::span<const double> field = {});
void emit_svg(const Mesh& mesh, std::span<const double> field, const std::filesystem::path& path);

struct RateFit {
  double slope = 0;
  double intercept = 0;
  std::size_t points = 0;
};

/// Least squares of log10(estimator) against log10(#T) over records with
/// #T >= min_elements.
RateFit fit_rate(std::span<const ConvergenceRecord> records, std::size_t min_elements = 1000);

/// Flat key=value text; '#' starts a comment, blank lines are skipped.
std::map<std::string, std::string> read_key_values(std::istream& in);

}  // namespace rnnafem
