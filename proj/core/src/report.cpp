#include "rnnafem/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_csv(std::ostream& out, std::span<const ConvergenceRecord> records) {
  out << kConvergenceHeader << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : records)
    out << r.step << ',' << r.n_elements << ',' << r.estimator << ',' << r.energy << ',' << r.time_ms << '\n';
}

std::vector<ConvergenceRecord> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kConvergenceHeader)
    throw ValidationError("convergence CSV: unexpected header");
  std::vector<ConvergenceRecord> records;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream row(line);
    ConvergenceRecord r;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(row >> r.step >> c1 >> r.n_elements >> c2 >> r.estimator >> c3 >> r.energy >> c4 >> r.time_ms) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw ValidationError("convergence CSV: malformed row '" + line + "'");
    records.push_back(r);
  }
  return records;
}

void emit_csv(std::span<const ConvergenceRecord> records, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  write_csv(out, records);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_svg(std::ostream& out, const Mesh& mesh, std::span<const double> field) {
  if (!field.empty() && field.size() != mesh.num_elements())
    throw ValidationError("SVG field needs one value per element");
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0;
  double x1 = -x0, y1 = -x0;
  for (const auto& p : mesh.vertices) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  if (mesh.vertices.empty()) x0 = y0 = x1 = y1 = 0;
  const double w = std::max(x1 - x0, 1e-12);
  const double h = std::max(y1 - y0, 1e-12);
  const double pad = 0.02 * std::max(w, h);
  const double stroke = 0.002 * std::max(w, h);

  double lo = 0, hi = 1;
  if (!field.empty()) {
    lo = *std::min_element(field.begin(), field.end());
    hi = *std::max_element(field.begin(), field.end());
  }
  out << std::setprecision(10);
  // y is flipped so the picture has the usual orientation
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << x0 - pad << ' ' << -y1 - pad << ' '
      << w + 2 * pad << ' ' << h + 2 * pad << "\">\n";
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto c = mesh.corners(static_cast<ElementId>(e));
    std::string fill = "none";
    if (!field.empty()) {
      const double t = hi > lo ? (field[e] - lo) / (hi - lo) : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      std::ostringstream f;
      f << "rgb(255," << shade << ',' << shade << ')';
      fill = f.str();
    }
    out << "<polygon points=\"" << c[0].x << ',' << -c[0].y << ' ' << c[1].x << ',' << -c[1].y << ' ' << c[2].x
        << ',' << -c[2].y << "\" fill=\"" << fill << "\" stroke=\"black\" stroke-width=\"" << stroke << "\"/>\n";
  }
  out << "</svg>\n";
}

void emit_svg(const Mesh& mesh, std::span<const double> field, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  write_svg(out, mesh, field);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

RateFit fit_rate(std::span<const ConvergenceRecord> records, std::size_t min_elements) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  RateFit fit;
  for (const auto& r : records) {
    if (r.n_elements < min_elements || !(r.estimator > 0)) continue;
    const double x = std::log10(static_cast<double>(r.n_elements));
    const double y = std::log10(r.estimator);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++fit.points;
  }
  if (fit.points < 2) throw ValidationError("rate fit needs at least two records above the element threshold");
  const double n = static_cast<double>(fit.points);
  const double det = n * sxx - sx * sx;
  if (!(det > 0)) throw ValidationError("rate fit: all records have the same element count");
  fit.slope = (n * sxy - sx * sy) / det;
  fit.intercept = (sy - fit.slope * sx) / n;
  return fit;
}

std::map<std::string, std::string> read_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace rnnafem
