#include <doctest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "rnnafem/errors.hpp"
#include "rnnafem/experiments.hpp"
#include "rnnafem/report.hpp"

using namespace rnnafem;

namespace {

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("config from key/value text") {
  std::istringstream in(
      "# comment\n"
      "command = adapt-classical\n"
      "\n"
      "domain=z_shape\n"
      "theta = 0.3\n"
      "max_elements = 1234\n"
      "form = diam_inf\n");
  const auto kv = read_key_values(in);
  CHECK(kv.size() == 5);
  const ExperimentConfig c = config_from_key_values(kv);
  CHECK(c.command == "adapt-classical");
  CHECK(c.domain == DomainName::z_shape);
  CHECK(c.theta == 0.3);
  CHECK(c.max_elements == 1234);
  CHECK(c.form == EstimatorForm::diam_inf);
  CHECK(c.eps == 1e-6);

  CHECK_THROWS_AS(config_from_key_values({{"thetaa", "0.5"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"theta", "0.5x"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"theta", "0"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"theta", "1.5"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"domain", "moon"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"eps", "-1"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"command", "adapt-rnn"}, {"eps", "0"}}), ValidationError);
  CHECK_THROWS_AS(config_from_key_values({{"max_elements", "-3"}}), ValidationError);

  std::istringstream broken("theta 0.5\n");
  CHECK_THROWS_AS(read_key_values(broken), ValidationError);
}

TEST_CASE("command defaults") {
  for (const DomainName d : {DomainName::unit_square, DomainName::l_shape, DomainName::z_shape})
    CHECK(parse_domain(domain_name(d)) == d);
  CHECK(default_domain("train-on-the-job") == DomainName::z_shape);
  CHECK(default_domain("adapt-classical") == DomainName::l_shape);

  ExperimentConfig c;
  c.command = "train-on-the-job";
  CHECK(initial_mesh(c).num_elements() == 16 * make_initial_mesh(DomainName::z_shape).num_elements());
  c.initial_refinements = 0;
  CHECK(initial_mesh(c).num_elements() == make_initial_mesh(DomainName::z_shape).num_elements());
  c.command = "adapt-classical";
  c.initial_refinements = -1;
  CHECK(initial_mesh(c).num_elements() == 6);
}

TEST_CASE("convergence CSV round trip") {
  std::vector<ConvergenceRecord> rs = {{0, 6, 0.5, 0.1, 1.25}, {1, 14, 1.0 / 3.0, 0.12345678901234567, 2.0}};
  std::stringstream io;
  write_csv(io, rs);
  CHECK(io.str().rfind(std::string(kConvergenceHeader) + "\n", 0) == 0);
  const auto back = read_csv(io);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].step == rs[i].step);
    CHECK(back[i].n_elements == rs[i].n_elements);
    CHECK(back[i].estimator == rs[i].estimator);
    CHECK(back[i].energy == rs[i].energy);
    CHECK(back[i].time_ms == rs[i].time_ms);
  }

  std::ostringstream empty;
  write_csv(empty, std::vector<ConvergenceRecord>{});
  CHECK(empty.str() == std::string(kConvergenceHeader) + "\n");
}

TEST_CASE("SVG has one polygon per element") {
  std::ostringstream svg;
  write_svg(svg, l_shape());
  CHECK(count_of(svg.str(), "<polygon") == 6);
  std::ostringstream shaded;
  const std::vector<double> field = {1, 2, 3, 4, 5, 6};
  write_svg(shaded, l_shape(), field);
  CHECK(count_of(shaded.str(), "<polygon") == 6);
}

TEST_CASE("rate fit") {
  std::vector<ConvergenceRecord> rs;
  for (int k = 0; k < 6; ++k) {
    ConvergenceRecord r;
    r.n_elements = static_cast<std::size_t>(100 * std::pow(4, k));
    r.estimator = 3.0 * std::pow(static_cast<double>(r.n_elements), -0.5);
    rs.push_back(r);
  }
  const RateFit fit = fit_rate(rs);
  CHECK(fit.points == 4);
  CHECK(fit.slope == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(fit.intercept == doctest::Approx(std::log10(3.0)).epsilon(1e-12));
  CHECK_THROWS_AS(fit_rate(rs, 1000000), ValidationError);
}

TEST_CASE("adaptive drivers") {
  ExperimentConfig c;
  c.command = "adapt-classical";
  c.max_elements = 400;
  const ExperimentResult classical = run_adapt_classical(c);
  REQUIRE(classical.records.size() >= 2);
  CHECK(classical.records.back().n_elements >= 400);
  CHECK(classical.records.back().n_elements == classical.final_mesh.num_elements());
  CHECK(classical.final_indicators.size() == classical.final_mesh.num_elements());
  for (std::size_t i = 1; i < classical.records.size(); ++i)
    CHECK(classical.records[i].time_ms >= classical.records[i - 1].time_ms);

  c.eps_tol = 1e3;
  CHECK(run_adapt_classical(c).records.size() == 1);

  c.command = "uniform";
  c.eps_tol = 0;
  c.max_elements = 384;
  const ExperimentResult uni = run_uniform(c);
  REQUIRE(uni.records.size() == 4);
  CHECK(uni.records.back().n_elements == 384);

  c.command = "adapt-rnn";
  c.max_elements = 300;
  std::ostringstream log;
  const RnnResult rnn = run_adapt_rnn(c, &log);
  CHECK(rnn.checks.size() == rnn.records.size());
  for (const auto& chk : rnn.checks) {
    CHECK(chk.network_marked > 0);
    if (chk.in_band == 0) CHECK(chk.differing == 0);
  }
  c.eps_tol = 1e3;
  CHECK(run_adapt_rnn(c).records.size() == 1);
}

TEST_CASE("job gap interpolates the uniform curve") {
  JobExperiment run;
  run.learned_records = {{0, 1000, 0.2, 0, 0}, {1, 2000, 0.1, 0, 0}, {2, 4000, 0.05, 0, 0}};
  run.uniform_records = {{0, 1000, 0.4, 0, 0}, {1, 16000, 0.1, 0, 0}};
  const JobGap g = job_gap(run);
  CHECK(g.n_elements == 4000);
  CHECK(g.learned_estimator == 0.05);
  CHECK(g.uniform_estimator == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(g.learned_slope == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(g.uniform_slope == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("mark check CSV") {
  const std::vector<MarkCheck> checks = {{0, 3, 3, 0, 0}, {1, 5, 4, 1, 2}};
  std::ostringstream out;
  write_mark_checks_csv(out, checks);
  CHECK(count_of(out.str(), "\n") == 3);
}
