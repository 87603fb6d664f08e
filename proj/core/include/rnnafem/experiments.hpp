#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rnnafem/fem.hpp"
#include "rnnafem/mesh.hpp"
#include "rnnafem/report.hpp"
#include "rnnafem/stochastic.hpp"
#include "rnnafem/training.hpp"

namespace rnnafem {

struct ExperimentConfig {
  std::string command;
  std::optional<DomainName> domain;  // unset: the command's default
  double theta = 0.5;
  double eps = 1e-6;        // marking perturbation budget
  double eps_tol = 0.0;     // stop once the estimator is <= eps_tol
  std::size_t max_elements = 20000;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  EstimatorForm form = EstimatorForm::classical;
  double source = 1.0;
  int threads = 1;
  int initial_refinements = -1;  // uniform refinements of the initial mesh; -1: the command's default

  double tol = 1e-3;  // greedy tolerance on eta
  int samples = 8;
  int mc_points = 1;

  int steps = 15;
  int n_train = 50;
  int spsa_iterations = 0;  // 0: use the reference weights
  std::size_t train_elements = 2000;
};

/// Keys match the ExperimentConfig fields; unknown keys are rejected.
ExperimentConfig config_from_key_values(const std::map<std::string, std::string>& kv);
DomainName parse_domain(const std::string& name);
std::string domain_name(DomainName d);
/// Checks the module preconditions; throws ValidationError.
void validate(const ExperimentConfig& cfg);

/// Z-shape for train-on-the-job, L-shape otherwise.
DomainName default_domain(const std::string& command);
/// 2 for train-on-the-job, 1 for train-maxstrategy, 0 otherwise.
int default_refinements(const std::string& command);
Mesh initial_mesh(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::vector<ConvergenceRecord> records;
  Mesh final_mesh;
  std::vector<double> final_indicators;  // squared, on final_mesh
};

ExperimentResult run_adapt_classical(const ExperimentConfig& cfg);
ExperimentResult run_uniform(const ExperimentConfig& cfg);

struct MarkCheck {
  int step = 0;
  std::size_t network_marked = 0;
  std::size_t classical_marked = 0;
  std::size_t differing = 0;  // symmetric difference
  std::size_t in_band = 0;    // classical indicators inside the snapping band
};

struct RnnResult : ExperimentResult {
  std::vector<MarkCheck> checks;
};

/// Estimate and mark by the ADAPTIVE network; each step is cross-checked
/// against Doerfler marking of the diam_inf-form estimator on the same mesh.
RnnResult run_adapt_rnn(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct GreedyReport {
  Mesh greedy_mesh;
  GreedyResult stochastic;  // empty unless requested
};

/// Corner-singularity surrogate; the stochastic variant is optional.
GreedyReport run_greedy(const ExperimentConfig& cfg, bool stochastic);

struct MaxStrategyResult : ExperimentResult {
  Blueprint blueprint;
  std::vector<SpsaStep> spsa;
};

/// Reference weights when spsa_iterations is 0, otherwise SPSA from a random
/// start with the objective budget train_elements.
MaxStrategyResult run_train_maxstrategy(const ExperimentConfig& cfg);

struct JobExperiment {
  JobResult learned;
  std::vector<ConvergenceRecord> learned_records;
  std::vector<ConvergenceRecord> uniform_records;
};

/// Learned curve plus a uniform curve on the same initial mesh, run until it
/// passes the learned element count.
JobExperiment run_train_on_the_job(const ExperimentConfig& cfg);

struct JobGap {
  std::size_t n_elements = 0;      // final learned count
  double learned_estimator = 0;
  double uniform_estimator = 0;    // log-log interpolation at n_elements
  double learned_slope = 0;
  double uniform_slope = 0;
};

/// Slopes over #T >= 10^3; the uniform curve is interpolated at the learned count.
JobGap job_gap(const JobExperiment& run);

struct BlockCheck {
  std::string block;
  int n = 0;
  double max_error = 0;
  double bound = 0;
  bool ok() const { return max_error <= bound; }
};

void write_mark_checks_csv(std::ostream& out, std::span<const MarkCheck> checks);
void write_block_checks_csv(std::ostream& out, std::span<const BlockCheck> checks);

/// SQUARE, scaled SQUARE and MULTIPLY against their error bounds on random points.
std::vector<BlockCheck> verify_blocks(std::uint64_t seed, std::size_t points);

}  // namespace rnnafem
