// Experiment driver: one subcommand per pipeline, CSV and SVG into the output directory.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rnnafem/errors.hpp"
#include "rnnafem/experiments.hpp"
#include "rnnafem/report.hpp"

namespace fs = std::filesystem;
using namespace rnnafem;

namespace {

constexpr const char* kOutputDirEnv = "RNNAFEM_OUTPUT_DIR";

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void print_rate(const char* label, const std::vector<ConvergenceRecord>& records) {
  const auto& last = records.back();
  std::cout << label << ": " << records.size() << " steps, #T " << last.n_elements << ", estimator "
            << last.estimator;
  try {
    const RateFit fit = fit_rate(records);
    std::cout << ", slope " << fit.slope << " over " << fit.points << " points";
  } catch (const ValidationError&) {
    std::cout << ", too few points above 10^3 for a slope";
  }
  std::cout << '\n';
}

void emit_run(const ExperimentResult& r, const fs::path& dir) {
  emit_csv(r.records, dir / "convergence.csv");
  emit_svg(r.final_mesh, r.final_indicators, dir / "mesh.svg");
}

int run(const ExperimentConfig& cfg) {
  const fs::path& dir = cfg.output_dir;
  const std::string& cmd = cfg.command;
  if (cmd == "adapt-classical") {
    const auto r = run_adapt_classical(cfg);
    emit_run(r, dir);
    print_rate("adapt-classical", r.records);
  } else if (cmd == "uniform") {
    const auto r = run_uniform(cfg);
    emit_run(r, dir);
    print_rate("uniform", r.records);
  } else if (cmd == "adapt-rnn") {
    const auto r = run_adapt_rnn(cfg, &std::cout);
    emit_run(r, dir);
    auto out = open_output(dir / "mark_checks.csv");
    write_mark_checks_csv(out, r.checks);
    print_rate("adapt-rnn", r.records);
  } else if (cmd == "greedy" || cmd == "greedy-stochastic") {
    const bool stochastic = cmd == "greedy-stochastic";
    const auto r = run_greedy(cfg, stochastic);
    emit_svg(r.greedy_mesh, {}, dir / "greedy_mesh.svg");
    std::cout << "greedy: #T " << r.greedy_mesh.num_elements() << '\n';
    if (stochastic) {
      emit_svg(r.stochastic.mesh, {}, dir / "stochastic_mesh.svg");
      auto out = open_output(dir / "generations.csv");
      write_generation_csv(out, r.stochastic.trace);
      std::cout << "stochastic: #T " << r.stochastic.mesh.num_elements() << ", " << r.stochastic.trace.size()
                << " generations, " << r.stochastic.stop_set.size() << " stopped\n";
    }
  } else if (cmd == "train-maxstrategy") {
    const auto r = run_train_maxstrategy(cfg);
    emit_run(r, dir);
    if (!r.spsa.empty()) {
      auto out = open_output(dir / "spsa.csv");
      out << "iteration,objective_plus,objective_minus\n";
      for (const auto& s : r.spsa) out << s.iteration << ',' << s.plus << ',' << s.minus << '\n';
    }
    auto out = open_output(dir / "weights.txt");
    out.precision(17);
    for (double w : r.blueprint.params) out << w << '\n';
    print_rate("train-maxstrategy", r.records);
  } else if (cmd == "train-on-the-job") {
    const auto r = run_train_on_the_job(cfg);
    {
      auto out = open_output(dir / "training.csv");
      write_job_csv(out, r.learned.records);
    }
    emit_csv(r.learned_records, dir / "learned.csv");
    emit_csv(r.uniform_records, dir / "uniform.csv");
    emit_svg(r.learned.final_mesh, {}, dir / "mesh.svg");
    print_rate("learned", r.learned_records);
    print_rate("uniform", r.uniform_records);
    const JobGap gap = job_gap(r);
    std::cout << "at #T " << gap.n_elements << ": learned " << gap.learned_estimator << ", uniform "
              << gap.uniform_estimator << "; slope gap " << gap.uniform_slope - gap.learned_slope << '\n';
  } else if (cmd == "verify-blocks") {
    const auto checks = verify_blocks(cfg.seed, 10000);
    auto out = open_output(dir / "blocks.csv");
    write_block_checks_csv(out, checks);
    bool all = true;
    for (const auto& c : checks) {
      std::cout << c.block << " n=" << c.n << " max error " << c.max_error << " bound " << c.bound
                << (c.ok() ? "" : "  EXCEEDED") << '\n';
      all = all && c.ok();
    }
    if (!all) throw NumericalError("block error above its bound", 0.0);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive FEM and recurrent-network marking experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path;
  // string-valued so that config-file values can be overlaid before parsing
  std::map<std::string, std::string> flags;
  const std::vector<std::pair<std::string, std::string>> keys = {
      {"domain", "unit_square, l_shape or z_shape"},
      {"theta", "Doerfler bulk parameter"},
      {"eps", "marking perturbation budget (adapt-rnn)"},
      {"eps_tol", "stop once the estimator is at most this"},
      {"max_elements", "stop once #T reaches this"},
      {"seed", "RNG seed"},
      {"output_dir", "directory for CSV and SVG output"},
      {"form", "estimator form: classical or diam_inf"},
      {"source", "constant right-hand side f"},
      {"threads", "worker threads for candidate evaluation"},
      {"initial_refinements", "uniform refinements of the initial mesh"},
      {"tol", "greedy tolerance on eta"},
      {"samples", "draws per element and generation"},
      {"mc_points", "Monte Carlo points per draw"},
      {"steps", "outer training steps"},
      {"n_train", "perturbations tried per training step"},
      {"spsa_iterations", "0 uses the reference weights"},
      {"train_elements", "element budget of each SPSA objective evaluation"},
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"adapt-classical", "solve, estimate, Doerfler-mark, refine"},
      {"adapt-rnn", "same loop with estimate and mark done by the ADAPTIVE network"},
      {"uniform", "uniform refinement baseline"},
      {"greedy", "deterministic greedy refinement of a gradient surrogate"},
      {"greedy-stochastic", "greedy plus its Monte Carlo variant"},
      {"train-maxstrategy", "learned maximum strategy as the marking step"},
      {"train-on-the-job", "train a marking network during refinement"},
      {"verify-blocks", "SQUARE and MULTIPLY errors against their bounds"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "key=value config file")->check(CLI::ExistingFile);
    for (const auto& [key, key_help] : keys) sub->add_option("--" + key, flags[key], key_help);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      kv = read_key_values(in);
    }
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) kv["output_dir"] = env;
    const CLI::App* sub = app.get_subcommands().front();
    for (const auto& [key, value] : flags)
      if (sub->count("--" + key) > 0) kv[key] = value;
    kv["command"] = sub->get_name();
    return run(config_from_key_values(kv));
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << " (residual " << e.residual() << ")\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
