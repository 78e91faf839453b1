#include <aeqprop/cli/runner.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

int run_config(const std::string& path, bool force_suite) {
  using namespace aeqprop::cli;
  ExperimentConfig cfg;
  try {
    cfg = parse_config_file(path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  if (force_suite) {
    cfg.run_suite = true;
    if (cfg.kind == ExperimentKind::verify) force_suite = false;
  }
  try {
    const auto r = run_experiment(cfg);
    std::cout << r.summary.value("status", "ok") << " (config " << cfg.hash << ") -> " << cfg.output_dir << "\n";
    if (force_suite && r.summary.contains("theorem_suite") && !r.summary["theorem_suite"]["passed"].get<bool>())
      return kChecksFailed;
    return r.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Equilibrium-propagation simulator and verification lab"};
  app.require_subcommand(1);

  std::string run_path;
  auto* run = app.add_subcommand("run", "Run an experiment from a config file");
  run->add_option("config", run_path, "INI config file")->required();

  std::string verify_path;
  auto* verify = app.add_subcommand("verify", "Run the experiment and the theorem suite");
  verify->add_option("config", verify_path, "INI config file")->required();

  std::string trace_a, trace_b;
  aeqprop::cli::CompareOptions opts;
  auto* compare = app.add_subcommand("compare", "Compare the loss curves of two traces");
  compare->add_option("a", trace_a, "trace CSV")->required();
  compare->add_option("b", trace_b, "reference trace CSV")->required();
  compare->add_option("--window", opts.window, "smoothing window")->capture_default_str();
  compare->add_flag("--prefix", opts.prefix, "compare the common prefix of traces of unequal length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : aeqprop::cli::kConfigError;
  }

  try {
    if (*run) return run_config(run_path, false);
    if (*verify) return run_config(verify_path, true);
    if (*compare) {
      const auto report = aeqprop::cli::compare_traces(aeqprop::cli::read_trace_csv(trace_a),
                                                       aeqprop::cli::read_trace_csv(trace_b), opts);
      std::cout << report.dump(2) << "\n";
      return aeqprop::cli::kOk;
    }
  } catch (const aeqprop::cli::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return aeqprop::cli::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return aeqprop::cli::kConfigError;
  }
  return aeqprop::cli::kOk;
}
