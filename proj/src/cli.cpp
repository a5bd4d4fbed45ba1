#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "fedsim/error.hpp"
#include "fedsim/harness.hpp"

namespace fedsim {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Options {
  std::string config;
  std::string out;
  std::string format;
  std::string trace;
  std::vector<std::size_t> kshots;
};

void add_common(CLI::App* cmd, Options& opts) {
  cmd->add_option("--config", opts.config, "Experiment config (JSON)")->required();
  cmd->add_option("--out", opts.out, "Report path; '-' for stdout (default: config output)");
  cmd->add_option("--format", opts.format, "Report format")->check(CLI::IsMember({"json", "csv"}));
}

}  // namespace

int cli(int argc, const char* const* argv) {
  CLI::App app{"Federated foundation-model optimization simulator", "fedsim"};
  app.require_subcommand(1);
  Options opts;

  auto* run = app.add_subcommand("run", "Run one experiment");
  add_common(run, opts);
  run->add_option("--trace", opts.trace, "Write trial 0's network trace as JSON lines");

  auto* compare = app.add_subcommand("compare", "Run centralized, fl_only and ffm on shared data");
  add_common(compare, opts);

  auto* sweep = app.add_subcommand("sweep", "Repeat the experiment for several k-shot values");
  add_common(sweep, opts);
  sweep->add_option("--kshots", opts.kshots, "Comma-separated k values")
      ->required()
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "fedsim: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    const ExperimentConfig config = load_config(opts.config);
    const std::string format = opts.format.empty() ? config.format : opts.format;
    const std::string out = opts.out.empty() ? config.output : opts.out;

    ReportBundle bundle;
    bundle.config = config.source;
    if (run->parsed()) {
      bundle.command = "run";
      bundle.entries.push_back(run_experiment(config));
      if (!opts.trace.empty()) {
        std::ofstream trace(opts.trace, std::ios::binary | std::ios::trunc);
        if (!trace) throw std::runtime_error("cannot write trace to '" + opts.trace + "'");
        write_trace_jsonl(bundle.entries.front().trials.front().history.trace, trace);
      }
    } else if (compare->parsed()) {
      bundle.command = "compare";
      bundle.entries = run_compare(config);
    } else {
      bundle.command = "sweep";
      bundle.entries = run_sweep(config, opts.kshots);
    }
    emit(bundle, format, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "fedsim: config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "fedsim: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace fedsim
