#include <CLI11.hpp>

#include <fstream>
#include <functional>
#include <iostream>
#include <string>

#include "tpfuse/experiment.hpp"

namespace {

constexpr int kExitVerificationFailed = 1;
constexpr int kExitUsage = 2;

struct OutputTarget {
  std::string path;  // empty = stdout

  int write_with(const std::function<int(std::ostream&)>& fn) const {
    if (path.empty()) return fn(std::cout);
    std::ofstream file(path);
    if (!file) {
      std::cerr << "error: cannot open output file '" << path << "'\n";
      return kExitUsage;
    }
    return fn(file);
  }
};

void add_config_flags(CLI::App* cmd, tpfuse::ExperimentConfig& config,
                      std::string& schedule, std::string& layer,
                      std::string& config_path) {
  cmd->add_option("--tp-size", config.tp_size, "tensor-parallel group size");
  cmd->add_option("--batch", config.batch, "batch count B");
  cmd->add_option("--seq", config.seq, "sequence length S");
  cmd->add_option("--d-model", config.d_model, "model width D");
  cmd->add_option("--heads", config.heads, "attention head count");
  cmd->add_option("--granularity", config.granularity,
                  "slices per rank for the ring schedules (m)");
  cmd->add_option("--schedule", schedule,
                  "decomposition schedule: ring|pairwise|circular-slices");
  cmd->add_option("--layer", layer, "layer kind: mlp|attention|ulysses|rs|ag");
  cmd->add_option("--seed", config.seed, "data seed");
  cmd->add_option("--delay-ms", config.delay_ms,
                  "injected per-chunk delivery delay (ms)");
  cmd->add_option("--reps", config.reps, "timed repetitions after warm-up");
  cmd->add_option("--config", config_path,
                  "plain key=value config file (flags override it)");
}

// Command-line flags win; file entries fill in whatever was not given.
void finish_config(CLI::App* cmd, tpfuse::ExperimentConfig& config,
                   const std::string& schedule, const std::string& layer,
                   const std::string& config_path) {
  if (cmd->count("--schedule"))
    config.schedule = tpfuse::schedule_kind_from_string(schedule);
  if (cmd->count("--layer"))
    config.layer = tpfuse::layer_kind_from_string(layer);

  if (!config_path.empty()) {
    std::ifstream file(config_path);
    if (!file)
      throw tpfuse::UsageError("cannot open config file '" + config_path + "'");
    for (const auto& [key, value] : tpfuse::read_key_value_pairs(file)) {
      const bool flag_given = [&] {
        try {
          return cmd->count("--" + key) > 0;
        } catch (const CLI::OptionNotFound&) {
          return false;  // apply_config_entry names the unknown key
        }
      }();
      if (flag_given) continue;
      tpfuse::apply_config_entry(config, key, value);
    }
  }
  config.validate();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Overlapped tensor-parallel collectives on a simulated multi-rank "
      "fabric: equivalence verification, wall-clock overlap benchmarks, and "
      "an analytic latency model"};
  app.require_subcommand(1);

  tpfuse::ExperimentConfig config;
  std::string schedule = "ring";
  std::string layer = "mlp";
  std::string config_path;
  std::string out_path;

  CLI::App* verify = app.add_subcommand(
      "verify", "check overlapped layers against reference oracles");
  add_config_flags(verify, config, schedule, layer, config_path);
  bool inject_fault = false;
  verify->add_flag("--inject-fault", inject_fault,
                   "corrupt one shard so verification must fail (test hook)")
      ->group("");  // hidden

  CLI::App* bench = app.add_subcommand(
      "bench", "time the three overlap strategies on the threaded fabric");
  add_config_flags(bench, config, schedule, layer, config_path);
  bench->add_option("--out", out_path, "write CSV here instead of stdout");

  CLI::App* model = app.add_subcommand(
      "model", "emit analytic latency reports for a parameter grid");
  tpfuse::ModelGrid grid;
  model->add_option("--n", grid.n_values, "rank counts");
  model->add_option("--c", grid.c_values, "compute time per chunk (ms)");
  model->add_option("--d", grid.d_values, "transfer time per chunk-hop (ms)");
  model->add_option("--chunks", grid.chunk_values,
                    "slicing counts for the data-slicing strategy");
  model->add_flag("!--no-calibration", grid.include_calibration,
                  "skip the bundled calibration point");
  model->add_option("--out", out_path, "write CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  const OutputTarget target{out_path};
  try {
    if (verify->parsed()) {
      finish_config(verify, config, schedule, layer, config_path);
      return tpfuse::run_verify(config, std::cout,
                                tpfuse::VerifyOptions{inject_fault}) == 0
                 ? 0
                 : kExitVerificationFailed;
    }
    if (bench->parsed()) {
      finish_config(bench, config, schedule, layer, config_path);
      return target.write_with(
          [&](std::ostream& os) { return tpfuse::run_bench(config, os); });
    }
    if (model->parsed()) {
      return target.write_with(
          [&](std::ostream& os) { return tpfuse::run_model(grid, os); });
    }
  } catch (const tpfuse::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVerificationFailed;
  }
  return 0;
}
