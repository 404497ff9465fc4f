#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tpfuse/collectives.hpp"
#include "tpfuse/costmodel.hpp"
#include "tpfuse/layers.hpp"

namespace tpfuse {

/// Invalid harness configuration; the message names the violated invariant.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class LayerKind { Mlp, Attention, Ulysses, ReduceScatter, AllGather };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct ExperimentConfig {
  int tp_size = 4;
  int64_t batch = 2;
  int64_t seq = 64;
  int64_t d_model = 32;
  int heads = 4;
  int granularity = 1;
  ScheduleKind schedule = ScheduleKind::Ring;
  LayerKind layer = LayerKind::Mlp;
  uint64_t seed = 0;
  double delay_ms = 0.0;
  int reps = 10;

  void validate() const;
};

/// Parses a plain key=value stream; '#' starts a comment, blank lines are
/// skipped. Keys use the flag names without the leading dashes.
std::vector<std::pair<std::string, std::string>> read_key_value_pairs(
    std::istream& in);

/// Applies one config-file entry. Unknown keys or malformed values raise
/// UsageError naming the entry.
void apply_config_entry(ExperimentConfig& config, const std::string& key,
                        const std::string& value);

struct VerifyOptions {
  /// Test hook: corrupts one shard entry on the overlapped path so the
  /// equivalence checks must fail.
  bool inject_fault = false;
};

/// Runs the oracle-equivalence suite for the configured layer across all
/// applicable schedules, printing one PASS/FAIL line with the maximum
/// deviation per check. Returns 0 iff every check passed.
int run_verify(const ExperimentConfig& config, std::ostream& report,
               const VerifyOptions& options = {});

struct BenchMeasurement {
  Strategy strategy = Strategy::Baseline;
  double mean_ms = 0.0;
  double latency_reduction_pct = 0.0;  // vs the no-overlap strategy
};

struct BenchResult {
  double chunk_compute_ms = 0.0;       // one partial-output compute, measured
  std::vector<BenchMeasurement> measurements;
};

/// Times the configured layer forward on the threaded fabric with the
/// injected per-chunk delivery delay, for all three strategies. One
/// warm-up repetition is discarded before averaging.
BenchResult run_bench_collect(const ExperimentConfig& config);

extern const char* const kBenchCsvHeader;

/// run_bench_collect + CSV rows (one per strategy). Returns 0.
int run_bench(const ExperimentConfig& config, std::ostream& csv);

/// Measures the wall time of one partial-output compute chunk for the
/// configured layer (used to pick a delivery delay relative to compute).
double measure_chunk_compute_ms(const ExperimentConfig& config);

struct ModelGrid {
  std::vector<int> n_values{4};
  std::vector<double> c_values{19.625};
  std::vector<double> d_values{14.6};
  std::vector<int> chunk_values{6};
  /// Always also emit the bundled calibration point
  /// (n=4, c=19.625, d=14.6, chunks=6).
  bool include_calibration = true;

  void validate() const;
};

/// Emits analytic cost-model rows (header + one row per strategy and grid
/// point) as CSV. Returns 0.
int run_model(const ModelGrid& grid, std::ostream& csv);

}  // namespace tpfuse
