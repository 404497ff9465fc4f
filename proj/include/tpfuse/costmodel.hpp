#pragma once

#include <string>
#include <vector>

namespace tpfuse {

/// Overlap strategies compared by the latency model.
///   Baseline: compute everything, then run the ring collective.
///   DataSlicing: split into chunks; each chunk's collective overlaps the
///     next chunk's compute, leaving the last chunk's collective exposed.
///   Fused: decomposed peer-to-peer steps interleaved per compute chunk;
///     a hop hides entirely under the next chunk when d <= c.
enum class Strategy { Baseline, DataSlicing, Fused };

std::string to_string(Strategy strategy);

struct CostParams {
  int n = 4;          // rank count; the collective needs n-1 hop-steps
  double c = 1.0;     // compute time per chunk (ms)
  double d = 1.0;     // transfer time per chunk per hop (ms)
  int chunks = 4;     // slicing count for the data-slicing strategy

  void validate() const;
};

struct CostReport {
  Strategy strategy = Strategy::Baseline;
  CostParams params;
  double compute_ms = 0.0;
  double overhead_ms = 0.0;
  double end_to_end_ms = 0.0;
  double overhead_reduction_pct = 0.0;  // vs Baseline
  double latency_reduction_pct = 0.0;   // vs Baseline
};

/// Closed-form latency of one strategy. Reductions are relative to the
/// Baseline strategy under the same parameters.
CostReport analytic_latency(Strategy strategy, const CostParams& params);

struct Interval {
  enum class Kind { Compute, Comm };
  Kind kind;
  double start;
  double end;
};

/// Per-rank event records. All ranks follow the same symmetric plan.
struct Timeline {
  int ranks = 0;
  std::vector<std::vector<Interval>> per_rank;

  double makespan() const;
};

/// Event-accurate schedule of a strategy; the makespan equals the
/// analytic end-to-end latency.
Timeline simulate_timeline(Strategy strategy, const CostParams& params);

/// True iff no communication interval on any rank ends after that rank's
/// final compute interval ends. Throws on a malformed timeline.
bool no_tail_check(const Timeline& timeline);

/// Fixed header for cost-model CSV output.
extern const char* const kCostReportCsvHeader;

/// One CSV row (plain decimal, no locale formatting).
std::string to_csv_row(const CostReport& report);

}  // namespace tpfuse
