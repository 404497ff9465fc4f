#include "tpfuse/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace tpfuse {

std::string to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::Baseline:
      return "baseline";
    case Strategy::DataSlicing:
      return "data-slicing";
    case Strategy::Fused:
      return "fused";
  }
  return "unknown";
}

void CostParams::validate() const {
  if (n < 1) throw std::invalid_argument("cost model: n must be >= 1");
  if (chunks < 1) throw std::invalid_argument("cost model: chunks must be >= 1");
  if (c < 0.0 || d < 0.0)
    throw std::invalid_argument("cost model: times must be >= 0");
}

namespace {

double pct_reduction(double base, double value) {
  return base > 0.0 ? (base - value) / base * 100.0 : 0.0;
}

double strategy_overhead(Strategy strategy, const CostParams& p) {
  const double collective = (p.n - 1) * p.d;
  switch (strategy) {
    case Strategy::Baseline:
      return collective;
    case Strategy::DataSlicing: {
      // Per-piece compute C and collective Dc. While Dc <= C each piece's
      // collective hides under the next compute and only the tail piece is
      // exposed; beyond that the collectives themselves become the
      // bottleneck and only the pipeline fill is hidden.
      const double piece_compute = p.n * p.c / p.chunks;
      const double piece_collective = collective / p.chunks;
      if (piece_collective <= piece_compute) return piece_collective;
      return collective - (p.chunks - 1) * piece_compute;
    }
    case Strategy::Fused:
      return (p.n - 1) * std::max(0.0, p.d - p.c);
  }
  return 0.0;
}

}  // namespace

CostReport analytic_latency(Strategy strategy, const CostParams& params) {
  params.validate();
  CostReport report;
  report.strategy = strategy;
  report.params = params;
  report.compute_ms = params.n * params.c;
  report.overhead_ms = std::max(0.0, strategy_overhead(strategy, params));
  report.end_to_end_ms = report.compute_ms + report.overhead_ms;

  const double base_overhead = strategy_overhead(Strategy::Baseline, params);
  const double base_end = report.compute_ms + base_overhead;
  report.overhead_reduction_pct = pct_reduction(base_overhead, report.overhead_ms);
  report.latency_reduction_pct = pct_reduction(base_end, report.end_to_end_ms);
  return report;
}

double Timeline::makespan() const {
  double end = 0.0;
  for (const auto& rank : per_rank)
    for (const Interval& iv : rank) end = std::max(end, iv.end);
  return end;
}

namespace {

std::vector<Interval> rank_plan(Strategy strategy, const CostParams& p) {
  std::vector<Interval> plan;
  switch (strategy) {
    case Strategy::Baseline: {
      for (int i = 0; i < p.n; ++i)
        plan.push_back({Interval::Kind::Compute, i * p.c, (i + 1) * p.c});
      const double compute_end = p.n * p.c;
      for (int h = 0; h + 1 < p.n; ++h)
        plan.push_back({Interval::Kind::Comm, compute_end + h * p.d,
                        compute_end + (h + 1) * p.d});
      break;
    }
    case Strategy::DataSlicing: {
      const double piece_compute = p.n * p.c / p.chunks;
      const double piece_collective = (p.n - 1) * p.d / p.chunks;
      double comm_end = 0.0;
      for (int piece = 0; piece < p.chunks; ++piece) {
        const double compute_end = (piece + 1) * piece_compute;
        plan.push_back({Interval::Kind::Compute, piece * piece_compute,
                        compute_end});
        const double comm_start = std::max(compute_end, comm_end);
        comm_end = comm_start + piece_collective;
        plan.push_back({Interval::Kind::Comm, comm_start, comm_end});
      }
      break;
    }
    case Strategy::Fused: {
      // Iteration i finishes once its compute is done and the previous
      // hop has arrived, so boundaries advance by max(c, d).
      double boundary = 0.0;
      for (int i = 0; i < p.n; ++i) {
        plan.push_back({Interval::Kind::Compute, boundary, boundary + p.c});
        const double done = i == 0 ? boundary + p.c
                                   : boundary + std::max(p.c, p.d);
        if (i < p.n - 1)
          plan.push_back({Interval::Kind::Comm, done, done + p.d});
        boundary = done;
      }
      break;
    }
  }
  return plan;
}

void validate_timeline(const Timeline& t) {
  if (t.ranks < 1 || static_cast<int>(t.per_rank.size()) != t.ranks)
    throw std::invalid_argument("timeline: rank records missing");
  for (const auto& rank : t.per_rank) {
    double prev_compute_end = 0.0, prev_comm_end = 0.0;
    bool have_compute = false;
    for (const Interval& iv : rank) {
      if (!(iv.start <= iv.end) || !std::isfinite(iv.start) ||
          !std::isfinite(iv.end))
        throw std::invalid_argument("timeline: malformed interval");
      if (iv.kind == Interval::Kind::Compute) {
        if (iv.start < prev_compute_end - 1e-12)
          throw std::invalid_argument("timeline: compute intervals overlap");
        prev_compute_end = iv.end;
        have_compute = true;
      } else {
        if (iv.start < prev_comm_end - 1e-12)
          throw std::invalid_argument("timeline: comm intervals overlap");
        prev_comm_end = iv.end;
      }
    }
    if (!have_compute)
      throw std::invalid_argument("timeline: rank has no compute interval");
  }
}

}  // namespace

Timeline simulate_timeline(Strategy strategy, const CostParams& params) {
  params.validate();
  Timeline t;
  t.ranks = params.n;
  t.per_rank.assign(static_cast<size_t>(params.n), rank_plan(strategy, params));
  return t;
}

bool no_tail_check(const Timeline& timeline) {
  validate_timeline(timeline);
  for (const auto& rank : timeline.per_rank) {
    double compute_end = 0.0, comm_end = 0.0;
    for (const Interval& iv : rank) {
      if (iv.kind == Interval::Kind::Compute)
        compute_end = std::max(compute_end, iv.end);
      else
        comm_end = std::max(comm_end, iv.end);
    }
    if (comm_end > compute_end) return false;
  }
  return true;
}

const char* const kCostReportCsvHeader =
    "strategy,n,c,d,chunks,compute_ms,overhead_ms,end_to_end_ms,"
    "overhead_reduction_pct,latency_reduction_pct";

std::string to_csv_row(const CostReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g,%d,%.10g,%.10g,%.10g,%.10g,%.10g",
                to_string(r.strategy).c_str(), r.params.n, r.params.c,
                r.params.d, r.params.chunks, r.compute_ms, r.overhead_ms,
                r.end_to_end_ms, r.overhead_reduction_pct,
                r.latency_reduction_pct);
  return buf;
}

}  // namespace tpfuse
