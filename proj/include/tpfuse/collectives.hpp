#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tpfuse/fabric.hpp"
#include "tpfuse/tensor.hpp"

namespace tpfuse {

/// How the collective is decomposed into peer-to-peer steps.
///   Ring: unidirectional ring, send to r+1 / recv from r-1.
///   PairwiseBidirectional: round-robin tournament of disjoint exchange
///     pairs, n-1 rounds (even n only); contributions travel one hop.
///   CircularSlices: mirrored ring (send to r-1 / recv from r+1) whose
///     compute index walks slices in ascending circular order, so each
///     rank touches contiguous slice blocks.
enum class ScheduleKind { Ring, PairwiseBidirectional, CircularSlices };

std::string to_string(ScheduleKind kind);

/// One iteration of a rank's plan. Peers are -1 on compute-only steps.
struct ScheduleStep {
  int send_peer = -1;
  int recv_peer = -1;
  int compute_slice = 0;

  bool has_comm() const { return send_peer >= 0; }
};

/// A resolved per-iteration plan for every rank of a group. Every kind
/// computes the rank's own slice in the final iteration so that no
/// communication trails the last compute step.
struct Schedule {
  ScheduleKind kind = ScheduleKind::Ring;
  int group_size = 1;
  std::vector<std::vector<ScheduleStep>> steps;  // [rank][iteration]

  int iterations() const {
    return steps.empty() ? 0 : static_cast<int>(steps[0].size());
  }
};

struct RingIndices {
  int send_peer;
  int recv_peer;
  int compute_slice;
};

/// All-gather ring plan for iteration i of rank r in a group of n:
/// send to r+1, receive from r-1, compute slice (r-i) mod n. Iteration 0
/// therefore computes the rank's own slice.
RingIndices ring_indices_ag(int r, int i, int n);

/// Reduce-scatter ring plan: compute slice (r-i-1) mod n, so the slice
/// that stays on the rank is computed in the final iteration.
RingIndices ring_indices_rs(int r, int i, int n);

/// Builds the per-rank step table for a decomposition strategy and
/// validates its invariants. PairwiseBidirectional requires even n.
Schedule build_schedule(ScheduleKind kind, int n);

/// Verifies a schedule's invariants: n-1 sends and n-1 receives per rank,
/// exactly-once delivery of every (source rank, slice) contribution, and
/// disjoint pairs per round for the pairwise kind. Throws on violation.
void check_schedule(const Schedule& schedule);

/// The pluggable per-slice computation interleaved with the decomposed
/// communication. Must be pure (same input chunk -> same output chunk).
using PartialComputeFn = std::function<Tensor(const Tensor&)>;

/// Overlapped all-gather: starting from this rank's sequence slice, rides
/// the ring so every slice visits every rank, applying f per chunk. The
/// result equals f applied slice-wise to the full gathered sequence. The
/// rank's own slice is computed first, while the first transfer is in
/// flight. Granularity m > 1 splits each slice into m sub-chunks and runs
/// m ring passes of chunk size S/(m*T).
Tensor fuse_all_gather(RankEndpoint& ep, const Tensor& x,
                       const PartialComputeFn& f, int m = 1);

/// Overlapped reduce-scatter: applies f to each local sequence slice and
/// combines contributions across ranks per the schedule, so rank r ends
/// with sum_q f_q(slice r). The slice that stays on the rank is computed
/// in the final iteration, with no trailing communication. Granularity
/// m > 1 is supported for the Ring kind only.
Tensor fuse_reduce_scatter(RankEndpoint& ep, const Tensor& x,
                           const PartialComputeFn& f, const Schedule& schedule,
                           int m = 1);

}  // namespace tpfuse
