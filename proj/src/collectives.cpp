#include "tpfuse/collectives.hpp"

#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <utility>

namespace tpfuse {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Ring:
      return "ring";
    case ScheduleKind::PairwiseBidirectional:
      return "pairwise";
    case ScheduleKind::CircularSlices:
      return "circular-slices";
  }
  return "unknown";
}

namespace {

void check_ring_args(int r, int i, int n, const char* fn) {
  if (n < 1) throw std::invalid_argument(std::string(fn) + ": n must be >= 1");
  if (r < 0 || r >= n || i < 0 || i >= n) {
    std::ostringstream os;
    os << fn << ": rank " << r << " or iteration " << i
       << " outside [0," << n << ")";
    throw std::invalid_argument(os.str());
  }
}

// Round-robin tournament pairing: rank n-1 is fixed, the others rotate.
// Rounds are ordered so that round 0 pairs (0,1),(2,3),... for n=4.
int pairwise_partner(int r, int round, int n) {
  const int u = n - 2 - round;
  if (r == n - 1) return u;
  if (r == u) return n - 1;
  const int m = n - 1;
  return ((2 * u - r) % m + m) % m;
}

}  // namespace

RingIndices ring_indices_ag(int r, int i, int n) {
  check_ring_args(r, i, n, "ring_indices_ag");
  return {(r + 1) % n, (r - 1 + n) % n, (r - i + n) % n};
}

RingIndices ring_indices_rs(int r, int i, int n) {
  check_ring_args(r, i, n, "ring_indices_rs");
  return {(r + 1) % n, (r - 1 + n) % n, ((r - i - 1) % n + n) % n};
}

Schedule build_schedule(ScheduleKind kind, int n) {
  if (n < 1)
    throw std::invalid_argument("build_schedule: n must be >= 1");
  if (kind == ScheduleKind::PairwiseBidirectional && n % 2 != 0 && n != 1) {
    throw std::invalid_argument(
        "build_schedule: pairwise schedule requires an even rank count, got " +
        std::to_string(n));
  }

  Schedule schedule;
  schedule.kind = kind;
  schedule.group_size = n;
  schedule.steps.assign(static_cast<size_t>(n), {});
  if (n == 1) return schedule;  // nothing to exchange

  for (int r = 0; r < n; ++r) {
    auto& steps = schedule.steps[static_cast<size_t>(r)];
    steps.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      const bool comm = i < n - 1;
      switch (kind) {
        case ScheduleKind::Ring: {
          const RingIndices idx = ring_indices_rs(r, i, n);
          steps[static_cast<size_t>(i)] = {comm ? idx.send_peer : -1,
                                           comm ? idx.recv_peer : -1,
                                           idx.compute_slice};
          break;
        }
        case ScheduleKind::CircularSlices: {
          // Mirror of the ring: partials travel counterclockwise while the
          // compute index ascends r+1, r+2, ..., r.
          steps[static_cast<size_t>(i)] = {comm ? (r - 1 + n) % n : -1,
                                           comm ? (r + 1) % n : -1,
                                           (r + i + 1) % n};
          break;
        }
        case ScheduleKind::PairwiseBidirectional: {
          if (comm) {
            const int partner = pairwise_partner(r, i, n);
            steps[static_cast<size_t>(i)] = {partner, partner, partner};
          } else {
            steps[static_cast<size_t>(i)] = {-1, -1, r};
          }
          break;
        }
      }
    }
  }
  check_schedule(schedule);
  return schedule;
}

namespace {

void fail_schedule(const std::string& why) {
  throw std::logic_error("check_schedule: " + why);
}

// Replays the schedule on symbolic payloads: each contribution is the tag
// (source rank, slice). Pipelined kinds forward a growing accumulator;
// the pairwise kind delivers single contributions directly.
void check_delivery(const Schedule& s) {
  const int n = s.group_size;
  using Tags = std::multiset<std::pair<int, int>>;

  std::vector<Tags> final_acc(static_cast<size_t>(n));
  if (s.kind == ScheduleKind::PairwiseBidirectional) {
    std::vector<Tags> acc(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      std::vector<Tags> outbox(static_cast<size_t>(n));
      for (int r = 0; r < n; ++r) {
        const ScheduleStep& st = s.steps[static_cast<size_t>(r)][static_cast<size_t>(i)];
        Tags mine = {{r, st.compute_slice}};
        if (st.has_comm()) {
          outbox[static_cast<size_t>(st.send_peer)] = mine;
        } else {
          acc[static_cast<size_t>(r)].insert(mine.begin(), mine.end());
        }
      }
      for (int r = 0; r < n; ++r) {
        const ScheduleStep& st = s.steps[static_cast<size_t>(r)][static_cast<size_t>(i)];
        if (st.has_comm()) {
          const Tags& in = outbox[static_cast<size_t>(r)];
          acc[static_cast<size_t>(r)].insert(in.begin(), in.end());
        }
      }
    }
    final_acc = acc;
  } else {
    std::vector<Tags> carry(static_cast<size_t>(n));  // partial in flight
    std::vector<Tags> inbox(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      std::vector<Tags> next_inbox(static_cast<size_t>(n));
      for (int r = 0; r < n; ++r) {
        const ScheduleStep& st = s.steps[static_cast<size_t>(r)][static_cast<size_t>(i)];
        Tags part = {{r, st.compute_slice}};
        if (i > 0) part.insert(inbox[static_cast<size_t>(r)].begin(),
                               inbox[static_cast<size_t>(r)].end());
        if (st.has_comm()) {
          next_inbox[static_cast<size_t>(st.send_peer)] = part;
        } else {
          final_acc[static_cast<size_t>(r)] = part;
        }
      }
      inbox = std::move(next_inbox);
    }
  }

  for (int r = 0; r < n; ++r) {
    const Tags& acc = final_acc[static_cast<size_t>(r)];
    if (static_cast<int>(acc.size()) != n)
      fail_schedule("rank " + std::to_string(r) + " accumulated " +
                    std::to_string(acc.size()) + " contributions, expected " +
                    std::to_string(n));
    for (int q = 0; q < n; ++q) {
      if (acc.count({q, r}) != 1)
        fail_schedule("contribution of rank " + std::to_string(q) +
                      " for slice " + std::to_string(r) +
                      " not delivered exactly once");
    }
  }
}

}  // namespace

void check_schedule(const Schedule& s) {
  const int n = s.group_size;
  if (n < 1) fail_schedule("group size must be >= 1");
  if (static_cast<int>(s.steps.size()) != n)
    fail_schedule("step table must cover every rank");
  if (n == 1) {
    if (!s.steps[0].empty()) fail_schedule("singleton schedule must be empty");
    return;
  }

  for (int r = 0; r < n; ++r) {
    const auto& steps = s.steps[static_cast<size_t>(r)];
    if (static_cast<int>(steps.size()) != n)
      fail_schedule("rank " + std::to_string(r) + " must have " +
                    std::to_string(n) + " iterations");
    int sends = 0, recvs = 0;
    for (const ScheduleStep& st : steps) {
      if (st.send_peer >= 0) ++sends;
      if (st.recv_peer >= 0) ++recvs;
      if (st.compute_slice < 0 || st.compute_slice >= n)
        fail_schedule("compute slice out of range");
    }
    if (sends != n - 1 || recvs != n - 1)
      fail_schedule("rank " + std::to_string(r) + " posts " +
                    std::to_string(sends) + " sends / " +
                    std::to_string(recvs) + " recvs, expected " +
                    std::to_string(n - 1) + " each");
    if (steps.back().compute_slice != r)
      fail_schedule("rank " + std::to_string(r) +
                    " must compute its own slice last");
  }

  if (s.kind == ScheduleKind::PairwiseBidirectional) {
    for (int i = 0; i < n - 1; ++i) {
      std::set<int> busy;
      for (int r = 0; r < n; ++r) {
        const ScheduleStep& st = s.steps[static_cast<size_t>(r)][static_cast<size_t>(i)];
        if (st.send_peer != st.recv_peer)
          fail_schedule("pairwise exchange must be bidirectional");
        const int p = st.send_peer;
        if (s.steps[static_cast<size_t>(p)][static_cast<size_t>(i)].send_peer != r)
          fail_schedule("pairwise partners disagree in round " +
                        std::to_string(i));
        if (!busy.insert(r).second)
          fail_schedule("rank appears in two pairs of one round");
      }
      if (static_cast<int>(busy.size()) != n)
        fail_schedule("round " + std::to_string(i) +
                      " does not cover all ranks in n/2 pairs");
    }
  }

  check_delivery(s);
}

Tensor fuse_all_gather(RankEndpoint& ep, const Tensor& x,
                       const PartialComputeFn& f, int m) {
  if (m < 1)
    throw std::invalid_argument("fuse_all_gather: granularity must be >= 1");
  const int t = ep.group_size();
  if (t == 1) return f(x);
  if (x.seq() % m != 0) {
    std::ostringstream os;
    os << "fuse_all_gather: slice length " << x.seq()
       << " is not divisible by granularity " << m;
    throw std::invalid_argument(os.str());
  }

  const int r = ep.rank();
  std::vector<Tensor> own = split_seq(x, m);
  std::vector<Tensor> out_chunks(static_cast<size_t>(m) * t);
  for (int pass = 0; pass < m; ++pass) {
    Tensor traveling = std::move(own[static_cast<size_t>(pass)]);
    for (int i = 0; i < t; ++i) {
      const RingIndices idx = ring_indices_ag(r, i, t);
      const bool comm = i < t - 1;
      std::optional<PendingOp> send, recv;
      Tensor inbox;
      if (comm) {
        send = ep.send_async(idx.send_peer, traveling);
        recv = ep.recv_async(idx.recv_peer, inbox);
      }
      out_chunks[static_cast<size_t>(idx.compute_slice) * m + pass] = f(traveling);
      if (comm) {
        send->wait();
        recv->wait();
        if (!inbox.same_shape(traveling)) {
          throw ShapeError("fuse_all_gather: chunk from rank " +
                           std::to_string(idx.recv_peer) + " has shape " +
                           inbox.shape_str() + ", expected " +
                           traveling.shape_str());
        }
        traveling = std::move(inbox);
      }
    }
  }
  return concat_seq(out_chunks);
}

namespace {

// Ring-style execution: the message is a running partial sum that hops to
// the next rank after each compute-accumulate step.
Tensor rs_pipelined(RankEndpoint& ep, const std::vector<ScheduleStep>& steps,
                    const std::vector<const Tensor*>& slice_of_owner,
                    const PartialComputeFn& f) {
  const int n = static_cast<int>(steps.size());
  Tensor partial;
  Tensor inbox;
  std::optional<PendingOp> pending_recv;
  for (int i = 0; i < n; ++i) {
    const ScheduleStep& st = steps[static_cast<size_t>(i)];
    partial = f(*slice_of_owner[static_cast<size_t>(st.compute_slice)]);
    if (pending_recv) {
      pending_recv->wait();
      pending_recv.reset();
      if (!inbox.same_shape(partial)) {
        throw ShapeError("fuse_reduce_scatter: received partial " +
                         inbox.shape_str() + ", expected " +
                         partial.shape_str());
      }
      accumulate(partial, inbox);
    }
    if (st.has_comm()) {
      ep.send_async(st.send_peer, partial).wait();
      pending_recv = ep.recv_async(st.recv_peer, inbox);
    }
  }
  return partial;
}

// Pairwise execution: each contribution travels one hop straight to the
// slice owner; received contributions always belong to this rank's slice.
// A round's exchange is waited one iteration later so the transfer rides
// under the next round's compute.
Tensor rs_direct(RankEndpoint& ep, const std::vector<ScheduleStep>& steps,
                 const std::vector<const Tensor*>& slice_of_owner,
                 const PartialComputeFn& f) {
  const int n = static_cast<int>(steps.size());
  Tensor acc;
  bool has_acc = false;
  Tensor inbox;
  std::optional<PendingOp> pending_recv;

  const auto fold = [&](Tensor&& part) {
    if (has_acc) {
      accumulate(acc, part);
    } else {
      acc = std::move(part);
      has_acc = true;
    }
  };

  for (int i = 0; i < n; ++i) {
    const ScheduleStep& st = steps[static_cast<size_t>(i)];
    Tensor mine = f(*slice_of_owner[static_cast<size_t>(st.compute_slice)]);
    if (pending_recv) {
      pending_recv->wait();
      pending_recv.reset();
      if (!inbox.same_shape(mine)) {
        throw ShapeError("fuse_reduce_scatter: contribution from rank " +
                         std::to_string(steps[static_cast<size_t>(i - 1)].recv_peer) +
                         " has shape " + inbox.shape_str() + ", expected " +
                         mine.shape_str());
      }
      fold(std::move(inbox));
    }
    if (st.has_comm()) {
      ep.send_async(st.send_peer, mine).wait();
      pending_recv = ep.recv_async(st.recv_peer, inbox);
    } else {
      // Final compute-only step: the rank's own contribution.
      fold(std::move(mine));
    }
  }
  return acc;
}

}  // namespace

Tensor fuse_reduce_scatter(RankEndpoint& ep, const Tensor& x,
                           const PartialComputeFn& f, const Schedule& schedule,
                           int m) {
  const int t = ep.group_size();
  if (schedule.group_size != t) {
    std::ostringstream os;
    os << "fuse_reduce_scatter: schedule built for " << schedule.group_size
       << " ranks, group has " << t;
    throw std::invalid_argument(os.str());
  }
  if (m < 1)
    throw std::invalid_argument("fuse_reduce_scatter: granularity must be >= 1");
  if (m > 1 && schedule.kind != ScheduleKind::Ring) {
    throw std::invalid_argument(
        "fuse_reduce_scatter: granularity > 1 is supported for the ring "
        "schedule only");
  }
  if (t == 1) return f(x);
  if (x.seq() % (static_cast<int64_t>(t) * m) != 0) {
    std::ostringstream os;
    os << "fuse_reduce_scatter: sequence length " << x.seq()
       << " is not divisible by " << t * m << " (group size " << t
       << " x granularity " << m << ")";
    throw std::invalid_argument(os.str());
  }

  const int r = ep.rank();
  const std::vector<Tensor> chunks = split_seq(x, t * m);
  const auto& steps = schedule.steps[static_cast<size_t>(r)];

  std::vector<Tensor> pass_outputs;
  pass_outputs.reserve(static_cast<size_t>(m));
  for (int pass = 0; pass < m; ++pass) {
    // Owner q contributes chunk q*m + pass in this pass.
    std::vector<const Tensor*> slice_of_owner(static_cast<size_t>(t));
    for (int q = 0; q < t; ++q)
      slice_of_owner[static_cast<size_t>(q)] = &chunks[static_cast<size_t>(q) * m + pass];
    pass_outputs.push_back(
        schedule.kind == ScheduleKind::PairwiseBidirectional
            ? rs_direct(ep, steps, slice_of_owner, f)
            : rs_pipelined(ep, steps, slice_of_owner, f));
  }
  return m == 1 ? std::move(pass_outputs[0]) : concat_seq(pass_outputs);
}

}  // namespace tpfuse
