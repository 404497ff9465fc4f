#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <variant>
#include <vector>

#include "tpfuse/tensor.hpp"

namespace tpfuse {

/// Raised when a rank worker fails; names the first failing rank.
class GroupError : public std::runtime_error {
 public:
  GroupError(int rank, const std::string& what)
      : std::runtime_error("rank " + std::to_string(rank) + " failed: " + what),
        rank_(rank) {}
  int failing_rank() const { return rank_; }

 private:
  int rank_ = -1;
};

struct FabricOptions {
  /// Artificial per-chunk delivery delay. A receive cannot complete until
  /// this much wall time has passed since the matching send was posted.
  double delivery_delay_ms = 0.0;
};

namespace detail {

/// One directed sender->receiver FIFO. Sends never block (unbounded queue);
/// receives block until the matching message has arrived and its delivery
/// delay has elapsed. Receive tickets are issued at post time so that
/// matching stays in post order even if waits are reordered.
class Channel {
 public:
  explicit Channel(const std::atomic<bool>& group_failed)
      : group_failed_(group_failed) {}

  void push(Tensor payload, std::chrono::steady_clock::time_point ready_at);
  uint64_t issue_ticket();
  Tensor take(uint64_t ticket);
  void wake_all();

 private:
  struct Slot {
    Tensor payload;
    std::chrono::steady_clock::time_point ready_at;
    bool consumed = false;
  };

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Slot> slots_;
  uint64_t base_seq_ = 0;  // sequence number of slots_.front()
  uint64_t tickets_issued_ = 0;
  const std::atomic<bool>& group_failed_;
};

}  // namespace detail

class RankGroup;

/// Handle for one in-flight transfer. wait() blocks until the transfer
/// completes; for receives it moves the payload into the bound buffer.
/// Waiting twice (or waiting a moved-from handle) is a usage error.
class PendingOp {
 public:
  enum class Kind { Send, Recv };

  PendingOp(PendingOp&& other) noexcept { *this = std::move(other); }
  PendingOp& operator=(PendingOp&& other) noexcept {
    kind_ = other.kind_;
    channel_ = other.channel_;
    ticket_ = other.ticket_;
    buffer_ = other.buffer_;
    done_ = other.done_;
    other.done_ = true;
    other.channel_ = nullptr;
    return *this;
  }
  PendingOp(const PendingOp&) = delete;
  PendingOp& operator=(const PendingOp&) = delete;

  Kind kind() const { return kind_; }
  void wait();

 private:
  friend class RankEndpoint;
  PendingOp(Kind kind, detail::Channel* channel, uint64_t ticket,
            Tensor* buffer)
      : kind_(kind), channel_(channel), ticket_(ticket), buffer_(buffer) {}

  Kind kind_ = Kind::Send;
  detail::Channel* channel_ = nullptr;
  uint64_t ticket_ = 0;
  Tensor* buffer_ = nullptr;
  bool done_ = false;
};

/// Per-rank communication handle. Each endpoint must be used only by its
/// own rank's worker thread; channels are the only cross-rank state.
class RankEndpoint {
 public:
  RankEndpoint(const RankEndpoint&) = delete;
  RankEndpoint& operator=(const RankEndpoint&) = delete;

  int rank() const { return rank_; }
  int group_size() const;

  /// Enqueues a value snapshot of chunk and returns immediately.
  PendingOp send_async(int to, const Tensor& chunk);
  /// Posts a receive; wait() fills buffer with the matching message.
  PendingOp recv_async(int from, Tensor& buffer);

  void send(int to, const Tensor& chunk) { send_async(to, chunk).wait(); }
  Tensor recv(int from) {
    Tensor buffer;
    recv_async(from, buffer).wait();
    return buffer;
  }

  uint64_t sends_posted() const { return sends_posted_; }
  uint64_t recvs_posted() const { return recvs_posted_; }

 private:
  friend class RankGroup;
  RankEndpoint(RankGroup* group, int rank) : group_(group), rank_(rank) {}

  void check_peer(int peer, const char* op) const;

  RankGroup* group_;
  int rank_;
  uint64_t sends_posted_ = 0;
  uint64_t recvs_posted_ = 0;
};

/// A simulated tensor-parallel group of T ranks with one FIFO channel per
/// directed rank pair.
class RankGroup {
 public:
  explicit RankGroup(int size, FabricOptions options = {});

  int size() const { return size_; }
  RankEndpoint& endpoint(int rank);

  /// Records the first failing rank and wakes all blocked receivers.
  void mark_failed(int rank);
  int first_failed_rank() const { return first_failed_.load(); }

 private:
  friend class RankEndpoint;
  detail::Channel& channel(int from, int to) {
    return *channels_[static_cast<size_t>(from) * size_ + to];
  }

  int size_;
  FabricOptions options_;
  std::atomic<bool> failed_{false};
  std::atomic<int> first_failed_{-1};
  std::vector<std::unique_ptr<detail::Channel>> channels_;
  std::vector<std::unique_ptr<RankEndpoint>> endpoints_;
};

namespace detail {

std::string describe_current_exception();

}  // namespace detail

/// Runs body concurrently on t rank workers and returns their results in
/// rank order. The first rank failure is rethrown as a GroupError; other
/// ranks blocked on receives are woken and unwound.
template <typename Body>
auto spawn_group(int t, Body&& body, const FabricOptions& options = {}) {
  using Result = std::invoke_result_t<Body&, RankEndpoint&>;
  if (t < 1) throw std::invalid_argument("spawn_group: rank count must be >= 1");

  RankGroup group(t, options);
  std::vector<std::string> failures(static_cast<size_t>(t));
  std::vector<std::optional<std::conditional_t<std::is_void_v<Result>,
                                               std::monostate, Result>>>
      results(static_cast<size_t>(t));

  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(t));
  for (int r = 0; r < t; ++r) {
    workers.emplace_back([&, r] {
      try {
        if constexpr (std::is_void_v<Result>) {
          body(group.endpoint(r));
          results[static_cast<size_t>(r)] = std::monostate{};
        } else {
          results[static_cast<size_t>(r)] = body(group.endpoint(r));
        }
      } catch (...) {
        failures[static_cast<size_t>(r)] = detail::describe_current_exception();
        group.mark_failed(r);
      }
    });
  }
  for (std::thread& w : workers) w.join();

  const int failed = group.first_failed_rank();
  if (failed >= 0) throw GroupError(failed, failures[static_cast<size_t>(failed)]);

  if constexpr (std::is_void_v<Result>) {
    return;
  } else {
    std::vector<Result> out;
    out.reserve(static_cast<size_t>(t));
    for (auto& r : results) out.push_back(std::move(*r));
    return out;
  }
}

/// Non-overlapped all-gather: every rank ends with the rank-order
/// concatenation of all slices along the sequence axis.
Tensor ref_all_gather(RankEndpoint& ep, const Tensor& slice);

/// Non-overlapped reduce-scatter (sum): rank s ends with the element-wise
/// sum over ranks of sequence slice s. Contributions are summed in rank
/// order.
Tensor ref_reduce_scatter(RankEndpoint& ep, const Tensor& full);

/// Non-overlapped all-to-all: output[k] on rank r is parts[r] from rank k
/// (transpose of the rank x part matrix).
std::vector<Tensor> ref_all_to_all(RankEndpoint& ep,
                                   const std::vector<Tensor>& parts);

}  // namespace tpfuse
