#include "tpfuse/fabric.hpp"

#include <sstream>

namespace tpfuse {

namespace detail {

void Channel::push(Tensor payload, std::chrono::steady_clock::time_point ready_at) {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    slots_.push_back(Slot{std::move(payload), ready_at, false});
  }
  cv_.notify_all();
}

uint64_t Channel::issue_ticket() {
  std::lock_guard<std::mutex> lock(mutex_);
  return tickets_issued_++;
}

Tensor Channel::take(uint64_t ticket) {
  std::unique_lock<std::mutex> lock(mutex_);
  cv_.wait(lock, [&] {
    return group_failed_.load() || base_seq_ + slots_.size() > ticket;
  });
  if (base_seq_ + slots_.size() <= ticket) {
    throw std::runtime_error("receive abandoned: another rank failed");
  }
  // Honor the injected delivery delay without blocking the sender.
  while (true) {
    const auto ready_at = slots_[ticket - base_seq_].ready_at;
    if (std::chrono::steady_clock::now() >= ready_at) break;
    cv_.wait_until(lock, ready_at);
  }
  Slot& slot = slots_[ticket - base_seq_];
  Tensor out = std::move(slot.payload);
  slot.consumed = true;
  while (!slots_.empty() && slots_.front().consumed) {
    slots_.pop_front();
    ++base_seq_;
  }
  return out;
}

void Channel::wake_all() { cv_.notify_all(); }

std::string describe_current_exception() {
  try {
    throw;
  } catch (const std::exception& e) {
    return e.what();
  } catch (...) {
    return "unknown error";
  }
}

}  // namespace detail

void PendingOp::wait() {
  if (done_) throw std::logic_error("PendingOp: wait() called twice");
  done_ = true;
  if (kind_ == Kind::Recv) *buffer_ = channel_->take(ticket_);
  // Sends complete at post time: the snapshot is already enqueued.
}

int RankEndpoint::group_size() const { return group_->size(); }

void RankEndpoint::check_peer(int peer, const char* op) const {
  if (peer == rank_) {
    throw std::invalid_argument(std::string(op) + ": rank " +
                                std::to_string(rank_) +
                                " cannot address itself");
  }
  if (peer < 0 || peer >= group_->size()) {
    std::ostringstream os;
    os << op << ": peer " << peer << " outside group of size "
       << group_->size();
    throw std::invalid_argument(os.str());
  }
}

PendingOp RankEndpoint::send_async(int to, const Tensor& chunk) {
  check_peer(to, "send_async");
  auto ready_at = std::chrono::steady_clock::time_point{};
  if (group_->options_.delivery_delay_ms > 0.0) {
    ready_at = std::chrono::steady_clock::now() +
               std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                   std::chrono::duration<double, std::milli>(
                       group_->options_.delivery_delay_ms));
  }
  group_->channel(rank_, to).push(chunk, ready_at);
  ++sends_posted_;
  return PendingOp(PendingOp::Kind::Send, nullptr, 0, nullptr);
}

PendingOp RankEndpoint::recv_async(int from, Tensor& buffer) {
  check_peer(from, "recv_async");
  detail::Channel& ch = group_->channel(from, rank_);
  const uint64_t ticket = ch.issue_ticket();
  ++recvs_posted_;
  return PendingOp(PendingOp::Kind::Recv, &ch, ticket, &buffer);
}

RankGroup::RankGroup(int size, FabricOptions options)
    : size_(size), options_(options) {
  if (size < 1)
    throw std::invalid_argument("RankGroup: size must be >= 1");
  channels_.reserve(static_cast<size_t>(size) * size);
  for (int from = 0; from < size; ++from)
    for (int to = 0; to < size; ++to)
      channels_.push_back(std::make_unique<detail::Channel>(failed_));
  endpoints_.reserve(static_cast<size_t>(size));
  for (int r = 0; r < size; ++r)
    endpoints_.push_back(std::unique_ptr<RankEndpoint>(new RankEndpoint(this, r)));
}

RankEndpoint& RankGroup::endpoint(int rank) {
  if (rank < 0 || rank >= size_)
    throw std::invalid_argument("RankGroup: no endpoint for rank " +
                                std::to_string(rank));
  return *endpoints_[static_cast<size_t>(rank)];
}

void RankGroup::mark_failed(int rank) {
  int expected = -1;
  first_failed_.compare_exchange_strong(expected, rank);
  failed_.store(true);
  for (auto& ch : channels_) ch->wake_all();
}

Tensor ref_all_gather(RankEndpoint& ep, const Tensor& slice) {
  const int t = ep.group_size();
  if (t == 1) return slice;
  for (int peer = 0; peer < t; ++peer)
    if (peer != ep.rank()) ep.send(peer, slice);
  std::vector<Tensor> parts(static_cast<size_t>(t));
  parts[static_cast<size_t>(ep.rank())] = slice;
  for (int peer = 0; peer < t; ++peer) {
    if (peer == ep.rank()) continue;
    Tensor got = ep.recv(peer);
    if (!got.same_shape(slice)) {
      throw ShapeError("ref_all_gather: slice from rank " +
                       std::to_string(peer) + " has shape " + got.shape_str() +
                       ", expected " + slice.shape_str());
    }
    parts[static_cast<size_t>(peer)] = std::move(got);
  }
  return concat_seq(parts);
}

Tensor ref_reduce_scatter(RankEndpoint& ep, const Tensor& full) {
  const int t = ep.group_size();
  if (full.seq() % t != 0) {
    std::ostringstream os;
    os << "ref_reduce_scatter: sequence length " << full.seq()
       << " is not divisible by group size " << t;
    throw std::invalid_argument(os.str());
  }
  std::vector<Tensor> slices = split_seq(full, t);
  if (t == 1) return slices[0];
  for (int peer = 0; peer < t; ++peer)
    if (peer != ep.rank()) ep.send(peer, slices[static_cast<size_t>(peer)]);
  Tensor acc;
  for (int source = 0; source < t; ++source) {
    Tensor part = source == ep.rank()
                      ? std::move(slices[static_cast<size_t>(ep.rank())])
                      : ep.recv(source);
    if (source == 0) {
      acc = std::move(part);
    } else {
      if (!part.same_shape(acc)) {
        throw ShapeError("ref_reduce_scatter: slice from rank " +
                         std::to_string(source) + " has shape " +
                         part.shape_str() + ", expected " + acc.shape_str());
      }
      accumulate(acc, part);
    }
  }
  return acc;
}

std::vector<Tensor> ref_all_to_all(RankEndpoint& ep,
                                   const std::vector<Tensor>& parts) {
  const int t = ep.group_size();
  if (static_cast<int>(parts.size()) != t) {
    std::ostringstream os;
    os << "ref_all_to_all: expected " << t << " parts, got " << parts.size();
    throw std::invalid_argument(os.str());
  }
  std::vector<Tensor> out(static_cast<size_t>(t));
  const Tensor& own = parts[static_cast<size_t>(ep.rank())];
  out[static_cast<size_t>(ep.rank())] = own;
  for (int peer = 0; peer < t; ++peer)
    if (peer != ep.rank()) ep.send(peer, parts[static_cast<size_t>(peer)]);
  for (int peer = 0; peer < t; ++peer) {
    if (peer == ep.rank()) continue;
    Tensor got = ep.recv(peer);
    if (!got.same_shape(own)) {
      throw ShapeError("ref_all_to_all: part from rank " + std::to_string(peer) +
                       " has shape " + got.shape_str() + ", expected " +
                       own.shape_str());
    }
    out[static_cast<size_t>(peer)] = std::move(got);
  }
  return out;
}

}  // namespace tpfuse
