#include "tpfuse/fabric.hpp"

#include <gtest/gtest.h>

#include <random>

namespace {

using tpfuse::FabricOptions;
using tpfuse::GroupError;
using tpfuse::RankEndpoint;
using tpfuse::randint_fill;
using tpfuse::ref_all_gather;
using tpfuse::ref_all_to_all;
using tpfuse::ref_reduce_scatter;
using tpfuse::spawn_group;
using tpfuse::Tensor;

Tensor scalar_tensor(double v) {
  Tensor t(1, 1, 1);
  t(0, 0, 0) = v;
  return t;
}

}  // namespace

TEST(SpawnGroup, SingletonAndIdentityBody) {
  auto single = spawn_group(1, [](RankEndpoint& ep) { return ep.rank(); });
  EXPECT_EQ(single, std::vector<int>({0}));

  auto four = spawn_group(4, [](RankEndpoint& ep) { return ep.rank(); });
  EXPECT_EQ(four, std::vector<int>({0, 1, 2, 3}));
}

TEST(SpawnGroup, RingShiftDeliversPredecessorRank) {
  auto out = spawn_group(4, [](RankEndpoint& ep) {
    const int t = ep.group_size();
    ep.send((ep.rank() + 1) % t, scalar_tensor(ep.rank()));
    return static_cast<int>(ep.recv((ep.rank() - 1 + t) % t)(0, 0, 0));
  });
  EXPECT_EQ(out, std::vector<int>({3, 0, 1, 2}));
}

TEST(SpawnGroup, FailurePropagationNamesRank) {
  try {
    spawn_group(4, [](RankEndpoint& ep) -> int {
      if (ep.rank() == 2) throw std::runtime_error("boom");
      // Ranks other than 2 block on a message rank 2 never sends; the
      // group failure must still unwind them.
      if (ep.rank() == 3) return static_cast<int>(ep.recv(2)(0, 0, 0));
      return ep.rank();
    });
    FAIL() << "expected GroupError";
  } catch (const GroupError& e) {
    EXPECT_EQ(e.failing_rank(), 2);
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
}

TEST(SendRecv, SingleMessageDelivery) {
  spawn_group(2, [](RankEndpoint& ep) {
    const Tensor x = randint_fill(1, 2, 3, 0, 9, 4);
    if (ep.rank() == 0) {
      ep.send(1, x);
    } else {
      EXPECT_EQ(ep.recv(0), x);
    }
    return 0;
  });
}

TEST(SendRecv, FifoOrderForTwoMessages) {
  spawn_group(2, [](RankEndpoint& ep) {
    if (ep.rank() == 0) {
      ep.send(1, scalar_tensor(1.0));
      ep.send(1, scalar_tensor(2.0));
    } else {
      EXPECT_DOUBLE_EQ(ep.recv(0)(0, 0, 0), 1.0);
      EXPECT_DOUBLE_EQ(ep.recv(0)(0, 0, 0), 2.0);
    }
    return 0;
  });
}

TEST(SendRecv, FifoOrderRandomizedCounts) {
  std::mt19937 rng(123);
  for (int round = 0; round < 20; ++round) {
    const int count = 1 + static_cast<int>(rng() % 17);
    spawn_group(2, [&](RankEndpoint& ep) {
      if (ep.rank() == 0) {
        for (int i = 0; i < count; ++i) ep.send(1, scalar_tensor(i));
      } else {
        for (int i = 0; i < count; ++i)
          EXPECT_DOUBLE_EQ(ep.recv(0)(0, 0, 0), i);
      }
      return 0;
    });
  }
}

TEST(SendRecv, MatchedRingExchangeDoesNotDeadlock) {
  // Watchdog: ctest enforces a timeout on this binary.
  for (int t : {2, 4, 8}) {
    auto out = spawn_group(t, [](RankEndpoint& ep) {
      const int n = ep.group_size();
      Tensor inbox;
      for (int i = 0; i < 3; ++i) {
        auto send = ep.send_async((ep.rank() + 1) % n, scalar_tensor(ep.rank()));
        auto recv = ep.recv_async((ep.rank() - 1 + n) % n, inbox);
        send.wait();
        recv.wait();
        EXPECT_DOUBLE_EQ(inbox(0, 0, 0), (ep.rank() - 1 + n) % n);
      }
      return 0;
    });
    EXPECT_EQ(out.size(), static_cast<size_t>(t));
  }
}

TEST(SendRecv, SelfSendIsArgumentError) {
  EXPECT_THROW(
      spawn_group(2,
                  [](RankEndpoint& ep) {
                    ep.send(ep.rank(), scalar_tensor(0.0));
                    return 0;
                  }),
      GroupError);
}

TEST(SendRecv, DoubleWaitIsUsageError) {
  spawn_group(2, [](RankEndpoint& ep) {
    if (ep.rank() == 0) {
      auto op = ep.send_async(1, scalar_tensor(1.0));
      op.wait();
      EXPECT_THROW(op.wait(), std::logic_error);
    } else {
      ep.recv(0);
    }
    return 0;
  });
}

TEST(SendRecv, CountersTrackPostedOperations) {
  auto counts = spawn_group(3, [](RankEndpoint& ep) {
    const int n = ep.group_size();
    ep.send((ep.rank() + 1) % n, scalar_tensor(1.0));
    ep.send((ep.rank() + 2) % n, scalar_tensor(2.0));
    ep.recv((ep.rank() + 1) % n);
    ep.recv((ep.rank() + 2) % n);
    return std::pair<uint64_t, uint64_t>(ep.sends_posted(), ep.recvs_posted());
  });
  for (const auto& [sends, recvs] : counts) {
    EXPECT_EQ(sends, 2u);
    EXPECT_EQ(recvs, 2u);
  }
}

TEST(SendRecv, DeliveryDelayHoldsMessagesUntilDue) {
  const double delay_ms = 30.0;
  spawn_group(
      2,
      [&](RankEndpoint& ep) {
        if (ep.rank() == 0) {
          ep.send(1, scalar_tensor(5.0));
        } else {
          const auto t0 = std::chrono::steady_clock::now();
          ep.recv(0);
          const double waited =
              std::chrono::duration<double, std::milli>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
          EXPECT_GE(waited, delay_ms * 0.5);
        }
        return 0;
      },
      FabricOptions{delay_ms});
}

TEST(RefAllGather, SingletonAndScalarSlices) {
  auto single = spawn_group(1, [](RankEndpoint& ep) {
    return ref_all_gather(ep, scalar_tensor(7.0));
  });
  EXPECT_EQ(single[0], scalar_tensor(7.0));

  auto out = spawn_group(4, [](RankEndpoint& ep) {
    return ref_all_gather(ep, scalar_tensor(ep.rank()));
  });
  for (const Tensor& gathered : out) {
    ASSERT_EQ(gathered.seq(), 4);
    for (int64_t s = 0; s < 4; ++s) EXPECT_DOUBLE_EQ(gathered(0, s, 0), s);
  }
}

TEST(RefAllGather, MatchesCentralCollection) {
  const int t = 4;
  std::vector<Tensor> slices;
  for (int r = 0; r < t; ++r)
    slices.push_back(randint_fill(2, 3, 5, -9, 9, 50 + static_cast<uint64_t>(r)));
  const Tensor expected = tpfuse::concat_seq(slices);
  auto out = spawn_group(t, [&](RankEndpoint& ep) {
    return ref_all_gather(ep, slices[static_cast<size_t>(ep.rank())]);
  });
  for (const Tensor& gathered : out) EXPECT_EQ(gathered, expected);
}

TEST(RefReduceScatter, SingletonAndIndexedSum) {
  auto single = spawn_group(1, [](RankEndpoint& ep) {
    return ref_reduce_scatter(ep, scalar_tensor(3.0));
  });
  EXPECT_EQ(single[0], scalar_tensor(3.0));

  // entry(r, s) = 10 r + s  =>  rank s holds sum_r = 60 + 4 s.
  auto out = spawn_group(4, [](RankEndpoint& ep) {
    Tensor mine(1, 4, 1);
    for (int64_t s = 0; s < 4; ++s) mine(0, s, 0) = 10.0 * ep.rank() + s;
    return ref_reduce_scatter(ep, mine);
  });
  for (int s = 0; s < 4; ++s) {
    ASSERT_EQ(out[static_cast<size_t>(s)].seq(), 1);
    EXPECT_DOUBLE_EQ(out[static_cast<size_t>(s)](0, 0, 0), 60.0 + 4.0 * s);
  }
}

TEST(RefReduceScatter, ConservationOfTotals) {
  const int t = 4;
  std::vector<Tensor> inputs;
  for (int r = 0; r < t; ++r)
    inputs.push_back(randint_fill(1, 8, 3, 0, 7, 60 + static_cast<uint64_t>(r)));
  auto out = spawn_group(t, [&](RankEndpoint& ep) {
    return ref_reduce_scatter(ep, inputs[static_cast<size_t>(ep.rank())]);
  });
  double total_in = 0.0, total_out = 0.0;
  for (const Tensor& x : inputs)
    for (double v : x.raw()) total_in += v;
  for (const Tensor& x : out)
    for (double v : x.raw()) total_out += v;
  EXPECT_DOUBLE_EQ(total_in, total_out);
}

TEST(RefAllToAll, TransposeAndInvolution) {
  auto single = spawn_group(1, [](RankEndpoint& ep) {
    return ref_all_to_all(ep, {scalar_tensor(9.0)});
  });
  EXPECT_EQ(single[0][0], scalar_tensor(9.0));

  // rank0 = [A, B], rank1 = [C, D]  ->  rank0 = [A, C], rank1 = [B, D].
  auto out = spawn_group(2, [](RankEndpoint& ep) {
    const double base = ep.rank() == 0 ? 1.0 : 3.0;  // A=1 B=2 C=3 D=4
    return ref_all_to_all(ep, {scalar_tensor(base), scalar_tensor(base + 1)});
  });
  EXPECT_DOUBLE_EQ(out[0][0](0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out[0][1](0, 0, 0), 3.0);
  EXPECT_DOUBLE_EQ(out[1][0](0, 0, 0), 2.0);
  EXPECT_DOUBLE_EQ(out[1][1](0, 0, 0), 4.0);

  // Applying the transpose twice restores the original layout.
  const int t = 4;
  std::vector<std::vector<Tensor>> parts(static_cast<size_t>(t));
  for (int r = 0; r < t; ++r)
    for (int j = 0; j < t; ++j)
      parts[static_cast<size_t>(r)].push_back(
          randint_fill(1, 2, 2, 0, 9, static_cast<uint64_t>(10 * r + j)));
  auto twice = spawn_group(t, [&](RankEndpoint& ep) {
    auto once = ref_all_to_all(ep, parts[static_cast<size_t>(ep.rank())]);
    return ref_all_to_all(ep, once);
  });
  for (int r = 0; r < t; ++r)
    for (int j = 0; j < t; ++j)
      EXPECT_EQ(twice[static_cast<size_t>(r)][static_cast<size_t>(j)],
                parts[static_cast<size_t>(r)][static_cast<size_t>(j)]);
}

TEST(RefCollectives, ShapeDisagreementIsReported) {
  EXPECT_THROW(spawn_group(2,
                           [](RankEndpoint& ep) {
                             return ref_all_gather(
                                 ep, Tensor(1, 1, 2 + ep.rank()));
                           }),
               GroupError);
  EXPECT_THROW(spawn_group(2,
                           [](RankEndpoint& ep) {
                             const Tensor mine(1, 1, 2 + ep.rank());
                             return ref_all_to_all(ep, {mine, mine});
                           }),
               GroupError);
}

TEST(RefCollectives, ReduceScatterThenAllGatherEqualsAllReduce) {
  const int t = 4;
  std::vector<Tensor> inputs;
  for (int r = 0; r < t; ++r)
    inputs.push_back(randint_fill(2, 8, 3, -4, 5, 80 + static_cast<uint64_t>(r)));

  Tensor expected = inputs[0];
  for (int r = 1; r < t; ++r) tpfuse::accumulate(expected, inputs[static_cast<size_t>(r)]);

  auto out = spawn_group(t, [&](RankEndpoint& ep) {
    const Tensor slice =
        ref_reduce_scatter(ep, inputs[static_cast<size_t>(ep.rank())]);
    return ref_all_gather(ep, slice);
  });
  for (const Tensor& x : out) EXPECT_EQ(x, expected);
}
