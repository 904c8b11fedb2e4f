#include <gtest/gtest.h>

#include <chrono>
#include <cstring>
#include <thread>

#include "oracles.hpp"
#include "syncbn/collectives.hpp"

using namespace syncbn;
using namespace std::chrono_literals;

namespace {

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(AllReduce, TwoDevices) {
  DeviceGroup g(2, 2);
  auto out = g.run([](DeviceHandle& h) {
    std::vector<double> v = h.rank() == 0 ? std::vector<double>{1, 2} : std::vector<double>{3, 4};
    return allreduce_sum(h, Scope::world, v);
  });
  EXPECT_EQ(out[0], (std::vector<double>{4, 6}));
  EXPECT_EQ(out[1], (std::vector<double>{4, 6}));
}

TEST(AllReduce, SingletonIsIdentity) {
  DeviceGroup g(1, 1);
  auto out = g.run([](DeviceHandle& h) { return allreduce_sum(h, Scope::world, std::vector<double>{0.1, -3}); });
  EXPECT_EQ(out[0], (std::vector<double>{0.1, -3}));
}

TEST(AllReduce, MatchesAscendingRankSequentialSumBitwise) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<std::vector<double>> inputs(4);
    Rng rng(seed);
    for (auto& v : inputs) {
      v.resize(17);
      for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
    }
    const auto expected = oracle::sequential_sum(inputs);
    DeviceGroup g(4, 1);
    auto out = g.run([&](DeviceHandle& h) {
      if (h.rank() % 2) std::this_thread::sleep_for(std::chrono::microseconds(50 * h.rank()));
      return allreduce_sum(h, Scope::world, inputs[h.rank()]);
    });
    for (const auto& o : out) EXPECT_TRUE(bitwise_equal(o, expected));
  }
}

TEST(AllReduce, LengthMismatchIsFatalWithRanks) {
  DeviceGroup g(GroupOptions{3, 1, 0, 2000ms});
  try {
    g.run([](DeviceHandle& h) {
      std::vector<double> v(h.rank() == 2 ? 3 : 4, 1.0);
      return allreduce_sum(h, Scope::world, v);
    });
    FAIL() << "expected CollectiveError";
  } catch (const CollectiveError& e) {
    EXPECT_FALSE(e.secondary());
    EXPECT_NE(std::string(e.what()).find("rank 2"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(g.failed());
}

TEST(AllReduce, MismatchedSequenceIsProtocolViolation) {
  DeviceGroup g(GroupOptions{2, 1, 0, 2000ms});
  try {
    g.run([](DeviceHandle& h) {
      if (h.rank() == 1) {
        barrier(h, Scope::world);
      } else {
        allreduce_sum(h, Scope::world, std::vector<double>{1.0});
      }
    });
    FAIL() << "expected CollectiveError";
  } catch (const CollectiveError& e) {
    EXPECT_NE(std::string(e.what()).find("protocol violation"), std::string::npos) << e.what();
  }
}

TEST(Broadcast, CopiesRootToGroup) {
  DeviceGroup g(4, 4);
  auto out = g.run([](DeviceHandle& h) {
    std::vector<double> v = h.rank() == 0 ? std::vector<double>{3.25} : std::vector<double>{};
    return broadcast(h, Scope::world, 0, v);
  });
  for (const auto& o : out) EXPECT_EQ(o, (std::vector<double>{3.25}));
}

TEST(Broadcast, ScopeIsolation) {
  DeviceGroup g(4, 2);
  auto out = g.run([](DeviceHandle& h) {
    const int root = h.scope_root(Scope::bn_group);
    std::vector<double> v = h.rank() == root ? std::vector<double>{100.0 + root} : std::vector<double>{-1};
    return broadcast(h, Scope::bn_group, root, v);
  });
  EXPECT_EQ(out[0][0], 100.0);
  EXPECT_EQ(out[1][0], 100.0);
  EXPECT_EQ(out[2][0], 102.0);
  EXPECT_EQ(out[3][0], 102.0);
}

TEST(Broadcast, RootOutsideScope) {
  DeviceGroup g(GroupOptions{4, 2, 0, 1000ms});
  EXPECT_THROW(g.run([](DeviceHandle& h) { return broadcast(h, Scope::bn_group, 3, std::vector<double>{1.0}); }),
               CollectiveError);
}

TEST(Broadcast, AfterAllReduceChangesNothing) {
  DeviceGroup g(5, 5);
  auto out = g.run([](DeviceHandle& h) {
    std::vector<double> v(6);
    for (auto& x : v) x = h.rng().normal();
    auto reduced = allreduce_sum(h, Scope::world, v);
    auto again = broadcast(h, Scope::world, 3, reduced);
    return std::make_pair(reduced, again);
  });
  for (const auto& [a, b] : out) {
    EXPECT_TRUE(bitwise_equal(a, b));
    EXPECT_TRUE(bitwise_equal(a, out[0].first));
  }
}

TEST(Reduce, OnlyRootReceives) {
  DeviceGroup g(4, 2);
  auto out = g.run([](DeviceHandle& h) {
    return reduce_sum(h, Scope::bn_group, std::vector<double>{static_cast<double>(h.rank())});
  });
  ASSERT_TRUE(out[0]);
  EXPECT_EQ((*out[0])[0], 1.0);
  EXPECT_FALSE(out[1]);
  ASSERT_TRUE(out[2]);
  EXPECT_EQ((*out[2])[0], 5.0);
  EXPECT_FALSE(out[3]);
}

TEST(AllReduce, BnGroupCanaryIsolation) {
  DeviceGroup g(4, 2);
  auto out = g.run([](DeviceHandle& h) {
    // group {2,3} carries huge canaries that must never leak into {0,1}
    std::vector<double> v{h.rank() < 2 ? 1.0 + h.rank() : 1e30};
    return allreduce_sum(h, Scope::bn_group, v);
  });
  EXPECT_EQ(out[0][0], 3.0);
  EXPECT_EQ(out[1][0], 3.0);
  EXPECT_EQ(out[2][0], 2e30);
}

TEST(AllReduce, FloatPayload) {
  DeviceGroup g(3, 3);
  auto out = g.run([](DeviceHandle& h) { return allreduce_sum(h, Scope::world, std::vector<float>{0.5f, 1.0f}); });
  for (const auto& o : out) EXPECT_EQ(o, (std::vector<float>{1.5f, 3.0f}));
}

TEST(Barrier, SingleRankReturnsImmediately) {
  DeviceGroup g(1, 1);
  g.run([](DeviceHandle& h) { barrier(h, Scope::world); });
}

TEST(Barrier, ReleasesAllInArbitraryOrder) {
  DeviceGroup g(6, 3);
  std::atomic<int> entered{0};
  auto out = g.run([&](DeviceHandle& h) {
    std::this_thread::sleep_for(std::chrono::milliseconds((5 - h.rank()) * 3));
    entered.fetch_add(1);
    barrier(h, Scope::world);
    return entered.load();
  });
  for (int v : out) EXPECT_EQ(v, 6);
}

TEST(Barrier, MissingRankTimesOutAndIsNamed) {
  DeviceGroup g(GroupOptions{4, 1, 0, 200ms});
  try {
    g.run([](DeviceHandle& h) {
      if (h.rank() != 2) barrier(h, Scope::world);
    });
    FAIL() << "expected CollectiveTimeout";
  } catch (const CollectiveTimeout& e) {
    EXPECT_EQ(e.ranks(), std::vector<int>{2});
    EXPECT_NE(std::string(e.what()).find("missing rank 2"), std::string::npos) << e.what();
  }
}

TEST(DeviceGroup, RejectsBadPartition) {
  EXPECT_THROW(DeviceGroup(4, 3), InvalidArgument);
  EXPECT_THROW(DeviceGroup(0, 1), InvalidArgument);
}

TEST(DeviceGroup, FailedGroupRefusesReuse) {
  DeviceGroup g(GroupOptions{2, 1, 0, 500ms});
  EXPECT_THROW(g.run([](DeviceHandle& h) {
                 if (h.rank() == 1) throw std::runtime_error("boom");
                 barrier(h, Scope::world);
               }),
               std::runtime_error);
  EXPECT_THROW(g.run([](DeviceHandle&) {}), CollectiveError);
}

TEST(DeviceGroup, PerRankRngIsSeededFromGlobalSeedAndRank) {
  auto draw = [](std::uint64_t seed) {
    DeviceGroup g(3, 1, seed);
    return g.run([](DeviceHandle& h) { return h.rng().next_u64(); });
  };
  auto a = draw(9), b = draw(9), c = draw(10);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_NE(a[0], a[1]);
}

TEST(AllReduce, RepeatedRunsAreBitwiseDeterministic) {
  auto once = [] {
    DeviceGroup g(8, 4, 77);
    return g.run([](DeviceHandle& h) {
      std::vector<double> acc;
      for (int round = 0; round < 20; ++round) {
        std::vector<double> v(9);
        for (auto& x : v) x = h.rng().normal() * 1e3;
        auto r = allreduce_sum(h, round % 2 ? Scope::bn_group : Scope::world, v);
        acc.insert(acc.end(), r.begin(), r.end());
      }
      return acc;
    });
  };
  auto a = once(), b = once();
  for (std::size_t r = 0; r < a.size(); ++r) EXPECT_TRUE(bitwise_equal(a[r], b[r]));
}
