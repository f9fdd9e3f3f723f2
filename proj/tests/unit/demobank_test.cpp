#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <list>
#include <thread>

#include "support.hpp"
#include "uniicl/demobank.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/io.hpp"

namespace uniicl {
namespace {

using testing::Gen;
using testing::TempDir;
using testing::tiny_config;

DemonstrationRecord demo_of(Gen& g, std::size_t id, std::size_t len) {
  DemonstrationRecord d;
  d.text = "demo-" + std::to_string(id);
  d.token_ids = g.tokens(len, 64);
  return d;
}

// Reference LRU: most recently used at the front.
class LruOracle {
 public:
  explicit LruOracle(std::size_t capacity) : capacity_(capacity) {}

  /// Returns the evicted keys.
  std::vector<std::string> access(const std::string& key) {
    auto it = std::find(order_.begin(), order_.end(), key);
    if (it != order_.end()) {
      order_.erase(it);
      order_.push_front(key);
      ++hits;
      return {};
    }
    ++misses;
    order_.push_front(key);
    std::vector<std::string> out;
    while (order_.size() > capacity_) {
      out.push_back(order_.back());
      order_.pop_back();
    }
    return out;
  }

  std::size_t hits = 0, misses = 0;

 private:
  std::size_t capacity_;
  std::list<std::string> order_;
};

class DemoBankTest : public ::testing::Test {
 protected:
  Backbone bb{tiny_config(3)};
  Compressor comp{bb};
  Gen g{17};
  CompressorParams params = testing::perturbed_params(bb, g);
};

TEST_F(DemoBankTest, MissThenHit) {
  DemoBank bank(comp);
  auto demo = demo_of(g, 0, 20);
  auto before = bb.stats().snapshot();
  auto first = bank.get_or_compress(demo, 12, params);
  auto mid = bb.stats().snapshot();
  EXPECT_GE((mid - before).forward_calls, 1u);
  auto second = bank.get_or_compress(demo, 12, params);
  EXPECT_EQ((bb.stats().snapshot() - mid).forward_calls, 0u);
  EXPECT_TRUE(bitwise_equal(first.tokens, second.tokens));
  EXPECT_EQ(bank.stats().hits, 1u);
  EXPECT_EQ(bank.stats().misses, 1u);
}

TEST_F(DemoBankTest, CachedValueEqualsDirectCompression) {
  DemoBank bank(comp);
  auto demo = demo_of(g, 0, 30);
  auto cached = bank.get_or_compress(demo, 7, params);
  auto direct = comp.compress_segmented(demo.token_ids, 7, params);
  EXPECT_TRUE(bitwise_equal(cached.tokens, direct.tokens));
  EXPECT_FALSE(cached.tokens.requires_grad());
}

TEST_F(DemoBankTest, FiveShotsWithThreeUniqueCompressThreeTimes) {
  DemoBank bank(comp);
  std::vector<DemonstrationRecord> unique{demo_of(g, 0, 10), demo_of(g, 1, 11), demo_of(g, 2, 12)};
  std::vector<std::size_t> request{0, 1, 0, 2, 1};
  auto before = bb.stats().snapshot();
  for (auto i : request) bank.get_or_compress(unique[i], 12, params);
  EXPECT_EQ((bb.stats().snapshot() - before).forward_calls, 3u);
  EXPECT_EQ(bank.stats().misses, 3u);
  EXPECT_EQ(bank.stats().hits, 2u);
}

TEST_F(DemoBankTest, KeyIncludesRatioAndParamsVersion) {
  DemoBank bank(comp);
  auto demo = demo_of(g, 0, 16);
  bank.get_or_compress(demo, 12, params);
  bank.get_or_compress(demo, 8, params);
  auto other = params.clone();
  auto s = other.memory_slot.to_vector();
  s[0] += 0.5;
  other.memory_slot.assign(s);
  bank.get_or_compress(demo, 12, other);
  EXPECT_EQ(bank.stats().misses, 3u);
  EXPECT_EQ(bank.size(), 3u);
  EXPECT_EQ(bank.invalidate_stale(other.version_stamp()), 2u);
  EXPECT_EQ(bank.size(), 1u);
}

TEST_F(DemoBankTest, EvictionExamples) {
  DemoBank bank(comp);
  std::vector<DemonstrationRecord> demos;
  for (std::size_t i = 0; i < 12; ++i) demos.push_back(demo_of(g, i, 6));
  for (std::size_t i = 0; i < 10; ++i) bank.get_or_compress(demos[i], 12, params);
  EXPECT_EQ(bank.evict_to_capacity(10), 0u);
  bank.get_or_compress(demos[10], 12, params);
  bank.get_or_compress(demos[11], 12, params);
  // Touch 0 and 1 so 2 and 3 become least recently used.
  bank.get_or_compress(demos[0], 12, params);
  bank.get_or_compress(demos[1], 12, params);
  EXPECT_EQ(bank.evict_to_capacity(10), 2u);
  auto stamp = params.version_stamp();
  EXPECT_FALSE(bank.contains(BankKey::make(demos[2], 12, stamp)));
  EXPECT_FALSE(bank.contains(BankKey::make(demos[3], 12, stamp)));
  EXPECT_TRUE(bank.contains(BankKey::make(demos[0], 12, stamp)));
  EXPECT_EQ(bank.evict_to_capacity(0), 10u);
  EXPECT_EQ(bank.size(), 0u);
}

TEST_F(DemoBankTest, BoundedCapacityMatchesLruOracle) {
  for (std::size_t capacity : {1u, 3u, 7u}) {
    DemoBank bank(comp, capacity);
    LruOracle oracle(capacity);
    std::vector<DemonstrationRecord> demos;
    for (std::size_t i = 0; i < 12; ++i) demos.push_back(demo_of(g, i, 5));
    std::size_t evicted = 0;
    for (int step = 0; step < 300; ++step) {
      auto i = g.size(0, demos.size() - 1);
      evicted += oracle.access(demos[i].text).size();
      bank.get_or_compress(demos[i], 12, params);
      ASSERT_EQ(bank.size(), std::min<std::size_t>(capacity, oracle.misses));
    }
    auto stats = bank.stats();
    EXPECT_EQ(stats.hits, oracle.hits);
    EXPECT_EQ(stats.misses, oracle.misses);
    EXPECT_EQ(stats.evictions, evicted);
  }
}

TEST_F(DemoBankTest, EmptyBankRoundTrip) {
  TempDir dir("bank_empty");
  {
    auto bank = DemoBank::open(dir / "bank.log", comp);
    bank->persist();
  }
  auto reopened = DemoBank::open(dir / "bank.log", comp);
  EXPECT_EQ(reopened->size(), 0u);
}

TEST_F(DemoBankTest, HundredEntriesRoundTrip) {
  TempDir dir("bank_rt");
  std::vector<BankEntry> expected;
  {
    auto bank = DemoBank::open(dir / "bank.log", comp);
    for (std::size_t i = 0; i < 100; ++i)
      bank->get_or_compress(demo_of(g, i, g.size(1, 40)), g.integer(1, 16), params);
    for (std::size_t i = 0; i < 30; ++i) bank->get_or_compress(demo_of(g, 1000 + i, 4), 4, params);
    bank->persist();
    expected = bank->entries();
  }
  auto reopened = DemoBank::open(dir / "bank.log", comp);
  auto got = reopened->entries();
  ASSERT_EQ(got.size(), expected.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].key, expected[i].key);
    EXPECT_EQ(got[i].version, expected[i].version);
    EXPECT_EQ(got[i].last_access, expected[i].last_access);
    EXPECT_EQ(got[i].created, expected[i].created);
    EXPECT_TRUE(bitwise_equal(got[i].value.tokens, expected[i].value.tokens));
    EXPECT_TRUE(bitwise_equal(got[i].value.pooled, expected[i].value.pooled));
    EXPECT_EQ(got[i].value.source_len, expected[i].value.source_len);
    EXPECT_EQ(got[i].value.ratio, expected[i].value.ratio);
  }
}

TEST_F(DemoBankTest, AppendLogReplaysWithoutPersist) {
  TempDir dir("bank_replay");
  std::vector<DemonstrationRecord> demos;
  for (std::size_t i = 0; i < 6; ++i) demos.push_back(demo_of(g, i, 8));
  {
    auto bank = DemoBank::open(dir / "bank.log", comp, 4);
    for (auto& d : demos) bank->get_or_compress(d, 12, params);
  }
  auto reopened = DemoBank::open(dir / "bank.log", comp, 4);
  EXPECT_EQ(reopened->size(), 4u);
  auto stamp = params.version_stamp();
  EXPECT_FALSE(reopened->contains(BankKey::make(demos[0], 12, stamp)));
  EXPECT_TRUE(reopened->contains(BankKey::make(demos[5], 12, stamp)));
}

TEST_F(DemoBankTest, TruncatedLogFailsToOpen) {
  TempDir dir("bank_trunc");
  {
    auto bank = DemoBank::open(dir / "bank.log", comp);
    for (std::size_t i = 0; i < 5; ++i) bank->get_or_compress(demo_of(g, i, 20), 12, params);
  }
  auto bytes = io::read_file(dir / "bank.log");
  bytes.resize(bytes.size() - 17);
  io::write_file_atomic(dir / "bank.log", bytes);
  EXPECT_THROW(DemoBank::open(dir / "bank.log", comp), FormatError);
}

TEST_F(DemoBankTest, CorruptRecordIsQuarantined) {
  TempDir dir("bank_crc");
  {
    auto bank = DemoBank::open(dir / "bank.log", comp);
    for (std::size_t i = 0; i < 3; ++i) bank->get_or_compress(demo_of(g, i, 20), 12, params);
  }
  auto bytes = io::read_file(dir / "bank.log");
  bytes[bytes.size() - 5] ^= 0xff;  // inside the last record's pooled vector
  io::write_file_atomic(dir / "bank.log", bytes);
  auto bank = DemoBank::open(dir / "bank.log", comp);
  EXPECT_EQ(bank->size(), 2u);
  EXPECT_EQ(bank->stats().quarantined, 1u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "bank.log.quarantine"));
}

TEST_F(DemoBankTest, ForeignBackboneIsRejected) {
  TempDir dir("bank_foreign");
  DemoBank::open(dir / "bank.log", comp)->persist();
  Backbone other(tiny_config(4));
  Compressor other_comp(other);
  EXPECT_THROW(DemoBank::open(dir / "bank.log", other_comp), FormatError);
}

TEST_F(DemoBankTest, CompactReclaimsRemovedRecords) {
  TempDir dir("bank_compact");
  auto bank = DemoBank::open(dir / "bank.log", comp);
  for (std::size_t i = 0; i < 20; ++i) bank->get_or_compress(demo_of(g, i, 20), 12, params);
  bank->evict_to_capacity(5);
  EXPECT_GT(bank->compact(), 0u);
  EXPECT_EQ(DemoBank::open(dir / "bank.log", comp)->size(), 5u);
}

TEST_F(DemoBankTest, ConcurrentReadersAndWriters) {
  DemoBank bank(comp);
  std::vector<DemonstrationRecord> demos;
  for (std::size_t i = 0; i < 16; ++i) demos.push_back(demo_of(g, i, 10));
  std::vector<MemoryTokens> direct;
  for (auto& d : demos) direct.push_back(comp.compress(d.token_ids, 12, params));
  constexpr int kThreads = 4, kPerThread = 200;
  std::vector<std::thread> workers;
  std::atomic<int> mismatches{0};
  for (int t = 0; t < kThreads; ++t) {
    workers.emplace_back([&, t] {
      Gen local(100 + t);
      for (int i = 0; i < kPerThread; ++i) {
        auto j = local.size(0, demos.size() - 1);
        auto mt = bank.get_or_compress(demos[j], 12, params);
        if (!bitwise_equal(mt.tokens, direct[j].tokens)) ++mismatches;
      }
    });
  }
  for (auto& w : workers) w.join();
  EXPECT_EQ(mismatches.load(), 0);
  auto s = bank.stats();
  EXPECT_EQ(s.hits + s.misses, static_cast<std::uint64_t>(kThreads * kPerThread));
  EXPECT_EQ(bank.size(), demos.size());
}

TEST_F(DemoBankTest, PersistRequiresFileBackedBank) {
  DemoBank bank(comp);
  EXPECT_THROW(bank.persist(), ContractError);
}

}  // namespace
}  // namespace uniicl
