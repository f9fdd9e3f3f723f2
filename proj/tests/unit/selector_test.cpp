#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/selector.hpp"

namespace uniicl {
namespace {

using testing::Gen;

MemoryTokens memory_of(std::vector<double> rows, std::size_t k, std::size_t d) {
  MemoryTokens mt;
  mt.tokens = Tensor::from({k, d}, std::move(rows));
  mt.pooled = mean_rows(mt.tokens);
  mt.source_len = k;
  mt.ratio = 1;
  return mt;
}

MemoryTokens random_memory(Gen& g, std::size_t d) {
  auto k = g.size(1, 4);
  return memory_of(g.values(k * d), k, d);
}

// Brute force: cosine recomputed from token rows, full sort by
// (score desc, index asc).
std::vector<std::size_t> brute_force_top(const MemoryTokens& q, const std::vector<MemoryTokens>& c,
                                         std::size_t m) {
  auto mean = [](const MemoryTokens& mt) {
    const auto k = mt.tokens.dim(0), d = mt.tokens.dim(1);
    std::vector<double> out(d, 0.0);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < d; ++j) out[j] += mt.tokens.at(r * d + j);
    for (auto& x : out) x /= static_cast<double>(k);
    return out;
  };
  auto qv = mean(q);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < c.size(); ++i) {
    auto cv = mean(c[i]);
    double dot = 0, nq = 0, nc = 0;
    for (std::size_t j = 0; j < qv.size(); ++j) {
      dot += qv[j] * cv[j];
      nq += qv[j] * qv[j];
      nc += cv[j] * cv[j];
    }
    scored.push_back({dot / std::sqrt(nq * nc), i});
  }
  std::sort(scored.begin(), scored.end(), [](auto& a, auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(scored[i].second);
  return out;
}

TEST(Pool, Examples) {
  auto two = memory_of({1, 0, 0, 1}, 2, 2);
  EXPECT_EQ(pool(two).to_vector(), (std::vector<double>{0.5, 0.5}));
  auto one = memory_of({3, -2, 7}, 1, 3);
  EXPECT_EQ(pool(one).to_vector(), (std::vector<double>{3, -2, 7}));
  Gen g(1);
  auto mt = random_memory(g, 5);
  auto scaled = memory_of([&] {
    auto v = mt.tokens.to_vector();
    for (auto& x : v) x *= 4.0;
    return v;
  }(), mt.k(), 5);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(pool(scaled).at(j), 4.0 * pool(mt).at(j), 1e-5);
}

TEST(Saliency, Examples) {
  std::vector<double> a{0.3, -1.2, 2.0};
  EXPECT_NEAR(saliency(a, a).score, 1.0, 1e-12);
  EXPECT_EQ(saliency(std::vector<double>{1, 0}, std::vector<double>{0, 1}).score, 0.0);
  EXPECT_NEAR(saliency(std::vector<double>{1, 1}, std::vector<double>{1, 0}).score, 0.70710678, 1e-8);
  auto zero = saliency(std::vector<double>{0, 0}, std::vector<double>{1, 0});
  EXPECT_TRUE(zero.degenerate);
  EXPECT_EQ(zero.score, 0.0);
  EXPECT_THROW(saliency(std::vector<double>{1}, std::vector<double>{1, 0}), DimensionError);
}

TEST(Select, TotalSelectionIsSortedByScore) {
  Gen g(2);
  auto q = random_memory(g, 6);
  std::vector<MemoryTokens> c;
  for (int i = 0; i < 9; ++i) c.push_back(random_memory(g, 6));
  auto all = select(q, c, c.size());
  ASSERT_EQ(all.size(), c.size());
  auto scores = score_all(q, c);
  for (std::size_t i = 1; i < all.size(); ++i)
    EXPECT_GE(scores[all[i - 1]].score, scores[all[i]].score);
  EXPECT_THROW(select(q, c, c.size() + 1), ContractError);
}

TEST(Select, MatchesBruteForceOnRandomPools) {
  Gen g(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = g.size(2, 8);
    auto q = random_memory(g, d);
    std::vector<MemoryTokens> c;
    const auto n = trial == 0 ? 20 : g.size(1, 40);
    for (std::size_t i = 0; i < n; ++i) c.push_back(random_memory(g, d));
    const auto m = trial == 0 ? 5 : g.size(0, n);
    ASSERT_EQ(select(q, c, m), brute_force_top(q, c, m)) << trial;
  }
}

TEST(Select, DuplicateTiesGoToLowerIndex) {
  Gen g(4);
  auto q = random_memory(g, 4);
  auto dup = random_memory(g, 4);
  std::vector<MemoryTokens> c{random_memory(g, 4), dup, random_memory(g, 4), dup};
  auto order = select(q, c, 4);
  auto p1 = std::find(order.begin(), order.end(), 1u);
  auto p3 = std::find(order.begin(), order.end(), 3u);
  EXPECT_EQ(p3 - p1, 1);
}

TEST(Select, InvariantToPositiveScaling) {
  Gen g(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_memory(g, 5);
    std::vector<MemoryTokens> c, scaled;
    for (int i = 0; i < 8; ++i) {
      auto mt = random_memory(g, 5);
      c.push_back(mt);
      auto v = mt.tokens.to_vector();
      for (auto& x : v) x *= 8.0;  // power of two keeps pooled values exact
      scaled.push_back(memory_of(v, mt.k(), 5));
    }
    EXPECT_EQ(select(q, c, 8), select(q, scaled, 8));
  }
}

TEST(Select, PermutationEquivariant) {
  Gen g(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_memory(g, 5);
    std::vector<MemoryTokens> c;
    for (int i = 0; i < 10; ++i) c.push_back(random_memory(g, 5));
    std::vector<std::size_t> perm(c.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g.engine());
    std::vector<MemoryTokens> permuted;
    for (auto p : perm) permuted.push_back(c[p]);
    auto base = select(q, c, 4);
    auto moved = select(q, permuted, 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(perm[moved[i]], base[i]);
  }
}

TEST(Select, DegenerateCandidatesRankLast) {
  auto q = memory_of({1, 0}, 1, 2);
  std::vector<MemoryTokens> c{memory_of({0, 0}, 1, 2), memory_of({-1, 0}, 1, 2)};
  EXPECT_EQ(select(q, c, 2), (std::vector<std::size_t>{1, 0}));
}

std::vector<DemonstrationRecord> pool_of(std::vector<std::vector<TokenId>> ids) {
  std::vector<DemonstrationRecord> out;
  for (auto& v : ids) out.push_back({"", v});
  return out;
}

TEST(Prerank, Examples) {
  LexicalPreRanker lex;
  // "a b c" vs "a b": P=1, R=2/3 → F1 0.8; vs "x y" → 0.
  std::vector<TokenId> q{20, 21, 22};
  EXPECT_NEAR(lex.score(q, std::vector<TokenId>{20, 21}), 0.8, 1e-12);
  EXPECT_EQ(lex.score(q, std::vector<TokenId>{40, 41}), 0.0);
  auto pool = pool_of({{40, 41}, {20, 21}});
  EXPECT_EQ(prerank(q, pool, 1), (std::vector<std::size_t>{1}));

  auto exact = pool_of({{20, 30}, {20, 21, 22}, {21, 22, 23, 24}});
  EXPECT_EQ(prerank(q, exact, 1)[0], 1u);
  EXPECT_EQ(prerank(q, exact, 3).size(), 3u);
  EXPECT_THROW(prerank(q, exact, 4), ContractError);
}

TEST(CandidatePool, ModesAndClamping) {
  Gen g(7);
  std::vector<DemonstrationRecord> pool;
  for (int i = 0; i < 50; ++i) pool.push_back({"", g.tokens(6, 64)});
  auto q = pool[13].token_ids;

  SelectionConfig high;
  high.mode = CandidateMode::kHighResource;
  auto top = candidate_pool(q, pool, high, 1);
  ASSERT_EQ(top.size(), 10u);
  EXPECT_EQ(top[0], 13u);
  EXPECT_EQ(top, prerank(q, pool, 10));

  SelectionConfig low;
  low.mode = CandidateMode::kLowResource;
  auto fixed = candidate_pool(q, pool, low, 1);
  EXPECT_EQ(fixed.size(), 20u);
  EXPECT_EQ(candidate_pool(pool[2].token_ids, pool, low, 1), fixed);
  std::sort(fixed.begin(), fixed.end());
  EXPECT_EQ(std::unique(fixed.begin(), fixed.end()), fixed.end());

  std::span<const DemonstrationRecord> small(pool.data(), 4);
  EXPECT_EQ(candidate_pool(q, small, high, 1).size(), 4u);
  EXPECT_EQ(candidate_pool(q, small, low, 1).size(), 4u);
}

}  // namespace
}  // namespace uniicl
