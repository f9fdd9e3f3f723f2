#include "uniicl/selector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "uniicl/errors.hpp"
#include "uniicl/ops.hpp"

namespace uniicl {

namespace {

std::vector<std::size_t> top_by_score(std::span<const double> scores, std::size_t m) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(m);
  return idx;
}

}  // namespace

Tensor pool(const MemoryTokens& tokens) { return mean_rows(tokens.tokens); }

SaliencyScore saliency(std::span<const double> query_pooled, std::span<const double> demo_pooled,
                       std::size_t demo_index) {
  if (query_pooled.size() != demo_pooled.size()) {
    throw DimensionError("saliency: pooled sizes " + std::to_string(query_pooled.size()) +
                         " and " + std::to_string(demo_pooled.size()) + " differ");
  }
  double dot = 0.0, nq = 0.0, nd = 0.0;
  for (std::size_t i = 0; i < query_pooled.size(); ++i) {
    dot += query_pooled[i] * demo_pooled[i];
    nq += query_pooled[i] * query_pooled[i];
    nd += demo_pooled[i] * demo_pooled[i];
  }
  if (nq == 0.0 || nd == 0.0) return {demo_index, 0.0, true};
  double s = dot / (std::sqrt(nq) * std::sqrt(nd));
  return {demo_index, std::clamp(s, -1.0, 1.0), false};
}

std::vector<SaliencyScore> score_all(const MemoryTokens& query,
                                     std::span<const MemoryTokens> candidates) {
  std::vector<SaliencyScore> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    out.push_back(saliency(query.pooled.data(), candidates[i].pooled.data(), i));
  return out;
}

std::vector<std::size_t> select(const MemoryTokens& query, std::span<const MemoryTokens> candidates,
                                std::size_t m) {
  if (m > candidates.size()) {
    throw ContractError("select: m=" + std::to_string(m) + " exceeds " +
                        std::to_string(candidates.size()) + " candidates");
  }
  auto scores = score_all(query, candidates);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Degenerate (zero-norm) candidates rank after every scored one.
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].degenerate != scores[b].degenerate) return !scores[a].degenerate;
    return scores[a].score > scores[b].score;
  });
  idx.resize(m);
  return idx;
}

double LexicalPreRanker::score(std::span<const TokenId> query,
                               std::span<const TokenId> candidate) const {
  if (query.empty() || candidate.empty()) return 0.0;
  std::map<TokenId, std::size_t> counts;
  for (auto t : query) ++counts[t];
  std::size_t overlap = 0;
  for (auto t : candidate) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(query.size());
  return 2.0 * p * r / (p + r);
}

std::vector<std::size_t> prerank(std::span<const TokenId> query,
                                 std::span<const DemonstrationRecord> pool, std::size_t top,
                                 const PreRanker& ranker) {
  if (top > pool.size()) {
    throw ContractError("prerank: top=" + std::to_string(top) + " exceeds pool of " +
                        std::to_string(pool.size()));
  }
  std::vector<double> scores;
  scores.reserve(pool.size());
  for (const auto& d : pool) scores.push_back(ranker.score(query, d.token_ids));
  return top_by_score(scores, top);
}

std::vector<std::size_t> candidate_pool(std::span<const TokenId> query,
                                        std::span<const DemonstrationRecord> pool,
                                        const SelectionConfig& cfg, std::uint64_t seed) {
  if (cfg.mode == CandidateMode::kHighResource)
    return prerank(query, pool, std::min(cfg.prerank_top, pool.size()));
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), cfg.low_resource_pool));
  return order;
}

}  // namespace uniicl
