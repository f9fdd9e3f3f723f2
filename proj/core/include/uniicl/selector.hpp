#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "uniicl/compressor.hpp"

namespace uniicl {

struct SaliencyScore {
  std::size_t demo_index = 0;
  double score = 0.0;
  /// Set when either pooled vector has zero norm; score is then 0.
  bool degenerate = false;
};

enum class CandidateMode {
  /// Pre-rank a large pool, keep the top `prerank_top`, then select.
  kHighResource,
  /// Select directly from a fixed pool of `low_resource_pool` candidates.
  kLowResource,
};

struct SelectionConfig {
  std::size_t n_shots = 1;
  std::size_t prerank_top = 10;
  std::size_t low_resource_pool = 20;
  CandidateMode mode = CandidateMode::kHighResource;
};

/// Mean of the Memory Token rows.
Tensor pool(const MemoryTokens& tokens);

/// Cosine similarity of pooled vectors.
SaliencyScore saliency(std::span<const double> query_pooled, std::span<const double> demo_pooled,
                       std::size_t demo_index = 0);

/// Indices of the m most salient candidates, by descending score; ties go
/// to the lower index.
std::vector<std::size_t> select(const MemoryTokens& query, std::span<const MemoryTokens> candidates,
                                std::size_t m);
std::vector<SaliencyScore> score_all(const MemoryTokens& query,
                                     std::span<const MemoryTokens> candidates);

/// Scores a text against a candidate; higher is more similar.
class PreRanker {
 public:
  virtual ~PreRanker() = default;
  virtual double score(std::span<const TokenId> query, std::span<const TokenId> candidate) const = 0;
};

/// Token-level F1 of multiset overlap.
class LexicalPreRanker final : public PreRanker {
 public:
  double score(std::span<const TokenId> query, std::span<const TokenId> candidate) const override;
};

/// Indices of the `top` highest-scoring pool entries, descending, ties by index.
std::vector<std::size_t> prerank(std::span<const TokenId> query,
                                 std::span<const DemonstrationRecord> pool, std::size_t top,
                                 const PreRanker& ranker = LexicalPreRanker{});

/// Candidate indices for one query. High-resource mode pre-ranks the whole
/// pool and keeps the top `prerank_top`; low-resource mode uses one fixed
/// seeded sample of `low_resource_pool` entries for every query. Both are
/// clamped to the pool size.
std::vector<std::size_t> candidate_pool(std::span<const TokenId> query,
                                        std::span<const DemonstrationRecord> pool,
                                        const SelectionConfig& cfg, std::uint64_t seed);

}  // namespace uniicl
