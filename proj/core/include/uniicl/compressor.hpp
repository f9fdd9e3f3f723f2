#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uniicl/backbone.hpp"
#include "uniicl/digest.hpp"
#include "uniicl/tensor.hpp"
#include "uniicl/tokenizer.hpp"

namespace uniicl {

/// The only trainable state: the Memory Slot embedding [M] and the d×d
/// projection adapter W_p.
struct CompressorParams {
  Tensor memory_slot;  // [d]
  Tensor adapter;      // [d×d]

  /// [M] copies the embedding row of `slot_source` (the reserved <mem> row by
  /// default); W_p starts as identity.
  static CompressorParams initialize(const Backbone& backbone, TokenId slot_source = token::kMem);

  /// Changes iff either tensor changes.
  Digest version_stamp() const;
  CompressorParams clone() const;
  std::vector<Tensor> parameters() const { return {memory_slot, adapter}; }
  void set_trainable(bool trainable);
  std::size_t embed_dim() const { return memory_slot.numel(); }
};

/// Compressed representation of one demonstration or query.
struct MemoryTokens {
  Tensor tokens;  // [k×d]
  Tensor pooled;  // [d], mean of the rows of `tokens`
  std::size_t source_len = 0;
  int ratio = 1;

  std::size_t k() const { return tokens.rows(); }
  /// Graph-free copy for caching.
  MemoryTokens detach() const;
};

struct DemonstrationRecord {
  std::string text;
  std::vector<TokenId> token_ids;

  std::size_t length() const { return token_ids.size(); }
};

/// Number of Memory Slots for a sequence: max(1, ceil(length / ratio)).
std::size_t slot_count(std::size_t length, int ratio);

/// Longest segment that still fits the window with its slot quota.
std::size_t max_segment_length(std::size_t max_positions, int ratio);

/// Greedy left-to-right split into segments that each fit the window.
std::vector<std::pair<std::size_t, std::size_t>> plan_segments(std::size_t length,
                                                               std::size_t max_positions, int ratio);

class Compressor {
 public:
  explicit Compressor(const Backbone& backbone) : backbone_(&backbone) {}

  const Backbone& backbone() const { return *backbone_; }

  /// One backbone forward over ids ⊕ k×[M]; tokens = H·W_pᵀ on the slot
  /// positions. Throws LengthError when L + k exceeds the window.
  MemoryTokens compress(std::span<const TokenId> ids, int ratio,
                        const CompressorParams& params) const;
  MemoryTokens compress(const DemonstrationRecord& demo, int ratio,
                        const CompressorParams& params) const {
    return compress(demo.token_ids, ratio, params);
  }

  /// Splits over-window inputs into independently compressed segments and
  /// concatenates their Memory Tokens in order.
  MemoryTokens compress_segmented(std::span<const TokenId> ids, int ratio,
                                  const CompressorParams& params) const;
  MemoryTokens compress_segmented(const DemonstrationRecord& demo, int ratio,
                                  const CompressorParams& params) const {
    return compress_segmented(demo.token_ids, ratio, params);
  }

  /// Query compression for selection; same contract as compress_segmented.
  MemoryTokens compress_query(std::span<const TokenId> ids, int ratio,
                              const CompressorParams& params) const {
    return compress_segmented(ids, ratio, params);
  }

 private:
  const Backbone* backbone_;
};

}  // namespace uniicl
