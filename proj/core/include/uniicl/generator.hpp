#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uniicl/backbone.hpp"
#include "uniicl/compressor.hpp"
#include "uniicl/tokenizer.hpp"

namespace uniicl {

/// Memory Tokens of the selected demonstrations, concatenated in selection
/// order, followed by the raw query.
struct InContextPrompt {
  /// [(Σk)×d]; undefined for zero-shot prompts.
  Tensor memory_prefix;
  std::vector<TokenId> query_ids;
  std::size_t shots = 0;
  /// Row count contributed by each demonstration, in order.
  std::vector<std::size_t> block_rows;

  std::size_t prefix_rows() const;
  std::size_t total_positions() const { return prefix_rows() + query_ids.size(); }
};

enum class DecodeMode { kGreedy, kSampled };

struct GenerationConfig {
  std::size_t max_new_tokens = 32;
  DecodeMode mode = DecodeMode::kGreedy;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  TokenId stop_token = token::kEos;
};

struct GenerationResult {
  std::vector<TokenId> tokens;
  /// Decoding hit the window before max_new_tokens or the stop token.
  bool truncated = false;
};

struct ChoiceScores {
  std::size_t chosen = 0;
  std::vector<double> nll;
  std::vector<double> ppl;
};

/// Throws LengthError, with a per-demonstration breakdown, when prefix +
/// query does not fit in `max_positions`.
InContextPrompt build_prompt(std::span<const MemoryTokens> selected,
                             std::span<const TokenId> query_ids, std::size_t max_positions);

/// Like build_prompt, but drops the lowest-saliency demonstrations first
/// until the prompt fits. The query is never truncated. `saliency` is
/// parallel to `selected`.
InContextPrompt build_prompt_within_budget(std::span<const MemoryTokens> selected,
                                           std::span<const double> saliency,
                                           std::span<const TokenId> query_ids,
                                           std::size_t max_positions);

GenerationResult generate(const Backbone& backbone, const InContextPrompt& prompt,
                          const GenerationConfig& cfg);

/// Close-ended scoring: mean-NLL perplexity of each choice as a
/// continuation of the prompt; the lowest wins, ties to the lower index.
ChoiceScores score_choices(const Backbone& backbone, const InContextPrompt& prompt,
                           std::span<const std::vector<TokenId>> choices);

}  // namespace uniicl
