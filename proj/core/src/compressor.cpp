#include "uniicl/compressor.hpp"

#include <algorithm>

#include "uniicl/errors.hpp"
#include "uniicl/ops.hpp"
#include "uniicl/tokenizer.hpp"

namespace uniicl {

CompressorParams CompressorParams::initialize(const Backbone& backbone, TokenId slot_source) {
  const std::size_t d = backbone.embed_dim();
  if (slot_source < 0 || static_cast<std::size_t>(slot_source) >= backbone.config().vocab_size)
    throw IndexError("slot source " + std::to_string(slot_source) + " outside the vocabulary");
  const auto table = backbone.token_embedding().data();
  const auto row = static_cast<std::size_t>(slot_source) * d;
  std::vector<double> slot(table.begin() + static_cast<std::ptrdiff_t>(row),
                           table.begin() + static_cast<std::ptrdiff_t>(row + d));
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  CompressorParams p;
  p.memory_slot = Tensor::from({d}, std::move(slot), true);
  p.adapter = Tensor::from({d, d}, std::move(eye), true);
  return p;
}

Digest CompressorParams::version_stamp() const {
  Hasher h;
  h.update("memory_slot");
  for (auto s : memory_slot.shape()) h.update_u64(s);
  h.update(memory_slot.data());
  h.update("adapter");
  for (auto s : adapter.shape()) h.update_u64(s);
  h.update(adapter.data());
  return h.finish();
}

CompressorParams CompressorParams::clone() const {
  return {memory_slot.clone(), adapter.clone()};
}

void CompressorParams::set_trainable(bool trainable) {
  memory_slot.set_requires_grad(trainable);
  adapter.set_requires_grad(trainable);
}

MemoryTokens MemoryTokens::detach() const {
  return {tokens.detach(), pooled.detach(), source_len, ratio};
}

std::size_t slot_count(std::size_t length, int ratio) {
  if (ratio < 1) throw ContractError("compression ratio must be >= 1, got " + std::to_string(ratio));
  const auto r = static_cast<std::size_t>(ratio);
  return std::max<std::size_t>(1, (length + r - 1) / r);
}

std::size_t max_segment_length(std::size_t max_positions, int ratio) {
  // s + ceil(s/r) is non-decreasing in s, so binary search the largest fit.
  std::size_t lo = 0, hi = max_positions;
  while (lo < hi) {
    std::size_t mid = (lo + hi + 1) / 2;
    if (mid + slot_count(mid, ratio) <= max_positions)
      lo = mid;
    else
      hi = mid - 1;
  }
  if (lo == 0) {
    throw LengthError("window of " + std::to_string(max_positions) +
                      " positions cannot hold one token plus its Memory Slot");
  }
  return lo;
}

std::vector<std::pair<std::size_t, std::size_t>> plan_segments(std::size_t length,
                                                               std::size_t max_positions, int ratio) {
  const std::size_t seg = max_segment_length(max_positions, ratio);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < length; begin += seg)
    out.emplace_back(begin, std::min(length, begin + seg));
  return out;
}

MemoryTokens Compressor::compress(std::span<const TokenId> ids, int ratio,
                                  const CompressorParams& params) const {
  if (ids.empty()) throw ContractError("compress: empty demonstration");
  const std::size_t k = slot_count(ids.size(), ratio);
  const std::size_t window = backbone_->max_positions();
  if (ids.size() + k > window) {
    throw LengthError("compress: " + std::to_string(ids.size()) + " tokens + " + std::to_string(k) +
                      " slots exceed window " + std::to_string(window) +
                      "; use compress_segmented");
  }
  const Tensor parts[] = {backbone_->embed_tokens(ids), repeat_rows(params.memory_slot, k)};
  Tensor hidden = backbone_->forward_embeds(concat_rows(parts));
  Tensor slots = slice_rows(hidden, ids.size(), ids.size() + k);
  Tensor tokens = matmul(slots, transpose(params.adapter));
  Tensor pooled = mean_rows(tokens);
  return {std::move(tokens), std::move(pooled), ids.size(), ratio};
}

MemoryTokens Compressor::compress_segmented(std::span<const TokenId> ids, int ratio,
                                            const CompressorParams& params) const {
  if (ids.empty()) throw ContractError("compress_segmented: empty input");
  auto plan = plan_segments(ids.size(), backbone_->max_positions(), ratio);
  if (plan.size() == 1) return compress(ids, ratio, params);
  std::vector<Tensor> blocks;
  blocks.reserve(plan.size());
  for (auto [begin, end] : plan)
    blocks.push_back(compress(ids.subspan(begin, end - begin), ratio, params).tokens);
  Tensor tokens = concat_rows(blocks);
  Tensor pooled = mean_rows(tokens);
  return {std::move(tokens), std::move(pooled), ids.size(), ratio};
}

}  // namespace uniicl
