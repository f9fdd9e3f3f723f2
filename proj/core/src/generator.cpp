#include "uniicl/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "uniicl/errors.hpp"

namespace uniicl {

std::size_t InContextPrompt::prefix_rows() const {
  return memory_prefix.defined() && memory_prefix.numel() > 0 ? memory_prefix.rows() : 0;
}

InContextPrompt build_prompt(std::span<const MemoryTokens> selected,
                             std::span<const TokenId> query_ids, std::size_t max_positions) {
  InContextPrompt prompt;
  prompt.query_ids.assign(query_ids.begin(), query_ids.end());
  prompt.shots = selected.size();
  std::size_t rows = 0;
  for (const auto& mt : selected) {
    prompt.block_rows.push_back(mt.k());
    rows += mt.k();
  }
  if (rows + query_ids.size() > max_positions) {
    std::ostringstream os;
    os << "prompt of " << rows + query_ids.size() << " positions exceeds window " << max_positions
       << " (query " << query_ids.size();
    for (std::size_t i = 0; i < selected.size(); ++i) os << ", demo" << i << ' ' << selected[i].k();
    os << ')';
    throw LengthError(os.str());
  }
  if (!selected.empty()) {
    std::vector<Tensor> blocks;
    blocks.reserve(selected.size());
    for (const auto& mt : selected) blocks.push_back(mt.tokens);
    prompt.memory_prefix = concat_rows(blocks);
  }
  return prompt;
}

InContextPrompt build_prompt_within_budget(std::span<const MemoryTokens> selected,
                                           std::span<const double> saliency,
                                           std::span<const TokenId> query_ids,
                                           std::size_t max_positions) {
  if (saliency.size() != selected.size()) {
    throw ContractError("build_prompt_within_budget: saliency/selection size mismatch");
  }
  if (query_ids.size() > max_positions) {
    throw LengthError("query of " + std::to_string(query_ids.size()) +
                      " tokens exceeds window " + std::to_string(max_positions));
  }
  std::vector<bool> keep(selected.size(), true);
  std::size_t rows = 0;
  for (const auto& mt : selected) rows += mt.k();
  // Lowest saliency first; among equals the later demonstration goes first.
  std::vector<std::size_t> order(selected.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (saliency[a] != saliency[b]) return saliency[a] < saliency[b];
    return a > b;
  });
  for (std::size_t i = 0; i < order.size() && rows + query_ids.size() > max_positions; ++i) {
    keep[order[i]] = false;
    rows -= selected[order[i]].k();
  }
  std::vector<MemoryTokens> kept;
  for (std::size_t i = 0; i < selected.size(); ++i)
    if (keep[i]) kept.push_back(selected[i]);
  return build_prompt(kept, query_ids, max_positions);
}

GenerationResult generate(const Backbone& backbone, const InContextPrompt& prompt,
                          const GenerationConfig& cfg) {
  if (cfg.max_new_tokens == 0) throw ContractError("max_new_tokens must be >= 1");
  if (cfg.mode == DecodeMode::kSampled && !(cfg.temperature > 0))
    throw ContractError("sampled decoding needs temperature > 0");
  NoGradScope no_grad;
  GenerationResult out;
  std::vector<TokenId> ids = prompt.query_ids;
  std::mt19937_64 rng(cfg.seed);
  const std::size_t window = backbone.max_positions();
  while (out.tokens.size() < cfg.max_new_tokens) {
    if (prompt.prefix_rows() + ids.size() > window ||
        prompt.prefix_rows() + ids.size() == 0) {
      out.truncated = true;
      break;
    }
    Tensor hidden = backbone.forward_hidden(prompt.memory_prefix, ids);
    Tensor last = slice_rows(hidden, hidden.rows() - 1, hidden.rows());
    Tensor logit_row = backbone.logits(last);
    auto logits = logit_row.data();
    TokenId next = 0;
    if (cfg.mode == DecodeMode::kGreedy) {
      next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      const double temp = cfg.temperature;
      const double mx = *std::max_element(logits.begin(), logits.end());
      std::vector<double> w(logits.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((logits[i] - mx) / temp);
      std::discrete_distribution<int> dist(w.begin(), w.end());
      next = static_cast<TokenId>(dist(rng));
    }
    out.tokens.push_back(next);
    if (next == cfg.stop_token) break;
    ids.push_back(next);
  }
  return out;
}

ChoiceScores score_choices(const Backbone& backbone, const InContextPrompt& prompt,
                           std::span<const std::vector<TokenId>> choices) {
  if (choices.size() < 2) throw ContractError("score_choices needs at least 2 choices");
  NoGradScope no_grad;
  ChoiceScores out;
  for (const auto& c : choices) {
    if (c.empty()) throw ContractError("score_choices: empty choice");
    double nll = backbone.sequence_nll(prompt.memory_prefix, prompt.query_ids, c).item();
    out.nll.push_back(nll);
    out.ppl.push_back(std::exp(nll));
  }
  out.chosen = static_cast<std::size_t>(std::min_element(out.nll.begin(), out.nll.end()) -
                                        out.nll.begin());
  return out;
}

}  // namespace uniicl
