#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "uniicl/ops.hpp"

namespace uniicl {

/// Reserved ids shared by every vocabulary size.
namespace token {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kSep = 4;
/// Never emitted by the corpus; its embedding row seeds the Memory Slot.
inline constexpr TokenId kMem = 5;
inline constexpr TokenId kCopy = 6;
inline constexpr TokenId kReverse = 7;
inline constexpr TokenId kClassify = 8;
inline constexpr TokenId kQuery = 9;
inline constexpr TokenId kPassage = 10;
inline constexpr TokenId kPos = 11;
inline constexpr TokenId kNeg = 12;
inline constexpr TokenId kDemoEnd = 13;
inline constexpr TokenId kFirstWord = 14;
}  // namespace token

/// Whitespace tokenizer over a closed toy vocabulary: the reserved symbols
/// above followed by content words "w0", "w1", ... up to the vocabulary size.
class Tokenizer {
 public:
  explicit Tokenizer(std::size_t vocab_size);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// kUnk for unknown words.
  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;

  std::size_t size() const { return words_.size(); }
  std::size_t content_words() const { return words_.size() - token::kFirstWord; }
  TokenId content_word(std::size_t i) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace uniicl
