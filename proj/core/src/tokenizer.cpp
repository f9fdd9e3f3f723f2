#include "uniicl/tokenizer.hpp"

#include "uniicl/errors.hpp"

namespace uniicl {

namespace {
constexpr const char* kReserved[] = {"<pad>", "<unk>",     "<bos>", "<eos>", "<sep>",
                                     "<mem>", "copy",      "reverse", "classify", "query",
                                     "passage", "pos",     "neg",   ";"};
}

Tokenizer::Tokenizer(std::size_t vocab_size) {
  if (vocab_size <= static_cast<std::size_t>(token::kFirstWord)) {
    throw ConfigError("vocab_size must exceed " + std::to_string(token::kFirstWord) +
                      " reserved symbols");
  }
  words_.reserve(vocab_size);
  for (const char* w : kReserved) words_.emplace_back(w);
  for (std::size_t i = 0; words_.size() < vocab_size; ++i) words_.push_back("w" + std::to_string(i));
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<TokenId>(i));
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n') ++j;
    if (j > i) ids.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(id);
  }
  return out;
}

TokenId Tokenizer::id(std::string_view w) const {
  auto it = index_.find(std::string(w));
  return it == index_.end() ? token::kUnk : it->second;
}

const std::string& Tokenizer::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

TokenId Tokenizer::content_word(std::size_t i) const {
  if (i >= content_words()) {
    throw IndexError("content word " + std::to_string(i) + " outside " +
                     std::to_string(content_words()));
  }
  return static_cast<TokenId>(token::kFirstWord + i);
}

}  // namespace uniicl
