#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uniicl/compressor.hpp"
#include "uniicl/tokenizer.hpp"
#include "uniicl/trainer.hpp"

namespace uniicl {

/// One line of a corpus file. Stored as a JSON object per line with keys
/// "task", "source", "target" and, for retrieval records, "pool". Strings use
/// JSON escaping, so records never span lines. A line holding a "meta"
/// object carries provenance and is skipped by readers.
struct CorpusRecord {
  std::string task;
  std::string source;
  std::string target;
  std::optional<std::string> pool;

  bool operator==(const CorpusRecord&) const = default;
};

/// Source lengths in (lo, hi], counted in tokens.
struct LengthBand {
  std::size_t lo = 8;
  std::size_t hi = 32;

  bool contains(std::size_t n) const { return n > lo && n <= hi; }
  /// Parses "(lo,hi]".
  static LengthBand parse(std::string_view text);
  std::string str() const;
};

/// Task mix for synth_corpus.
///
/// copy:      "copy w.. w.."     -> the words after the marker, unchanged
/// reverse:   "reverse w.. w.."  -> the words after the marker, reversed
/// classify:  "classify" + filler words + exactly one key word. The key
///            words are the first `n_keys` content words; an even key index
///            means "pos", odd means "neg".
/// retrieval: per pool a "query" record with three topic words, then
///            `passages_per_pool` "passage" records. The one relevant
///            passage contains all topic words and has target "1"; the
///            others contain none of them and have target "0". The query's
///            target is the relevant passage's source.
struct SynthSpec {
  std::size_t copy = 0;
  std::size_t reverse = 0;
  std::size_t classify = 0;
  std::size_t retrieval_pools = 0;
  std::size_t passages_per_pool = 20;
  LengthBand band;
  std::size_t vocab_size = 512;
  /// Content words drawn from; 0 means all of the vocabulary.
  std::size_t word_pool = 0;
  std::size_t n_keys = 16;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

std::vector<CorpusRecord> synth_corpus(const SynthSpec& spec);

/// Label implied by the key rule, or nullopt when the source has no key word.
std::optional<std::string> classify_label(std::span<const TokenId> source, std::size_t n_keys);

std::string corpus_to_jsonl(std::span<const CorpusRecord> records);
std::vector<CorpusRecord> corpus_from_jsonl(std::string_view text, std::string_view origin);
void write_corpus(const std::filesystem::path& path, std::span<const CorpusRecord> records);
std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path);

/// Tokenized source/target pair; ContractError when either side is empty.
TaskInstance to_instance(const CorpusRecord& record, const Tokenizer& tok);
/// Demonstration "source <sep> target".
DemonstrationRecord to_demonstration(const CorpusRecord& record, const Tokenizer& tok);

}  // namespace uniicl
