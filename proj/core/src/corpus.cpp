#include "uniicl/corpus.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "json.hpp"

#include "uniicl/errors.hpp"
#include "uniicl/io.hpp"

namespace uniicl {

namespace {

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

class WordSource {
 public:
  WordSource(const Tokenizer& tok, std::size_t pool, std::mt19937_64& rng)
      : tok_(tok), pool_(pool), rng_(rng) {}

  std::string word(std::size_t i) const { return tok_.word(tok_.content_word(i)); }

  std::size_t uniform(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  /// Random word index in [first, pool) avoiding `banned`.
  std::size_t draw(std::size_t first, const std::vector<std::size_t>& banned = {}) {
    for (;;) {
      auto i = uniform(first, pool_ - 1);
      if (std::find(banned.begin(), banned.end(), i) == banned.end()) return i;
    }
  }

  std::size_t pool() const { return pool_; }

 private:
  const Tokenizer& tok_;
  std::size_t pool_;
  std::mt19937_64& rng_;
};

}  // namespace

LengthBand LengthBand::parse(std::string_view text) {
  std::string s(text);
  std::size_t lo = 0, hi = 0;
  char open = 0, comma = 0, close = 0;
  std::istringstream is(s);
  if (!(is >> open >> lo >> comma >> hi >> close) || open != '(' || comma != ',' || close != ']')
    throw ConfigError("band: expected \"(lo,hi]\", got \"" + s + "\"");
  std::string rest;
  if (is >> rest) throw ConfigError("band: trailing text in \"" + s + "\"");
  if (hi <= lo) throw ConfigError("band: empty range " + s);
  return {lo, hi};
}

std::string LengthBand::str() const {
  return "(" + std::to_string(lo) + "," + std::to_string(hi) + "]";
}

void SynthSpec::validate() const {
  if (copy + reverse + classify + retrieval_pools == 0)
    throw ConfigError("copy/reverse/classify/retrieval_pools: at least one task size must be >= 1");
  if (band.hi <= band.lo) throw ConfigError("band: empty range " + band.str());
  if (band.lo < 1) throw ConfigError("band: lower bound must be >= 1 so every source has a word");
  if (retrieval_pools > 0 && band.lo < 3)
    throw ConfigError("band: retrieval records need a lower bound >= 3");
  if (retrieval_pools > 0 && passages_per_pool < 2)
    throw ConfigError("passages_per_pool: must be >= 2");
  Tokenizer tok(vocab_size);
  const std::size_t available = tok.content_words();
  const std::size_t pool = word_pool == 0 ? available : word_pool;
  if (pool > available)
    throw ConfigError("word_pool: " + std::to_string(pool) + " exceeds the " +
                      std::to_string(available) + " content words of the vocabulary");
  if (classify > 0 && (n_keys < 2 || n_keys >= pool))
    throw ConfigError("n_keys: must be in [2, word_pool)");
  if (retrieval_pools > 0 && pool < 8) throw ConfigError("word_pool: retrieval needs >= 8 words");
}

std::vector<CorpusRecord> synth_corpus(const SynthSpec& spec) {
  spec.validate();
  Tokenizer tok(spec.vocab_size);
  std::mt19937_64 rng(spec.seed);
  WordSource words(tok, spec.word_pool == 0 ? tok.content_words() : spec.word_pool, rng);
  std::vector<CorpusRecord> out;

  auto sequence = [&](std::size_t n) {
    std::vector<std::string> seq;
    for (std::size_t i = 0; i < n; ++i) seq.push_back(words.word(words.draw(0)));
    return seq;
  };

  for (std::size_t i = 0; i < spec.copy; ++i) {
    auto body = sequence(words.uniform(spec.band.lo + 1, spec.band.hi) - 1);
    out.push_back({"copy", "copy " + join(body), join(body), std::nullopt});
  }
  for (std::size_t i = 0; i < spec.reverse; ++i) {
    auto body = sequence(words.uniform(spec.band.lo + 1, spec.band.hi) - 1);
    auto rev = body;
    std::reverse(rev.begin(), rev.end());
    out.push_back({"reverse", "reverse " + join(body), join(rev), std::nullopt});
  }
  for (std::size_t i = 0; i < spec.classify; ++i) {
    const std::size_t n = words.uniform(spec.band.lo + 1, spec.band.hi);
    const std::size_t key = words.uniform(0, spec.n_keys - 1);
    std::vector<std::string> body;
    for (std::size_t j = 0; j + 2 < n; ++j) body.push_back(words.word(words.draw(spec.n_keys)));
    body.insert(body.begin() + static_cast<std::ptrdiff_t>(words.uniform(0, body.size())),
                words.word(key));
    out.push_back({"classify", "classify " + join(body), key % 2 == 0 ? "pos" : "neg",
                   std::nullopt});
  }
  for (std::size_t p = 0; p < spec.retrieval_pools; ++p) {
    const std::string pool_id = "pool" + std::to_string(p);
    std::vector<std::size_t> topic;
    while (topic.size() < 3) topic.push_back(words.draw(0, topic));
    auto with_topic = [&](const std::string& marker) {
      const std::size_t n = words.uniform(spec.band.lo + 1, spec.band.hi);
      std::vector<std::string> body;
      for (auto t : topic) body.push_back(words.word(t));
      while (body.size() + 1 < n) body.push_back(words.word(words.draw(0, topic)));
      std::shuffle(body.begin(), body.end(), rng);
      return marker + " " + join(body);
    };
    const std::string relevant = with_topic("passage");
    const std::size_t gold = words.uniform(0, spec.passages_per_pool - 1);
    out.push_back({"query", with_topic("query"), relevant, pool_id});
    for (std::size_t j = 0; j < spec.passages_per_pool; ++j) {
      if (j == gold) {
        out.push_back({"passage", relevant, "1", pool_id});
        continue;
      }
      const std::size_t n = words.uniform(spec.band.lo + 1, spec.band.hi);
      std::vector<std::string> body;
      while (body.size() + 1 < n) body.push_back(words.word(words.draw(0, topic)));
      out.push_back({"passage", "passage " + join(body), "0", pool_id});
    }
  }
  return out;
}

std::optional<std::string> classify_label(std::span<const TokenId> source, std::size_t n_keys) {
  for (TokenId id : source) {
    if (id < token::kFirstWord) continue;
    const auto idx = static_cast<std::size_t>(id - token::kFirstWord);
    if (idx < n_keys) return idx % 2 == 0 ? "pos" : "neg";
  }
  return std::nullopt;
}

std::string corpus_to_jsonl(std::span<const CorpusRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json obj;
    obj["task"] = r.task;
    obj["source"] = r.source;
    obj["target"] = r.target;
    if (r.pool) obj["pool"] = *r.pool;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::vector<CorpusRecord> corpus_from_jsonl(std::string_view text, std::string_view origin) {
  std::vector<CorpusRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto where = std::string(origin) + ":" + std::to_string(line_no);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!obj.is_object()) throw FormatError(where + ": record is not an object");
    if (obj.contains("meta")) continue;
    auto field = [&](const char* name) -> std::string {
      auto it = obj.find(name);
      if (it == obj.end() || !it->is_string())
        throw FormatError(where + ": missing string field \"" + name + "\"");
      return it->get<std::string>();
    };
    CorpusRecord r{field("task"), field("source"), field("target"), std::nullopt};
    if (obj.contains("pool")) r.pool = field("pool");
    out.push_back(std::move(r));
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const CorpusRecord> records) {
  io::write_text_atomic(path, corpus_to_jsonl(records));
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
  return corpus_from_jsonl(io::read_text(path), path.string());
}

TaskInstance to_instance(const CorpusRecord& record, const Tokenizer& tok) {
  TaskInstance inst{tok.encode(record.source), tok.encode(record.target)};
  if (inst.source.empty() || inst.target.empty())
    throw ContractError("corpus record of task '" + record.task + "' has an empty " +
                        (inst.source.empty() ? "source" : "target"));
  return inst;
}

DemonstrationRecord to_demonstration(const CorpusRecord& record, const Tokenizer& tok) {
  auto inst = to_instance(record, tok);
  DemonstrationRecord demo;
  demo.text = record.source + " " + tok.word(token::kSep) + " " + record.target;
  demo.token_ids = std::move(inst.source);
  demo.token_ids.push_back(token::kSep);
  demo.token_ids.insert(demo.token_ids.end(), inst.target.begin(), inst.target.end());
  return demo;
}

}  // namespace uniicl
