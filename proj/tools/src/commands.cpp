#include "commands.hpp"

#include <algorithm>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "config.hpp"
#include "uniicl/backbone.hpp"
#include "uniicl/compressor.hpp"
#include "uniicl/corpus.hpp"
#include "uniicl/demobank.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/evalkit.hpp"
#include "uniicl/generator.hpp"
#include "uniicl/io.hpp"
#include "uniicl/selector.hpp"
#include "uniicl/tokenizer.hpp"
#include "uniicl/trainer.hpp"

namespace uniicl::cli {

namespace {

using nlohmann::ordered_json;
using Meta = std::vector<std::pair<std::string, std::string>>;

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::string corpus, validation, pool, bank, backbone, params, report;
  std::int64_t seed = -1;
  int ratio = 0;
  std::size_t threads = 0;
};

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

std::string require(const std::string& value, const char* key, const char* command) {
  if (value.empty())
    throw ConfigError(std::string(key) + ": required by '" + command + "'");
  return value;
}

Meta make_meta(const RunConfig& cfg, const std::string& backbone_digest) {
  return {{"config_digest", to_hex(config_digest(cfg))},
          {"seed", std::to_string(cfg.seed)},
          {"backbone_digest", backbone_digest}};
}

std::string meta_json(const Meta& meta) {
  ordered_json m;
  for (const auto& [k, v] : meta) m[k] = v;
  return m.dump();
}

/// Writes a binary artifact's provenance next to it.
void write_sidecar(const std::filesystem::path& artifact, const Meta& meta) {
  io::write_text_atomic(artifact.string() + ".meta.json", meta_json(meta) + "\n");
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Tables go to --report (JSON lines when it ends in .jsonl, aligned text
/// otherwise) or to stdout.
void emit(const Context& ctx, const Table& table, const Meta& meta) {
  const std::string& path = ctx.cfg.paths.reports;
  if (path.empty()) {
    ctx.out << table.to_text(meta);
    return;
  }
  io::write_text_atomic(path, ends_with(path, ".jsonl") ? table.to_jsonl(meta) : table.to_text(meta));
}

Backbone load_backbone(const RunConfig& cfg, const char* command) {
  return Backbone::load(require(cfg.paths.backbone, "paths.backbone", command));
}

CompressorParams load_params(const RunConfig& cfg, const Backbone& backbone) {
  if (cfg.paths.params.empty()) return CompressorParams::initialize(backbone);
  auto ckpt = load_checkpoint(cfg.paths.params);
  if (ckpt.backbone_digest != backbone.digest())
    throw ContractError("params in " + cfg.paths.params + " were trained against backbone " +
                        to_hex(ckpt.backbone_digest) + ", loaded backbone is " +
                        to_hex(backbone.digest()));
  if (ckpt.params.embed_dim() != backbone.embed_dim())
    throw ContractError("params embed_dim " + std::to_string(ckpt.params.embed_dim()) +
                        " does not match backbone embed_dim " +
                        std::to_string(backbone.embed_dim()));
  return std::move(ckpt.params);
}

std::vector<CorpusRecord> load_records(const std::string& path, const char* key,
                                       const char* command) {
  return read_corpus(require(path, key, command));
}

std::vector<TaskInstance> instances_of(std::span<const CorpusRecord> records, const Tokenizer& tok) {
  std::vector<TaskInstance> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(to_instance(r, tok));
  return out;
}

std::vector<DemonstrationRecord> demos_of(std::span<const CorpusRecord> records,
                                          const Tokenizer& tok) {
  std::vector<DemonstrationRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(to_demonstration(r, tok));
  return out;
}

/// Candidate pool indices for one query under the configured resource mode.
std::vector<std::size_t> candidates_for(const RunConfig& cfg, std::span<const TokenId> query,
                                        std::span<const DemonstrationRecord> pool) {
  return candidate_pool(query, pool, cfg.selection, cfg.seed + 5);
}

/// Memory Tokens for a demonstration: through the bank when one is open
/// (storing on a miss only when `store` is set), else compressed directly.
MemoryTokens memory_for(const Compressor& compressor, const DemonstrationRecord& demo, int ratio,
                        const CompressorParams& params, DemoBank* bank, bool store) {
  if (bank) {
    if (store) return bank->get_or_compress(demo, ratio, params);
    if (auto hit = bank->lookup(BankKey::make(demo, ratio, params.version_stamp()))) return *hit;
  }
  NoGradScope no_grad;
  return compressor.compress_segmented(demo, ratio, params);
}

struct Selection {
  std::vector<std::size_t> pool_index;
  std::vector<double> score;
  std::vector<MemoryTokens> memory;
};

Selection select_shots(const RunConfig& cfg, const Compressor& compressor,
                       const CompressorParams& params, std::span<const TokenId> query,
                       std::span<const DemonstrationRecord> pool, std::size_t shots, DemoBank* bank,
                       bool store) {
  Selection sel;
  if (shots == 0) return sel;
  if (pool.empty()) throw ConfigError("paths.pool: needed when shots > 0");
  auto cand = candidates_for(cfg, query, pool);
  std::vector<MemoryTokens> cand_memory;
  for (auto i : cand)
    cand_memory.push_back(memory_for(compressor, pool[i], cfg.ratio, params, bank, store));
  MemoryTokens q;
  {
    NoGradScope no_grad;
    q = compressor.compress_query(query, cfg.ratio, params);
  }
  auto scores = score_all(q, cand_memory);
  for (auto local : select(q, cand_memory, shots)) {
    sel.pool_index.push_back(cand[local]);
    sel.score.push_back(scores[local].score);
    sel.memory.push_back(cand_memory[local]);
  }
  return sel;
}

std::unique_ptr<DemoBank> open_bank(const RunConfig& cfg, const Compressor& compressor) {
  if (cfg.paths.bank.empty()) return nullptr;
  return DemoBank::open(cfg.paths.bank, compressor);
}

std::string strip_eos_decode(const Tokenizer& tok, std::vector<TokenId> ids) {
  if (!ids.empty() && ids.back() == token::kEos) ids.pop_back();
  return tok.decode(ids);
}

// ---------------------------------------------------------------- commands

void cmd_synth(Context& ctx, const std::string& out_path) {
  const std::string path = out_path.empty() ? ctx.cfg.paths.corpus : out_path;
  auto records = synth_corpus(ctx.cfg.synth_spec());
  std::string text = "{\"meta\":" + meta_json(make_meta(ctx.cfg, "none")) + "}\n";
  text += corpus_to_jsonl(records);
  io::write_text_atomic(require(path, "paths.corpus", "synth"), text);
  ctx.out << "wrote " << records.size() << " records\n";
}

void cmd_pretrain(Context& ctx, const std::string& out_path) {
  const std::string path = require(out_path.empty() ? ctx.cfg.paths.backbone : out_path,
                                   "paths.backbone", "pretrain");
  Tokenizer tok(ctx.cfg.backbone.vocab_size);
  auto data = instances_of(load_records(ctx.cfg.paths.corpus, "paths.corpus", "pretrain"), tok);
  Backbone backbone(ctx.cfg.backbone_config());
  auto losses = pretrain_backbone(backbone, data, ctx.cfg.pretrain_config());
  backbone.save(path);
  const Meta meta = make_meta(ctx.cfg, to_hex(backbone.digest()));
  write_sidecar(path, meta);
  Table t({"epoch", "loss"});
  for (std::size_t e = 0; e < losses.size(); ++e)
    t.add_row({static_cast<std::int64_t>(e + 1), losses[e]});
  emit(ctx, t, meta);
}

void cmd_train(Context& ctx, int phase, const std::string& out_path, const std::string& log_path) {
  const char* name = "train";
  const std::string path = require(out_path, "--out", name);
  Backbone backbone = load_backbone(ctx.cfg, name);
  const Digest bb_digest = backbone.digest();
  Compressor compressor(backbone);
  CompressorParams init = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  auto train_records = load_records(ctx.cfg.paths.corpus, "paths.corpus", name);
  std::vector<CorpusRecord> val_records;
  if (!ctx.cfg.paths.validation.empty()) {
    val_records = read_corpus(ctx.cfg.paths.validation);
  } else {
    // Every tenth record is held out when no validation file is given.
    std::vector<CorpusRecord> kept;
    for (std::size_t i = 0; i < train_records.size(); ++i)
      (i % 10 == 9 ? val_records : kept).push_back(train_records[i]);
    train_records = std::move(kept);
  }
  auto train = instances_of(train_records, tok);
  auto validation = instances_of(val_records, tok);
  const TrainConfig tcfg = ctx.cfg.train_config();
  const Meta meta = make_meta(ctx.cfg, to_hex(bb_digest));

  std::string log;
  auto on_step = [&](const StepRecord& s) {
    ordered_json j;
    for (const auto& [k, v] : meta) j[k] = v;
    j["phase"] = phase;
    j["step"] = s.step;
    j["epoch"] = s.epoch;
    j["lm_loss"] = s.lm_loss;
    j["ctr_loss"] = s.ctr_loss;
    j["ratio"] = s.ratio;
    j["skip_count"] = s.skip_count;
    log += j.dump() + "\n";
  };

  TrainResult result;
  if (phase == 1) {
    result = train_phase1(compressor, train, validation, tcfg, init, on_step);
  } else {
    auto pool = demos_of(load_records(ctx.cfg.paths.pool, "paths.pool", name), tok);
    auto instances = build_contrastive_instances(train, pool, tcfg.candidates_per_set, tcfg.seed);
    result = train_phase2(compressor, instances, validation, tcfg, init, on_step);
  }
  if (backbone.digest() != bb_digest)
    throw ContractError("backbone digest changed during training");

  TrainerCheckpoint ckpt{result.params, result.optimizer_steps, result.adam_m, result.adam_v,
                         ctx.cfg.seed, bb_digest};
  save_checkpoint(path, ckpt);
  write_sidecar(path, meta);
  if (!log_path.empty()) io::write_text_atomic(log_path, log);

  Table t({"epoch", "validation_loss"});
  t.add_row({std::int64_t{0}, result.initial_validation_loss});
  for (std::size_t e = 0; e < result.validation_losses.size(); ++e)
    t.add_row({static_cast<std::int64_t>(e + 1), result.validation_losses[e]});
  emit(ctx, t, meta);
}

void cmd_compress(Context& ctx) {
  Backbone backbone = load_backbone(ctx.cfg, "compress");
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  require(ctx.cfg.paths.bank, "paths.bank", "compress");
  auto bank = open_bank(ctx.cfg, compressor);
  Tokenizer tok(backbone.config().vocab_size);
  auto demos = demos_of(load_records(ctx.cfg.paths.corpus, "paths.corpus", "compress"), tok);
  for (const auto& d : demos) bank->get_or_compress(d, ctx.cfg.ratio, params);
  bank->persist();
  auto s = bank->stats();
  Table t({"records", "hits", "misses", "entries"});
  t.add_row({static_cast<std::int64_t>(demos.size()), static_cast<std::int64_t>(s.hits),
             static_cast<std::int64_t>(s.misses), static_cast<std::int64_t>(s.entries)});
  emit(ctx, t, make_meta(ctx.cfg, to_hex(backbone.digest())));
}

void cmd_bank(Context& ctx, const std::string& action, bool all) {
  Backbone backbone = load_backbone(ctx.cfg, "bank");
  Compressor compressor(backbone);
  require(ctx.cfg.paths.bank, "paths.bank", "bank");
  auto bank = open_bank(ctx.cfg, compressor);
  const Meta meta = make_meta(ctx.cfg, to_hex(backbone.digest()));
  if (action == "stats") {
    auto s = bank->stats();
    Table t({"entries", "bytes_on_disk", "quarantined"});
    t.add_row({static_cast<std::int64_t>(s.entries), static_cast<std::int64_t>(s.bytes_on_disk),
               static_cast<std::int64_t>(s.quarantined)});
    emit(ctx, t, meta);
  } else if (action == "compact") {
    auto reclaimed = bank->compact();
    Table t({"bytes_reclaimed", "bytes_on_disk"});
    t.add_row({static_cast<std::int64_t>(reclaimed),
               static_cast<std::int64_t>(bank->stats().bytes_on_disk)});
    emit(ctx, t, meta);
  } else {
    std::size_t removed = 0;
    if (all) {
      removed = bank->invalidate_all();
    } else {
      removed = bank->invalidate_stale(load_params(ctx.cfg, backbone).version_stamp());
    }
    bank->persist();
    Table t({"removed", "entries"});
    t.add_row({static_cast<std::int64_t>(removed), static_cast<std::int64_t>(bank->size())});
    emit(ctx, t, meta);
  }
}

std::vector<CorpusRecord> queries_from(const Context& ctx, const std::string& query_text,
                                       const char* command) {
  if (!query_text.empty()) return {CorpusRecord{"query", query_text, query_text, std::nullopt}};
  return load_records(ctx.cfg.paths.corpus, "paths.corpus", command);
}

void cmd_select(Context& ctx, const std::string& query_text, std::size_t shots) {
  Backbone backbone = load_backbone(ctx.cfg, "select");
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  auto pool = demos_of(load_records(ctx.cfg.paths.pool, "paths.pool", "select"), tok);
  auto bank = open_bank(ctx.cfg, compressor);
  auto queries = queries_from(ctx, query_text, "select");
  Table t({"query", "rank", "pool_index", "saliency"});
  for (std::size_t q = 0; q < queries.size(); ++q) {
    auto ids = tok.encode(queries[q].source);
    auto sel = select_shots(ctx.cfg, compressor, params, ids, pool, shots, bank.get(), false);
    for (std::size_t r = 0; r < sel.pool_index.size(); ++r)
      t.add_row({static_cast<std::int64_t>(q), static_cast<std::int64_t>(r + 1),
                 static_cast<std::int64_t>(sel.pool_index[r]), sel.score[r]});
  }
  emit(ctx, t, make_meta(ctx.cfg, to_hex(backbone.digest())));
}

void cmd_generate(Context& ctx, const std::string& query_text, std::size_t shots) {
  Backbone backbone = load_backbone(ctx.cfg, "generate");
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  std::vector<DemonstrationRecord> pool;
  if (shots > 0) pool = demos_of(load_records(ctx.cfg.paths.pool, "paths.pool", "generate"), tok);
  auto bank = open_bank(ctx.cfg, compressor);
  auto queries = queries_from(ctx, query_text, "generate");
  Table t({"query", "shots", "output"});
  for (std::size_t q = 0; q < queries.size(); ++q) {
    auto ids = with_separator(tok.encode(queries[q].source));
    auto sel = select_shots(ctx.cfg, compressor, params, tok.encode(queries[q].source), pool, shots,
                            bank.get(), true);
    auto prompt = build_prompt_within_budget(sel.memory, sel.score, ids, backbone.max_positions());
    auto result = generate(backbone, prompt, ctx.cfg.generation_config());
    t.add_row({static_cast<std::int64_t>(q), static_cast<std::int64_t>(prompt.shots),
               strip_eos_decode(tok, result.tokens)});
  }
  if (bank) bank->persist();
  emit(ctx, t, make_meta(ctx.cfg, to_hex(backbone.digest())));
}

void cmd_eval(Context& ctx, const std::string& metric, std::size_t shots) {
  const char* name = "eval";
  Backbone backbone = load_backbone(ctx.cfg, name);
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  auto records = load_records(ctx.cfg.paths.corpus, "paths.corpus", name);
  std::vector<DemonstrationRecord> pool;
  if (shots > 0 && metric != "mrr")
    pool = demos_of(load_records(ctx.cfg.paths.pool, "paths.pool", name), tok);
  const Meta meta = make_meta(ctx.cfg, to_hex(backbone.digest()));

  auto prompt_for = [&](const CorpusRecord& r) {
    auto src = tok.encode(r.source);
    auto sel = select_shots(ctx.cfg, compressor, params, src, pool, shots, nullptr, false);
    return build_prompt_within_budget(sel.memory, sel.score, with_separator(src),
                                      backbone.max_positions());
  };

  if (metric == "rouge") {
    Table t({"record", "r1", "r2", "rl"});
    RougeScores sum;
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto out = generate(backbone, prompt_for(records[i]), ctx.cfg.generation_config());
      if (!out.tokens.empty() && out.tokens.back() == token::kEos) out.tokens.pop_back();
      auto s = rouge(out.tokens, tok.encode(records[i].target));
      sum.r1 += s.r1;
      sum.r2 += s.r2;
      sum.rl += s.rl;
      t.add_row({std::to_string(i), s.r1, s.r2, s.rl});
    }
    const double n = static_cast<double>(std::max<std::size_t>(records.size(), 1));
    t.add_row({std::string("mean"), sum.r1 / n, sum.r2 / n, sum.rl / n});
    emit(ctx, t, meta);
  } else if (metric == "acc") {
    std::vector<std::string> labels;
    for (const auto& r : records) labels.push_back(r.target);
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    if (labels.size() < 2) throw ContractError("eval acc: corpus needs at least two distinct targets");
    std::vector<std::vector<TokenId>> choices;
    for (const auto& l : labels) choices.push_back(with_eos(tok.encode(l)));
    std::vector<std::size_t> predicted, gold;
    Table t({"record", "predicted", "gold"});
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto scores = score_choices(backbone, prompt_for(records[i]), choices);
      predicted.push_back(scores.chosen);
      gold.push_back(static_cast<std::size_t>(
          std::find(labels.begin(), labels.end(), records[i].target) - labels.begin()));
      t.add_row({std::to_string(i), labels[predicted.back()], labels[gold.back()]});
    }
    t.add_row({std::string("accuracy"), accuracy(predicted, gold), std::string("")});
    emit(ctx, t, meta);
  } else {
    std::map<std::string, std::vector<const CorpusRecord*>> passages;
    for (const auto& r : records)
      if (r.task == "passage" && r.pool) passages[*r.pool].push_back(&r);
    std::vector<std::vector<std::uint64_t>> rankings;
    std::vector<std::uint64_t> gold;
    NoGradScope no_grad;
    for (const auto& r : records) {
      if (r.task != "query" || !r.pool) continue;
      const auto& cands = passages[*r.pool];
      std::vector<MemoryTokens> mem;
      std::uint64_t gold_id = cands.size();
      for (std::size_t j = 0; j < cands.size(); ++j) {
        mem.push_back(compressor.compress_segmented(tok.encode(cands[j]->source), ctx.cfg.ratio,
                                                    params));
        if (cands[j]->target == "1") gold_id = j;
      }
      auto q = compressor.compress_query(tok.encode(r.source), ctx.cfg.ratio, params);
      auto order = select(q, mem, mem.size());
      rankings.emplace_back(order.begin(), order.end());
      gold.push_back(gold_id);
    }
    if (rankings.empty()) throw ContractError("eval mrr: corpus has no query records with a pool");
    auto res = mrr_at_10(rankings, gold);
    Table t({"query", "reciprocal_rank"});
    for (std::size_t i = 0; i < res.reciprocal_ranks.size(); ++i)
      t.add_row({std::to_string(i), res.reciprocal_ranks[i]});
    t.add_row({std::string("mrr@10"), res.mrr});
    if (res.gold_missing > 0)
      ctx.err << "warning: " << res.gold_missing << " queries have no relevant passage\n";
    emit(ctx, t, meta);
  }
}

void cmd_sweep(Context& ctx, const std::vector<int>& ratios) {
  Backbone backbone = load_backbone(ctx.cfg, "sweep");
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  const std::string& path =
      ctx.cfg.paths.validation.empty() ? ctx.cfg.paths.corpus : ctx.cfg.paths.validation;
  auto data = instances_of(load_records(path, "paths.validation", "sweep"), tok);
  auto rows = ratio_sweep(compressor, data, ratios, params, ctx.cfg.generation.max_new_tokens,
                          ctx.cfg.threads);
  emit(ctx, sweep_table(rows), make_meta(ctx.cfg, to_hex(backbone.digest())));
}

void cmd_bench(Context& ctx, const std::vector<std::size_t>& grid, const std::string& bank_mode) {
  Backbone backbone = load_backbone(ctx.cfg, "bench");
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  auto queries = load_records(ctx.cfg.paths.corpus, "paths.corpus", "bench");
  auto pool = demos_of(load_records(ctx.cfg.paths.pool, "paths.pool", "bench"), tok);
  EfficiencyWorkload w;
  w.shots_grid = grid;
  w.ratio = ctx.cfg.ratio;
  w.max_new_tokens = ctx.cfg.generation.max_new_tokens;
  const std::size_t max_shots = grid.empty() ? 0 : *std::max_element(grid.begin(), grid.end());
  for (const auto& q : queries) {
    auto ids = tok.encode(q.source);
    std::vector<DemonstrationRecord> demos;
    for (auto i : prerank(ids, pool, max_shots)) demos.push_back(pool[i]);
    w.queries.push_back(with_separator(ids));
    w.demonstrations.push_back(std::move(demos));
  }
  std::vector<EfficiencyRow> rows;
  if (bank_mode == "off" || bank_mode == "both") {
    auto r = efficiency_report(compressor, params, w, nullptr);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (bank_mode == "on" || bank_mode == "both") {
    // A private in-memory bank: benchmarking never touches a persisted one.
    DemoBank bank(compressor);
    auto r = efficiency_report(compressor, params, w, &bank);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  emit(ctx, efficiency_table(rows), make_meta(ctx.cfg, to_hex(backbone.digest())));
}

void cmd_analyze(Context& ctx, const std::string& demo_text, const std::string& query_text) {
  Backbone backbone = load_backbone(ctx.cfg, "analyze");
  Compressor compressor(backbone);
  auto params = load_params(ctx.cfg, backbone);
  Tokenizer tok(backbone.config().vocab_size);
  DemonstrationRecord demo{require(demo_text, "--demo", "analyze"), {}};
  demo.token_ids = tok.encode(demo.text);
  auto dump = analysis_dump(compressor, demo, ctx.cfg.ratio, params,
                            with_separator(tok.encode(require(query_text, "--query", "analyze"))));
  std::ostringstream os;
  for (const auto& [k, v] : make_meta(ctx.cfg, to_hex(backbone.digest())))
    os << "# " << k << ": " << v << '\n';
  os << analysis_text(dump);
  if (ctx.cfg.paths.reports.empty())
    ctx.out << os.str();
  else
    io::write_text_atomic(ctx.cfg.paths.reports, os.str());
}

void report_error(std::ostream& err, const char* kind, int code, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["exit_code"] = code;
  j["message"] = message;
  err << j.dump() << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"uniicl: compressed in-context learning toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Config file (JSON); defaults to $UNIICL_CONFIG");
  app.add_option("--set", f.sets, "Config override key.path=value (repeatable)");
  app.add_option("--seed", f.seed, "Global seed");
  app.add_option("--ratio", f.ratio, "Compression ratio");
  app.add_option("--threads", f.threads, "Evaluation worker threads");
  app.add_option("--corpus", f.corpus, "Corpus / query records (JSONL)");
  app.add_option("--validation", f.validation, "Validation records (JSONL)");
  app.add_option("--pool", f.pool, "Demonstration pool records (JSONL)");
  app.add_option("--bank", f.bank, "Demonstration bank file");
  app.add_option("--backbone", f.backbone, "Backbone checkpoint");
  app.add_option("--params", f.params, "Compressor checkpoint");
  app.add_option("--report", f.report,
                 "Report destination; *.jsonl gives JSON lines, anything else aligned text");

  std::function<void(Context&)> action;

  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus");
  std::string synth_out, band;
  std::map<std::string, std::size_t> sizes;
  synth->add_option("--out", synth_out, "Output corpus path");
  for (const char* k : {"copy", "reverse", "classify", "retrieval_pools", "passages_per_pool",
                        "word_pool", "n_keys"}) {
    synth->add_option(std::string("--") + k, sizes[k], std::string("synth.") + k);
  }
  synth->add_option("--band", band, "Source length band \"(lo,hi]\"");
  synth->callback([&] {
    for (const auto& [k, v] : sizes)
      if (synth->count(std::string("--") + k)) f.sets.push_back("synth." + k + "=" + std::to_string(v));
    if (!band.empty()) f.sets.push_back("synth.band=\"" + band + "\"");
    action = [&](Context& c) { cmd_synth(c, synth_out); };
  });

  auto* pretrain = app.add_subcommand("pretrain", "Train a backbone on corpus records");
  std::string pretrain_out;
  pretrain->add_option("--out", pretrain_out, "Backbone checkpoint to write");
  pretrain->callback([&] { action = [&](Context& c) { cmd_pretrain(c, pretrain_out); }; });

  auto* train = app.add_subcommand("train", "Train the compressor (phase 1 or 2)");
  int phase = 1;
  std::string train_out, train_log;
  train->add_option("--phase", phase, "1: compression LM, 2: selection augmentation")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  train->add_option("--out", train_out, "Compressor checkpoint to write")->required();
  train->add_option("--log", train_log, "Step log (JSON lines)");
  train->callback([&] { action = [&](Context& c) { cmd_train(c, phase, train_out, train_log); }; });

  auto* compress = app.add_subcommand("compress", "Compress corpus records into the bank");
  compress->callback([&] { action = [&](Context& c) { cmd_compress(c); }; });

  auto* bank = app.add_subcommand("bank", "Inspect or maintain a demonstration bank");
  std::string bank_action;
  bool bank_all = false;
  bank->add_option("action", bank_action, "stats | compact | invalidate")
      ->required()
      ->check(CLI::IsMember({"stats", "compact", "invalidate"}));
  bank->add_flag("--all", bank_all, "invalidate: drop every entry, not only stale ones");
  bank->callback([&] { action = [&](Context& c) { cmd_bank(c, bank_action, bank_all); }; });

  auto* sel = app.add_subcommand("select", "Rank pool demonstrations for queries");
  std::string query_text;
  std::size_t shots = 1;
  bool high = false, low = false;
  sel->add_option("--query", query_text, "Query text (default: records of --corpus)");
  sel->add_option("--shots", shots, "Demonstrations to select");
  auto* high_flag = sel->add_flag("--high-resource", high, "Pre-rank the pool, keep the top 10");
  sel->add_flag("--low-resource", low, "Fixed random pool of 20 candidates")->excludes(high_flag);
  sel->callback([&] {
    if (high) f.sets.push_back("selection.mode=\"high\"");
    if (low) f.sets.push_back("selection.mode=\"low\"");
    action = [&](Context& c) { cmd_select(c, query_text, shots); };
  });

  auto* gen = app.add_subcommand("generate", "Generate with m compressed demonstrations");
  std::size_t gen_shots = 0;
  std::size_t max_new = 0;
  gen->add_option("--query", query_text, "Query text (default: records of --corpus)");
  gen->add_option("--shots", gen_shots, "Demonstrations (0 = plain LM)");
  gen->add_option("--max-new-tokens", max_new, "Decoding budget");
  gen->callback([&] {
    if (max_new) f.sets.push_back("generation.max_new_tokens=" + std::to_string(max_new));
    action = [&](Context& c) { cmd_generate(c, query_text, gen_shots); };
  });

  auto* eval = app.add_subcommand("eval", "Score a corpus: rouge, acc or mrr");
  std::string metric;
  std::size_t eval_shots = 0;
  eval->add_option("metric", metric, "rouge | acc | mrr")
      ->required()
      ->check(CLI::IsMember({"rouge", "acc", "mrr"}));
  eval->add_option("--shots", eval_shots, "Demonstrations per query");
  eval->callback([&] { action = [&](Context& c) { cmd_eval(c, metric, eval_shots); }; });

  auto* sweep = app.add_subcommand("sweep", "ROUGE-1 across compression ratios");
  std::vector<int> ratios{4, 8, 12, 16, 32};
  sweep->add_option("--ratios", ratios, "Comma-separated ratios")->delimiter(',');
  sweep->callback([&] { action = [&](Context& c) { cmd_sweep(c, ratios); }; });

  auto* bench = app.add_subcommand("bench", "Count backbone work per number of shots");
  std::vector<std::size_t> grid{0, 1, 2, 4, 8};
  std::string bank_mode = "both";
  bench->add_option("--shots-grid", grid, "Comma-separated shot counts")->delimiter(',');
  bench->add_option("--bank-mode", bank_mode, "on | off | both")
      ->check(CLI::IsMember({"on", "off", "both"}));
  bench->callback([&] { action = [&](Context& c) { cmd_bench(c, grid, bank_mode); }; });

  auto* analyze = app.add_subcommand("analyze", "Memory Token cosine and attention-share dump");
  std::string demo_text;
  analyze->add_option("--demo", demo_text, "Demonstration text")->required();
  analyze->add_option("--query", query_text, "Query text")->required();
  analyze->callback([&] { action = [&](Context& c) { cmd_analyze(c, demo_text, query_text); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", kExitUsage, e.what());
    err << app.help();
    return kExitUsage;
  }

  try {
    std::optional<std::filesystem::path> config_path;
    if (!f.config.empty()) config_path = f.config;
    Context ctx{resolve_config(config_path, f.sets), out, err};
    RunConfig& cfg = ctx.cfg;
    if (f.seed >= 0) cfg.seed = static_cast<std::uint64_t>(f.seed);
    if (f.ratio > 0) cfg.ratio = f.ratio;
    if (f.threads > 0) cfg.threads = f.threads;
    for (auto [flag, slot] : {std::pair{&f.corpus, &cfg.paths.corpus},
                              {&f.validation, &cfg.paths.validation}, {&f.pool, &cfg.paths.pool},
                              {&f.bank, &cfg.paths.bank}, {&f.backbone, &cfg.paths.backbone},
                              {&f.params, &cfg.paths.params}, {&f.report, &cfg.paths.reports}}) {
      if (!flag->empty()) *slot = *flag;
    }
    action(ctx);
    return kExitOk;
  } catch (const IoError& e) {
    report_error(err, "io", kExitIo, e.what());
    return kExitIo;
  } catch (const ContractError& e) {
    report_error(err, "contract", kExitContract, e.what());
    return kExitContract;
  } catch (const Error& e) {
    report_error(err, "error", kExitInternal, e.what());
    return kExitInternal;
  } catch (const std::exception& e) {
    report_error(err, "internal", kExitInternal, e.what());
    return kExitInternal;
  }
}

}  // namespace uniicl::cli
