#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "uniicl/compressor.hpp"
#include "uniicl/generator.hpp"
#include "uniicl/trainer.hpp"

namespace uniicl {

class DemoBank;

struct RougeScores {
  double r1 = 0.0;
  double r2 = 0.0;
  double rl = 0.0;
};

/// ROUGE-1/2 from clipped n-gram overlap F1, ROUGE-L from sentence-level LCS
/// F1. An empty hypothesis scores zero; an empty reference is a ContractError.
RougeScores rouge(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);
RougeScores rouge(std::span<const std::string> hypothesis, std::span<const std::string> reference);

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> gold);

struct RankingResult {
  /// 1/rank when the gold id is within the top 10, else 0.
  std::vector<double> reciprocal_ranks;
  double mrr = 0.0;
  /// Queries whose gold id never appears in their ranking.
  std::size_t gold_missing = 0;
};

inline constexpr std::size_t kMrrCutoff = 10;

RankingResult mrr_at_10(std::span<const std::vector<std::uint64_t>> rankings,
                        std::span<const std::uint64_t> gold);

struct SweepRow {
  int ratio = 0;
  double rouge1 = 0.0;
  double mean_memory_tokens = 0.0;
  std::size_t instances = 0;
};

/// For every ratio: compress the latter half of each source, prompt with
/// [C(latter); former <sep>], decode greedily and score ROUGE-1 against the
/// target. Instances run on `threads` workers; results are aggregated by
/// instance index so the table does not depend on scheduling.
std::vector<SweepRow> ratio_sweep(const Compressor& compressor,
                                  std::span<const TaskInstance> validation,
                                  std::span<const int> ratios, const CompressorParams& params,
                                  std::size_t max_new_tokens, std::size_t threads = 1);

struct AnalysisDump {
  /// k×L cosine between Memory Tokens and the demonstration's token embeddings.
  std::vector<std::vector<double>> cosine;
  /// Per layer: share of first-step attention (last query position,
  /// averaged over heads) that lands on Memory Token positions.
  std::vector<double> layer_share;
  double mean_share = 0.0;
  std::size_t memory_tokens = 0;
};

AnalysisDump analysis_dump(const Compressor& compressor, const DemonstrationRecord& demo, int ratio,
                           const CompressorParams& params, std::span<const TokenId> query_ids);

/// Queries with an ordered demonstration list each; a row with m shots uses
/// the first m demonstrations of every query.
struct EfficiencyWorkload {
  std::vector<std::vector<TokenId>> queries;
  std::vector<std::vector<DemonstrationRecord>> demonstrations;
  std::vector<std::size_t> shots_grid{0, 1, 2, 4, 8};
  int ratio = 12;
  std::size_t max_new_tokens = 8;
};

struct EfficiencyRow {
  std::size_t shots = 0;
  bool bank_enabled = false;
  std::uint64_t compression_forwards = 0;
  std::uint64_t compression_positions = 0;
  std::uint64_t generation_forwards = 0;
  std::uint64_t generation_positions = 0;
  std::uint64_t total_forwards = 0;
  std::uint64_t total_positions = 0;
  std::uint64_t flops = 0;
  std::uint64_t bank_hits = 0;
  std::uint64_t bank_misses = 0;
};

/// Counts backbone work per shots setting. With `bank` the demonstrations go
/// through get_or_compress, so a repeated demonstration costs no forward.
std::vector<EfficiencyRow> efficiency_report(const Compressor& compressor,
                                             const CompressorParams& params,
                                             const EfficiencyWorkload& workload, DemoBank* bank);

/// Column-named table rendered either as JSON lines or as aligned text.
class Table {
 public:
  using Cell = std::variant<std::string, std::int64_t, double>;

  explicit Table(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_row(std::vector<Cell> row);
  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<Cell>>& rows() const { return rows_; }

  /// One JSON object per row; `meta` fields are prepended to every row.
  std::string to_jsonl(const std::vector<std::pair<std::string, std::string>>& meta = {}) const;
  /// Header row then one whitespace-aligned row per entry; `meta` lines are
  /// written first as `# key: value`.
  std::string to_text(const std::vector<std::pair<std::string, std::string>>& meta = {}) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<Cell>> rows_;
};

Table sweep_table(std::span<const SweepRow> rows);
Table efficiency_table(std::span<const EfficiencyRow> rows);
/// The cosine matrix with a header row of column indices, then the
/// per-layer attention shares and their mean.
std::string analysis_text(const AnalysisDump& dump);

}  // namespace uniicl
