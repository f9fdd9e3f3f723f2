#include "uniicl/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "uniicl/demobank.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/ops.hpp"

namespace uniicl {

namespace {

double f1(double overlap, double hyp_total, double ref_total) {
  if (overlap <= 0.0 || hyp_total <= 0.0 || ref_total <= 0.0) return 0.0;
  // 2PR/(P+R) reduced to one division, so rational fixtures compare exactly.
  return 2.0 * overlap / (hyp_total + ref_total);
}

template <typename T>
double ngram_f1(std::span<const T> hyp, std::span<const T> ref, std::size_t n) {
  auto count = [n](std::span<const T> s) {
    std::map<std::vector<T>, std::size_t> out;
    for (std::size_t i = 0; i + n <= s.size(); ++i)
      ++out[std::vector<T>(s.begin() + i, s.begin() + i + n)];
    return out;
  };
  const std::size_t hyp_total = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  const std::size_t ref_total = ref.size() >= n ? ref.size() - n + 1 : 0;
  // Too short for any n-gram on both sides: only an exact match counts.
  if (hyp_total == 0 && ref_total == 0)
    return std::equal(hyp.begin(), hyp.end(), ref.begin(), ref.end()) ? 1.0 : 0.0;
  auto h = count(hyp);
  auto r = count(ref);
  std::size_t overlap = 0;
  for (const auto& [gram, c] : h) {
    auto it = r.find(gram);
    if (it != r.end()) overlap += std::min(c, it->second);
  }
  return f1(static_cast<double>(overlap), static_cast<double>(hyp_total),
            static_cast<double>(ref_total));
}

template <typename T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <typename T>
RougeScores rouge_impl(std::span<const T> hyp, std::span<const T> ref) {
  if (ref.empty()) throw ContractError("rouge: reference is empty");
  RougeScores s;
  if (hyp.empty()) return s;
  s.r1 = ngram_f1(hyp, ref, 1);
  s.r2 = ngram_f1(hyp, ref, 2);
  s.rl = f1(static_cast<double>(lcs_length(hyp, ref)), static_cast<double>(hyp.size()),
            static_cast<double>(ref.size()));
  return s;
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

RougeScores rouge(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) {
  return rouge_impl(hypothesis, reference);
}

RougeScores rouge(std::span<const std::string> hypothesis,
                  std::span<const std::string> reference) {
  return rouge_impl(hypothesis, reference);
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> gold) {
  if (predicted.empty()) throw ContractError("accuracy: no predictions");
  if (predicted.size() != gold.size())
    throw ContractError("accuracy: " + std::to_string(predicted.size()) + " predictions vs " +
                        std::to_string(gold.size()) + " gold labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

RankingResult mrr_at_10(std::span<const std::vector<std::uint64_t>> rankings,
                        std::span<const std::uint64_t> gold) {
  if (rankings.empty()) throw ContractError("mrr_at_10: no rankings");
  if (rankings.size() != gold.size())
    throw ContractError("mrr_at_10: " + std::to_string(rankings.size()) + " rankings vs " +
                        std::to_string(gold.size()) + " gold ids");
  RankingResult out;
  double total = 0.0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& ranked = rankings[q];
    auto it = std::find(ranked.begin(), ranked.end(), gold[q]);
    double rr = 0.0;
    if (it == ranked.end()) {
      ++out.gold_missing;
    } else {
      const auto rank = static_cast<std::size_t>(it - ranked.begin()) + 1;
      if (rank <= kMrrCutoff) rr = 1.0 / static_cast<double>(rank);
    }
    out.reciprocal_ranks.push_back(rr);
    total += rr;
  }
  out.mrr = total / static_cast<double>(rankings.size());
  return out;
}

std::vector<SweepRow> ratio_sweep(const Compressor& compressor,
                                  std::span<const TaskInstance> validation,
                                  std::span<const int> ratios, const CompressorParams& params,
                                  std::size_t max_new_tokens, std::size_t threads) {
  if (validation.empty()) throw ContractError("ratio_sweep: empty validation set");
  const Backbone& backbone = compressor.backbone();
  std::vector<SweepRow> rows;
  for (int ratio : ratios) {
    if (ratio < 1) throw ContractError("ratio_sweep: ratio " + std::to_string(ratio) + " < 1");
    std::vector<double> r1(validation.size(), 0.0);
    std::vector<std::size_t> slots(validation.size(), 0);
    parallel_for(validation.size(), threads, [&](std::size_t i) {
      NoGradScope no_grad;
      const auto& inst = validation[i];
      const std::size_t cut = inst.source.size() / 2;
      std::span<const TokenId> src(inst.source);
      auto memory = compressor.compress_segmented(src.subspan(cut), ratio, params);
      std::vector<MemoryTokens> selected{memory};
      auto prompt = build_prompt(selected, with_separator(src.first(cut)), backbone.max_positions());
      GenerationConfig gen;
      gen.max_new_tokens = max_new_tokens;
      auto out = generate(backbone, prompt, gen);
      if (!out.tokens.empty() && out.tokens.back() == token::kEos) out.tokens.pop_back();
      r1[i] = rouge(out.tokens, inst.target).r1;
      slots[i] = memory.k();
    });
    SweepRow row;
    row.ratio = ratio;
    row.instances = validation.size();
    double r1_sum = 0.0, k_sum = 0.0;
    for (std::size_t i = 0; i < validation.size(); ++i) {
      r1_sum += r1[i];
      k_sum += static_cast<double>(slots[i]);
    }
    row.rouge1 = r1_sum / static_cast<double>(validation.size());
    row.mean_memory_tokens = k_sum / static_cast<double>(validation.size());
    rows.push_back(row);
  }
  return rows;
}

AnalysisDump analysis_dump(const Compressor& compressor, const DemonstrationRecord& demo, int ratio,
                           const CompressorParams& params, std::span<const TokenId> query_ids) {
  if (demo.token_ids.empty()) throw ContractError("analysis_dump: empty demonstration");
  NoGradScope no_grad;
  const Backbone& backbone = compressor.backbone();
  auto memory = compressor.compress_segmented(demo, ratio, params);
  Tensor embeds = backbone.embed_tokens(demo.token_ids);

  AnalysisDump dump;
  dump.memory_tokens = memory.k();
  const std::size_t d = backbone.embed_dim();
  for (std::size_t i = 0; i < memory.k(); ++i) {
    std::vector<double> row;
    std::span<const double> mt = memory.tokens.data().subspan(i * d, d);
    for (std::size_t j = 0; j < demo.length(); ++j) {
      std::span<const double> e = embeds.data().subspan(j * d, d);
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dot += mt[c] * e[c];
        na += mt[c] * mt[c];
        nb += e[c] * e[c];
      }
      row.push_back(na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0);
    }
    dump.cosine.push_back(std::move(row));
  }

  std::vector<AttentionTrace> traces;
  backbone.forward_hidden(memory.tokens, query_ids, &traces);
  const std::size_t k = memory.k();
  double total = 0.0;
  for (const auto& tr : traces) {
    const std::size_t t = tr.seq_len;
    const std::size_t last = t - 1;
    double share = 0.0;
    for (const auto& w : tr.weights)
      for (std::size_t j = 0; j < std::min(k, t); ++j) share += w[last * t + j];
    share /= static_cast<double>(tr.n_heads);
    dump.layer_share.push_back(share);
    total += share;
  }
  dump.mean_share = traces.empty() ? 0.0 : total / static_cast<double>(traces.size());
  return dump;
}

std::vector<EfficiencyRow> efficiency_report(const Compressor& compressor,
                                             const CompressorParams& params,
                                             const EfficiencyWorkload& workload, DemoBank* bank) {
  if (workload.queries.size() != workload.demonstrations.size())
    throw ContractError("efficiency_report: " + std::to_string(workload.queries.size()) +
                        " queries vs " + std::to_string(workload.demonstrations.size()) +
                        " demonstration lists");
  const Backbone& backbone = compressor.backbone();
  ForwardStats& stats = backbone.stats();
  NoGradScope no_grad;
  std::vector<EfficiencyRow> rows;
  for (std::size_t shots : workload.shots_grid) {
    EfficiencyRow row;
    row.shots = shots;
    row.bank_enabled = bank != nullptr;
    const BankStats bank_before = bank ? bank->stats() : BankStats{};
    const ForwardCounts row_before = stats.snapshot();
    for (std::size_t q = 0; q < workload.queries.size(); ++q) {
      const auto& demos = workload.demonstrations[q];
      if (demos.size() < shots)
        throw ContractError("efficiency_report: query " + std::to_string(q) + " has " +
                            std::to_string(demos.size()) + " demonstrations, " +
                            std::to_string(shots) + " requested");
      const ForwardCounts c0 = stats.snapshot();
      std::vector<MemoryTokens> selected;
      for (std::size_t s = 0; s < shots; ++s) {
        selected.push_back(bank ? bank->get_or_compress(demos[s], workload.ratio, params)
                                : compressor.compress_segmented(demos[s], workload.ratio, params));
      }
      const ForwardCounts c1 = stats.snapshot();
      auto prompt = build_prompt(selected, workload.queries[q], backbone.max_positions());
      GenerationConfig gen;
      gen.max_new_tokens = workload.max_new_tokens;
      generate(backbone, prompt, gen);
      const ForwardCounts c2 = stats.snapshot();
      const auto comp = c1 - c0;
      const auto g = c2 - c1;
      row.compression_forwards += comp.forward_calls;
      row.compression_positions += comp.token_positions;
      row.generation_forwards += g.forward_calls;
      row.generation_positions += g.token_positions;
    }
    const auto all = stats.snapshot() - row_before;
    row.total_forwards = all.forward_calls;
    row.total_positions = all.token_positions;
    row.flops = all.flops;
    if (bank) {
      const BankStats after = bank->stats();
      row.bank_hits = after.hits - bank_before.hits;
      row.bank_misses = after.misses - bank_before.misses;
    }
    rows.push_back(row);
  }
  return rows;
}

void Table::add_row(std::vector<Cell> row) {
  if (row.size() != columns_.size())
    throw ContractError("table row has " + std::to_string(row.size()) + " cells, expected " +
                        std::to_string(columns_.size()));
  rows_.push_back(std::move(row));
}

std::string Table::to_jsonl(const std::vector<std::pair<std::string, std::string>>& meta) const {
  std::string out;
  for (const auto& row : rows_) {
    nlohmann::ordered_json obj;
    for (const auto& [k, v] : meta) obj[k] = v;
    for (std::size_t c = 0; c < columns_.size(); ++c) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, double>)
              obj[columns_[c]] = std::stod(format_double(v));
            else
              obj[columns_[c]] = v;
          },
          row[c]);
    }
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::string Table::to_text(const std::vector<std::pair<std::string, std::string>>& meta) const {
  auto render = [](const Cell& cell) {
    return std::visit(
        [](const auto& v) -> std::string {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, std::string>)
            return v;
          else if constexpr (std::is_same_v<V, double>)
            return format_double(v);
          else
            return std::to_string(v);
        },
        cell);
  };
  std::vector<std::size_t> width(columns_.size());
  for (std::size_t c = 0; c < columns_.size(); ++c) width[c] = columns_[c].size();
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : rows_) {
    std::vector<std::string> r;
    for (std::size_t c = 0; c < row.size(); ++c) {
      r.push_back(render(row[c]));
      width[c] = std::max(width[c], r.back().size());
    }
    cells.push_back(std::move(r));
  }
  std::ostringstream os;
  for (const auto& [k, v] : meta) os << "# " << k << ": " << v << '\n';
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) os << "  ";
      os << r[c];
      if (c + 1 < r.size()) os << std::string(width[c] - r[c].size(), ' ');
    }
    os << '\n';
  };
  line(columns_);
  for (const auto& r : cells) line(r);
  return os.str();
}

Table sweep_table(std::span<const SweepRow> rows) {
  Table t({"ratio", "rouge1", "mean_memory_tokens", "instances"});
  for (const auto& r : rows)
    t.add_row({std::int64_t{r.ratio}, r.rouge1, r.mean_memory_tokens,
               static_cast<std::int64_t>(r.instances)});
  return t;
}

Table efficiency_table(std::span<const EfficiencyRow> rows) {
  Table t({"shots", "bank", "compression_forwards", "compression_positions",
           "generation_forwards", "generation_positions", "total_forwards", "total_positions",
           "flops", "bank_hits", "bank_misses"});
  auto i64 = [](std::uint64_t v) { return static_cast<std::int64_t>(v); };
  for (const auto& r : rows)
    t.add_row({i64(r.shots), std::string(r.bank_enabled ? "on" : "off"),
               i64(r.compression_forwards), i64(r.compression_positions),
               i64(r.generation_forwards), i64(r.generation_positions), i64(r.total_forwards),
               i64(r.total_positions), i64(r.flops), i64(r.bank_hits), i64(r.bank_misses)});
  return t;
}

std::string analysis_text(const AnalysisDump& dump) {
  std::ostringstream os;
  os << "memory_token";
  const std::size_t cols = dump.cosine.empty() ? 0 : dump.cosine.front().size();
  for (std::size_t j = 0; j < cols; ++j) os << ' ' << "t" << j;
  os << '\n';
  for (std::size_t i = 0; i < dump.cosine.size(); ++i) {
    os << "m" << i;
    for (double v : dump.cosine[i]) os << ' ' << format_double(v);
    os << '\n';
  }
  os << "layer share_on_memory\n";
  for (std::size_t l = 0; l < dump.layer_share.size(); ++l)
    os << l << ' ' << format_double(dump.layer_share[l]) << '\n';
  os << "mean " << format_double(dump.mean_share) << '\n';
  return os.str();
}

}  // namespace uniicl
