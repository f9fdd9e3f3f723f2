#include <benchmark/benchmark.h>

#include <random>

#include "uniicl/backbone.hpp"
#include "uniicl/compressor.hpp"
#include "uniicl/demobank.hpp"
#include "uniicl/selector.hpp"
#include "uniicl/tensor.hpp"
#include "uniicl/tokenizer.hpp"

namespace uniicl {
namespace {

const Backbone& bench_backbone() {
  static const Backbone bb([] {
    BackboneConfig c;
    c.vocab_size = 512;
    c.embed_dim = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.max_positions = 512;
    c.seed = 1;
    return c;
  }());
  return bb;
}

std::vector<TokenId> random_ids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(token::kFirstWord, 511);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = pick(rng);
  return ids;
}

void BM_Forward(benchmark::State& state) {
  const auto& bb = bench_backbone();
  auto ids = random_ids(state.range(0), 1);
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(bb.forward_hidden(ids));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_Compress(benchmark::State& state) {
  const auto& bb = bench_backbone();
  Compressor comp(bb);
  auto params = CompressorParams::initialize(bb);
  auto ids = random_ids(256, 2);
  int ratio = static_cast<int>(state.range(0));
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(comp.compress(ids, ratio, params));
}
BENCHMARK(BM_Compress)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_BankHit(benchmark::State& state) {
  const auto& bb = bench_backbone();
  Compressor comp(bb);
  auto params = CompressorParams::initialize(bb);
  DemoBank bank(comp);
  DemonstrationRecord demo{"", random_ids(128, 3)};
  NoGradScope ng;
  bank.get_or_compress(demo, 8, params);
  for (auto _ : state) benchmark::DoNotOptimize(bank.get_or_compress(demo, 8, params));
}
BENCHMARK(BM_BankHit);

void BM_Select(benchmark::State& state) {
  const auto& bb = bench_backbone();
  Compressor comp(bb);
  auto params = CompressorParams::initialize(bb);
  NoGradScope ng;
  auto query = comp.compress_query(random_ids(64, 4), 8, params);
  std::vector<MemoryTokens> candidates;
  for (int i = 0; i < state.range(0); ++i) candidates.push_back(comp.compress(random_ids(64, 10 + i), 8, params));
  for (auto _ : state) benchmark::DoNotOptimize(select(query, candidates, 4));
}
BENCHMARK(BM_Select)->Arg(10)->Arg(100);

}  // namespace
}  // namespace uniicl

BENCHMARK_MAIN();
