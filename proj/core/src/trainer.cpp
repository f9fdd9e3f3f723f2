#include "uniicl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "uniicl/demobank.hpp"
#include "uniicl/io.hpp"
#include "uniicl/ops.hpp"
#include "uniicl/tokenizer.hpp"

namespace uniicl {

namespace {

constexpr char kCheckpointMagic[8] = {'U', 'I', 'C', 'L', 'T', 'R', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr int kMaxRatio = 32;

void check_finite(double v, const char* what, std::uint64_t step) {
  if (!std::isfinite(v))
    throw TrainingDiverged(std::string(what) + " became non-finite at step " +
                           std::to_string(step));
}

// Keeps only the gradients of `params`; anything else (a frozen backbone)
// should not be present, but this makes the optimizer contract explicit.
Gradients restrict_to(const Gradients& all, const CompressorParams& params) {
  Gradients out;
  for (const auto& p : params.parameters())
    if (const auto* g = all.find(p)) out.accumulate(p, *g);
  return out;
}

struct Accumulator {
  Gradients grads;
  std::size_t examples = 0;
  double lm_sum = 0.0;
  std::size_t lm_count = 0;
  double ctr_sum = 0.0;
  std::size_t ctr_count = 0;
  double ratio_sum = 0.0;
  std::uint64_t skips = 0;

  void reset() { *this = Accumulator{}; }
};

struct EpochLoop {
  const TrainConfig& cfg;
  Adam& adam;
  const CompressorParams& params;
  const StepCallback& on_step;
  TrainResult& result;
  Accumulator acc;

  void flush(std::size_t epoch) {
    if (acc.examples == 0 && acc.skips == 0) return;
    StepRecord rec;
    rec.epoch = epoch;
    rec.lm_loss = acc.lm_count ? acc.lm_sum / static_cast<double>(acc.lm_count) : 0.0;
    rec.ctr_loss = acc.ctr_count ? acc.ctr_sum / static_cast<double>(acc.ctr_count) : 0.0;
    rec.ratio = acc.examples ? acc.ratio_sum / static_cast<double>(acc.examples) : 0.0;
    rec.skip_count = acc.skips;
    if (acc.examples > 0) {
      acc.grads.scale(1.0 / static_cast<double>(acc.examples));
      adam.step(acc.grads);
    }
    rec.step = adam.steps();
    result.steps.push_back(rec);
    if (on_step) on_step(rec);
    acc.reset();
  }
};

void capture_optimizer(TrainResult& result, const Adam& adam) {
  result.optimizer_steps = adam.steps();
  result.adam_m = adam.first_moments();
  result.adam_v = adam.second_moments();
}

std::vector<TokenId> concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<TokenId> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (learning_rate <= 0.0 || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be positive, got " + std::to_string(learning_rate));
  if (effective_batch == 0) throw ConfigError("effective_batch must be >= 1");
  if (epochs_phase1 == 0 || epochs_phase2 == 0) throw ConfigError("epoch counts must be >= 1");
  if (ratio_min < 1 || ratio_max < ratio_min || ratio_max > kMaxRatio)
    throw ConfigError("ratio range [" + std::to_string(ratio_min) + ", " +
                      std::to_string(ratio_max) + "] must be nonempty and within [1, 32]");
  if (fixed_ratio && (*fixed_ratio < 1 || *fixed_ratio > kMaxRatio))
    throw ConfigError("fixed_ratio must be within [1, 32], got " + std::to_string(*fixed_ratio));
  if (validation_ratio < 1)
    throw ConfigError("validation_ratio must be >= 1, got " + std::to_string(validation_ratio));
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
  if (candidates_per_set == 0) throw ConfigError("candidates_per_set must be >= 1");
}

std::vector<TokenId> TrainingExample::reconstruct() const {
  return compress_first ? concat(compressed, uncompressed) : concat(uncompressed, compressed);
}

int sample_ratio(const TrainConfig& cfg, std::mt19937_64& rng) {
  if (cfg.fixed_ratio) return *cfg.fixed_ratio;
  std::uniform_int_distribution<int> dist(cfg.ratio_min, cfg.ratio_max);
  return dist(rng);
}

std::optional<TrainingExample> slice_example(std::span<const TokenId> source,
                                             std::span<const TokenId> target,
                                             std::mt19937_64& rng) {
  const std::size_t n = source.size();
  if (n < 2) return std::nullopt;
  std::size_t lo = (3 * n + 9) / 10;  // ceil(0.3 n)
  std::size_t hi = (7 * n) / 10;      // floor(0.7 n)
  lo = std::clamp<std::size_t>(lo, 1, n - 1);
  hi = std::clamp<std::size_t>(hi, 1, n - 1);
  if (hi < lo) hi = lo;
  std::uniform_int_distribution<std::size_t> cut_dist(lo, hi);
  const std::size_t cut = cut_dist(rng);
  std::bernoulli_distribution side(0.5);
  TrainingExample ex;
  ex.source.assign(source.begin(), source.end());
  ex.target.assign(target.begin(), target.end());
  ex.compress_first = side(rng);
  std::vector<TokenId> head(source.begin(), source.begin() + cut);
  std::vector<TokenId> tail(source.begin() + cut, source.end());
  if (ex.compress_first) {
    ex.compressed = std::move(head);
    ex.uncompressed = std::move(tail);
  } else {
    ex.uncompressed = std::move(head);
    ex.compressed = std::move(tail);
  }
  return ex;
}

std::vector<TokenId> with_separator(std::span<const TokenId> source) {
  std::vector<TokenId> out(source.begin(), source.end());
  out.push_back(token::kSep);
  return out;
}

std::vector<TokenId> with_eos(std::span<const TokenId> target) {
  std::vector<TokenId> out(target.begin(), target.end());
  out.push_back(token::kEos);
  return out;
}

Tensor lm_loss(const Compressor& compressor, const TrainingExample& example, int ratio,
               const CompressorParams& params) {
  auto memory = compressor.compress_segmented(example.compressed, ratio, params);
  return compressor.backbone().sequence_nll(memory.tokens, with_separator(example.uncompressed),
                                            with_eos(example.target));
}

LmStep lm_step(const Compressor& compressor, const TrainingExample& example, int ratio,
               const CompressorParams& params) {
  Tensor loss = lm_loss(compressor, example, ratio, params);
  LmStep out;
  out.loss = loss.item();
  out.grads = restrict_to(backward(loss), params);
  return out;
}

Tensor infonce_loss(const Tensor& query_pooled, const Tensor& positive_pooled,
                    const Tensor& negative_pooled, double temperature) {
  if (temperature <= 0.0) throw ContractError("infonce temperature must be positive");
  std::vector<Tensor> sims{cosine(query_pooled, positive_pooled),
                           cosine(query_pooled, negative_pooled)};
  Tensor logits = reshape(scale(stack(sims), 1.0 / temperature), {1, 2});
  const TokenId target = 0;
  return cross_entropy(logits, std::span<const TokenId>(&target, 1));
}

double gold_nll(const Backbone& backbone, const TaskInstance& query, const Tensor& prefix) {
  NoGradScope no_grad;
  return backbone.sequence_nll(prefix, with_separator(query.source), with_eos(query.target))
      .item();
}

MineOutcome mine_pair(const Compressor& compressor, const TaskInstance& query,
                      std::span<const DemonstrationRecord> set_a,
                      std::span<const DemonstrationRecord> set_b, const CompressorParams& params,
                      int ratio, DemoBank* bank) {
  if (set_a.empty() || set_b.empty())
    throw ContractError("mine_pair: both candidate sets must be nonempty");
  NoGradScope no_grad;
  const Backbone& backbone = compressor.backbone();
  MineOutcome out;
  out.ppl_query = std::exp(gold_nll(backbone, query, Tensor()));

  auto gains_of = [&](std::span<const DemonstrationRecord> set) {
    std::vector<double> gains;
    gains.reserve(set.size());
    for (const auto& demo : set) {
      MemoryTokens mem = bank ? bank->get_or_compress(demo, ratio, params)
                              : compressor.compress_segmented(demo, ratio, params);
      gains.push_back(out.ppl_query - std::exp(gold_nll(backbone, query, mem.tokens)));
    }
    return gains;
  };
  auto pick = [](const std::vector<double>& gains, bool from_b) -> std::optional<ContrastivePair> {
    if (gains.empty()) return std::nullopt;
    auto hi = std::max_element(gains.begin(), gains.end());
    auto lo = std::min_element(gains.begin(), gains.end());
    if (*hi <= 0.0 || hi == lo) return std::nullopt;
    ContrastivePair p;
    p.from_set_b = from_b;
    p.positive = static_cast<std::size_t>(hi - gains.begin());
    p.negative = static_cast<std::size_t>(lo - gains.begin());
    p.gain_positive = *hi;
    p.gain_negative = *lo;
    return p;
  };

  out.gains_a = gains_of(set_a);
  const bool a_has_positive =
      std::any_of(out.gains_a.begin(), out.gains_a.end(), [](double g) { return g > 0.0; });
  if (a_has_positive) {
    out.pair = pick(out.gains_a, false);
    return out;
  }
  out.consulted_set_b = true;
  out.gains_b = gains_of(set_b);
  out.pair = pick(out.gains_b, true);
  return out;
}

std::vector<ContrastiveInstance> build_contrastive_instances(
    std::span<const TaskInstance> queries, std::span<const DemonstrationRecord> pool,
    std::size_t per_set, std::uint64_t seed) {
  if (pool.size() < 2) throw ContractError("candidate pool needs at least 2 records");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t half = pool.size() / 2;
  std::vector<std::size_t> half_a(order.begin(), order.begin() + half);
  std::vector<std::size_t> half_b(order.begin() + half, order.end());

  auto draw = [&](const std::vector<std::size_t>& from) {
    std::vector<std::size_t> picked;
    std::sample(from.begin(), from.end(), std::back_inserter(picked),
                std::min(per_set, from.size()), rng);
    std::shuffle(picked.begin(), picked.end(), rng);
    std::vector<DemonstrationRecord> out;
    out.reserve(picked.size());
    for (auto i : picked) out.push_back(pool[i]);
    return out;
  };

  std::vector<ContrastiveInstance> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    ContrastiveInstance inst;
    inst.query = q;
    inst.set_a = draw(half_a);
    inst.set_b = draw(half_b);
    out.push_back(std::move(inst));
  }
  return out;
}

double validation_loss(const Compressor& compressor, std::span<const TaskInstance> data,
                       const TrainConfig& cfg, const CompressorParams& params) {
  NoGradScope no_grad;
  std::mt19937_64 rng(cfg.seed ^ 0x5eed'0f'7a11ULL);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& inst : data) {
    auto ex = slice_example(inst.source, inst.target, rng);
    if (!ex) continue;
    total += lm_loss(compressor, *ex, cfg.validation_ratio, params).item();
    ++n;
  }
  if (n == 0) throw ContractError("validation set has no instance with >= 2 source tokens");
  return total / static_cast<double>(n);
}

TrainResult train_phase1(const Compressor& compressor, std::span<const TaskInstance> train,
                         std::span<const TaskInstance> validation, const TrainConfig& cfg,
                         const CompressorParams& init, const StepCallback& on_step) {
  cfg.validate();
  if (compressor.backbone().trainable())
    throw ContractError("backbone must be frozen during compressor training");
  if (train.empty()) throw ContractError("training set is empty");

  CompressorParams params = init.clone();
  params.set_trainable(true);
  Adam adam(params.parameters(), AdamConfig{cfg.learning_rate});
  std::mt19937_64 rng(cfg.seed);

  TrainResult result;
  result.initial_validation_loss = validation_loss(compressor, validation, cfg, params);
  double best = result.initial_validation_loss;
  result.params = params.clone();
  result.best_epoch = 0;
  capture_optimizer(result, adam);

  EpochLoop loop{cfg, adam, params, on_step, result, {}};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs_phase1; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto idx : order) {
      auto ex = slice_example(train[idx].source, train[idx].target, rng);
      if (!ex) {
        ++loop.acc.skips;
        continue;
      }
      const int ratio = sample_ratio(cfg, rng);
      auto step = lm_step(compressor, *ex, ratio, params);
      check_finite(step.loss, "lm loss", adam.steps());
      loop.acc.grads.merge(step.grads);
      loop.acc.lm_sum += step.loss;
      ++loop.acc.lm_count;
      loop.acc.ratio_sum += ratio;
      ++loop.acc.examples;
      if (loop.acc.examples == cfg.effective_batch) loop.flush(epoch);
    }
    loop.flush(epoch);
    double v = validation_loss(compressor, validation, cfg, params);
    check_finite(v, "validation loss", adam.steps());
    result.validation_losses.push_back(v);
    if (v < best) {
      best = v;
      result.best_epoch = epoch;
      result.params = params.clone();
      capture_optimizer(result, adam);
    }
  }
  for (const auto& s : result.steps) result.total_skips += s.skip_count;
  result.params.set_trainable(false);
  return result;
}

TrainResult train_phase2(const Compressor& compressor, std::span<const ContrastiveInstance> train,
                         std::span<const TaskInstance> validation, const TrainConfig& cfg,
                         const CompressorParams& init, const StepCallback& on_step) {
  cfg.validate();
  if (compressor.backbone().trainable())
    throw ContractError("backbone must be frozen during compressor training");
  if (train.empty()) throw ContractError("training set is empty");

  CompressorParams params = init.clone();
  params.set_trainable(true);
  Adam adam(params.parameters(), AdamConfig{cfg.learning_rate});
  std::mt19937_64 rng(cfg.seed);

  TrainResult result;
  result.initial_validation_loss = validation.empty()
                                       ? 0.0
                                       : validation_loss(compressor, validation, cfg, params);

  EpochLoop loop{cfg, adam, params, on_step, result, {}};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs_phase2; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto idx : order) {
      const auto& inst = train[idx];
      const int ratio = sample_ratio(cfg, rng);
      MineOutcome mined;
      {
        CompressorParams frozen = params.clone();
        frozen.set_trainable(false);
        mined = mine_pair(compressor, inst.query, inst.set_a, inst.set_b, frozen, ratio);
      }
      auto ex = slice_example(inst.query.source, inst.query.target, rng);
      if (!mined.pair || !ex) {
        ++loop.acc.skips;
        continue;
      }
      const auto& set = mined.pair->from_set_b ? inst.set_b : inst.set_a;
      Tensor q = compressor.compress_query(inst.query.source, ratio, params).pooled;
      Tensor pos = compressor.compress_segmented(set[mined.pair->positive], ratio, params).pooled;
      Tensor neg = compressor.compress_segmented(set[mined.pair->negative], ratio, params).pooled;
      Tensor ctr = infonce_loss(q, pos, neg, cfg.temperature);
      Tensor lm = lm_loss(compressor, *ex, ratio, params);
      Tensor total = add(lm, ctr);
      check_finite(total.item(), "joint loss", adam.steps());
      loop.acc.grads.merge(restrict_to(backward(total), params));
      loop.acc.lm_sum += lm.item();
      ++loop.acc.lm_count;
      loop.acc.ctr_sum += ctr.item();
      ++loop.acc.ctr_count;
      loop.acc.ratio_sum += ratio;
      ++loop.acc.examples;
      if (loop.acc.examples == cfg.effective_batch) loop.flush(epoch);
    }
    loop.flush(epoch);
    if (!validation.empty()) {
      double v = validation_loss(compressor, validation, cfg, params);
      check_finite(v, "validation loss", adam.steps());
      result.validation_losses.push_back(v);
    }
  }
  for (const auto& s : result.steps) result.total_skips += s.skip_count;
  // The contrastive term is what this phase adds, and validation LM loss
  // does not see it, so the final state is kept rather than the LM-best one.
  result.best_epoch = cfg.epochs_phase2;
  result.params = params.clone();
  capture_optimizer(result, adam);
  result.params.set_trainable(false);
  return result;
}

std::vector<double> pretrain_backbone(Backbone& backbone, std::span<const TaskInstance> data,
                                      const PretrainConfig& cfg) {
  if (data.empty()) throw ContractError("pretraining set is empty");
  if (cfg.batch == 0) throw ConfigError("pretrain batch must be >= 1");
  backbone.set_trainable(true);
  auto params = backbone.parameters();
  Adam adam(params, AdamConfig{cfg.learning_rate});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Gradients acc;
    std::size_t in_batch = 0;
    double total = 0.0;
    std::size_t counted = 0;
    auto flush = [&] {
      if (in_batch == 0) return;
      acc.scale(1.0 / static_cast<double>(in_batch));
      adam.step(acc);
      acc = Gradients{};
      in_batch = 0;
    };
    for (auto idx : order) {
      auto seq = with_eos(concat(with_separator(data[idx].source), data[idx].target));
      if (seq.size() < 2) continue;
      if (seq.size() - 1 > backbone.max_positions())
        throw LengthError("pretraining sequence of " + std::to_string(seq.size()) +
                          " tokens exceeds the window of " +
                          std::to_string(backbone.max_positions()));
      std::span<const TokenId> all(seq);
      Tensor hidden = backbone.forward_hidden(all.first(seq.size() - 1));
      Tensor loss = cross_entropy(backbone.logits(hidden), all.subspan(1));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        backbone.set_trainable(false);
        throw TrainingDiverged("pretraining loss became non-finite at step " +
                               std::to_string(adam.steps()));
      }
      acc.merge(backward(loss));
      total += value;
      ++counted;
      if (++in_batch == cfg.batch) flush();
    }
    flush();
    epoch_losses.push_back(counted ? total / static_cast<double>(counted) : 0.0);
  }
  backbone.set_trainable(false);
  return epoch_losses;
}

void save_checkpoint(const std::filesystem::path& path, const TrainerCheckpoint& ckpt) {
  io::BinaryWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  std::ostringstream header;
  header << "step=" << ckpt.step << '\n'
         << "seed=" << ckpt.seed << '\n'
         << "digest_algorithm=" << kDigestAlgorithm << '\n'
         << "backbone_digest=" << to_hex(ckpt.backbone_digest) << '\n'
         << "params_version=" << to_hex(ckpt.params.version_stamp()) << '\n';
  w.str(header.str());
  w.tensor(ckpt.params.memory_slot);
  w.tensor(ckpt.params.adapter);
  if (ckpt.adam_m.size() != ckpt.adam_v.size())
    throw ContractError("optimizer moment lists differ in length");
  w.u64(ckpt.adam_m.size());
  for (std::size_t i = 0; i < ckpt.adam_m.size(); ++i) {
    if (ckpt.adam_m[i].size() != ckpt.adam_v[i].size())
      throw ContractError("optimizer moments differ in length for parameter " +
                          std::to_string(i));
    w.u64(ckpt.adam_m[i].size());
    w.f64s(ckpt.adam_m[i]);
    w.f64s(ckpt.adam_v[i]);
  }
  io::write_file_atomic(path, w.buffer());
}

TrainerCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto buf = io::read_file(path);
  io::BinaryReader r(buf, path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw FormatError(path.string() + ": not a compressor checkpoint");
  auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": checkpoint format version " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
  auto header = io::parse_key_values(r.str());
  if (header.at("digest_algorithm") != kDigestAlgorithm)
    throw FormatError(path.string() + ": unsupported digest algorithm " +
                      header.at("digest_algorithm"));
  TrainerCheckpoint ckpt;
  ckpt.step = std::stoull(header.at("step"));
  ckpt.seed = std::stoull(header.at("seed"));
  ckpt.backbone_digest = digest_from_hex(header.at("backbone_digest"));
  ckpt.params.memory_slot = r.tensor();
  ckpt.params.adapter = r.tensor();
  const std::size_t d = ckpt.params.memory_slot.numel();
  if (ckpt.params.memory_slot.rank() != 1 || ckpt.params.adapter.shape() != Shape{d, d})
    throw FormatError(path.string() + ": memory slot " +
                      shape_str(ckpt.params.memory_slot.shape()) + " and adapter " +
                      shape_str(ckpt.params.adapter.shape()) + " disagree");
  if (to_hex(ckpt.params.version_stamp()) != header.at("params_version"))
    throw FormatError(path.string() + ": parameter digest mismatch");
  auto n = r.u64();
  if (n > 2) throw FormatError(path.string() + ": " + std::to_string(n) + " moment entries");
  for (std::uint64_t i = 0; i < n; ++i) {
    auto len = r.u64();
    ckpt.adam_m.push_back(r.f64s(len));
    ckpt.adam_v.push_back(r.f64s(len));
  }
  r.expect_end();
  return ckpt;
}

}  // namespace uniicl
